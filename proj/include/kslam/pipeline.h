#ifndef KSLAM_PIPELINE_H
#define KSLAM_PIPELINE_H

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "kslam/bundle.h"
#include "kslam/frame.h"
#include "kslam/lm.h"
#include "kslam/place_recognition.h"
#include "kslam/trajectory.h"
#include "kslam/vocabulary.h"
#include "kslam/world_map.h"

namespace kslam {

enum class RunMode : uint8_t { Mapping, LocalizationOnly };
enum class TrackStatus : uint8_t { Uninitialized, Ok, Lost };

struct PipelineConfig {
  Intrinsics K;
  KeyframePolicy keyframe_policy{};
  double search_window = 15.0;    // px at octave 0, scaled by 1.2^octave
  int max_hamming = 50;           // descriptor match acceptance
  double second_best_ratio = 0.9; // best <= ratio * second best
  int lost_inliers = 30;          // motion-BA inliers below this -> Lost
  int creation_neighbors = 10;    // covisible keyframes tried for triangulation
  int theta_ess = 100;            // essential-graph covisibility cutoff
  LoopDetectorConfig loop{};
  Se3RansacConfig loop_ransac{};
  RelocalizeConfig reloc{};
  LmConfig motion_lm{};
  LmConfig local_lm{};
  LmConfig graph_lm{.max_iterations = 50};
  LmConfig full_lm{.max_iterations = 20};
  bool enable_loop_closing = true;
  size_t queue_capacity = 8;  // keyframe handoff queue bound
};

/// Tracking-thread state: motion model and the last-frame cache that feeds
/// visual-odometry matches in localization mode.
struct TrackingState {
  RunMode mode = RunMode::Mapping;
  TrackStatus status = TrackStatus::Uninitialized;
  Pose velocity;  // T_wc_current * T_wc_previous^-1
  bool have_last = false;
  Pose last_T_wc;
  Frame last_frame;
};

struct TrackResult {
  TrackStatus status = TrackStatus::Lost;
  Pose T_wc;
  int inliers = 0;
  int tracked_total = 0;
  int tracked_close = 0;
  int creatable_close = 0;
  uint64_t reference_kf = 0;  // nearest keyframe used as the local-map seed
  Pose reference_T_wc;        // its pose at track time, for anchoring
  std::vector<std::optional<uint64_t>> matches;  // per observation, inliers only
};

/// New-keyframe handoff from tracking to local mapping. Observations carry
/// point_id for the frame's inlier matches.
struct KeyframeRequest {
  double timestamp = 0.0;
  Pose T_wc;
  std::vector<Observation> observations;
};

/// Pose of a culled keyframe relative to its parent at cull time; keeps
/// frame-trajectory anchors resolvable after the keyframe is gone.
struct CullAnchor {
  uint64_t culled = 0;
  uint64_t parent = 0;
  Pose relative;  // T_wc_parent^-1 * T_wc_culled
};

struct MappingSummary {
  uint64_t kf_id = 0;
  int points_close = 0;         // single-view stereo back-projections
  int points_triangulated = 0;  // two-view far/mono creations
  int culled_points = 0;
  std::vector<CullAnchor> culled_keyframes;
  SolveStatus ba_status = SolveStatus::Converged;
};

struct LoopEvent {
  uint64_t current_kf = 0;
  uint64_t matched_kf = 0;
  Pose relative;  // measured T_wc_matched^-1 * T_wc_current after correction
  int inliers = 0;
};

struct CloseLoopSummary {
  int corrected_keyframes = 0;  // rigidly moved covisible neighborhood
  int fused_points = 0;
  SolveStatus graph_status = SolveStatus::Converged;
};

/// Consumer of full-BA requests raised by close_loop.
class FullBaController {
 public:
  virtual ~FullBaController() = default;
  virtual void request_full_ba(const WorldMap& map) = 0;
};

/// Read-only snapshot a full BA runs on, detached from the live map.
struct FullBaSnapshot {
  std::vector<BaViewInit> views;  // gauge: lowest keyframe id fixed
  std::vector<BaPointInit> points;
  std::vector<BaObs> observations;
  std::map<uint64_t, Pose> initial_T_wc;  // every keyframe at snapshot time
};

struct FullBaRun {
  std::map<uint64_t, Pose> initial_T_wc;
  std::map<uint64_t, Pose> optimized_T_wc;  // free views
  std::map<uint64_t, Eigen::Vector3d> optimized_points;
  SolveStatus status = SolveStatus::Converged;
  int iterations = 0;
};

struct MergeSummary {
  int keyframes_updated = 0;     // present in the snapshot
  int keyframes_propagated = 0;  // inserted during BA, corrected via ancestor
  int points_updated = 0;
  int points_propagated = 0;  // moved rigidly with their reference keyframe
};

// --- Pipeline operations ----------------------------------------------------

/// Initial map from one frame: a keyframe at the origin plus one map point
/// per stereo keypoint (mono keypoints create nothing). Returns nullopt when
/// the frame has no stereo keypoints (retry with the next frame).
std::optional<WorldMap> bootstrap(const Frame& frame, const Intrinsics& K);

/// One tracking step: constant-velocity prediction (relocalization when not
/// Ok), projection-window descriptor matching against the local map, and
/// motion-only BA. Mutates the motion model and last-frame cache. In
/// localization mode, temporary points back-projected from the previous
/// frame's stereo keypoints join the matching but never enter the map.
TrackResult track_frame(TrackingState& state, const WorldMap& map, const Vocabulary& vocab,
                        const Frame& frame, const PipelineConfig& config);

/// One local-mapping step: keyframe insertion (with BoW), map-point culling,
/// point creation (close stereo keypoints single-view; far/mono two-view
/// against covisible keyframes), local BA over the covisibility window, and
/// keyframe culling.
MappingSummary local_mapping_step(WorldMap& map, KeyframeDatabase& db, const Vocabulary& vocab,
                                  const KeyframeRequest& request, const PipelineConfig& config);

/// Geometric check of a loop candidate: descriptor-matched 3D-3D point pairs
/// between the two keyframes, RANSAC SE(3). Returns nullopt when inlier
/// support is insufficient.
std::optional<LoopEvent> validate_loop_candidate(const WorldMap& map, uint64_t current_kf,
                                                 uint64_t candidate_kf,
                                                 const PipelineConfig& config);

/// Loop correction: rigidly moves the current keyframe's covisible
/// neighborhood (poses and points) onto the loop side, fuses duplicated
/// points, adds the loop edge, optimizes the essential graph (spanning tree +
/// loop edges + covisibility edges >= theta_ess), and requests a full BA.
CloseLoopSummary close_loop(WorldMap& map, const LoopEvent& event, FullBaController& ba,
                            const PipelineConfig& config);

FullBaSnapshot snapshot_for_full_ba(const WorldMap& map);

/// Runs the snapshot through full BA; abortable between LM iterations.
FullBaRun execute_full_ba(const FullBaSnapshot& snapshot, const Intrinsics& K,
                          const LmConfig& config, const std::atomic<bool>* abort);

/// Folds a finished full BA into the live map: snapshot keyframes take
/// optimized poses; keyframes inserted during the BA are corrected by
/// T_optimized * T_old^-1 of their nearest optimized spanning-tree ancestor;
/// points take optimized positions or move rigidly with their reference
/// keyframe (lowest observer id).
MergeSummary merge_full_ba(WorldMap& map, const FullBaRun& run);

// --- System -------------------------------------------------------------

struct FrameRecord {
  size_t index = 0;
  double timestamp = 0.0;
  TrackStatus status = TrackStatus::Uninitialized;
  Pose T_wc;
  int inliers = 0;
  int tracked_close = 0;
  int creatable_close = 0;
  bool keyframe = false;
};

/// One structured run-log line (task names mirror the per-thread duty cycle).
struct LogEntry {
  double timestamp = 0.0;
  std::string task;
  double ms = 0.0;
  int64_t value = 0;
};

struct FullBaStats {
  int launches = 0;
  int aborts = 0;
  int merges = 0;
};

/// Orchestrates tracking, local mapping and loop closing over a shared map.
/// Concurrent mode runs mapping and loop closing on their own threads with a
/// bounded keyframe handoff queue; deterministic mode round-robins the three
/// roles sequentially on the caller's thread for byte-reproducible runs. A
/// full BA occupies a fourth, on-demand thread (inline when deterministic).
class System : public FullBaController {
 public:
  System(PipelineConfig config, Vocabulary vocab, RunMode mode, bool deterministic);
  ~System() override;

  System(const System&) = delete;
  System& operator=(const System&) = delete;

  /// Installs a previously serialized map (before the first frame). The
  /// vocabulary embedded in the file replaces the constructor's.
  void load_map(LoadedMap loaded);

  FrameRecord process_frame(const Frame& frame);

  /// Drains the mapping/closing queues, waits for any in-flight full BA
  /// (honoring abort-and-relaunch), and joins the worker threads.
  void finish();

  Trajectory keyframe_trajectory() const;  // keyframes inserted this run
  Trajectory frame_trajectory() const;     // every Ok frame, loop-corrected
  const WorldMap& world() const { return map_; }
  std::string serialize_map_bytes() const;  // embeds the vocabulary blob

  FullBaStats full_ba_stats() const;
  /// Aborts the running full BA (or pre-aborts the next launch) and schedules
  /// the single relaunch, as a concurrent loop event would.
  void raise_full_ba_abort();

  const std::vector<LogEntry>& log() const { return log_; }

  // FullBaController
  void request_full_ba(const WorldMap& map) override;

 private:
  struct AnchoredFrame {
    double timestamp = 0.0;
    uint64_t reference_kf = 0;
    Pose relative;  // T_wc_reference^-1 * T_wc_frame at track time
  };

  void bootstrap_from(const Frame& frame, FrameRecord& record);
  void mapper_step(const KeyframeRequest& request);
  void closer_step(uint64_t kf_id);
  void run_pending_ba();          // deterministic mode
  bool collect_finished_ba();     // concurrent mode; true when a run was taken
  void start_ba_thread(FullBaSnapshot snapshot);
  Pose effective_kf_pose(uint64_t kf_id) const;
  void log_task(double timestamp, const char* task, double ms, int64_t value);

  void mapper_loop();
  void closer_loop();

  PipelineConfig config_;
  Vocabulary vocab_;
  std::string vocab_blob_;
  RunMode mode_;
  bool deterministic_;

  // Tracking-side state (caller thread only).
  TrackingState state_;
  size_t frame_count_ = 0;
  int frames_since_kf_ = 0;
  std::vector<AnchoredFrame> anchored_;

  // Shared map state, guarded by map_mu_ (acquired before ba_mu_).
  mutable std::shared_mutex map_mu_;
  WorldMap map_;
  bool bootstrapped_ = false;
  std::map<uint64_t, double> kf_time_;  // keyframes inserted this run
  std::map<uint64_t, std::pair<uint64_t, Pose>> cull_anchors_;

  KeyframeDatabase db_;
  LoopDetector detector_;

  // Keyframe handoff queue (tracking -> mapper) and kf ids (mapper -> closer).
  std::mutex queue_mu_;
  std::condition_variable queue_push_cv_, queue_pop_cv_;
  std::deque<KeyframeRequest> kf_queue_;
  std::atomic<bool> stopping_{false};

  std::mutex closer_mu_;
  std::condition_variable closer_cv_;
  std::deque<uint64_t> closer_queue_;
  std::atomic<bool> closer_stop_{false};

  std::thread mapper_thread_, closer_thread_;
  bool finished_ = false;

  // Full BA state, guarded by ba_mu_.
  mutable std::mutex ba_mu_;
  std::condition_variable ba_cv_;
  std::shared_ptr<std::atomic<bool>> ba_abort_ = std::make_shared<std::atomic<bool>>(false);
  std::thread ba_thread_;
  bool ba_running_ = false;
  bool ba_done_ = false;
  bool ba_relaunch_ = false;
  bool abort_next_ba_ = false;  // raise_full_ba_abort before a launch
  bool det_ba_pending_ = false;
  std::optional<FullBaRun> ba_result_;
  FullBaStats ba_stats_;

  // Run log, guarded by log_mu_.
  mutable std::mutex log_mu_;
  std::vector<LogEntry> log_;
};

}  // namespace kslam

#endif
