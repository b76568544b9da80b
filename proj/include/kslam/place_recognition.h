#ifndef KSLAM_PLACE_RECOGNITION_H
#define KSLAM_PLACE_RECOGNITION_H

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <shared_mutex>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kslam/frame.h"
#include "kslam/vocabulary.h"
#include "kslam/world_map.h"

namespace kslam {

/// BoW index over keyframes. Thread contract: one writer (insert/erase),
/// any number of concurrent readers (find/query/size).
class KeyframeDatabase {
 public:
  void insert(uint64_t kf_id, const BowVector& v);
  void erase(uint64_t kf_id);
  std::optional<BowVector> find(uint64_t kf_id) const;
  size_t size() const;

  /// Similarity of every stored keyframe sharing at least one word with the
  /// query, best first (ties broken by lower id), minus the excluded set.
  std::vector<std::pair<uint64_t, double>> query(const BowVector& v,
                                                 const std::set<uint64_t>& exclude = {}) const;

 private:
  mutable std::shared_mutex mutex_;
  std::map<uint32_t, std::set<uint64_t>> inverted_;  // word -> keyframe ids
  std::unordered_map<uint64_t, BowVector> vectors_;
};

struct LoopDetectorConfig {
  double alpha = 0.75;           // score gate relative to the weakest covisible neighbor
  int consistency_required = 3;  // consecutive confirming queries before acceptance
};

/// Loop-candidate detector with temporal consistency: a candidate is gated by
/// BoW score against the query's covisible neighborhood and accepted only
/// after overlapping candidate groups survive consecutive queries.
class LoopDetector {
 public:
  explicit LoopDetector(LoopDetectorConfig config = {}) : config_(config) {}

  /// Accepted candidates, best score first. `covisible` holds the query's
  /// covisibility neighbors (never returned); `group_of` expands a candidate
  /// keyframe into its covisible group for the consistency check.
  std::vector<uint64_t> detect(uint64_t query_kf, const BowVector& v,
                               const std::set<uint64_t>& covisible, const KeyframeDatabase& db,
                               const std::function<std::set<uint64_t>(uint64_t)>& group_of);

  void reset() { groups_.clear(); }

 private:
  struct Group {
    std::set<uint64_t> members;
    int streak = 0;
  };

  LoopDetectorConfig config_;
  std::vector<Group> groups_;
};

struct Se3RansacConfig {
  int max_iterations = 200;
  double inlier_threshold = 0.05;  // meters
  int min_inliers = 20;
  uint64_t seed = 1;
};

struct Se3Estimate {
  Pose transform;            // maps src points onto dst points
  std::vector<int> inliers;  // indices into the input pair list
};

/// Horn's closed-form absolute orientation: least-squares rigid T with
/// dst_i ~ T * src_i. Throws std::invalid_argument on mismatch or < 3 pairs.
Pose horn_align(const std::vector<Eigen::Vector3d>& src,
                const std::vector<Eigen::Vector3d>& dst);

/// RANSAC over minimal 3-point Horn alignments (degenerate collinear samples
/// are rejected and redrawn), refined by Horn on the inlier set. Returns
/// nullopt when inlier support stays below config.min_inliers. Throws
/// std::invalid_argument on mismatched sizes or fewer than 3 pairs.
std::optional<Se3Estimate> estimate_se3(const std::vector<Eigen::Vector3d>& src,
                                        const std::vector<Eigen::Vector3d>& dst,
                                        const Se3RansacConfig& config = {});

struct RelocalizeConfig {
  int max_candidates = 5;  // BoW candidates tried per attempt
  int max_hamming = 50;    // descriptor match acceptance
  double ratio = 0.9;      // best distance <= ratio * second best
  int min_matches = 20;    // 3D-3D pairs required to attempt RANSAC
  Se3RansacConfig ransac{};
  int min_inliers = 30;  // motion-BA inlier support required to accept
};

/// Relocalizes a lost frame against the map: BoW candidate search, descriptor
/// matching, SE(3) RANSAC on back-projected stereo depth, then motion-only BA
/// refinement. Returns the world-from-camera pose, or nullopt.
std::optional<Pose> relocalize(const Frame& frame, const WorldMap& map, const Vocabulary& vocab,
                               const Intrinsics& K, const RelocalizeConfig& config = {});

}  // namespace kslam

#endif
