#ifndef KSLAM_WORLD_MAP_H
#define KSLAM_WORLD_MAP_H

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "kslam/map_types.h"

namespace kslam {

/// Local-BA window around a keyframe: the covisible set K_L, the fixed
/// frontier K_F, and the points P_L seen from K_L.
struct LocalWindow {
  std::set<uint64_t> local;     // K_L
  std::set<uint64_t> frontier;  // K_F, disjoint from K_L
  std::set<uint64_t> points;    // P_L
};

/// Keyframes, map points, covisibility graph and spanning tree. Covisibility
/// weights are maintained incrementally on every link/unlink and always equal
/// the exact co-observation counts. Not internally synchronized; the pipeline
/// serializes access.
class WorldMap {
 public:
  static constexpr int kThetaCov = 15;  // covisibility edge threshold

  // --- Keyframes -----------------------------------------------------------

  /// Adds a keyframe; observations may arrive pre-linked (point_id set), in
  /// which case the symmetric links and covisibility weights are established
  /// here. Sets the spanning-tree parent to the keyframe sharing the most
  /// points (most recent keyframe when nothing is shared). Returns the id.
  uint64_t add_keyframe(const Pose& T_wc, std::vector<Observation> observations);

  /// Culls keyframes at least 90 percent of whose linked points are observed
  /// by three or more other keyframes at the same or finer scale. The root is
  /// never culled. Children re-parent to the culled keyframe's parent.
  std::vector<uint64_t> cull_keyframes();

  // --- Map points ----------------------------------------------------------

  uint64_t create_point(const Eigen::Vector3d& position, Provenance provenance,
                        const Descriptor& descriptor);

  /// Establishes the symmetric observation link keyframe<->point and updates
  /// covisibility. Throws if the keyframe already observes the point at a
  /// different slot or the slot is already linked elsewhere.
  void link(uint64_t point_id, uint64_t kf_id, int obs_index);

  /// Removes the link in both directions and downgrades covisibility.
  void unlink(uint64_t point_id, uint64_t kf_id);

  void remove_point(uint64_t point_id);

  /// Removes young points that failed to gather support: once more than two
  /// keyframes have been inserted since creation, a Close point needs two or
  /// more observers and a Far/Mono point three or more.
  std::vector<uint64_t> cull_map_points();

  /// Moves every observation of `merge` onto `keep` (keyframes already
  /// observing `keep` just drop the duplicate) and deletes `merge`.
  void fuse_points(uint64_t keep, uint64_t merge);

  // --- Graph queries ---------------------------------------------------------

  /// Covisibility neighbors with shared-point count >= min_weight.
  std::map<uint64_t, int> covisibility_neighbors(uint64_t kf_id,
                                                 int min_weight = kThetaCov) const;

  LocalWindow local_window(uint64_t kf_id) const;

  /// Spanning-tree parent; empty for the root.
  std::optional<uint64_t> parent(uint64_t kf_id) const;
  uint64_t root() const { return root_; }

  void add_loop_edge(uint64_t a, uint64_t b);
  const std::set<std::pair<uint64_t, uint64_t>>& loop_edges() const { return loop_edges_; }

  /// Follows cull redirects to a live keyframe id.
  uint64_t resolve(uint64_t kf_id) const;

  // --- State access / mutation ----------------------------------------------

  const std::map<uint64_t, KeyFrame>& keyframes() const { return keyframes_; }
  const std::map<uint64_t, MapPoint>& points() const { return points_; }
  const KeyFrame& keyframe(uint64_t id) const { return keyframes_.at(id); }
  const MapPoint& point(uint64_t id) const { return points_.at(id); }
  bool has_keyframe(uint64_t id) const { return keyframes_.count(id) != 0; }
  bool has_point(uint64_t id) const { return points_.count(id) != 0; }

  void set_keyframe_pose(uint64_t id, const Pose& T_wc) { keyframes_.at(id).T_wc = T_wc; }
  void set_point_position(uint64_t id, const Eigen::Vector3d& p) {
    points_.at(id).position = p;
  }
  void set_bow(uint64_t kf_id, std::map<uint32_t, double> bow) {
    keyframes_.at(kf_id).bow = std::move(bow);
  }

  /// Number of keyframes ever inserted (drives point-culling ages).
  uint64_t seq() const { return seq_; }

  /// Symmetry of keyframe<->point links; used by invariant scans.
  bool links_symmetric() const;

 private:
  friend struct MapSerializer;

  std::map<uint64_t, KeyFrame> keyframes_;
  std::map<uint64_t, MapPoint> points_;
  std::map<uint64_t, std::map<uint64_t, int>> covis_;  // symmetric weights >= 1
  std::map<uint64_t, uint64_t> parent_;                // child -> parent
  std::set<std::pair<uint64_t, uint64_t>> loop_edges_;
  std::map<uint64_t, uint64_t> redirects_;  // culled keyframe -> parent at cull
  uint64_t root_ = 0;
  uint64_t next_kf_id_ = 0;
  uint64_t next_point_id_ = 0;
  uint64_t seq_ = 0;

  void bump_covis(uint64_t a, uint64_t b, int delta);
};

/// Deterministic text serialization. The vocabulary blob is embedded verbatim
/// so a single file carries everything localization mode needs.
std::string serialize_map(const WorldMap& map, const std::string& vocab_blob);

struct LoadedMap {
  WorldMap map;
  std::string vocab_blob;
};

/// Inverse of serialize_map. Throws std::runtime_error on malformed input.
LoadedMap deserialize_map(const std::string& bytes);

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);

}  // namespace kslam

#endif
