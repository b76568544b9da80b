#ifndef KSLAM_MAP_TYPES_H
#define KSLAM_MAP_TYPES_H

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "kslam/camera.h"
#include "kslam/descriptor.h"
#include "kslam/se3.h"

namespace kslam {

/// How a map point was created. Close points come from a single-frame stereo
/// keypoint with depth under 40 baselines; Far and Mono points require
/// multi-view triangulation (bootstrap is the one exception: the initial
/// keyframe back-projects every stereo keypoint regardless of depth).
enum class Provenance : uint8_t { Close, Far, Mono };

/// Close/far classification of a stereo-observed depth.
inline Provenance classify_point(double depth, const Intrinsics& K) {
  if (!(depth > 0.0)) throw std::invalid_argument("classify_point: depth must be positive");
  return depth < 40.0 * K.baseline ? Provenance::Close : Provenance::Far;
}

/// Keyframe insertion thresholds on close points.
struct KeyframePolicy {
  int tau_t = 100;  // insert when tracked close points drop below this
  int tau_c = 70;   // ...and at least this many new close points could be created
  int min_frame_gap = 20;   // spacing rule: frames since the last keyframe
  int min_tracked_total = 50;  // spacing rule: total tracked matches required
};

/// Keyframe decision: the close-point rule plus a baseline spacing rule
/// (insert after a long gap while tracking is still healthy).
inline bool need_new_keyframe(int tracked_close, int creatable_close, int frames_since_kf,
                              int tracked_total, const KeyframePolicy& policy = {}) {
  const bool close_rule = tracked_close < policy.tau_t && creatable_close >= policy.tau_c;
  const bool spacing_rule =
      frames_since_kf > policy.min_frame_gap && tracked_total >= policy.min_tracked_total;
  return close_rule || spacing_rule;
}

/// One keypoint slot of a keyframe, optionally linked to a map point.
struct Observation {
  Keypoint kp;
  Descriptor descriptor;
  std::optional<uint64_t> point_id;
};

struct MapPoint {
  uint64_t id = 0;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Provenance provenance = Provenance::Close;
  Descriptor descriptor;
  uint64_t created_seq = 0;  // keyframe-insertion counter at creation time
  std::map<uint64_t, int> observations;  // keyframe id -> keypoint index
};

struct KeyFrame {
  uint64_t id = 0;
  Pose T_wc;  // world-from-camera
  std::vector<Observation> observations;
  std::map<uint32_t, double> bow;  // word id -> tf-idf weight (set by the pipeline)
};

}  // namespace kslam

#endif
