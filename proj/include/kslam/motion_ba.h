#ifndef KSLAM_MOTION_BA_H
#define KSLAM_MOTION_BA_H

#include <vector>

#include "kslam/camera.h"
#include "kslam/lm.h"
#include "kslam/se3.h"

namespace kslam {

struct MotionBaMatch {
  Keypoint kp;
  Eigen::Vector3d point_w;  // matched 3D point, world frame, held constant
};

struct MotionBaResult {
  Pose T_cw;
  std::vector<uint8_t> inlier;  // per input match
  int inlier_count = 0;
  SolveStatus status = SolveStatus::Converged;
};

/// Motion-only bundle adjustment: optimizes a single camera pose against
/// fixed 3D points with Huber-robustified reprojection errors, running
/// several LM rounds with chi-square inlier reclassification in between.
/// Throws std::invalid_argument on fewer than 6 matches.
MotionBaResult motion_only_ba(const std::vector<MotionBaMatch>& matches, const Pose& T_cw_init,
                              const Intrinsics& K, const LmConfig& config = {},
                              IterationLog* log = nullptr);

}  // namespace kslam

#endif
