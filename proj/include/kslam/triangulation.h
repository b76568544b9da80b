#ifndef KSLAM_TRIANGULATION_H
#define KSLAM_TRIANGULATION_H

#include <optional>

#include "kslam/camera.h"
#include "kslam/se3.h"

namespace kslam {

/// Minimum triangulation angle between the two viewing rays.
inline constexpr double kMinParallaxDeg = 1.0;

/// Two-view triangulation: DLT on the left-image rays followed by one
/// Gauss-Newton refinement over the full (mono or stereo) residuals.
/// Poses are world-from-camera. Returns nullopt when the parallax is below
/// kMinParallaxDeg or the geometry is degenerate (point behind a camera,
/// rank-deficient system).
std::optional<Eigen::Vector3d> triangulate(const Keypoint& obs_a, const Pose& T_wc_a,
                                           const Keypoint& obs_b, const Pose& T_wc_b,
                                           const Intrinsics& K);

}  // namespace kslam

#endif
