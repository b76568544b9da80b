#ifndef KSLAM_CAMERA_H
#define KSLAM_CAMERA_H

#include <cmath>
#include <stdexcept>
#include <variant>

#include <Eigen/Core>

namespace kslam {

/// Pinhole calibration of the rectified left camera plus the stereo or
/// RGB-D baseline.
struct Intrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  double baseline = 0.0;  // meters

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0) || !(baseline > 0.0)) {
      throw std::invalid_argument("Intrinsics: fx, fy and baseline must be positive");
    }
  }
};

/// ORB pyramid scale factor; level l has pixel sigma scale^l.
inline constexpr double kPyramidScale = 1.2;
inline constexpr int kMaxOctave = 7;

/// Measurement variance in pixels^2 for a keypoint detected at an octave.
inline double octave_sigma2(int octave) {
  return std::pow(kPyramidScale, 2.0 * octave);
}

struct MonoKeypoint {
  double uL = 0.0;
  double vL = 0.0;
  int octave = 0;
};

struct StereoKeypoint {
  double uL = 0.0;
  double vL = 0.0;
  double uR = 0.0;  // uR < uL, positive disparity
  int octave = 0;

  double disparity() const { return uL - uR; }
};

using Keypoint = std::variant<MonoKeypoint, StereoKeypoint>;

inline int keypoint_octave(const Keypoint& kp) {
  return std::visit([](const auto& k) { return k.octave; }, kp);
}

inline bool is_stereo(const Keypoint& kp) {
  return std::holds_alternative<StereoKeypoint>(kp);
}

inline Eigen::Vector2d keypoint_pixel(const Keypoint& kp) {
  return std::visit([](const auto& k) { return Eigen::Vector2d(k.uL, k.vL); }, kp);
}

/// Projects a camera-frame point to left-image pixels. Throws on Z <= 0.
inline Eigen::Vector2d project_mono(const Eigen::Vector3d& xc, const Intrinsics& K) {
  if (!(xc.z() > 0.0)) {
    throw std::domain_error("project_mono: point is behind the camera");
  }
  return {K.fx * xc.x() / xc.z() + K.cx, K.fy * xc.y() / xc.z() + K.cy};
}

/// Projects a camera-frame point to (uL, vL, uR). Throws on Z <= 0.
inline Eigen::Vector3d project_stereo(const Eigen::Vector3d& xc, const Intrinsics& K) {
  if (!(xc.z() > 0.0)) {
    throw std::domain_error("project_stereo: point is behind the camera");
  }
  const double inv_z = 1.0 / xc.z();
  return {K.fx * xc.x() * inv_z + K.cx, K.fy * xc.y() * inv_z + K.cy,
          K.fx * (xc.x() - K.baseline) * inv_z + K.cx};
}

/// Virtual right coordinate for a depth measurement: uR = uL - fx*b/d.
/// Throws on non-positive depth (such observations demote to monocular).
inline double synth_right_coord(double uL, double depth, const Intrinsics& K) {
  if (!(depth > 0.0)) {
    throw std::domain_error("synth_right_coord: depth must be positive");
  }
  return uL - K.fx * K.baseline / depth;
}

/// Depth recovered from a stereo keypoint's disparity.
inline double stereo_depth(const StereoKeypoint& kp, const Intrinsics& K) {
  const double d = kp.disparity();
  if (!(d > 0.0)) {
    throw std::domain_error("stereo_depth: disparity must be positive");
  }
  return K.fx * K.baseline / d;
}

/// Camera-frame point on the optical ray through (uL, vL) at the given depth.
inline Eigen::Vector3d back_project(double uL, double vL, double depth, const Intrinsics& K) {
  if (!(depth > 0.0)) {
    throw std::domain_error("back_project: depth must be positive");
  }
  return {(uL - K.cx) * depth / K.fx, (vL - K.cy) * depth / K.fy, depth};
}

/// Camera-frame point of a stereo keypoint via its disparity depth.
inline Eigen::Vector3d back_project_stereo(const StereoKeypoint& kp, const Intrinsics& K) {
  return back_project(kp.uL, kp.vL, stereo_depth(kp, K), K);
}

}  // namespace kslam

#endif
