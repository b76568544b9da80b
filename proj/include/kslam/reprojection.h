#ifndef KSLAM_REPROJECTION_H
#define KSLAM_REPROJECTION_H

#include "kslam/camera.h"
#include "kslam/se3.h"

namespace kslam {

/// Whitened reprojection residual and its Jacobians.
///
/// The residual is (measurement - projection(T_cw * Xw)) / sigma with sigma
/// the pyramid-scale standard deviation of the keypoint. Pose Jacobians are
/// taken w.r.t. a left-multiplied twist on T_cw (rotation-first ordering),
/// i.e. T_cw <- se3_exp(xi) * T_cw.
template <int Rows>
struct ReprojResidual {
  Eigen::Matrix<double, Rows, 1> residual;
  Eigen::Matrix<double, Rows, 6> d_pose;
  Eigen::Matrix<double, Rows, 3> d_point;

  double squared_norm() const { return residual.squaredNorm(); }
};

using MonoResidual = ReprojResidual<2>;
using StereoResidual = ReprojResidual<3>;

inline MonoResidual mono_residual(const Pose& T_cw, const Eigen::Vector3d& Xw,
                                  const MonoKeypoint& kp, const Intrinsics& K) {
  const Eigen::Vector3d xc = T_cw * Xw;
  const double inv_z = 1.0 / xc.z();
  const double inv_z2 = inv_z * inv_z;

  Eigen::Matrix<double, 2, 3> dpi;
  dpi << K.fx * inv_z, 0.0, -K.fx * xc.x() * inv_z2,
         0.0, K.fy * inv_z, -K.fy * xc.y() * inv_z2;

  Eigen::Matrix<double, 3, 6> dxc;  // d(exp(xi) xc)/dxi at xi = 0
  dxc.leftCols<3>() = -skew(xc);
  dxc.rightCols<3>() = Eigen::Matrix3d::Identity();

  const double inv_sigma = 1.0 / std::sqrt(octave_sigma2(kp.octave));

  MonoResidual out;
  out.residual = (Eigen::Vector2d(kp.uL, kp.vL) - project_mono(xc, K)) * inv_sigma;
  out.d_pose = -dpi * dxc * inv_sigma;
  out.d_point = -dpi * T_cw.rotation() * inv_sigma;
  return out;
}

inline StereoResidual stereo_residual(const Pose& T_cw, const Eigen::Vector3d& Xw,
                                      const StereoKeypoint& kp, const Intrinsics& K) {
  const Eigen::Vector3d xc = T_cw * Xw;
  const double inv_z = 1.0 / xc.z();
  const double inv_z2 = inv_z * inv_z;

  Eigen::Matrix<double, 3, 3> dpi;
  dpi << K.fx * inv_z, 0.0, -K.fx * xc.x() * inv_z2,
         0.0, K.fy * inv_z, -K.fy * xc.y() * inv_z2,
         K.fx * inv_z, 0.0, -K.fx * (xc.x() - K.baseline) * inv_z2;

  Eigen::Matrix<double, 3, 6> dxc;
  dxc.leftCols<3>() = -skew(xc);
  dxc.rightCols<3>() = Eigen::Matrix3d::Identity();

  const double inv_sigma = 1.0 / std::sqrt(octave_sigma2(kp.octave));

  StereoResidual out;
  out.residual =
      (Eigen::Vector3d(kp.uL, kp.vL, kp.uR) - project_stereo(xc, K)) * inv_sigma;
  out.d_pose = -dpi * dxc * inv_sigma;
  out.d_point = -dpi * T_cw.rotation() * inv_sigma;
  return out;
}

/// Whitened squared reprojection error of a keypoint against a world point,
/// without Jacobians. Returns +inf for points at or behind the camera.
inline double reproj_chi2(const Pose& T_cw, const Eigen::Vector3d& Xw, const Keypoint& kp,
                          const Intrinsics& K) {
  const Eigen::Vector3d xc = T_cw * Xw;
  if (!(xc.z() > 0.0)) return std::numeric_limits<double>::infinity();
  const double inv_sigma2 = 1.0 / octave_sigma2(keypoint_octave(kp));
  if (const auto* s = std::get_if<StereoKeypoint>(&kp)) {
    const Eigen::Vector3d r = Eigen::Vector3d(s->uL, s->vL, s->uR) - project_stereo(xc, K);
    return r.squaredNorm() * inv_sigma2;
  }
  const auto& m = std::get<MonoKeypoint>(kp);
  const Eigen::Vector2d r = Eigen::Vector2d(m.uL, m.vL) - project_mono(xc, K);
  return r.squaredNorm() * inv_sigma2;
}

}  // namespace kslam

#endif
