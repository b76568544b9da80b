#include "kslam/triangulation.h"

#include <Eigen/Dense>

#include "kslam/reprojection.h"

namespace kslam {

namespace {

Eigen::Matrix<double, 3, 4> projection_matrix(const Pose& T_cw, const Intrinsics& K) {
  Eigen::Matrix3d Kmat;
  Kmat << K.fx, 0, K.cx, 0, K.fy, K.cy, 0, 0, 1;
  Eigen::Matrix<double, 3, 4> Rt;
  Rt.leftCols<3>() = T_cw.rotation();
  Rt.col(3) = T_cw.translation();
  return Kmat * Rt;
}

}  // namespace

std::optional<Eigen::Vector3d> triangulate(const Keypoint& obs_a, const Pose& T_wc_a,
                                           const Keypoint& obs_b, const Pose& T_wc_b,
                                           const Intrinsics& K) {
  const Pose T_cw_a = T_wc_a.inverse();
  const Pose T_cw_b = T_wc_b.inverse();
  const Eigen::Matrix<double, 3, 4> Pa = projection_matrix(T_cw_a, K);
  const Eigen::Matrix<double, 3, 4> Pb = projection_matrix(T_cw_b, K);

  const Eigen::Vector2d pa = keypoint_pixel(obs_a);
  const Eigen::Vector2d pb = keypoint_pixel(obs_b);

  Eigen::Matrix4d A;
  A.row(0) = pa.x() * Pa.row(2) - Pa.row(0);
  A.row(1) = pa.y() * Pa.row(2) - Pa.row(1);
  A.row(2) = pb.x() * Pb.row(2) - Pb.row(0);
  A.row(3) = pb.y() * Pb.row(2) - Pb.row(1);

  Eigen::JacobiSVD<Eigen::Matrix4d> svd(A, Eigen::ComputeFullV);
  Eigen::Vector4d h = svd.matrixV().col(3);
  if (std::abs(h(3)) < 1e-15) return std::nullopt;
  Eigen::Vector3d X = h.head<3>() / h(3);
  if (!X.allFinite()) return std::nullopt;

  // Cheirality: the point must be in front of both cameras.
  if (!((T_cw_a * X).z() > 0.0) || !((T_cw_b * X).z() > 0.0)) return std::nullopt;

  // Parallax between the viewing rays.
  const Eigen::Vector3d ray_a = X - T_wc_a.translation();
  const Eigen::Vector3d ray_b = X - T_wc_b.translation();
  const double denom = ray_a.norm() * ray_b.norm();
  if (denom < 1e-15) return std::nullopt;
  const double cos_par = std::clamp(ray_a.dot(ray_b) / denom, -1.0, 1.0);
  if (std::acos(cos_par) < kMinParallaxDeg * M_PI / 180.0) return std::nullopt;

  // One Gauss-Newton step on the full reprojection residuals.
  Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
  Eigen::Vector3d g = Eigen::Vector3d::Zero();
  for (const auto& [obs, T_cw] : {std::pair{&obs_a, &T_cw_a}, std::pair{&obs_b, &T_cw_b}}) {
    if (const auto* s = std::get_if<StereoKeypoint>(obs)) {
      const StereoResidual r = stereo_residual(*T_cw, X, *s, K);
      H += r.d_point.transpose() * r.d_point;
      g += r.d_point.transpose() * r.residual;
    } else {
      const MonoResidual r = mono_residual(*T_cw, X, std::get<MonoKeypoint>(*obs), K);
      H += r.d_point.transpose() * r.d_point;
      g += r.d_point.transpose() * r.residual;
    }
  }
  Eigen::LDLT<Eigen::Matrix3d> ldlt(H);
  if (ldlt.info() == Eigen::Success) {
    const Eigen::Vector3d refined = X - ldlt.solve(g);
    if (refined.allFinite() && (T_cw_a * refined).z() > 0.0 && (T_cw_b * refined).z() > 0.0) {
      X = refined;
    }
  }
  return X;
}

}  // namespace kslam
