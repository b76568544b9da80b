#include "kslam/se3.h"

#include <cmath>
#include <stdexcept>

namespace kslam {

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

double rotation_angle(const Eigen::Matrix3d& rotation) {
  double c = 0.5 * (rotation.trace() - 1.0);
  c = std::clamp(c, -1.0, 1.0);
  return std::acos(c);
}

double Pose::rotation_angle_to(const Pose& other) const {
  return kslam::rotation_angle(rotation_.transpose() * other.rotation());
}

Pose se3_exp(const Twist& xi) {
  const Eigen::Vector3d& omega = xi.rotational;
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Eigen::Matrix3d A = skew(omega);
  const Eigen::Matrix3d A2 = A * A;

  double a, b, c;  // sin(t)/t, (1-cos(t))/t^2, (t-sin(t))/t^3
  if (theta < 1e-4) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
    c = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    const double half_sin = std::sin(0.5 * theta);
    a = std::sin(theta) / theta;
    b = 2.0 * half_sin * half_sin / theta2;  // cancellation-free 1-cos
    c = (theta - std::sin(theta)) / (theta2 * theta);
  }

  Eigen::Matrix3d R = Eigen::Matrix3d::Identity() + a * A + b * A2;
  Eigen::Matrix3d V = Eigen::Matrix3d::Identity() + b * A + c * A2;
  return Pose(R, V * xi.translational);
}

Twist se3_log(const Pose& pose) {
  const Eigen::Matrix3d& R = pose.rotation();
  const double theta = rotation_angle(R);

  if (M_PI - theta < 1e-10) {
    throw std::domain_error("se3_log: rotation angle at pi, axis sign is not recoverable");
  }

  // vee(R - R^T)/2 = sin(theta) * axis
  const Eigen::Vector3d v(0.5 * (R(2, 1) - R(1, 2)), 0.5 * (R(0, 2) - R(2, 0)),
                          0.5 * (R(1, 0) - R(0, 1)));

  Eigen::Vector3d omega;
  if (theta < 1e-4) {
    omega = v * (1.0 + theta * theta / 6.0);
  } else if (theta > 3.0 * M_PI / 4.0) {
    // Near pi the vee part loses precision; recover the axis from the
    // symmetric part, n n^T = I + (R_sym - I)/(1 - cos(theta)).
    const double one_minus_cos = 1.0 - std::cos(theta);
    Eigen::Matrix3d nnT = Eigen::Matrix3d::Identity() +
                          (0.5 * (R + R.transpose()) - Eigen::Matrix3d::Identity()) / one_minus_cos;
    int i = 0;
    nnT.diagonal().maxCoeff(&i);
    Eigen::Vector3d n = nnT.col(i) / std::sqrt(nnT(i, i));
    if (n.dot(v) < 0.0) n = -n;
    omega = theta * n;
  } else {
    omega = v * (theta / std::sin(theta));
  }

  const Eigen::Matrix3d A = skew(omega);
  const Eigen::Matrix3d A2 = A * A;
  Eigen::Matrix3d Vinv;
  if (theta < 1e-4) {
    Vinv = Eigen::Matrix3d::Identity() - 0.5 * A + (1.0 / 12.0 + theta * theta / 720.0) * A2;
  } else {
    // cot(theta/2) stays well-conditioned over (0, pi).
    const double half = 0.5 * theta;
    const double cot_half = std::cos(half) / std::sin(half);
    const double coeff = 1.0 / (theta * theta) - cot_half / (2.0 * theta);
    Vinv = Eigen::Matrix3d::Identity() - 0.5 * A + coeff * A2;
  }

  return Twist{omega, Vinv * pose.translation()};
}

}  // namespace kslam
