#ifndef KSLAM_SE3_H
#define KSLAM_SE3_H

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace kslam {

using Vector6d = Eigen::Matrix<double, 6, 1>;
using Matrix6d = Eigen::Matrix<double, 6, 6>;

/// Tangent-space coordinates of SE(3). Ordering in the stacked 6-vector is
/// rotation first, translation second.
struct Twist {
  Eigen::Vector3d rotational = Eigen::Vector3d::Zero();     // radians
  Eigen::Vector3d translational = Eigen::Vector3d::Zero();  // meters

  Vector6d stacked() const {
    Vector6d v;
    v.head<3>() = rotational;
    v.tail<3>() = translational;
    return v;
  }
  static Twist FromStacked(const Vector6d& v) {
    return Twist{v.head<3>(), v.tail<3>()};
  }
};

/// Rigid-body transform. Composition and point action follow the usual
/// convention: (P * Q) acts as P applied after Q, and P * x = R x + t.
class Pose {
 public:
  Pose() : rotation_(Eigen::Matrix3d::Identity()), translation_(Eigen::Vector3d::Zero()) {}
  Pose(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation)
      : rotation_(rotation), translation_(translation) {}

  static Pose Identity() { return Pose(); }

  const Eigen::Matrix3d& rotation() const { return rotation_; }
  const Eigen::Vector3d& translation() const { return translation_; }

  Pose inverse() const {
    Eigen::Matrix3d rt = rotation_.transpose();
    return Pose(rt, -(rt * translation_));
  }

  Pose operator*(const Pose& other) const {
    return Pose(rotation_ * other.rotation_, rotation_ * other.translation_ + translation_);
  }

  Eigen::Vector3d operator*(const Eigen::Vector3d& x) const {
    return rotation_ * x + translation_;
  }

  /// Max-norm deviation from a proper rotation; used by validity checks.
  double rotation_defect() const {
    double ortho = (rotation_.transpose() * rotation_ - Eigen::Matrix3d::Identity())
                       .cwiseAbs()
                       .maxCoeff();
    double det = std::abs(rotation_.determinant() - 1.0);
    return std::max(ortho, det);
  }

  bool is_valid(double tol = 1e-9) const { return rotation_defect() <= tol; }

  /// Angular distance (radians) and translational distance to another pose.
  double rotation_angle_to(const Pose& other) const;
  double translation_distance_to(const Pose& other) const {
    return (translation_ - other.translation_).norm();
  }

 private:
  Eigen::Matrix3d rotation_;
  Eigen::Vector3d translation_;
};

Eigen::Matrix3d skew(const Eigen::Vector3d& v);

/// Exponential map se(3) -> SE(3). Exact for the zero twist.
Pose se3_exp(const Twist& xi);

/// Logarithm map SE(3) -> se(3). Throws std::domain_error when the rotation
/// angle is at the pi singularity where the axis is not recoverable.
Twist se3_log(const Pose& pose);

/// Rotation angle of a rotation matrix in [0, pi].
double rotation_angle(const Eigen::Matrix3d& rotation);

}  // namespace kslam

#endif
