#ifndef KSLAM_TRAJECTORY_H
#define KSLAM_TRAJECTORY_H

#include <string>
#include <vector>

#include "kslam/se3.h"

namespace kslam {

struct StampedPose {
  double timestamp = 0.0;  // seconds
  Pose pose;               // world-from-camera
};

/// Ordered pose list with strictly increasing timestamps.
using Trajectory = std::vector<StampedPose>;

/// TUM text format: `timestamp tx ty tz qx qy qz qw` per line, quaternion
/// scalar-last, `#` comments skipped. Encoding uses 17 significant digits and
/// a canonical quaternion sign, so write-read-write is byte-identical.
std::string to_tum(const Trajectory& trajectory);
Trajectory from_tum(const std::string& text);  // throws std::runtime_error with line number

/// KITTI text format: 12 space-separated values per line, row-major 3x4 [R|t].
/// No timestamps: reading synthesizes 0,1,2,... seconds.
std::string to_kitti(const Trajectory& trajectory);
Trajectory from_kitti(const std::string& text);  // throws std::runtime_error with line number

/// File wrappers; throw std::runtime_error on I/O failure.
void write_tum(const std::string& path, const Trajectory& trajectory);
Trajectory read_tum(const std::string& path);
void write_kitti(const std::string& path, const Trajectory& trajectory);
Trajectory read_kitti(const std::string& path);

/// Timestamp association window (seconds) shared by the evaluation metrics.
inline constexpr double kAssociationTolerance = 0.02;

/// Absolute translation RMSE in meters over timestamp-associated pose pairs.
/// With align, the estimate is first fitted to the truth by the closed-form
/// rigid (no scale) least-squares transform. Throws std::runtime_error when
/// no pairs associate (or fewer than 3 with align).
double ate_rmse(const Trajectory& estimate, const Trajectory& truth, bool align = true);

struct RelErrors {
  double t_rel = 0.0;  // mean relative translation error, percent
  double r_rel = 0.0;  // mean relative rotation error, degrees per 100 m
  int samples = 0;     // (start, length) pairs evaluated
};

/// KITTI relative errors over subsequence lengths {100, 200, ..., 800} m of
/// ground-truth path, every associated pose as a start. Throws
/// std::runtime_error when the path is shorter than the smallest length.
RelErrors kitti_rel_errors(const Trajectory& estimate, const Trajectory& truth);

struct MetricReport {
  double t_abs = 0.0;  // meters
  double t_rel = 0.0;  // percent
  double r_rel = 0.0;  // degrees per 100 m
};

}  // namespace kslam

#endif
