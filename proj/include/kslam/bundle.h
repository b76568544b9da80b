#ifndef KSLAM_BUNDLE_H
#define KSLAM_BUNDLE_H

#include <atomic>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "kslam/camera.h"
#include "kslam/lm.h"
#include "kslam/se3.h"

namespace kslam {

struct BaViewInit {
  uint64_t id = 0;
  Pose T_cw;
  bool fixed = false;
};

struct BaPointInit {
  uint64_t id = 0;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
};

struct BaObs {
  uint64_t view_id = 0;
  uint64_t point_id = 0;
  Keypoint kp;
};

/// Sparse reprojection bundle problem over camera poses (camera-from-world)
/// and world points. Points are eliminated by Schur complement; the reduced
/// pose system is solved by dense Cholesky. Points with fewer than two
/// observations among the participating views are dropped from the solve,
/// together with their factors.
class BundleProblem {
 public:
  BundleProblem(const std::vector<BaViewInit>& views, const std::vector<BaPointInit>& points,
                const std::vector<BaObs>& observations, const Intrinsics& K);

  /// Total Huber-robustified cost over active factors at the current state.
  double robust_cost() const;

  struct Step {
    Eigen::VectorXd pose_delta;   // 6 per free view, twist (rotation first)
    Eigen::VectorXd point_delta;  // 3 per active point
  };

  /// Solves one damped Schur step at the current state without mutating it.
  /// Returns nullopt if the reduced system cannot be factorized.
  std::optional<Step> compute_step(double lambda) const;

  struct GradientStats {
    double max_diagonal = 0.0;  // largest entry of diag(H), scales lambda0
    double grad_inf = 0.0;      // ||g||_inf over free views and active points
  };
  GradientStats gradient_stats() const;

  void apply_step(const Step& step);

  SolveStatus optimize(const LmConfig& config, const std::atomic<bool>* abort = nullptr,
                       IterationLog* log = nullptr);

  /// Whitened squared residual per factor at the current state; inf for
  /// inactive factors or points behind the camera.
  std::vector<double> factor_chi2() const;

  /// Removes the given factors from the cost and re-evaluates which points
  /// stay in the solve.
  void disable_factors(const std::vector<size_t>& factor_indices);

  // State access.
  size_t num_views() const { return views_.size(); }
  size_t num_points() const { return points_.size(); }
  size_t num_factors() const { return factors_.size(); }
  const Pose& view_pose(size_t i) const { return views_[i].T_cw; }
  uint64_t view_id(size_t i) const { return views_[i].id; }
  bool view_fixed(size_t i) const { return views_[i].fixed; }
  const Eigen::Vector3d& point_position(size_t i) const { return points_[i].position; }
  uint64_t point_id(size_t i) const { return points_[i].id; }
  bool point_active(size_t i) const { return point_active_[i]; }
  bool factor_active(size_t i) const { return factor_active_[i]; }
  const std::vector<int>& free_view_indices() const { return free_views_; }
  const std::vector<int>& active_point_indices() const { return active_points_; }

 private:
  struct View {
    uint64_t id;
    Pose T_cw;
    bool fixed;
  };
  struct Point {
    uint64_t id;
    Eigen::Vector3d position;
  };
  struct Factor {
    int view;
    int point;
    Keypoint kp;
  };

  void refresh_active_sets();

  Intrinsics K_;
  std::vector<View> views_;
  std::vector<Point> points_;
  std::vector<Factor> factors_;
  std::vector<uint8_t> factor_enabled_;  // caller-controlled (outlier removal)
  std::vector<uint8_t> factor_active_;   // enabled and point kept in the solve
  std::vector<uint8_t> point_active_;
  std::vector<int> free_views_;      // view index -> position via free_index_
  std::vector<int> active_points_;   // point index -> position via point_index_
  std::vector<int> free_index_;      // -1 when fixed
  std::vector<int> point_index_;     // -1 when dropped
};

struct BaSolution {
  std::map<uint64_t, Pose> poses;                  // optimized free views
  std::map<uint64_t, Eigen::Vector3d> points;      // points kept in the solve
  std::vector<size_t> outlier_observations;        // indices into the input list
  SolveStatus status = SolveStatus::Converged;
};

/// Local bundle adjustment (fixed-frontier views keep their poses
/// bit-identical). Optimizes, removes chi-square outlier observations, and
/// optimizes again.
BaSolution local_ba(const std::vector<BaViewInit>& views, const std::vector<BaPointInit>& points,
                    const std::vector<BaObs>& observations, const Intrinsics& K,
                    const LmConfig& config = {}, IterationLog* log = nullptr);

/// Full bundle adjustment over a map snapshot: single gauge-fixed view,
/// no outlier removal, abortable between LM iterations.
BaSolution full_ba_snapshot(const std::vector<BaViewInit>& views,
                            const std::vector<BaPointInit>& points,
                            const std::vector<BaObs>& observations, const Intrinsics& K,
                            const LmConfig& config = {}, const std::atomic<bool>* abort = nullptr,
                            IterationLog* log = nullptr);

}  // namespace kslam

#endif
