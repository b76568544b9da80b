#include "kslam/bundle.h"

#include <Eigen/Dense>

#include "kslam/reprojection.h"
#include "kslam/robust.h"

namespace kslam {

namespace {
constexpr double kBehindCameraCost = 1e6;

double huber_delta_for(const Keypoint& kp) {
  return is_stereo(kp) ? std::sqrt(kChi2Stereo) : std::sqrt(kChi2Mono);
}
}  // namespace

BundleProblem::BundleProblem(const std::vector<BaViewInit>& views,
                             const std::vector<BaPointInit>& points,
                             const std::vector<BaObs>& observations, const Intrinsics& K)
    : K_(K) {
  K_.validate();
  std::map<uint64_t, int> view_of, point_of;
  views_.reserve(views.size());
  for (const auto& v : views) {
    view_of[v.id] = static_cast<int>(views_.size());
    views_.push_back({v.id, v.T_cw, v.fixed});
  }
  points_.reserve(points.size());
  for (const auto& p : points) {
    point_of[p.id] = static_cast<int>(points_.size());
    points_.push_back({p.id, p.position});
  }
  factors_.reserve(observations.size());
  for (const auto& o : observations) {
    auto vi = view_of.find(o.view_id);
    auto pi = point_of.find(o.point_id);
    if (vi == view_of.end() || pi == point_of.end()) {
      throw std::invalid_argument("BundleProblem: observation references unknown view or point");
    }
    factors_.push_back({vi->second, pi->second, o.kp});
  }
  factor_enabled_.assign(factors_.size(), 1);
  refresh_active_sets();
}

void BundleProblem::refresh_active_sets() {
  std::vector<int> obs_count(points_.size(), 0);
  for (size_t i = 0; i < factors_.size(); ++i) {
    if (factor_enabled_[i]) ++obs_count[factors_[i].point];
  }
  point_active_.assign(points_.size(), 0);
  point_index_.assign(points_.size(), -1);
  active_points_.clear();
  for (size_t p = 0; p < points_.size(); ++p) {
    if (obs_count[p] >= 2) {
      point_active_[p] = 1;
      point_index_[p] = static_cast<int>(active_points_.size());
      active_points_.push_back(static_cast<int>(p));
    }
  }
  factor_active_.assign(factors_.size(), 0);
  for (size_t i = 0; i < factors_.size(); ++i) {
    factor_active_[i] = factor_enabled_[i] && point_active_[factors_[i].point];
  }
  free_views_.clear();
  free_index_.assign(views_.size(), -1);
  for (size_t v = 0; v < views_.size(); ++v) {
    if (!views_[v].fixed) {
      free_index_[v] = static_cast<int>(free_views_.size());
      free_views_.push_back(static_cast<int>(v));
    }
  }
}

double BundleProblem::robust_cost() const {
  double total = 0.0;
  for (size_t i = 0; i < factors_.size(); ++i) {
    if (!factor_active_[i]) continue;
    const Factor& f = factors_[i];
    const double chi2 =
        reproj_chi2(views_[f.view].T_cw, points_[f.point].position, f.kp, K_);
    if (!std::isfinite(chi2)) {
      total += kBehindCameraCost;
      continue;
    }
    total += huber_cost(chi2, huber_delta_for(f.kp));
  }
  return total;
}

std::vector<double> BundleProblem::factor_chi2() const {
  std::vector<double> out(factors_.size(), std::numeric_limits<double>::infinity());
  for (size_t i = 0; i < factors_.size(); ++i) {
    if (!factor_active_[i]) continue;
    const Factor& f = factors_[i];
    out[i] = reproj_chi2(views_[f.view].T_cw, points_[f.point].position, f.kp, K_);
  }
  return out;
}

void BundleProblem::disable_factors(const std::vector<size_t>& factor_indices) {
  for (size_t i : factor_indices) factor_enabled_.at(i) = 0;
  refresh_active_sets();
}

namespace {

/// Accumulated normal-equations blocks for one linearization.
struct NormalBlocks {
  std::vector<Matrix6d> U;                        // per free view
  std::vector<Eigen::Matrix3d> V;                 // per active point
  std::vector<Vector6d> g_c;                      // per free view
  std::vector<Eigen::Vector3d> g_p;               // per active point
  // W blocks keyed by (free view slot, active point slot), grouped per point.
  struct WBlock {
    int view_slot;
    Eigen::Matrix<double, 6, 3> W;
  };
  std::vector<std::vector<WBlock>> point_views;  // per active point
};

}  // namespace

BundleProblem::GradientStats BundleProblem::gradient_stats() const {
  std::vector<Vector6d> g_c(free_views_.size(), Vector6d::Zero());
  std::vector<Eigen::Vector3d> g_p(active_points_.size(), Eigen::Vector3d::Zero());
  double maxd = 0.0;
  for (size_t i = 0; i < factors_.size(); ++i) {
    if (!factor_active_[i]) continue;
    const Factor& f = factors_[i];
    const Eigen::Vector3d xc = views_[f.view].T_cw * points_[f.point].position;
    if (!(xc.z() > 1e-6)) continue;
    auto accum = [&](const auto& res) {
      const double w = HuberKernel(huber_delta_for(f.kp)).weight(res.squared_norm());
      const int c = free_index_[f.view];
      const int p = point_index_[f.point];
      if (c >= 0) {
        maxd = std::max(maxd, (w * res.d_pose.colwise().squaredNorm()).maxCoeff());
        g_c[c].noalias() += w * res.d_pose.transpose() * res.residual;
      }
      if (p >= 0) {
        maxd = std::max(maxd, (w * res.d_point.colwise().squaredNorm()).maxCoeff());
        g_p[p].noalias() += w * res.d_point.transpose() * res.residual;
      }
    };
    if (const auto* s = std::get_if<StereoKeypoint>(&f.kp)) {
      accum(stereo_residual(views_[f.view].T_cw, points_[f.point].position, *s, K_));
    } else {
      accum(mono_residual(views_[f.view].T_cw, points_[f.point].position,
                          std::get<MonoKeypoint>(f.kp), K_));
    }
  }
  GradientStats stats;
  stats.max_diagonal = maxd;
  for (const auto& g : g_c) stats.grad_inf = std::max(stats.grad_inf, g.cwiseAbs().maxCoeff());
  for (const auto& g : g_p) stats.grad_inf = std::max(stats.grad_inf, g.cwiseAbs().maxCoeff());
  return stats;
}

std::optional<BundleProblem::Step> BundleProblem::compute_step(double lambda) const {
  const int nc = static_cast<int>(free_views_.size());
  const int np = static_cast<int>(active_points_.size());

  NormalBlocks nb;
  nb.U.assign(nc, Matrix6d::Zero());
  nb.g_c.assign(nc, Vector6d::Zero());
  nb.V.assign(np, Eigen::Matrix3d::Zero());
  nb.g_p.assign(np, Eigen::Vector3d::Zero());
  nb.point_views.assign(np, {});

  for (size_t i = 0; i < factors_.size(); ++i) {
    if (!factor_active_[i]) continue;
    const Factor& f = factors_[i];
    const View& view = views_[f.view];
    const Eigen::Vector3d& Xw = points_[f.point].position;
    const Eigen::Vector3d xc = view.T_cw * Xw;
    if (!(xc.z() > 1e-6)) continue;  // behind camera: no gradient contribution

    const int c = free_index_[f.view];
    const int p = point_index_[f.point];

    auto accumulate = [&](const auto& res) {
      const double w = HuberKernel(huber_delta_for(f.kp)).weight(res.squared_norm());
      if (c >= 0) {
        nb.U[c].noalias() += w * res.d_pose.transpose() * res.d_pose;
        nb.g_c[c].noalias() += w * res.d_pose.transpose() * res.residual;
      }
      if (p >= 0) {
        nb.V[p].noalias() += w * res.d_point.transpose() * res.d_point;
        nb.g_p[p].noalias() += w * res.d_point.transpose() * res.residual;
        if (c >= 0) {
          // Merge into an existing W block for this (point, view) pair.
          auto& blocks = nb.point_views[p];
          Eigen::Matrix<double, 6, 3> Wblk = w * res.d_pose.transpose() * res.d_point;
          bool merged = false;
          for (auto& b : blocks) {
            if (b.view_slot == c) {
              b.W += Wblk;
              merged = true;
              break;
            }
          }
          if (!merged) blocks.push_back({c, Wblk});
        }
      }
    };

    if (const auto* s = std::get_if<StereoKeypoint>(&f.kp)) {
      accumulate(stereo_residual(view.T_cw, Xw, *s, K_));
    } else {
      accumulate(mono_residual(view.T_cw, Xw, std::get<MonoKeypoint>(f.kp), K_));
    }
  }

  // Damp and invert point blocks, form the reduced camera system.
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(6 * nc, 6 * nc);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(6 * nc);
  for (int c = 0; c < nc; ++c) {
    Matrix6d Uc = nb.U[c];
    Uc.diagonal().array() += lambda;
    S.block<6, 6>(6 * c, 6 * c) = Uc;
    b.segment<6>(6 * c) = -nb.g_c[c];
  }

  std::vector<Eigen::Matrix3d> Vinv(np);
  for (int p = 0; p < np; ++p) {
    Eigen::Matrix3d Vp = nb.V[p];
    Vp.diagonal().array() += lambda;
    const Eigen::LDLT<Eigen::Matrix3d> ldlt(Vp);
    if (ldlt.info() != Eigen::Success) return std::nullopt;
    Vinv[p] = ldlt.solve(Eigen::Matrix3d::Identity());

    const auto& blocks = nb.point_views[p];
    for (const auto& bi : blocks) {
      const Eigen::Matrix<double, 6, 3> WVinv = bi.W * Vinv[p];
      b.segment<6>(6 * bi.view_slot).noalias() += WVinv * nb.g_p[p];
      for (const auto& bj : blocks) {
        S.block<6, 6>(6 * bi.view_slot, 6 * bj.view_slot).noalias() -=
            WVinv * bj.W.transpose();
      }
    }
  }

  Step step;
  step.pose_delta.resize(6 * nc);
  step.point_delta.resize(3 * np);

  if (nc > 0) {
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
    if (ldlt.info() != Eigen::Success) return std::nullopt;
    step.pose_delta = ldlt.solve(b);
    if (!step.pose_delta.allFinite()) return std::nullopt;
  }

  // Back-substitute the point updates.
  for (int p = 0; p < np; ++p) {
    Eigen::Vector3d rhs = -nb.g_p[p];
    for (const auto& bi : nb.point_views[p]) {
      rhs.noalias() -= bi.W.transpose() * step.pose_delta.segment<6>(6 * bi.view_slot);
    }
    step.point_delta.segment<3>(3 * p) = Vinv[p] * rhs;
  }
  if (!step.point_delta.allFinite()) return std::nullopt;
  return step;
}

void BundleProblem::apply_step(const Step& step) {
  for (size_t slot = 0; slot < free_views_.size(); ++slot) {
    View& v = views_[free_views_[slot]];
    const Vector6d d = step.pose_delta.segment<6>(6 * static_cast<int>(slot));
    v.T_cw = se3_exp(Twist::FromStacked(d)) * v.T_cw;
  }
  for (size_t slot = 0; slot < active_points_.size(); ++slot) {
    points_[active_points_[slot]].position +=
        step.point_delta.segment<3>(3 * static_cast<int>(slot));
  }
}

SolveStatus BundleProblem::optimize(const LmConfig& config, const std::atomic<bool>* abort,
                                    IterationLog* log) {
  config.validate();
  if (free_views_.empty() && active_points_.empty()) return SolveStatus::Converged;

  double cost = robust_cost();
  double lambda = -1.0;

  for (int it = 0; it < config.max_iterations; ++it) {
    if (abort && abort->load()) return SolveStatus::Aborted;

    const GradientStats stats = gradient_stats();
    if (stats.grad_inf < config.gradient_tol) return SolveStatus::Converged;
    if (lambda < 0.0) {
      lambda = config.initial_lambda_scale * std::max(stats.max_diagonal, 1e-12);
    }

    bool stepped = false;
    while (lambda <= config.lambda_max) {
      const auto step = compute_step(lambda);
      if (step) {
        // Trial application with rollback on cost increase.
        std::vector<View> saved_views = views_;
        std::vector<Point> saved_points = points_;
        apply_step(*step);
        const double new_cost = robust_cost();
        if (new_cost < cost) {
          const double rel = (cost - new_cost) / std::max(cost, 1e-300);
          cost = new_cost;
          lambda = std::max(lambda * 0.5, 1e-18);
          stepped = true;
          if (log) log->push_back({it, cost, lambda, true});
          if (rel < config.rel_decrease_tol) return SolveStatus::Converged;
          break;
        }
        views_ = std::move(saved_views);
        points_ = std::move(saved_points);
        if (log) log->push_back({it, new_cost, lambda, false});
      }
      lambda *= 10.0;
    }
    if (!stepped) {
      if (lambda > config.lambda_max * 10.0) return SolveStatus::Diverged;
      return SolveStatus::Converged;  // no step improves: at a (damped) optimum
    }
  }
  return SolveStatus::MaxIterations;
}

namespace {

BaSolution extract_solution(const BundleProblem& problem, SolveStatus status) {
  BaSolution sol;
  sol.status = status;
  for (size_t v = 0; v < problem.num_views(); ++v) {
    if (!problem.view_fixed(v)) sol.poses[problem.view_id(v)] = problem.view_pose(v);
  }
  for (size_t p = 0; p < problem.num_points(); ++p) {
    if (problem.point_active(p)) sol.points[problem.point_id(p)] = problem.point_position(p);
  }
  return sol;
}

}  // namespace

BaSolution local_ba(const std::vector<BaViewInit>& views, const std::vector<BaPointInit>& points,
                    const std::vector<BaObs>& observations, const Intrinsics& K,
                    const LmConfig& config, IterationLog* log) {
  BundleProblem problem(views, points, observations, K);
  SolveStatus status = problem.optimize(config, nullptr, log);

  // Chi-square outlier pass, then refine on the inlier structure.
  std::vector<size_t> outliers;
  const std::vector<double> chi2 = problem.factor_chi2();
  for (size_t i = 0; i < observations.size(); ++i) {
    if (!problem.factor_active(i)) continue;
    const double cutoff = is_stereo(observations[i].kp) ? kChi2Stereo : kChi2Mono;
    if (!(chi2[i] <= cutoff)) outliers.push_back(i);
  }
  if (!outliers.empty()) {
    problem.disable_factors(outliers);
    status = problem.optimize(config, nullptr, log);
  }

  BaSolution sol = extract_solution(problem, status);
  sol.outlier_observations = std::move(outliers);
  return sol;
}

BaSolution full_ba_snapshot(const std::vector<BaViewInit>& views,
                            const std::vector<BaPointInit>& points,
                            const std::vector<BaObs>& observations, const Intrinsics& K,
                            const LmConfig& config, const std::atomic<bool>* abort,
                            IterationLog* log) {
  BundleProblem problem(views, points, observations, K);
  const SolveStatus status = problem.optimize(config, abort, log);
  return extract_solution(problem, status);
}

}  // namespace kslam
