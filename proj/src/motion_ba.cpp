#include "kslam/motion_ba.h"

#include <Eigen/Dense>

#include "kslam/reprojection.h"
#include "kslam/robust.h"

namespace kslam {

namespace {

constexpr int kRounds = 4;
constexpr double kBehindCameraCost = 1e6;

double match_chi2(const Pose& T_cw, const MotionBaMatch& m, const Intrinsics& K) {
  return reproj_chi2(T_cw, m.point_w, m.kp, K);
}

double robust_cost(const Pose& T_cw, const std::vector<MotionBaMatch>& matches,
                   const std::vector<uint8_t>& inlier, const Intrinsics& K) {
  double total = 0.0;
  for (size_t i = 0; i < matches.size(); ++i) {
    if (!inlier[i]) continue;
    const double chi2 = match_chi2(T_cw, matches[i], K);
    if (!std::isfinite(chi2)) {
      total += kBehindCameraCost;
      continue;
    }
    const double delta = is_stereo(matches[i].kp) ? std::sqrt(kChi2Stereo) : std::sqrt(kChi2Mono);
    total += huber_cost(chi2, delta);
  }
  return total;
}

}  // namespace

MotionBaResult motion_only_ba(const std::vector<MotionBaMatch>& matches, const Pose& T_cw_init,
                              const Intrinsics& K, const LmConfig& config, IterationLog* log) {
  config.validate();
  if (matches.size() < 6) {
    throw std::invalid_argument("motion_only_ba: needs at least 6 matches");
  }

  MotionBaResult result;
  result.T_cw = T_cw_init;
  result.inlier.assign(matches.size(), 1);
  result.status = SolveStatus::Converged;

  int iter_count = 0;
  for (int round = 0; round < kRounds; ++round) {
    double cost = robust_cost(result.T_cw, matches, result.inlier, K);
    double lambda = -1.0;  // set from the first linearization of the round

    for (int it = 0; it < config.max_iterations; ++it) {
      Matrix6d H = Matrix6d::Zero();
      Vector6d g = Vector6d::Zero();
      for (size_t i = 0; i < matches.size(); ++i) {
        if (!result.inlier[i]) continue;
        const Eigen::Vector3d xc = result.T_cw * matches[i].point_w;
        if (!(xc.z() > 1e-6)) continue;
        if (const auto* s = std::get_if<StereoKeypoint>(&matches[i].kp)) {
          const StereoResidual r = stereo_residual(result.T_cw, matches[i].point_w, *s, K);
          const double w = HuberKernel(std::sqrt(kChi2Stereo)).weight(r.squared_norm());
          H.noalias() += w * r.d_pose.transpose() * r.d_pose;
          g.noalias() += w * r.d_pose.transpose() * r.residual;
        } else {
          const auto& mk = std::get<MonoKeypoint>(matches[i].kp);
          const MonoResidual r = mono_residual(result.T_cw, matches[i].point_w, mk, K);
          const double w = HuberKernel(std::sqrt(kChi2Mono)).weight(r.squared_norm());
          H.noalias() += w * r.d_pose.transpose() * r.d_pose;
          g.noalias() += w * r.d_pose.transpose() * r.residual;
        }
      }

      if (log) log->push_back({iter_count, cost, std::max(lambda, 0.0), true});
      ++iter_count;

      if (g.cwiseAbs().maxCoeff() < config.gradient_tol) break;
      if (lambda < 0.0) lambda = config.initial_lambda_scale * H.diagonal().maxCoeff();

      bool stepped = false;
      while (lambda <= config.lambda_max) {
        Matrix6d Hd = H;
        Hd.diagonal().array() += lambda;
        const Vector6d delta = Hd.ldlt().solve(-g);
        const Pose candidate = se3_exp(Twist::FromStacked(delta)) * result.T_cw;
        const double new_cost = robust_cost(candidate, matches, result.inlier, K);
        if (new_cost < cost) {
          const double rel = (cost - new_cost) / std::max(cost, 1e-300);
          result.T_cw = candidate;
          cost = new_cost;
          lambda = std::max(lambda * 0.5, 1e-18);
          stepped = true;
          if (rel < config.rel_decrease_tol) it = config.max_iterations;  // converged
          break;
        }
        lambda *= 10.0;
      }
      if (!stepped) {
        if (lambda > config.lambda_max) result.status = SolveStatus::Diverged;
        break;
      }
    }

    // Reclassify every match at the refined pose.
    for (size_t i = 0; i < matches.size(); ++i) {
      const double chi2 = match_chi2(result.T_cw, matches[i], K);
      const double cutoff = is_stereo(matches[i].kp) ? kChi2Stereo : kChi2Mono;
      result.inlier[i] = std::isfinite(chi2) && chi2 <= cutoff;
    }
  }

  result.inlier_count = 0;
  for (uint8_t f : result.inlier) result.inlier_count += f;
  return result;
}

}  // namespace kslam
