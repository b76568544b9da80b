#include "kslam/pose_graph.h"

#include <Eigen/Dense>
#include <queue>
#include <stdexcept>

namespace kslam {

namespace {

Vector6d edge_residual(const Pose& T_from, const Pose& T_to, const Pose& relative) {
  return se3_log(relative.inverse() * T_from.inverse() * T_to).stacked();
}

void check_inputs(const std::map<uint64_t, Pose>& nodes, const std::vector<PoseGraphEdge>& edges,
                  const std::set<uint64_t>& fixed) {
  if (nodes.empty()) throw std::invalid_argument("pose_graph_optimize: empty graph");
  if (fixed.empty()) throw std::invalid_argument("pose_graph_optimize: needs a fixed node");
  for (uint64_t id : fixed) {
    if (!nodes.count(id)) throw std::invalid_argument("pose_graph_optimize: fixed node unknown");
  }
  std::map<uint64_t, std::vector<uint64_t>> adj;
  for (const auto& e : edges) {
    if (!nodes.count(e.from) || !nodes.count(e.to)) {
      throw std::invalid_argument("pose_graph_optimize: edge references unknown node");
    }
    adj[e.from].push_back(e.to);
    adj[e.to].push_back(e.from);
  }
  std::set<uint64_t> seen;
  std::queue<uint64_t> frontier;
  frontier.push(nodes.begin()->first);
  seen.insert(nodes.begin()->first);
  while (!frontier.empty()) {
    const uint64_t id = frontier.front();
    frontier.pop();
    for (uint64_t n : adj[id]) {
      if (seen.insert(n).second) frontier.push(n);
    }
  }
  if (seen.size() != nodes.size()) {
    throw std::invalid_argument("pose_graph_optimize: graph is disconnected");
  }
}

}  // namespace

double pose_graph_cost(const std::map<uint64_t, Pose>& nodes,
                       const std::vector<PoseGraphEdge>& edges) {
  double cost = 0.0;
  for (const auto& e : edges) {
    const Vector6d r = edge_residual(nodes.at(e.from), nodes.at(e.to), e.relative);
    cost += r.dot(e.information * r);
  }
  return cost;
}

PoseGraphResult pose_graph_optimize(const std::map<uint64_t, Pose>& nodes,
                                    const std::vector<PoseGraphEdge>& edges,
                                    const std::set<uint64_t>& fixed, const LmConfig& config,
                                    IterationLog* log) {
  config.validate();
  check_inputs(nodes, edges, fixed);

  PoseGraphResult result;
  result.poses = nodes;
  result.status = SolveStatus::Converged;

  // Variable layout: 6 parameters per free node, ordered by node id.
  std::map<uint64_t, int> slot;
  for (const auto& [id, pose] : nodes) {
    if (!fixed.count(id)) {
      const int s = static_cast<int>(slot.size());
      slot[id] = s;
    }
  }
  const int n = static_cast<int>(slot.size());
  if (n == 0) {
    result.final_cost = pose_graph_cost(result.poses, edges);
    return result;
  }

  // Central-difference Jacobian of an edge residual w.r.t. a left-multiplied
  // twist perturbation of one endpoint.
  constexpr double kStep = 1e-6;
  auto numeric_jacobian = [&](const PoseGraphEdge& e, bool wrt_from) {
    Matrix6d J;
    const Pose& T_from = result.poses.at(e.from);
    const Pose& T_to = result.poses.at(e.to);
    for (int k = 0; k < 6; ++k) {
      Vector6d d = Vector6d::Zero();
      d(k) = kStep;
      const Pose plus = se3_exp(Twist::FromStacked(d));
      d(k) = -kStep;
      const Pose minus = se3_exp(Twist::FromStacked(d));
      Vector6d rp, rm;
      if (wrt_from) {
        rp = edge_residual(plus * T_from, T_to, e.relative);
        rm = edge_residual(minus * T_from, T_to, e.relative);
      } else {
        rp = edge_residual(T_from, plus * T_to, e.relative);
        rm = edge_residual(T_from, minus * T_to, e.relative);
      }
      J.col(k) = (rp - rm) / (2.0 * kStep);
    }
    return J;
  };

  double cost = pose_graph_cost(result.poses, edges);
  double lambda = -1.0;
  result.status = SolveStatus::MaxIterations;

  for (int it = 0; it < config.max_iterations; ++it) {
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(6 * n, 6 * n);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(6 * n);

    for (const auto& e : edges) {
      const int sf = fixed.count(e.from) ? -1 : slot.at(e.from);
      const int st = fixed.count(e.to) ? -1 : slot.at(e.to);
      if (sf < 0 && st < 0) continue;
      const Vector6d r = edge_residual(result.poses.at(e.from), result.poses.at(e.to), e.relative);
      Matrix6d Jf, Jt;
      if (sf >= 0) Jf = numeric_jacobian(e, true);
      if (st >= 0) Jt = numeric_jacobian(e, false);
      if (sf >= 0) {
        H.block<6, 6>(6 * sf, 6 * sf).noalias() += Jf.transpose() * e.information * Jf;
        g.segment<6>(6 * sf).noalias() += Jf.transpose() * e.information * r;
      }
      if (st >= 0) {
        H.block<6, 6>(6 * st, 6 * st).noalias() += Jt.transpose() * e.information * Jt;
        g.segment<6>(6 * st).noalias() += Jt.transpose() * e.information * r;
      }
      if (sf >= 0 && st >= 0) {
        const Matrix6d Hft = Jf.transpose() * e.information * Jt;
        H.block<6, 6>(6 * sf, 6 * st).noalias() += Hft;
        H.block<6, 6>(6 * st, 6 * sf).noalias() += Hft.transpose();
      }
    }

    if (g.cwiseAbs().maxCoeff() < config.gradient_tol) {
      result.status = SolveStatus::Converged;
      break;
    }
    if (lambda < 0.0) {
      lambda = config.initial_lambda_scale * std::max(H.diagonal().maxCoeff(), 1e-12);
    }

    bool stepped = false;
    bool converged = false;
    while (lambda <= config.lambda_max) {
      Eigen::MatrixXd Hd = H;
      Hd.diagonal().array() += lambda;
      const Eigen::VectorXd delta = Hd.ldlt().solve(-g);
      if (delta.allFinite()) {
        std::map<uint64_t, Pose> candidate = result.poses;
        for (const auto& [id, s] : slot) {
          candidate[id] = se3_exp(Twist::FromStacked(delta.segment<6>(6 * s))) * candidate[id];
        }
        const double new_cost = pose_graph_cost(candidate, edges);
        if (new_cost < cost) {
          const double rel = (cost - new_cost) / std::max(cost, 1e-300);
          result.poses = std::move(candidate);
          cost = new_cost;
          lambda = std::max(lambda * 0.5, 1e-18);
          stepped = true;
          if (log) log->push_back({it, cost, lambda, true});
          converged = rel < config.rel_decrease_tol;
          break;
        }
        if (log) log->push_back({it, new_cost, lambda, false});
      }
      lambda *= 10.0;
    }
    if (converged) {
      result.status = SolveStatus::Converged;
      break;
    }
    if (!stepped) {
      result.status = lambda > config.lambda_max * 10.0 ? SolveStatus::Diverged
                                                        : SolveStatus::Converged;
      break;
    }
  }

  result.final_cost = cost;
  return result;
}

}  // namespace kslam
