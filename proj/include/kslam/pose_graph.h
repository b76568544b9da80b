#ifndef KSLAM_POSE_GRAPH_H
#define KSLAM_POSE_GRAPH_H

#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "kslam/lm.h"
#include "kslam/se3.h"

namespace kslam {

/// Relative rigid-body constraint between two keyframes. The residual is
/// se3_log(relative^-1 * T_from^-1 * T_to), weighted by the information
/// matrix.
struct PoseGraphEdge {
  uint64_t from = 0;
  uint64_t to = 0;
  Pose relative;  // measured T_from^-1 * T_to
  Matrix6d information = Matrix6d::Identity();
};

struct PoseGraphResult {
  std::map<uint64_t, Pose> poses;
  SolveStatus status = SolveStatus::Converged;
  double final_cost = 0.0;
};

/// Total squared residual of a pose-graph configuration.
double pose_graph_cost(const std::map<uint64_t, Pose>& nodes,
                       const std::vector<PoseGraphEdge>& edges);

/// Levenberg-Marquardt over the pose graph with the listed nodes held fixed.
/// Requires at least one fixed node and a connected graph; throws
/// std::invalid_argument otherwise.
PoseGraphResult pose_graph_optimize(const std::map<uint64_t, Pose>& nodes,
                                    const std::vector<PoseGraphEdge>& edges,
                                    const std::set<uint64_t>& fixed, const LmConfig& config = {},
                                    IterationLog* log = nullptr);

}  // namespace kslam

#endif
