#ifndef KSLAM_LM_H
#define KSLAM_LM_H

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace kslam {

struct LmConfig {
  int max_iterations = 10;
  double initial_lambda_scale = 1e-4;  // lambda0 = scale * max diagonal of H
  double gradient_tol = 1e-8;          // terminate on ||g||_inf below this
  double rel_decrease_tol = 1e-12;     // terminate on relative cost decrease below this
  double lambda_max = 1e12;            // divergence once lambda exceeds this

  void validate() const {
    if (max_iterations <= 0 || !(initial_lambda_scale > 0.0) || !(gradient_tol > 0.0) ||
        !(rel_decrease_tol > 0.0) || !(lambda_max > 0.0)) {
      throw std::invalid_argument("LmConfig: all fields must be positive");
    }
  }
};

enum class SolveStatus : uint8_t { Converged, MaxIterations, Aborted, Diverged };

/// One accepted-or-rejected LM iteration, for convergence reports.
struct IterationRecord {
  int iteration = 0;
  double cost = 0.0;
  double lambda = 0.0;
  bool accepted = true;
};

using IterationLog = std::vector<IterationRecord>;

}  // namespace kslam

#endif
