#ifndef KSLAM_ROBUST_H
#define KSLAM_ROBUST_H

#include <cmath>
#include <stdexcept>

namespace kslam {

// 95% chi-square quantiles, used both as Huber thresholds (delta^2) and as
// inlier cutoffs on whitened squared residuals.
inline constexpr double kChi2Mono = 5.991;    // 2 DoF
inline constexpr double kChi2Stereo = 7.815;  // 3 DoF

struct HuberKernel {
  double delta = 1.0;

  explicit HuberKernel(double d) : delta(d) {
    if (!(d > 0.0)) throw std::invalid_argument("HuberKernel: delta must be positive");
  }

  /// Robust cost of a squared (whitened) residual: r2 in the quadratic
  /// branch, 2*delta*sqrt(r2) - delta^2 beyond it. C1-continuous at delta^2.
  double cost(double r2) const {
    const double d2 = delta * delta;
    if (r2 <= d2) return r2;
    return 2.0 * delta * std::sqrt(r2) - d2;
  }

  /// d cost / d r2; the IRLS weight applied to the normal equations.
  double weight(double r2) const {
    const double d2 = delta * delta;
    if (r2 <= d2) return 1.0;
    return delta / std::sqrt(r2);
  }
};

inline double huber_cost(double r2, double delta) { return HuberKernel(delta).cost(r2); }

}  // namespace kslam

#endif
