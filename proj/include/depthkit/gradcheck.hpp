#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "depthkit/tensor.hpp"

namespace depthkit {

struct GradCheckEntry {
  int64_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
  bool unreliable = false;  // curvature score suggests a kink near the probe
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0;   // over reliable entries only
  int64_t worst_index = -1;
  int64_t unreliable_count = 0;
  bool pass(double tol) const { return max_rel_err <= tol; }
};

/// Central-difference check of an analytic gradient. `f` evaluates the scalar
/// function at the perturbed parameter vector; `analytic` is d f / d theta at
/// `theta`. Probes every coordinate in `indices` (all coordinates if empty).
///
/// Entries where the second difference |f(x+e) - 2 f(x) + f(x-e)| is large
/// relative to eps are flagged unreliable (the finite difference straddles a
/// kink) and excluded from max_rel_err.
template <typename S>
GradCheckReport grad_check(const std::function<double(const Tensor<S>&)>& f,
                           const Tensor<S>& theta, const Tensor<S>& analytic,
                           double eps = 1e-5,
                           std::vector<int64_t> indices = {}) {
  if (!theta.same_shape(analytic)) {
    throw ShapeError("grad_check: theta " + shape_str(theta.shape()) +
                     " vs analytic " + shape_str(analytic.shape()));
  }
  if (indices.empty()) {
    indices.resize(size_t(theta.numel()));
    for (int64_t i = 0; i < theta.numel(); ++i) indices[size_t(i)] = i;
  }
  double f0 = f(theta);
  GradCheckReport report;
  Tensor<S> probe = theta;
  for (int64_t idx : indices) {
    S keep = probe[idx];
    probe[idx] = keep + S(eps);
    double fp = f(probe);
    probe[idx] = keep - S(eps);
    double fm = f(probe);
    probe[idx] = keep;
    GradCheckEntry e;
    e.index = idx;
    e.analytic = double(analytic[idx]);
    e.numeric = (fp - fm) / (2.0 * eps);
    e.rel_err = std::abs(e.analytic - e.numeric) /
                std::max(1.0, std::abs(e.analytic));
    double curvature = std::abs(fp - 2.0 * f0 + fm) /
                       (2.0 * eps * std::max(1.0, std::abs(e.numeric)));
    e.unreliable = curvature > 0.01;
    if (e.unreliable) {
      ++report.unreliable_count;
    } else if (e.rel_err > report.max_rel_err) {
      report.max_rel_err = e.rel_err;
      report.worst_index = idx;
    }
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace depthkit
