#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hnet/tensor.hpp"

namespace hnet {

/// A differentiable map with its vector-Jacobian product. `vjp` returns one
/// cotangent per input; an undefined (default) tensor marks an input as
/// non-differentiable and it is skipped by gradcheck.
struct DiffOp {
  std::string name;
  std::function<Tensor(const std::vector<Tensor>&)> forward;
  std::function<std::vector<Tensor>(const std::vector<Tensor>&, const Tensor&)> vjp;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t entries_checked = 0;
  // Entries that failed at `step` and were re-checked at step / 10 (only when
  // refine_tol > 0), and the worst error once those entries use the smaller step.
  std::size_t refined_entries = 0;
  double max_rel_error_refined = 0.0;
};

/// Compares the VJP against central differences of the scalar <r, forward(x)>
/// with a fixed random cotangent r.
///
/// Per entry the error is |a - n| / max(|a|, |n|, floor), where floor is 1e-3
/// of the largest gradient magnitude over all inputs (and at least 1e-8), so
/// entries whose gradient is negligible are judged on an absolute scale
/// instead of amplifying finite-difference noise.
///
/// With refine_tol > 0, entries whose error exceeds refine_tol are evaluated
/// again at step / 10. A central difference whose interval straddles a
/// non-differentiable point (ReLU, |x|) converges to the analytic value as the
/// step shrinks; a wrong VJP does not.
inline GradcheckResult gradcheck(const DiffOp& op, std::vector<Tensor> inputs, double step = 1e-5,
                                 std::uint64_t seed = 0x5eed, double refine_tol = 0.0) {
  const Tensor out = op.forward(inputs);
  Rng rng(seed);
  const Tensor r = rng.uniform_tensor(out.shape(), -1.0, 1.0);
  const std::vector<Tensor> analytic = op.vjp(inputs, r);

  auto scalar = [&](const std::vector<Tensor>& in) {
    const Tensor y = op.forward(in);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y[i];
    return s;
  };

  auto central = [&](std::size_t t, std::size_t i, double h) {
    const double saved = inputs[t][i];
    inputs[t][i] = saved + h;
    const double fp = scalar(inputs);
    inputs[t][i] = saved - h;
    const double fm = scalar(inputs);
    inputs[t][i] = saved;
    return (fp - fm) / (2.0 * h);
  };

  std::vector<std::vector<double>> numeric(inputs.size());
  double scale = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (t >= analytic.size() || !analytic[t].defined()) continue;
    if (analytic[t].shape() != inputs[t].shape()) {
      throw ShapeError(op.name + ": vjp shape " + shape_str(analytic[t].shape()) +
                       " differs from input shape " + shape_str(inputs[t].shape()));
    }
    numeric[t].resize(inputs[t].size());
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      numeric[t][i] = central(t, i, step);
      scale = std::max({scale, std::abs(numeric[t][i]), std::abs(analytic[t][i])});
    }
  }
  const double floor = std::max(1e-3 * scale, 1e-8);

  auto rel = [floor](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}); };

  GradcheckResult res;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < numeric[t].size(); ++i) {
      const double a = analytic[t][i], n = numeric[t][i];
      const double err = rel(a, n);
      ++res.entries_checked;
      if (err > res.max_rel_error || !std::isfinite(err)) {
        res.max_rel_error = std::isfinite(err) ? err : INFINITY;
        res.worst_input = t;
        res.worst_index = i;
        res.analytic = a;
        res.numeric = n;
      }
      double kept = err;
      if (refine_tol > 0.0 && !(err < refine_tol)) {
        ++res.refined_entries;
        kept = rel(a, central(t, i, step / 10.0));
      }
      res.max_rel_error_refined = std::max(res.max_rel_error_refined, std::isfinite(kept) ? kept : INFINITY);
    }
  }
  return res;
}

}  // namespace hnet
