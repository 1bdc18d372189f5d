#pragma once

#include <cmath>
#include <string>

#include "hnet/kv.hpp"
#include "hnet/tensor.hpp"

namespace hnet {

/// Depth accuracy over pixels with 0 < gt <= cap. No median scaling.
struct MetricsReport {
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double rmse = 0.0;
  double rmse_log = 0.0;
  double delta1 = 0.0, delta2 = 0.0, delta3 = 0.0;  // fraction with max(p/g, g/p) < 1.25^k
  std::size_t n_valid = 0;

  static std::string csv_header() { return "abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3,n_valid"; }

  std::string csv_row() const {
    std::string s;
    for (double v : {abs_rel, sq_rel, rmse, rmse_log, delta1, delta2, delta3}) s += KvDoc::format_double(v) + ",";
    return s + std::to_string(n_valid);
  }
};

inline MetricsReport compute_metrics(const Tensor& pred, const Tensor& gt, double cap = 80.0) {
  require_same_shape(pred, gt, "compute_metrics");
  if (!(cap > 0.0)) throw ValidationError("compute_metrics: cap must be > 0");
  MetricsReport r;
  double abs_rel = 0, sq_rel = 0, se = 0, sle = 0;
  std::size_t d1 = 0, d2 = 0, d3 = 0;
  for (std::size_t q = 0; q < gt.size(); ++q) {
    const double g = gt[q];
    if (!(g > 0.0 && g <= cap)) continue;
    const double p = pred[q];
    if (!(p > 0.0) || !std::isfinite(p)) {
      throw ValidationError("compute_metrics: prediction " + std::to_string(p) + " at index " +
                            std::to_string(q) + " is not positive");
    }
    const double e = p - g, le = std::log(p) - std::log(g);
    abs_rel += std::abs(e) / g;
    sq_rel += e * e / g;
    se += e * e;
    sle += le * le;
    const double ratio = std::max(p / g, g / p);
    d1 += ratio < 1.25;
    d2 += ratio < 1.25 * 1.25;
    d3 += ratio < 1.25 * 1.25 * 1.25;
    ++r.n_valid;
  }
  if (r.n_valid == 0) throw ValidationError("compute_metrics: no pixel has 0 < gt <= cap");
  const double n = static_cast<double>(r.n_valid);
  r.abs_rel = abs_rel / n;
  r.sq_rel = sq_rel / n;
  r.rmse = std::sqrt(se / n);
  r.rmse_log = std::sqrt(sle / n);
  r.delta1 = static_cast<double>(d1) / n;
  r.delta2 = static_cast<double>(d2) / n;
  r.delta3 = static_cast<double>(d3) / n;
  return r;
}

}  // namespace hnet
