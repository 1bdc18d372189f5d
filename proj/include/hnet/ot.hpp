#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "hnet/ops.hpp"

namespace hnet {

/// Entropic regularisation settings. The solver minimises <M, C> + ε Σ M log M.
struct SinkhornConfig {
  double epsilon = 0.05;
  std::size_t max_iters = 100;
  double tol = 1e-6;

  void validate() const {
    if (!(epsilon > 0.0)) throw ValidationError("SinkhornConfig: epsilon must be > 0");
    if (!(tol > 0.0)) throw ValidationError("SinkhornConfig: tol must be > 0");
    if (max_iters < 1) throw ValidationError("SinkhornConfig: max_iters must be >= 1");
  }
};

/// Per-row transported mass U: [h, w], each row nonnegative and summing to 1.
struct Marginals {
  Tensor values;
};

/// M[i, j, k]: mass moved from position j of input 1 to position k of input 2
/// on row i.
struct MatchingMatrix {
  Tensor values;
  std::size_t iterations = 0;   // largest executed iteration count over rows
  double row_residual = 0.0;    // max |Σ_k M - U¹|
  double col_residual = 0.0;    // max |Σ_j M - U²|
  bool converged = false;       // every row reached row_residual <= tol
};

/// Convolutions of the OT retrieval: sim_* feed the cosine cost, mass_* the
/// transported-mass estimate. EG retrieval uses sim_* only.
struct RetrievalParams {
  Conv1x1 sim_1, sim_2;
  Conv1x1 mass_1, mass_2;
};

// ---------------------------------------------------------------------------
// Sinkhorn in the log domain
// ---------------------------------------------------------------------------

/// Potentials of every executed iteration, kept for the unrolled backward pass.
/// Stored divided by ε: phi[row][t * n + j], gamma[row][t * m + k], t = 0..T-1.
struct SinkhornTrace {
  std::vector<std::vector<double>> phi, gamma;
  std::vector<std::size_t> iterations;
};

struct SinkhornSolution {
  MatchingMatrix matching;
  SinkhornTrace trace;
};

namespace detail {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log Σ exp(v_i), tolerant of -inf entries.
inline double log_sum_exp(const double* v, std::size_t n, std::size_t stride = 1) {
  double mx = kNegInf;
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, v[i * stride]);
  if (mx == kNegInf) return kNegInf;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i * stride] - mx);
  return mx + std::log(s);
}

inline void check_marginal_rows(const Tensor& u, std::size_t h, std::size_t n, const char* which) {
  if (u.shape() != Shape{h, n}) {
    throw ShapeError(std::string("sinkhorn_solve: marginal ") + which + " has shape " +
                     shape_str(u.shape()) + ", expected " + shape_str({h, n}));
  }
  for (std::size_t i = 0; i < h; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = u.at(i, j);
      if (!(v >= 0.0)) {
        throw ValidationError(std::string("sinkhorn_solve: marginal ") + which +
                              " has a negative or non-finite entry in row " + std::to_string(i));
      }
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw ValidationError(std::string("sinkhorn_solve: marginal ") + which + " row " +
                            std::to_string(i) + " sums to " + std::to_string(s) + ", not 1");
    }
  }
}

}  // namespace detail

/// Solves each row of cost [h, n, m] independently against row marginals
/// mu [h, n] and column marginals nu [h, m]. Every iteration updates the row
/// potential and then the column potential, so the column marginal holds to
/// rounding at exit; iteration stops once the row residual is <= tol.
inline SinkhornSolution sinkhorn_solve_traced(const Tensor& cost, const Marginals& mu,
                                              const Marginals& nu, const SinkhornConfig& cfg) {
  cfg.validate();
  require_rank(cost, 3, "sinkhorn_solve");
  const std::size_t h = cost.dim(0), n = cost.dim(1), m = cost.dim(2);
  detail::check_marginal_rows(mu.values, h, n, "mu");
  detail::check_marginal_rows(nu.values, h, m, "nu");
  if (!cost.all_finite()) throw ValidationError("sinkhorn_solve: cost has non-finite entries");

  const double inv_eps = 1.0 / cfg.epsilon;
  SinkhornSolution sol;
  sol.matching.values = Tensor({h, n, m});
  sol.trace.phi.resize(h);
  sol.trace.gamma.resize(h);
  sol.trace.iterations.assign(h, 0);
  sol.matching.converged = true;

  std::vector<double> ce(n * m), ce_t(m * n), loga(n), logb(m);
  std::vector<double> phi(n), gamma(m), lse(n), buf(std::max(n, m));

  for (std::size_t row = 0; row < h; ++row) {
    const double* c = cost.ptr() + row * n * m;
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < m; ++k) {
        ce[j * m + k] = c[j * m + k] * inv_eps;
        ce_t[k * n + j] = ce[j * m + k];
      }
    for (std::size_t j = 0; j < n; ++j) loga[j] = std::log(mu.values.at(row, j));
    for (std::size_t k = 0; k < m; ++k) logb[k] = std::log(nu.values.at(row, k));
    std::fill(gamma.begin(), gamma.end(), 0.0);
    auto& phi_hist = sol.trace.phi[row];
    auto& gamma_hist = sol.trace.gamma[row];

    double residual = INFINITY;
    std::size_t t = 0;
    for (;; ++t) {
      // lse_j = log Σ_k exp(γ_k - C_jk/ε); the row sum of the current plan is exp(φ_j + lse_j).
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < m; ++k) buf[k] = gamma[k] - ce[j * m + k];
        lse[j] = detail::log_sum_exp(buf.data(), m);
      }
      if (t > 0) {
        residual = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          residual = std::max(residual, std::abs(std::exp(phi[j] + lse[j]) - mu.values.at(row, j)));
        if (residual <= cfg.tol) break;
      }
      if (t == cfg.max_iters) break;
      for (std::size_t j = 0; j < n; ++j) phi[j] = loga[j] - lse[j];
      for (std::size_t k = 0; k < m; ++k) {
        for (std::size_t j = 0; j < n; ++j) buf[j] = phi[j] - ce_t[k * n + j];
        gamma[k] = logb[k] - detail::log_sum_exp(buf.data(), n);
      }
      for (double v : phi)
        if (std::isnan(v) || v == INFINITY)
          throw NumericalError("sinkhorn_solve: row potential diverged in row " + std::to_string(row));
      for (double v : gamma)
        if (std::isnan(v) || v == INFINITY)
          throw NumericalError("sinkhorn_solve: column potential diverged in row " +
                               std::to_string(row));
      phi_hist.insert(phi_hist.end(), phi.begin(), phi.end());
      gamma_hist.insert(gamma_hist.end(), gamma.begin(), gamma.end());
    }
    sol.trace.iterations[row] = t;
    sol.matching.iterations = std::max(sol.matching.iterations, t);
    if (!(residual <= cfg.tol)) sol.matching.converged = false;

    double* out = sol.matching.values.ptr() + row * n * m;
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < m; ++k) out[j * m + k] = std::exp(phi[j] + gamma[k] - ce[j * m + k]);
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < m; ++k) s += out[j * m + k];
      sol.matching.row_residual = std::max(sol.matching.row_residual, std::abs(s - mu.values.at(row, j)));
    }
    for (std::size_t k = 0; k < m; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += out[j * m + k];
      sol.matching.col_residual = std::max(sol.matching.col_residual, std::abs(s - nu.values.at(row, k)));
    }
  }
  return sol;
}

inline MatchingMatrix sinkhorn_solve(const Tensor& cost, const Marginals& mu, const Marginals& nu,
                                     const SinkhornConfig& cfg) {
  return sinkhorn_solve_traced(cost, mu, nu, cfg).matching;
}

struct SinkhornGrad {
  Tensor dcost;
  Tensor dmu;
  Tensor dnu;
};

/// Reverse pass through the executed iterations. Zero-mass positions carry a
/// -inf potential and receive zero gradient.
inline SinkhornGrad sinkhorn_vjp(const Tensor& cost, const Marginals& mu, const Marginals& nu,
                                 const SinkhornConfig& cfg, const SinkhornSolution& sol,
                                 const Tensor& dplan) {
  const std::size_t h = cost.dim(0), n = cost.dim(1), m = cost.dim(2);
  require_same_shape(cost, dplan, "sinkhorn_vjp");
  const double inv_eps = 1.0 / cfg.epsilon;
  SinkhornGrad g{Tensor(cost.shape()), Tensor({h, n}), Tensor({h, m})};

  std::vector<double> ce(n * m), loga(n), logb(m), dce(n * m);
  std::vector<double> dphi(n), dgamma(m), dloga(n), dlogb(m);

  for (std::size_t row = 0; row < h; ++row) {
    const double* c = cost.ptr() + row * n * m;
    const double* gm = dplan.ptr() + row * n * m;
    const double* plan = sol.matching.values.ptr() + row * n * m;
    for (std::size_t q = 0; q < n * m; ++q) ce[q] = c[q] * inv_eps;
    for (std::size_t j = 0; j < n; ++j) loga[j] = std::log(mu.values.at(row, j));
    for (std::size_t k = 0; k < m; ++k) logb[k] = std::log(nu.values.at(row, k));
    std::fill(dce.begin(), dce.end(), 0.0);
    std::fill(dphi.begin(), dphi.end(), 0.0);
    std::fill(dgamma.begin(), dgamma.end(), 0.0);
    std::fill(dloga.begin(), dloga.end(), 0.0);
    std::fill(dlogb.begin(), dlogb.end(), 0.0);

    // plan = exp(φ_j + γ_k - C_jk/ε)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < m; ++k) {
        const double v = gm[j * m + k] * plan[j * m + k];
        dphi[j] += v;
        dgamma[k] += v;
        dce[j * m + k] -= v;
      }

    const std::size_t iters = sol.trace.iterations[row];
    const auto& ph = sol.trace.phi[row];
    const auto& ga = sol.trace.gamma[row];
    for (std::size_t t = iters; t-- > 0;) {
      const double* phi = ph.data() + t * n;
      const double* gam = ga.data() + t * m;
      // γ_k = log b_k - LSE_j(φ_j - C_jk/ε); softmax weights P_jk = exp(φ_j + γ_k - C_jk/ε - log b_k).
      for (std::size_t k = 0; k < m; ++k) {
        if (logb[k] == detail::kNegInf) continue;
        dlogb[k] += dgamma[k];
        for (std::size_t j = 0; j < n; ++j) {
          if (loga[j] == detail::kNegInf) continue;
          const double p = std::exp(phi[j] + gam[k] - ce[j * m + k] - logb[k]);
          dphi[j] -= dgamma[k] * p;
          dce[j * m + k] += dgamma[k] * p;
        }
      }
      // φ_j = log a_j - LSE_k(γ'_k - C_jk/ε) with γ' the previous column potential.
      std::fill(dgamma.begin(), dgamma.end(), 0.0);
      const double* prev = t > 0 ? ga.data() + (t - 1) * m : nullptr;
      for (std::size_t j = 0; j < n; ++j) {
        if (loga[j] == detail::kNegInf) continue;
        dloga[j] += dphi[j];
        for (std::size_t k = 0; k < m; ++k) {
          if (logb[k] == detail::kNegInf && prev) continue;
          const double gp = prev ? prev[k] : 0.0;
          const double q = std::exp(phi[j] + gp - ce[j * m + k] - loga[j]);
          dgamma[k] -= dphi[j] * q;
          dce[j * m + k] += dphi[j] * q;
        }
      }
      std::fill(dphi.begin(), dphi.end(), 0.0);
    }

    for (std::size_t q = 0; q < n * m; ++q) g.dcost[row * n * m + q] = dce[q] * inv_eps;
    for (std::size_t j = 0; j < n; ++j) {
      const double a = mu.values.at(row, j);
      g.dmu.at(row, j) = a > 0.0 ? dloga[j] / a : 0.0;
    }
    for (std::size_t k = 0; k < m; ++k) {
      const double b = nu.values.at(row, k);
      g.dnu.at(row, k) = b > 0.0 ? dlogb[k] / b : 0.0;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// exact oracle for uniform marginals
// ---------------------------------------------------------------------------

struct TransportPlan {
  Tensor plan;       // [w, w]
  double objective;  // <plan, cost>
  std::vector<std::size_t> permutation;
};

/// With uniform marginals 1/w the optimal plans include a scaled permutation
/// matrix (Birkhoff), so enumerating all w! permutations is exact.
inline TransportPlan exact_transport_oracle(const Tensor& cost) {
  require_rank(cost, 2, "exact_transport_oracle");
  const std::size_t w = cost.dim(0);
  if (cost.dim(1) != w) throw ShapeError("exact_transport_oracle: cost must be square");
  if (w > 6) throw ValidationError("exact_transport_oracle: w > 6 is not supported (w! blow-up)");
  std::vector<std::size_t> perm(w), best;
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best_obj = INFINITY;
  do {
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j) s += cost.at(j, perm[j]);
    if (s < best_obj) {
      best_obj = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  TransportPlan out{Tensor({w, w}), best_obj / static_cast<double>(w), best};
  for (std::size_t j = 0; j < w; ++j) out.plan.at(j, best[j]) = 1.0 / static_cast<double>(w);
  return out;
}

// ---------------------------------------------------------------------------
// OT retrieval: cost from normalised features, mass, Sinkhorn
// ---------------------------------------------------------------------------

namespace detail {

/// G[i, j, k] = Σ_c A[c, i, j] B[c, i, k] for A, B in [c, h, w] layout.
inline Tensor row_gram(const Tensor& a, const Tensor& b) {
  const Tensor at = swap_leading_axes(a);  // [h, c, w]
  const Tensor bt = swap_leading_axes(b);
  const std::size_t h = at.dim(0), c = at.dim(1), w1 = at.dim(2), w2 = bt.dim(2);
  Tensor g({h, w1, w2});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* ar = at.ptr() + (i * c + ch) * w1;
      const double* br = bt.ptr() + (i * c + ch) * w2;
      double* gr = g.ptr() + i * w1 * w2;
      for (std::size_t j = 0; j < w1; ++j) {
        const double av = ar[j];
        for (std::size_t k = 0; k < w2; ++k) gr[j * w2 + k] += av * br[k];
      }
    }
  return g;
}

inline std::pair<Tensor, Tensor> row_gram_vjp(const Tensor& a, const Tensor& b, const Tensor& dg) {
  const std::size_t c = a.dim(0), h = a.dim(1), w1 = a.dim(2), w2 = b.dim(2);
  Tensor da(a.shape()), db(b.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i) {
      const double* ar = a.ptr() + (ch * h + i) * w1;
      const double* br = b.ptr() + (ch * h + i) * w2;
      double* dar = da.ptr() + (ch * h + i) * w1;
      double* dbr = db.ptr() + (ch * h + i) * w2;
      const double* gr = dg.ptr() + i * w1 * w2;
      for (std::size_t j = 0; j < w1; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < w2; ++k) {
          s += gr[j * w2 + k] * br[k];
          dbr[k] += gr[j * w2 + k] * ar[j];
        }
        dar[j] = s;
      }
    }
  return {std::move(da), std::move(db)};
}

inline void require_pair(const Tensor& x1, const Tensor& x2, const char* op) {
  require_rank(x1, 3, op);
  require_same_shape(x1, x2, op);
}

}  // namespace detail

/// Intermediates of one retrieval, for the backward pass.
struct CostCache {
  Tensor x1c, x2c;  // inputs in [c, h, w]
  Tensor z1, z2;    // conv outputs
  Tensor n1, n2;    // channel-normalised
  Tensor cost;      // [h, w, w]
};

inline CostCache build_cost_cached(const Tensor& x1, const Tensor& x2, const RetrievalParams& p) {
  detail::require_pair(x1, x2, "build_cost");
  CostCache cc;
  cc.x1c = swap_leading_axes(x1);
  cc.x2c = swap_leading_axes(x2);
  cc.z1 = conv1x1(cc.x1c, p.sim_1);
  cc.z2 = conv1x1(cc.x2c, p.sim_2);
  cc.n1 = normalize(cc.z1, 0, NormMode::euclidean);
  cc.n2 = normalize(cc.z2, 0, NormMode::euclidean);
  cc.cost = detail::row_gram(cc.n1, cc.n2);
  for (double& v : cc.cost.data()) v = std::exp(1.0 - v);
  return cc;
}

/// C[i, j, k] = exp(1 - <x̂¹_ij, x̂²_ik>) for unit-normalised conv features, X in [h, c, w].
inline Tensor build_cost(const Tensor& x1, const Tensor& x2, const RetrievalParams& p) {
  return build_cost_cached(x1, x2, p).cost;
}

struct MassCache {
  Tensor xc;     // [c, h, w]
  Tensor pre;    // conv output [1, h, w]
  Tensor act;    // relu, [h, w]
  Marginals mass;
};

inline MassCache compute_mass_cached(const Tensor& x, const Conv1x1& conv_mass) {
  require_rank(x, 3, "compute_mass");
  if (!conv_mass.weight.defined() || conv_mass.weight.dim(0) != 1) {
    throw ShapeError("compute_mass: mass convolution must produce exactly one channel");
  }
  MassCache mc;
  mc.xc = swap_leading_axes(x);
  mc.pre = conv1x1(mc.xc, conv_mass);
  mc.act = relu(mc.pre).reshaped({x.dim(0), x.dim(2)});
  mc.mass.values = normalize(mc.act, 1, NormMode::l1);
  return mc;
}

/// U = l1-normalise(relu(conv(X))) along w for every row; X in [h, c, w].
inline Marginals compute_mass(const Tensor& x, const Conv1x1& conv_mass) {
  return compute_mass_cached(x, conv_mass).mass;
}

struct OtRetrieveCache {
  CostCache cost;
  MassCache mass1, mass2;
  SinkhornSolution solution;
};

inline OtRetrieveCache ot_retrieve_cached(const Tensor& x1, const Tensor& x2,
                                          const RetrievalParams& p, const SinkhornConfig& cfg) {
  OtRetrieveCache oc;
  oc.cost = build_cost_cached(x1, x2, p);
  oc.mass1 = compute_mass_cached(x1, p.mass_1);
  oc.mass2 = compute_mass_cached(x2, p.mass_2);
  oc.solution = sinkhorn_solve_traced(oc.cost.cost, oc.mass1.mass, oc.mass2.mass, cfg);
  return oc;
}

/// Row-wise entropic OT matching between X1 and X2 (both [h, c, w]).
inline MatchingMatrix ot_retrieve(const Tensor& x1, const Tensor& x2, const RetrievalParams& p,
                                  const SinkhornConfig& cfg) {
  return ot_retrieve_cached(x1, x2, p, cfg).solution.matching;
}

struct RetrievalGrad {
  Tensor dx1, dx2;  // [h, c, w]
  RetrievalParams dparams;
};

namespace detail {
inline void add_conv_grad(Conv1x1& dst, const Conv1x1Grad& g) {
  accumulate(dst.weight, g.dw);
  accumulate(dst.bias, g.dbias);
}

/// Backward through the mass branch; returns dX in [c, h, w].
inline Tensor mass_vjp(const MassCache& mc, const Conv1x1& conv, const Tensor& dmass, Conv1x1& dconv) {
  const Tensor dact = normalize_vjp(mc.act, mc.mass.values, dmass, 1, NormMode::l1);
  const Tensor dpre = relu_vjp(mc.pre, dact.reshaped(mc.pre.shape()));
  auto g = conv1x1_vjp(mc.xc, conv.weight, dpre);
  add_conv_grad(dconv, g);
  return std::move(g.dx);
}

/// Backward from d(cost) to the inputs in [c, h, w] layout.
inline std::pair<Tensor, Tensor> cost_vjp(const CostCache& cc, const RetrievalParams& p,
                                          const Tensor& dcost, RetrievalParams& dp) {
  Tensor dsim(dcost.shape());
  for (std::size_t q = 0; q < dsim.size(); ++q) dsim[q] = -dcost[q] * cc.cost[q];
  auto [dn1, dn2] = row_gram_vjp(cc.n1, cc.n2, dsim);
  const Tensor dz1 = normalize_vjp(cc.z1, cc.n1, dn1, 0, NormMode::euclidean);
  const Tensor dz2 = normalize_vjp(cc.z2, cc.n2, dn2, 0, NormMode::euclidean);
  auto g1 = conv1x1_vjp(cc.x1c, p.sim_1.weight, dz1);
  auto g2 = conv1x1_vjp(cc.x2c, p.sim_2.weight, dz2);
  add_conv_grad(dp.sim_1, g1);
  add_conv_grad(dp.sim_2, g2);
  return {std::move(g1.dx), std::move(g2.dx)};
}
}  // namespace detail

inline RetrievalGrad ot_retrieve_vjp(const OtRetrieveCache& oc, const RetrievalParams& p,
                                     const SinkhornConfig& cfg, const Tensor& dplan) {
  RetrievalGrad g;
  const auto sg = sinkhorn_vjp(oc.cost.cost, oc.mass1.mass, oc.mass2.mass, cfg, oc.solution, dplan);
  auto [dx1c, dx2c] = detail::cost_vjp(oc.cost, p, sg.dcost, g.dparams);
  accumulate(dx1c, detail::mass_vjp(oc.mass1, p.mass_1, sg.dmu, g.dparams.mass_1));
  accumulate(dx2c, detail::mass_vjp(oc.mass2, p.mass_2, sg.dnu, g.dparams.mass_2));
  g.dx1 = swap_leading_axes(dx1c);
  g.dx2 = swap_leading_axes(dx2c);
  return g;
}

}  // namespace hnet
