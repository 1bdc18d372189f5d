#pragma once

#include <functional>
#include <string>
#include <utility>

#include "hnet/ot.hpp"

namespace hnet {

enum class AttentionMode { eg_mea, ot_mea, eg_mnl, ot_mnl };

inline bool uses_ot(AttentionMode m) { return m == AttentionMode::ot_mea || m == AttentionMode::ot_mnl; }
inline bool is_global(AttentionMode m) { return m == AttentionMode::eg_mnl || m == AttentionMode::ot_mnl; }

inline std::string to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::eg_mea: return "eg-mea";
    case AttentionMode::ot_mea: return "ot-mea";
    case AttentionMode::eg_mnl: return "eg-mnl";
    case AttentionMode::ot_mnl: return "ot-mnl";
  }
  return "?";
}

/// Weights of one mutual attention block. `retrieval.sim_*` are the query/key
/// projections (cosine-normalised in OT modes); `retrieval.mass_*` exist only
/// in OT modes. Both directions share every weight; only Φ's arguments swap.
struct AttentionParams {
  AttentionMode mode = AttentionMode::ot_mea;
  Conv1x1 value;
  RetrievalParams retrieval;

  std::size_t param_count() const {
    return value.param_count() + retrieval.sim_1.param_count() + retrieval.sim_2.param_count() +
           retrieval.mass_1.param_count() + retrieval.mass_2.param_count();
  }
};

// ---------------------------------------------------------------------------
// embedded-Gaussian retrieval
// ---------------------------------------------------------------------------

struct EgCache {
  Tensor x1c, x2c;  // [c, rows, len]
  Tensor a1, a2;    // projections
  Tensor plan;      // softmax output [rows, len, len]
};

inline EgCache eg_retrieve_cached(const Tensor& x1, const Tensor& x2, const RetrievalParams& p) {
  detail::require_pair(x1, x2, "eg_retrieve");
  EgCache ec;
  ec.x1c = swap_leading_axes(x1);
  ec.x2c = swap_leading_axes(x2);
  ec.a1 = conv1x1(ec.x1c, p.sim_1);
  ec.a2 = conv1x1(ec.x2c, p.sim_2);
  ec.plan = softmax_lastdim(detail::row_gram(ec.a1, ec.a2));
  return ec;
}

/// M[i] = softmax over k of C₁(X1)[i]ᵀ C₂(X2)[i]; X in [h, c, w].
inline MatchingMatrix eg_retrieve(const Tensor& x1, const Tensor& x2, const RetrievalParams& p) {
  MatchingMatrix mm;
  mm.values = eg_retrieve_cached(x1, x2, p).plan;
  mm.converged = true;
  return mm;
}

inline RetrievalGrad eg_retrieve_vjp(const EgCache& ec, const RetrievalParams& p, const Tensor& dplan) {
  RetrievalGrad g;
  const Tensor dlogits = softmax_lastdim_vjp(ec.plan, dplan);
  auto [da1, da2] = detail::row_gram_vjp(ec.a1, ec.a2, dlogits);
  auto g1 = conv1x1_vjp(ec.x1c, p.sim_1.weight, da1);
  auto g2 = conv1x1_vjp(ec.x2c, p.sim_2.weight, da2);
  detail::add_conv_grad(g.dparams.sim_1, g1);
  detail::add_conv_grad(g.dparams.sim_2, g2);
  g.dx1 = swap_leading_axes(g1.dx);
  g.dx2 = swap_leading_axes(g2.dx);
  return g;
}

// ---------------------------------------------------------------------------
// mode dispatch
// ---------------------------------------------------------------------------

struct RetrievalCache {
  bool ot = false;
  EgCache eg;
  OtRetrieveCache otc;

  const Tensor& plan() const { return ot ? otc.solution.matching.values : eg.plan; }
};

inline RetrievalCache retrieve_cached(const Tensor& x1, const Tensor& x2, const AttentionParams& p,
                                      const SinkhornConfig& cfg) {
  RetrievalCache rc;
  rc.ot = uses_ot(p.mode);
  if (rc.ot)
    rc.otc = ot_retrieve_cached(x1, x2, p.retrieval, cfg);
  else
    rc.eg = eg_retrieve_cached(x1, x2, p.retrieval);
  return rc;
}

inline RetrievalGrad retrieve_vjp(const RetrievalCache& rc, const AttentionParams& p,
                                  const SinkhornConfig& cfg, const Tensor& dplan) {
  return rc.ot ? ot_retrieve_vjp(rc.otc, p.retrieval, cfg, dplan)
               : eg_retrieve_vjp(rc.eg, p.retrieval, dplan);
}

// ---------------------------------------------------------------------------
// layouts: host [c, h, w]; attention [rows, c, len]
//   MEA: rows = h, len = w (one problem per epipolar line)
//   MNL: rows = 1, len = h·w (one global problem)
// ---------------------------------------------------------------------------

inline Tensor to_attention_layout(const Tensor& host, bool global) {
  if (global) return host.reshaped({1, host.dim(0), host.dim(1) * host.dim(2)});
  return swap_leading_axes(host);
}

inline Tensor from_attention_layout(const Tensor& a, const Shape& host_shape, bool global) {
  if (global) return a.reshaped(host_shape);
  return swap_leading_axes(a);
}

/// Global-range retrieval: flattens both [h, c, w] inputs to a single row of
/// length h·w and returns M of shape [1, hw, hw].
inline MatchingMatrix mnl_retrieve(const Tensor& x1, const Tensor& x2, const AttentionParams& p,
                                   const SinkhornConfig& cfg = {}) {
  detail::require_pair(x1, x2, "mnl_retrieve");
  const Tensor f1 = to_attention_layout(swap_leading_axes(x1), true);
  const Tensor f2 = to_attention_layout(swap_leading_axes(x2), true);
  if (uses_ot(p.mode)) return ot_retrieve(f1, f2, p.retrieval, cfg);
  return eg_retrieve(f1, f2, p.retrieval);
}

using RetrieveFn = std::function<Tensor(const Tensor&, const Tensor&)>;

/// Y^{l→r} = Ψ(X^l) ⊗ Φ(X^l, X^r), Y^{r→l} = Ψ(X^r) ⊗ Φ(X^r, X^l); all in [h, c, w].
inline std::pair<Tensor, Tensor> mea_apply(const Tensor& xl, const Tensor& xr, const Conv1x1& value,
                                           const RetrieveFn& retrieve) {
  detail::require_pair(xl, xr, "mea_apply");
  const Tensor vl = swap_leading_axes(conv1x1(swap_leading_axes(xl), value));
  const Tensor vr = swap_leading_axes(conv1x1(swap_leading_axes(xr), value));
  return {batched_matmul(vl, retrieve(xl, xr)), batched_matmul(vr, retrieve(xr, xl))};
}

inline std::pair<Tensor, Tensor> mea_apply(const Tensor& xl, const Tensor& xr,
                                           const AttentionParams& p, const SinkhornConfig& cfg = {}) {
  return mea_apply(xl, xr, p.value, [&](const Tensor& a, const Tensor& b) {
    return retrieve_cached(a, b, p, cfg).plan();
  });
}

// ---------------------------------------------------------------------------
// the block: residual, cross-delivered
// ---------------------------------------------------------------------------

struct AttentionCache {
  Tensor xl, xr;   // host layout inputs
  Tensor al, ar;   // attention layout inputs
  Tensor vl, vr;   // Ψ outputs, attention layout
  RetrievalCache lr, rl;
};

struct AttentionOutput {
  Tensor left, right;
  AttentionCache cache;
};

/// X̃l = Xl + Y^{r→l}, X̃r = Xr + Y^{l→r}; inputs and outputs in [c, h, w].
inline AttentionOutput attention_block(const Tensor& xl, const Tensor& xr, const AttentionParams& p,
                                       const SinkhornConfig& cfg) {
  require_rank(xl, 3, "attention_block");
  require_same_shape(xl, xr, "attention_block");
  if (p.value.weight.dim(0) != xl.dim(0)) {
    throw ShapeError("attention_block: value conv must preserve channel count " +
                     std::to_string(xl.dim(0)));
  }
  const bool global = is_global(p.mode);
  AttentionOutput out;
  auto& c = out.cache;
  c.xl = xl;
  c.xr = xr;
  c.al = to_attention_layout(xl, global);
  c.ar = to_attention_layout(xr, global);
  c.vl = to_attention_layout(conv1x1(xl, p.value), global);
  c.vr = to_attention_layout(conv1x1(xr, p.value), global);
  c.lr = retrieve_cached(c.al, c.ar, p, cfg);
  c.rl = retrieve_cached(c.ar, c.al, p, cfg);
  const Tensor y_lr = batched_matmul(c.vl, c.lr.plan());
  const Tensor y_rl = batched_matmul(c.vr, c.rl.plan());
  out.left = add(xl, from_attention_layout(y_rl, xl.shape(), global));
  out.right = add(xr, from_attention_layout(y_lr, xr.shape(), global));
  return out;
}

struct AttentionGrad {
  Tensor dxl, dxr;
  AttentionParams dparams;
};

inline void accumulate(RetrievalParams& dst, const RetrievalParams& src) {
  for (auto [d, s] : {std::pair{&dst.sim_1, &src.sim_1}, std::pair{&dst.sim_2, &src.sim_2},
                      std::pair{&dst.mass_1, &src.mass_1}, std::pair{&dst.mass_2, &src.mass_2}}) {
    if (s->weight.defined()) {
      accumulate(d->weight, s->weight);
      accumulate(d->bias, s->bias);
    }
  }
}

inline void accumulate(AttentionParams& dst, const AttentionParams& src) {
  accumulate(dst.value.weight, src.value.weight);
  accumulate(dst.value.bias, src.value.bias);
  accumulate(dst.retrieval, src.retrieval);
}

inline AttentionGrad attention_block_vjp(const AttentionCache& c, const AttentionParams& p,
                                         const SinkhornConfig& cfg, const Tensor& dleft,
                                         const Tensor& dright) {
  const bool global = is_global(p.mode);
  AttentionGrad g;
  g.dparams.mode = p.mode;
  const Tensor dy_rl = to_attention_layout(dleft, global);
  const Tensor dy_lr = to_attention_layout(dright, global);

  const auto mm_lr = batched_matmul_vjp(c.vl, c.lr.plan(), dy_lr);
  const auto mm_rl = batched_matmul_vjp(c.vr, c.rl.plan(), dy_rl);

  const auto rg_lr = retrieve_vjp(c.lr, p, cfg, mm_lr.db);
  const auto rg_rl = retrieve_vjp(c.rl, p, cfg, mm_rl.db);
  accumulate(g.dparams.retrieval, rg_lr.dparams);
  accumulate(g.dparams.retrieval, rg_rl.dparams);

  Tensor dal = add(rg_lr.dx1, rg_rl.dx2);
  Tensor dar = add(rg_lr.dx2, rg_rl.dx1);

  auto gl = conv1x1_vjp(c.xl, p.value.weight, from_attention_layout(mm_lr.da, c.xl.shape(), global));
  auto gr = conv1x1_vjp(c.xr, p.value.weight, from_attention_layout(mm_rl.da, c.xr.shape(), global));
  detail::add_conv_grad(g.dparams.value, gl);
  detail::add_conv_grad(g.dparams.value, gr);

  g.dxl = add(add(dleft, gl.dx), from_attention_layout(dal, c.xl.shape(), global));
  g.dxr = add(add(dright, gr.dx), from_attention_layout(dar, c.xr.shape(), global));
  return g;
}

}  // namespace hnet
