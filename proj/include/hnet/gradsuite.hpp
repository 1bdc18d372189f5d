#pragma once

#include <array>
#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "hnet/attention.hpp"
#include "hnet/gradcheck.hpp"
#include "hnet/losses.hpp"
#include "hnet/model.hpp"

namespace hnet {

/// One finite-difference check: an operation and the point it is checked at.
struct GradCase {
  std::string name;
  DiffOp op;
  std::vector<Tensor> inputs;
};

struct GradCaseResult {
  std::string name;
  GradcheckResult check;
  double seconds = 0.0;
};

namespace suite {

inline void push_conv(std::vector<Tensor>& v, const Conv1x1& c) {
  v.push_back(c.weight);
  v.push_back(c.bias);
}

inline Conv1x1 pop_conv(const std::vector<Tensor>& v, std::size_t& i) {
  Conv1x1 c{v[i], v[i + 1]};
  i += 2;
  return c;
}

/// Retrieval params in the order sim_1, sim_2, then mass_1, mass_2 when present.
inline void pack_retrieval(std::vector<Tensor>& v, const RetrievalParams& p, bool with_mass) {
  push_conv(v, p.sim_1);
  push_conv(v, p.sim_2);
  if (with_mass) {
    push_conv(v, p.mass_1);
    push_conv(v, p.mass_2);
  }
}

inline RetrievalParams unpack_retrieval(const std::vector<Tensor>& v, std::size_t& i, bool with_mass) {
  RetrievalParams p;
  p.sim_1 = pop_conv(v, i);
  p.sim_2 = pop_conv(v, i);
  if (with_mass) {
    p.mass_1 = pop_conv(v, i);
    p.mass_2 = pop_conv(v, i);
  }
  return p;
}

/// Mass convs get a bias in [1, 2] so their ReLU stays in its smooth region.
inline RetrievalParams random_retrieval(Rng& rng, std::size_t c, bool with_mass) {
  RetrievalParams p{{rng.uniform_tensor({c, c}, -1, 1), rng.uniform_tensor({c}, -0.5, 0.5)},
                    {rng.uniform_tensor({c, c}, -1, 1), rng.uniform_tensor({c}, -0.5, 0.5)},
                    {},
                    {}};
  if (with_mass) {
    p.mass_1 = {rng.uniform_tensor({1, c}, -0.2, 0.2), rng.uniform_tensor({1}, 1.0, 2.0)};
    p.mass_2 = {rng.uniform_tensor({1, c}, -0.2, 0.2), rng.uniform_tensor({1}, 1.0, 2.0)};
  }
  return p;
}

inline std::vector<Tensor> pack(const ModelParams& p) {
  std::vector<Tensor> v;
  for (const auto& [n, t] : named_params(p)) v.push_back(*t);
  return v;
}

inline void unpack(const std::vector<Tensor>& v, std::size_t offset, ModelParams& p) {
  std::size_t i = offset;
  for (auto& [n, t] : named_params(p)) *t = v[i++];
}

inline Tensor scalar(double v) { return Tensor({1}, v); }

// ---------------------------------------------------------------------------
// operation wrappers
// ---------------------------------------------------------------------------

inline DiffOp eg_retrieve_op() {
  return {"eg_retrieve",
          [](const std::vector<Tensor>& in) {
            std::size_t i = 2;
            return eg_retrieve(in[0], in[1], unpack_retrieval(in, i, false)).values;
          },
          [](const std::vector<Tensor>& in, const Tensor& g) {
            std::size_t i = 2;
            const auto p = unpack_retrieval(in, i, false);
            const auto rg = eg_retrieve_vjp(eg_retrieve_cached(in[0], in[1], p), p, g);
            std::vector<Tensor> out{rg.dx1, rg.dx2};
            pack_retrieval(out, rg.dparams, false);
            return out;
          }};
}

inline DiffOp ot_retrieve_op(const SinkhornConfig& cfg) {
  return {"ot_retrieve",
          [cfg](const std::vector<Tensor>& in) {
            std::size_t i = 2;
            return ot_retrieve(in[0], in[1], unpack_retrieval(in, i, true), cfg).values;
          },
          [cfg](const std::vector<Tensor>& in, const Tensor& g) {
            std::size_t i = 2;
            const auto p = unpack_retrieval(in, i, true);
            const auto rg = ot_retrieve_vjp(ot_retrieve_cached(in[0], in[1], p, cfg), p, cfg, g);
            std::vector<Tensor> out{rg.dx1, rg.dx2};
            pack_retrieval(out, rg.dparams, true);
            return out;
          }};
}

/// Inputs: xl, xr, value conv, retrieval params. Output: [left; right] channels.
inline DiffOp attention_op(AttentionMode mode, const SinkhornConfig& cfg) {
  const bool ot = uses_ot(mode);
  auto params = [mode, ot](const std::vector<Tensor>& in) {
    AttentionParams p;
    p.mode = mode;
    std::size_t i = 2;
    p.value = pop_conv(in, i);
    p.retrieval = unpack_retrieval(in, i, ot);
    return p;
  };
  return {"attention_" + to_string(mode),
          [=](const std::vector<Tensor>& in) {
            const auto out = attention_block(in[0], in[1], params(in), cfg);
            return concat_channels(out.left, out.right);
          },
          [=](const std::vector<Tensor>& in, const Tensor& g) {
            const auto p = params(in);
            const auto out = attention_block(in[0], in[1], p, cfg);
            const auto [gl, gr] = split_channels(g, in[0].dim(0));
            const auto ag = attention_block_vjp(out.cache, p, cfg, gl, gr);
            std::vector<Tensor> res{ag.dxl, ag.dxr};
            push_conv(res, ag.dparams.value);
            pack_retrieval(res, ag.dparams.retrieval, ot);
            return res;
          }};
}

/// Inputs: left, right, then every parameter. Output: every depth map, flattened.
inline DiffOp model_depth_op(const ModelConfig& c, const ModelParams& proto) {
  auto run = [c, proto](const std::vector<Tensor>& in) {
    ModelParams p = proto;
    unpack(in, 2, p);
    return std::pair{forward(in[0], in[1], p, c), p};
  };
  return {"model_depth",
          [=](const std::vector<Tensor>& in) {
            const auto [fr, p] = run(in);
            std::vector<double> flat;
            for (int b = 0; b < 2; ++b)
              for (const auto& o : fr.output.omega[b]) {
                const Tensor d = sigmoid_to_depth(o);
                flat.insert(flat.end(), d.data().begin(), d.data().end());
              }
            return Tensor({flat.size()}, flat);
          },
          [=](const std::vector<Tensor>& in, const Tensor& g) {
            const auto [fr, p] = run(in);
            std::array<std::vector<Tensor>, 2> dom;
            std::size_t off = 0;
            for (int b = 0; b < 2; ++b)
              for (const auto& o : fr.output.omega[b]) {
                Tensor gd(o.shape());
                std::copy_n(g.ptr() + off, gd.size(), gd.ptr());
                off += gd.size();
                dom[b].push_back(sigmoid_to_depth_vjp(sigmoid_to_depth(o), gd));
              }
            const auto bw = backward(fr, p, c, dom);
            std::vector<Tensor> out{bw.dimage[0], bw.dimage[1]};
            for (auto& t : pack(bw.grads)) out.push_back(t);
            return out;
          }};
}

/// Inputs: every parameter (images fixed). Output: the scalar total loss.
inline DiffOp model_loss_op(const ModelConfig& c, const ModelParams& proto, const Tensor& left, const Tensor& right,
                            const Camera& cam, const LossConfig& lc) {
  auto params = [proto](const std::vector<Tensor>& in) {
    ModelParams p = proto;
    unpack(in, 0, p);
    return p;
  };
  return {"model_total_loss",
          [=](const std::vector<Tensor>& in) {
            const auto fr = forward(left, right, params(in), c);
            return scalar(total_loss(fr.output, left, right, cam, lc).report.total);
          },
          [=](const std::vector<Tensor>& in, const Tensor& g) {
            const auto p = params(in);
            const auto fr = forward(left, right, p, c);
            const auto ev = total_loss(fr.output, left, right, cam, lc);
            const auto dom = total_loss_vjp(fr.output, ev, left, right, cam, lc, {}, g[0]);
            return pack(backward(fr, p, c, dom).grads);
          }};
}

inline DiffOp total_loss_op(std::size_t m, const Tensor& left, const Tensor& right, const Camera& cam,
                            const LossConfig& lc) {
  auto outputs = [m](const std::vector<Tensor>& in) {
    MultiScaleOutput o;
    for (int b = 0; b < 2; ++b)
      for (std::size_t s = 0; s < m; ++s) o.omega[b].push_back(in[b * m + s]);
    return o;
  };
  return {"total_loss",
          [=](const std::vector<Tensor>& in) {
            return scalar(total_loss(outputs(in), left, right, cam, lc).report.total);
          },
          [=](const std::vector<Tensor>& in, const Tensor& g) {
            const auto o = outputs(in);
            const auto ev = total_loss(o, left, right, cam, lc);
            const auto gr = total_loss_vjp(o, ev, left, right, cam, lc, {}, g[0]);
            std::vector<Tensor> v;
            for (int b = 0; b < 2; ++b)
              for (const auto& t : gr[b]) v.push_back(t);
            return v;
          }};
}

template <class F, class V>
DiffOp unary(std::string name, F f, V vjp) {
  return {std::move(name), [f](const std::vector<Tensor>& in) { return f(in[0]); },
          [f, vjp](const std::vector<Tensor>& in, const Tensor& g) { return std::vector<Tensor>{vjp(in[0], f(in[0]), g)}; }};
}

/// Moves the parameters off their initial values to a generic point. Zero
/// biases put every ReLU fed by a dead feature map exactly on its kink, the
/// zero value conv hides every attention gradient, and zero similarity biases
/// make an all-zero feature column a singular point of the cosine cost.
inline void randomize_for_check(ModelParams& p, Rng& rng) {
  for (auto& [name, t] : named_params(p))
    if (name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0) *t = rng.uniform_tensor(t->shape(), -0.1, 0.1);
  for (auto* v : {&p.enc_attention, &p.dec_attention})
    for (auto& a : *v) {
      const std::size_t c = a.value.weight.dim(0);
      a.value = {rng.uniform_tensor({c, c}, -0.5, 0.5), rng.uniform_tensor({c}, -0.5, 0.5)};
      a.retrieval = random_retrieval(rng, c, uses_ot(a.mode));
    }
}

inline Tensor flip_every_other(Tensor t) {
  for (std::size_t i = 0; i < t.size(); i += 2) t[i] = -t[i];
  return t;
}

}  // namespace suite

/// Every differentiable operation, each attention mode, the model and the
/// loss, checked at points drawn from `seed`. Sinkhorn runs a fixed number of
/// iterations (tol below reach) so the unrolled map is the function checked.
inline std::vector<GradCase> gradient_suite(std::uint64_t seed) {
  using namespace suite;
  Rng rng(seed);
  auto U = [&rng](Shape s, double lo = -1, double hi = 1) { return rng.uniform_tensor(std::move(s), lo, hi); };
  std::vector<GradCase> cases;

  // tensor primitives
  cases.push_back({"batched_matmul",
                   {"batched_matmul", [](const auto& in) { return batched_matmul(in[0], in[1]); },
                    [](const auto& in, const Tensor& g) {
                      auto r = batched_matmul_vjp(in[0], in[1], g);
                      return std::vector<Tensor>{r.da, r.db};
                    }},
                   {U({2, 3, 4}), U({2, 4, 5})}});
  cases.push_back({"softmax", unary("softmax", softmax_lastdim, [](const Tensor&, const Tensor& y, const Tensor& g) {
                     return softmax_lastdim_vjp(y, g);
                   }),
                   {U({2, 5, 3}, -2, 2)}});
  cases.push_back({"conv1x1",
                   {"conv1x1", [](const auto& in) { return conv1x1(in[0], in[1], in[2]); },
                    [](const auto& in, const Tensor& g) {
                      auto r = conv1x1_vjp(in[0], in[1], g);
                      return std::vector<Tensor>{r.dx, r.dw, r.dbias};
                    }},
                   {U({3, 2, 4}), U({2, 3}), U({2})}});
  for (std::size_t stride : {1u, 2u}) {
    const std::string n = "conv3x3_stride" + std::to_string(stride);
    cases.push_back({n,
                     {n, [stride](const auto& in) { return conv2d(in[0], in[1], in[2], stride); },
                      [stride](const auto& in, const Tensor& g) {
                        auto r = conv2d_vjp(in[0], in[1], stride, g);
                        return std::vector<Tensor>{r.dx, r.dw, r.dbias};
                      }},
                     {U({2, 6, 5}), U({3, 2, 3, 3}), U({3})}});
  }
  for (auto mode : {NormMode::euclidean, NormMode::l1}) {
    const std::string n = mode == NormMode::l1 ? "normalize_l1" : "normalize_euclidean";
    cases.push_back({n,
                     unary(n, [mode](const Tensor& x) { return normalize(x, 1, mode); },
                           [mode](const Tensor& x, const Tensor& y, const Tensor& g) {
                             return normalize_vjp(x, y, g, 1, mode);
                           }),
                     {mode == NormMode::l1 ? U({2, 5, 3}, 0.05, 1) : U({2, 5, 3}, -2, 2)}});
  }
  cases.push_back({"relu", unary("relu", [](const Tensor& x) { return relu(x); },
                                 [](const Tensor& x, const Tensor&, const Tensor& g) { return relu_vjp(x, g); }),
                   {flip_every_other(U({3, 4}, 0.01, 1))}});
  cases.push_back({"sigmoid", unary("sigmoid", [](const Tensor& x) { return sigmoid(x); },
                                    [](const Tensor&, const Tensor& y, const Tensor& g) { return sigmoid_vjp(y, g); }),
                   {U({2, 5, 3}, -2, 2)}});
  cases.push_back({"exp", unary("exp", [](const Tensor& x) { return hnet::exp(x); },
                                [](const Tensor&, const Tensor& y, const Tensor& g) { return exp_vjp(y, g); }),
                   {U({2, 5, 3}, -2, 2)}});
  cases.push_back({"mul",
                   {"mul", [](const auto& in) { return mul(in[0], in[1]); },
                    [](const auto& in, const Tensor& g) {
                      auto [a, b] = mul_vjp(in[0], in[1], g);
                      return std::vector<Tensor>{a, b};
                    }},
                   {U({3, 4}), U({3, 4})}});
  cases.push_back({"mean",
                   {"mean", [](const auto& in) { return mean(in[0]); },
                    [](const auto& in, const Tensor& g) { return std::vector<Tensor>{mean_vjp(in[0].shape(), g.item())}; }},
                   {U({2, 5, 3})}});
  cases.push_back({"concat_channels",
                   {"concat_channels", [](const auto& in) { return concat_channels(in[0], in[1]); },
                    [](const auto& in, const Tensor& g) {
                      auto [a, b] = split_channels(g, in[0].dim(0));
                      return std::vector<Tensor>{a, b};
                    }},
                   {U({2, 3, 4}), U({3, 3, 4})}});
  for (std::size_t f : {2u, 4u}) {
    const std::string n = "upsample_x" + std::to_string(f);
    cases.push_back({n,
                     {n, [f](const auto& in) { return upsample_bilinear(in[0], f); },
                      [f](const auto& in, const Tensor& g) {
                        return std::vector<Tensor>{upsample_bilinear_vjp(g, in[0].shape(), f)};
                      }},
                     {U({2, 3, 5})}});
  }

  // matching
  {
    const SinkhornConfig sc{0.1, 40, 1e-300};
    const Marginals mu{normalize(U({2, 4}, 0.1, 1), 1, NormMode::l1)};
    const Marginals nu{normalize(U({2, 4}, 0.1, 1), 1, NormMode::l1)};
    cases.push_back({"sinkhorn",
                     {"sinkhorn", [=](const auto& in) { return sinkhorn_solve(in[0], mu, nu, sc).values; },
                      [=](const auto& in, const Tensor& g) {
                        const auto sol = sinkhorn_solve_traced(in[0], mu, nu, sc);
                        return std::vector<Tensor>{sinkhorn_vjp(in[0], mu, nu, sc, sol, g).dcost};
                      }},
                     {U({2, 4, 4}, 1.0, std::exp(2.0))}});
  }
  {
    std::vector<Tensor> in{U({2, 3, 4}), U({2, 3, 4})};
    pack_retrieval(in, random_retrieval(rng, 3, false), false);
    cases.push_back({"eg_retrieve", eg_retrieve_op(), in});
  }
  {
    std::vector<Tensor> in{U({2, 4, 3}), U({2, 4, 3})};
    pack_retrieval(in, random_retrieval(rng, 4, true), true);
    cases.push_back({"ot_retrieve", ot_retrieve_op({0.05, 50, 1e-300}), in});
  }
  for (auto mode : {AttentionMode::eg_mea, AttentionMode::ot_mea, AttentionMode::eg_mnl, AttentionMode::ot_mnl}) {
    const std::size_t c = 3;
    std::vector<Tensor> in{U({c, 2, 3}), U({c, 2, 3})};
    push_conv(in, {U({c, c}), U({c}, -0.5, 0.5)});
    pack_retrieval(in, random_retrieval(rng, c, uses_ot(mode)), uses_ot(mode));
    cases.push_back({"attention_" + to_string(mode), attention_op(mode, {0.1, 30, 1e-300}), in});
  }

  // model
  ModelConfig tiny;
  tiny.height = 8;
  tiny.width = 16;
  tiny.scales = 2;
  for (AttentionChoice att : {AttentionChoice{}, AttentionChoice{AttentionMode::eg_mea},
                              AttentionChoice{AttentionMode::ot_mea}}) {
    ModelConfig c = tiny;
    c.attention = att;
    c.widths = att ? std::vector<std::size_t>{2, 3, 4} : std::vector<std::size_t>{4, 8};
    c.sinkhorn = {0.1, 20, 1e-300};
    auto p = build(c, rng);
    randomize_for_check(p, rng);
    std::vector<Tensor> in{U({3, c.height, c.width}, 0, 1), U({3, c.height, c.width}, 0, 1)};
    for (auto& t : pack(p)) in.push_back(t);
    cases.push_back({"model_depth_" + attention_name(att), model_depth_op(c, p), in});
  }

  // loss
  for (auto dir : {WarpDirection::left_from_right, WarpDirection::right_from_left}) {
    const std::string n = dir == WarpDirection::left_from_right ? "warp_left_from_right" : "warp_right_from_left";
    Tensor d = U({1, 3, 6}, 0, 4);
    for (double& v : d.data()) v = std::floor(v) + 0.1 + 0.8 * (v - std::floor(v));  // off integer positions
    cases.push_back({n,
                     {n, [dir](const auto& in) { return warp(in[0], in[1], dir); },
                      [dir](const auto& in, const Tensor& g) {
                        auto wg = warp_vjp(in[0], in[1], dir, g);
                        return std::vector<Tensor>{wg.dsource, wg.ddisp};
                      }},
                     {U({3, 3, 6}, 0, 1), d}});
  }
  cases.push_back({"ssim",
                   {"ssim", [](const auto& in) { return ssim(in[0], in[1]); },
                    [](const auto& in, const Tensor& g) {
                      auto pg = ssim_vjp(in[0], in[1], g);
                      return std::vector<Tensor>{pg.dx, pg.dy};
                    }},
                   {U({3, 4, 5}, 0, 1), U({3, 4, 5}, 0, 1)}});
  cases.push_back({"photometric_loss",
                   {"photometric_loss", [](const auto& in) { return scalar(photometric_loss(in[0], in[1])); },
                    [](const auto& in, const Tensor& g) {
                      auto pg = photometric_loss_vjp(in[0], in[1], g[0]);
                      return std::vector<Tensor>{pg.dx, pg.dy};
                    }},
                   {U({3, 4, 5}, 0, 1), U({3, 4, 5}, 0, 1)}});
  {
    const Tensor img = U({3, 4, 5}, 0, 1);
    cases.push_back({"smoothness_loss",
                     {"smoothness_loss", [img](const auto& in) { return scalar(smoothness_loss(in[0], img)); },
                      [img](const auto& in, const Tensor& g) {
                        return std::vector<Tensor>{smoothness_loss_vjp(in[0], img, g[0])};
                      }},
                     {U({1, 4, 5}, 0.1, 1)}});
  }
  {
    const Tensor l = U({3, 8, 16}, 0, 1), r = U({3, 8, 16}, 0, 1);
    LossConfig lc;
    lc.lambda = 0.1;  // make the smoothness path visible
    std::vector<Tensor> in;
    for (int b = 0; b < 2; ++b)
      for (std::size_t s = 0; s < 3; ++s) in.push_back(U({1, std::size_t{8} >> s, std::size_t{16} >> s}, 0.05, 0.3));
    cases.push_back({"total_loss", total_loss_op(3, l, r, Camera{}, lc), in});
  }

  // end to end: model + total loss; f·B keeps disparities inside (0, 1)
  for (AttentionChoice att : {AttentionChoice{}, AttentionChoice{AttentionMode::ot_mea}}) {
    ModelConfig c = tiny;
    c.attention = att;
    c.widths = att ? std::vector<std::size_t>{2, 3, 4} : std::vector<std::size_t>{4, 8};
    c.sinkhorn = {0.1, 20, 1e-300};
    auto p = build(c, rng);
    randomize_for_check(p, rng);
    const Tensor l = U({3, c.height, c.width}, 0, 1), r = U({3, c.height, c.width}, 0, 1);
    LossConfig lc;
    lc.lambda = 0.1;
    cases.push_back({"model_total_loss_" + attention_name(att), model_loss_op(c, p, l, r, Camera{1.0, 0.05}, lc),
                     pack(p)});
  }
  return cases;
}

inline constexpr double kGradTolerance = 1e-4;

/// Runs every case; `progress` sees each result as it completes.
inline std::vector<GradCaseResult> run_gradient_suite(
    std::uint64_t seed, const std::function<void(const GradCaseResult&)>& progress = {}) {
  std::vector<GradCaseResult> out;
  for (auto& gc : gradient_suite(seed)) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCaseResult r{gc.name, gradcheck(gc.op, gc.inputs, 1e-5, seed, kGradTolerance), 0.0};
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (progress) progress(r);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace hnet
