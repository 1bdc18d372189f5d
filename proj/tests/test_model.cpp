#include <gtest/gtest.h>

#include <sstream>

#include "hnet/model.hpp"
#include "test_support.hpp"

using namespace hnet;

namespace {

// Closed-form parameter counts, written independently of the model code.
std::size_t conv_count(std::size_t ci, std::size_t co, std::size_t k) { return co * ci * k * k + co; }
std::size_t block_count(std::size_t ci, std::size_t co) {
  return conv_count(ci, co, 3) + conv_count(co, co, 3) + conv_count(ci, co, 1);
}
std::size_t attention_count(std::size_t c, bool ot) { return 3 * (c * c + c) + (ot ? 2 * (c + 1) : 0); }

struct Expected {
  std::size_t backbone = 0, attention = 0;
};

Expected analytic_count(const std::vector<std::size_t>& w, std::size_t m, AttentionChoice att) {
  const std::size_t n = w.size();
  Expected e;
  for (std::size_t k = 0; k < n; ++k) e.backbone += block_count(k == 0 ? 3 : w[k - 1], w[k]);
  e.backbone += 2 * conv_count(2 * w[n - 1], w[n - 1], 3);
  std::vector<std::size_t> dec_out(n), dec_in(n);
  for (std::size_t j = 0; j < n; ++j) {
    dec_out[j] = (j + 2 <= n) ? w[n - j - 2] : w[0];
    dec_in[j] = j == 0 ? w[n - 1] : dec_out[j - 1];
    const std::size_t skip = (j + 2 <= n) ? w[n - j - 2] : 0;
    e.backbone += block_count(dec_in[j] + skip, dec_out[j]);
  }
  for (std::size_t s = 0; s < m; ++s) e.backbone += conv_count(dec_out[n - 1 - s], 1, 3);
  if (att) {
    const bool ot = uses_ot(*att);
    for (std::size_t k = n - 3; k < n; ++k) e.attention += attention_count(w[k], ot);
    for (std::size_t j = 0; j < 3; ++j) e.attention += attention_count(dec_in[j], ot);
  }
  return e;
}

ModelConfig tiny(AttentionChoice att = std::nullopt) {
  ModelConfig c;
  c.height = 8;
  c.width = 16;
  c.widths = att ? std::vector<std::size_t>{2, 3, 4} : std::vector<std::size_t>{4, 8};
  c.scales = 2;
  c.attention = att;
  return c;
}

std::pair<Tensor, Tensor> images(Rng& rng, const ModelConfig& c) {
  return {rng.uniform_tensor({3, c.height, c.width}, 0, 1), rng.uniform_tensor({3, c.height, c.width}, 0, 1)};
}

}  // namespace

TEST(ModelConfig, ValidationNamesConstraint) {
  ModelConfig c;
  c.scales = 4;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.width = 60;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.widths = {4, 8};
  c.scales = 2;
  EXPECT_THROW(c.validate(), ValidationError);  // attention needs 3 stages
  c.attention = std::nullopt;
  EXPECT_NO_THROW(c.validate());
  try {
    ModelConfig d;
    d.height = 20;
    d.validate();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible"), std::string::npos);
  }
}

TEST(ModelConfig, TextRoundTrip) {
  ModelConfig c;
  c.widths = {5, 7, 9, 11};
  c.height = 32;
  c.width = 48;
  c.attention = AttentionMode::eg_mnl;
  c.sinkhorn.epsilon = 0.1;
  const ModelConfig d = ModelConfig::read(KvDoc::parse(c.to_text()));
  EXPECT_EQ(c.to_text(), d.to_text());
  EXPECT_THROW(parse_attention("ot-xyz"), ValidationError);
}

TEST(Build, SameSeedBitwiseIdentical) {
  const ModelConfig c;
  Rng r1(42), r2(42), r3(43);
  const auto a = build(c, r1), b = build(c, r2), d = build(c, r3);
  const auto na = named_params(a), nb = named_params(b), nd = named_params(d);
  ASSERT_EQ(na.size(), nb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    EXPECT_EQ(na[i].first, nb[i].first);
    EXPECT_EQ(*na[i].second, *nb[i].second) << na[i].first;
    any_diff |= !(*na[i].second == *nd[i].second);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Build, ValueConvsStartAtZero) {
  Rng rng(1);
  const auto p = build(ModelConfig{}, rng);
  ASSERT_EQ(p.enc_attention.size(), 3u);
  ASSERT_EQ(p.dec_attention.size(), 3u);
  for (const auto* v : {&p.enc_attention, &p.dec_attention})
    for (const auto& a : *v) {
      for (double x : a.value.weight.data()) EXPECT_EQ(x, 0.0);
      for (double x : a.value.bias.data()) EXPECT_EQ(x, 0.0);
    }
}

TEST(ParamCount, MatchesClosedForm) {
  const std::vector<std::vector<std::size_t>> widths{{8, 16, 32}, {4, 8, 16, 32}, {3, 5, 7}};
  for (const auto& w : widths)
    for (AttentionChoice att : {AttentionChoice{}, AttentionChoice{AttentionMode::eg_mea},
                                AttentionChoice{AttentionMode::ot_mea}, AttentionChoice{AttentionMode::ot_mnl}}) {
      ModelConfig c;
      c.widths = w;
      c.height = 64;
      c.width = 64;
      c.scales = w.size();
      c.attention = att;
      Rng rng(0);
      const auto b = param_count(build(c, rng));
      const auto e = analytic_count(w, c.scales, att);
      EXPECT_EQ(b.backbone(), e.backbone) << attention_name(att);
      EXPECT_EQ(b.attention(), e.attention) << attention_name(att);
      std::size_t listed = 0;
      Rng rng2(0);
      const auto p = build(c, rng2);
      for (const auto& [name, t] : named_params(p)) listed += t->size();
      EXPECT_EQ(listed, b.total());
    }
}

TEST(ParamCount, AttentionIncrementsAreIsolated) {
  ModelConfig c;
  Rng r(0);
  c.attention = std::nullopt;
  const auto off = param_count(build(c, r));
  c.attention = AttentionMode::ot_mea;
  const auto ot = param_count(build(c, r));
  c.attention = AttentionMode::eg_mea;
  const auto eg = param_count(build(c, r));
  EXPECT_EQ(ot.total() - off.total(), analytic_count(c.widths, c.scales, AttentionMode::ot_mea).attention);
  EXPECT_EQ(ot.backbone(), off.backbone());
  // mass convs: 1×c weight + 1 bias, two per site, six sites.
  std::size_t mass = 0;
  for (std::size_t ch : {8u, 16u, 32u, 32u, 16u, 8u}) mass += 2 * (ch + 1);
  EXPECT_EQ(ot.total() - eg.total(), mass);
}

TEST(ParamCount, Conv1x1WeightsQuadrupleWithWidth) {
  auto weights = [](const std::vector<std::size_t>& w) {
    ModelConfig c;
    c.widths = w;
    c.attention = AttentionMode::eg_mea;
    Rng r(0);
    const auto p = build(c, r);
    std::size_t s = 0;
    for (const auto* v : {&p.enc_attention, &p.dec_attention})
      for (const auto& a : *v) s += a.value.weight.size() + a.retrieval.sim_1.weight.size() + a.retrieval.sim_2.weight.size();
    return s;
  };
  EXPECT_EQ(weights({16, 32, 64}), 4 * weights({8, 16, 32}));
}

TEST(Forward, ScaleShapesAndRange) {
  const ModelConfig c;
  Rng rng(3);
  const auto p = build(c, rng);
  const auto [l, r] = images(rng, c);
  const auto out = forward(l, r, p, c).output;
  for (int b = 0; b < 2; ++b) {
    ASSERT_EQ(out.omega[b].size(), c.scales);
    for (std::size_t s = 0; s < c.scales; ++s) {
      EXPECT_EQ(out.omega[b][s].shape(), (Shape{1, c.height >> s, c.width >> s}));
      for (double v : out.omega[b][s].data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
  EXPECT_THROW(forward(Tensor({3, 8, 8}), r, p, c), ShapeError);
}

TEST(Forward, SharedEncoderOnEqualInputs) {
  for (AttentionChoice att : {AttentionChoice{}, AttentionChoice{AttentionMode::ot_mea}}) {
    ModelConfig c = tiny(att);
    Rng rng(4);
    auto p = build(c, rng);
    const Tensor img = rng.uniform_tensor({3, c.height, c.width}, 0, 1);
    const auto before = forward(img, img, p, c);
    for (std::size_t k = 0; k < c.stages(); ++k)
      EXPECT_EQ(before.cache.enc_out[0][k], before.cache.enc_out[1][k]);
    // One stored encoder weight: perturbing it moves both branches identically.
    p.encoder[0].conv1.weight[0] += 0.1;
    const auto after = forward(img, img, p, c);
    for (std::size_t k = 0; k < c.stages(); ++k) {
      EXPECT_EQ(after.cache.enc_out[0][k], after.cache.enc_out[1][k]);
      EXPECT_NE(after.cache.enc_out[0][k], before.cache.enc_out[0][k]);
    }
    // Fusion convs are distinct: outputs differ even on equal inputs.
    EXPECT_NE(before.output.omega[0][0], before.output.omega[1][0]);
  }
}

TEST(Forward, ZeroValueAttentionIsBitwiseIdentity) {
  for (auto mode : {AttentionMode::eg_mea, AttentionMode::ot_mea, AttentionMode::eg_mnl, AttentionMode::ot_mnl}) {
    ModelConfig on = tiny(mode), off = tiny(std::nullopt);
    off.widths = on.widths;
    Rng r1(5), r2(5), ri(6);
    const auto pon = build(on, r1), poff = build(off, r2);
    const auto [l, r] = images(ri, on);
    const auto a = forward(l, r, pon, on).output, b = forward(l, r, poff, off).output;
    for (int br = 0; br < 2; ++br)
      for (std::size_t s = 0; s < on.scales; ++s) EXPECT_EQ(a.omega[br][s], b.omega[br][s]) << to_string(mode);
  }
}

TEST(Depth, TransformEndpointsAndMonotonicity) {
  const Tensor o({1, 1, 3}, {1.0, 0.0, 0.5});
  const Tensor d = sigmoid_to_depth(o);
  EXPECT_DOUBLE_EQ(d[0], 0.1);
  EXPECT_DOUBLE_EQ(d[1], 100.0);
  EXPECT_NEAR(d[2], 1.0 / 5.005, 1e-15);
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(), b = rng.uniform();
    if (a == b) continue;
    const Tensor t = sigmoid_to_depth(Tensor({2}, {a, b}));
    EXPECT_EQ(a < b, t[0] > t[1]);
  }
}

TEST(Depth, DisparityConversion) {
  EXPECT_DOUBLE_EQ(depth_to_disparity(Tensor({1}, {4.0}), 10, 2)[0], 5.0);
  EXPECT_DOUBLE_EQ(depth_to_disparity(Tensor({1}, {100.0}), 10, 2)[0], 10.0 * 2.0 / 100.0);
  Rng rng(8);
  const Tensor disp = rng.uniform_tensor({1, 4, 4}, 0.01, 10);
  const Tensor back = depth_to_disparity(disparity_to_depth(disp, 32, 0.03125), 32, 0.03125);
  for (std::size_t i = 0; i < disp.size(); ++i) EXPECT_NEAR(back[i], disp[i], 1e-12);
}

namespace {

std::vector<Tensor> pack(const ModelParams& p) {
  std::vector<Tensor> v;
  for (const auto& [n, t] : named_params(p)) v.push_back(*t);
  return v;
}

void unpack(const std::vector<Tensor>& v, std::size_t offset, ModelParams& p) {
  std::size_t i = offset;
  for (auto& [n, t] : named_params(p)) *t = v[i++];
}

/// Inputs: left, right, then every parameter. Output: all depth maps, flattened.
DiffOp model_depth_op(const ModelConfig& c, const ModelParams& proto) {
  auto run = [c, proto](const std::vector<Tensor>& in) {
    ModelParams p = proto;
    unpack(in, 2, p);
    return std::pair{forward(in[0], in[1], p, c), p};
  };
  return {"model+depth",
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

}  // namespace

TEST(Backward, TinyEndToEndGradcheck) {
  const ModelConfig c = tiny();
  Rng rng(9);
  const auto p = build(c, rng);
  const auto [l, r] = images(rng, c);
  std::vector<Tensor> in{l, r};
  for (auto& t : pack(p)) in.push_back(t);
  const auto res = gradcheck(model_depth_op(c, p), in, 1e-5, 9);
  EXPECT_LT(res.max_rel_error, 1e-4) << "input " << res.worst_input << " idx " << res.worst_index << " a=" << res.analytic << " n=" << res.numeric;
}

TEST(Backward, TinyWithAttentionGradcheck) {
  for (auto mode : {AttentionMode::eg_mea, AttentionMode::ot_mea}) {
    ModelConfig c = tiny(mode);
    c.sinkhorn = {0.1, 20, 1e-300};  // fixed iteration count
    Rng rng(10);
    auto p = build(c, rng);
    // Non-zero value convs so gradients reach every attention weight.
    for (auto* v : {&p.enc_attention, &p.dec_attention})
      for (auto& a : *v) a.value.weight = rng.uniform_tensor(a.value.weight.shape(), -0.5, 0.5);
    const auto [l, r] = images(rng, c);
    std::vector<Tensor> in{l, r};
    for (auto& t : pack(p)) in.push_back(t);
    const auto res = gradcheck(model_depth_op(c, p), in, 1e-5, 10);
    EXPECT_LT(res.max_rel_error, 1e-4) << to_string(mode) << " input " << res.worst_input;
  }
}

TEST(Checkpoint, RoundTripIsBitwise) {
  ModelConfig c = tiny(AttentionMode::ot_mea);
  Rng rng(11);
  const auto p = build(c, rng);
  std::stringstream ss;
  save_checkpoint(ss, c, p);
  const auto ck = load_checkpoint(ss);
  EXPECT_EQ(ck.config, c);
  const auto a = named_params(p), b = named_params(ck.params);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second) << a[i].first;
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 8), "HNETCKPT");
}

TEST(Checkpoint, RejectsCorruption) {
  ModelConfig c = tiny();
  Rng rng(12);
  const auto p = build(c, rng);
  std::stringstream ss;
  save_checkpoint(ss, c, p);
  std::string bytes = ss.str();
  std::string bad = bytes;
  bad[0] = 'X';
  std::istringstream s1(bad);
  EXPECT_THROW(load_checkpoint(s1), ValidationError);
  std::istringstream s2(bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(load_checkpoint(s2), ValidationError);
}
