#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hnet/attention.hpp"
#include "hnet/kv.hpp"

namespace hnet {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Attention variant of a model; `nullopt` is the plain Siamese encoder/decoder.
using AttentionChoice = std::optional<AttentionMode>;

inline std::string attention_name(const AttentionChoice& a) { return a ? to_string(*a) : "off"; }

inline AttentionChoice parse_attention(const std::string& s) {
  if (s == "off" || s == "se-sd") return std::nullopt;
  for (auto m : {AttentionMode::eg_mea, AttentionMode::ot_mea, AttentionMode::eg_mnl, AttentionMode::ot_mnl})
    if (s == to_string(m)) return m;
  throw ValidationError("unknown attention mode '" + s + "' (expected off, eg-mea, ot-mea, eg-mnl, ot-mnl)");
}

/// Number of encoder stages (deepest) and decoder blocks (first) that carry attention.
inline constexpr std::size_t kAttentionSites = 3;

struct ModelConfig {
  std::size_t height = 32;  // h0
  std::size_t width = 64;   // w0
  std::vector<std::size_t> widths{8, 16, 32};
  std::size_t scales = 3;  // m
  AttentionChoice attention = AttentionMode::ot_mea;
  SinkhornConfig sinkhorn{};

  std::size_t stages() const { return widths.size(); }

  /// Output width of decoder block j.
  std::size_t decoder_width(std::size_t j) const {
    const std::size_t n = stages();
    return widths[n >= j + 2 ? n - j - 2 : 0];
  }

  /// Input width of decoder block j (before upsampling and skip concatenation).
  std::size_t decoder_input_width(std::size_t j) const {
    return j == 0 ? widths.back() : decoder_width(j - 1);
  }

  /// Encoder stage whose output is the skip input of decoder block j, if any.
  std::optional<std::size_t> skip_stage(std::size_t j) const {
    const std::size_t n = stages();
    if (n < j + 2) return std::nullopt;
    return n - j - 2;
  }

  void validate() const {
    const std::size_t n = stages();
    if (n < 1) throw ValidationError("model: at least one stage is required");
    for (std::size_t w : widths)
      if (w < 1) throw ValidationError("model: channel widths must be positive");
    if (scales < 1 || scales > n) {
      throw ValidationError("model: scales m=" + std::to_string(scales) + " must satisfy 1 <= m <= n_stage=" +
                            std::to_string(n));
    }
    const std::size_t div = std::size_t{1} << n;
    if (height == 0 || width == 0 || height % div != 0 || width % div != 0) {
      throw ValidationError("model: input " + std::to_string(height) + "x" + std::to_string(width) +
                            " must be divisible by 2^n_stage=" + std::to_string(div));
    }
    if (attention && n < kAttentionSites) {
      throw ValidationError("model: attention requires at least 3 stages, got " + std::to_string(n));
    }
    sinkhorn.validate();
  }

  void write(KvDoc& doc) const {
    doc.set("model.height", height);
    doc.set("model.width", width);
    doc.set("model.widths", KvDoc::join(widths));
    doc.set("model.scales", scales);
    doc.set("model.attention", attention_name(attention));
    doc.set("sinkhorn.epsilon", sinkhorn.epsilon);
    doc.set("sinkhorn.max_iters", sinkhorn.max_iters);
    doc.set("sinkhorn.tol", sinkhorn.tol);
  }

  static bool is_key(const std::string& k) {
    return k == "model.height" || k == "model.width" || k == "model.widths" || k == "model.scales" ||
           k == "model.attention" || k == "sinkhorn.epsilon" || k == "sinkhorn.max_iters" ||
           k == "sinkhorn.tol";
  }

  /// Reads model keys from `doc`, keeping defaults for absent ones; other keys are ignored.
  static ModelConfig read(const KvDoc& doc) { return read(doc, ModelConfig{}); }

  static ModelConfig read(const KvDoc& doc, ModelConfig c) {
    c.height = doc.get_size("model.height", c.height);
    c.width = doc.get_size("model.width", c.width);
    c.widths = doc.get_size_list("model.widths", c.widths);
    c.scales = doc.get_size("model.scales", c.scales);
    c.attention = parse_attention(doc.get_string("model.attention", attention_name(c.attention)));
    c.sinkhorn.epsilon = doc.get_double("sinkhorn.epsilon", c.sinkhorn.epsilon);
    c.sinkhorn.max_iters = doc.get_size("sinkhorn.max_iters", c.sinkhorn.max_iters);
    c.sinkhorn.tol = doc.get_double("sinkhorn.tol", c.sinkhorn.tol);
    c.validate();
    return c;
  }

  std::string to_text() const {
    KvDoc d;
    write(d);
    return d.to_text();
  }

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) { return a.to_text() == b.to_text(); }
};

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// Residual block: conv3x3(stride) -> ReLU -> conv3x3, plus a 1x1 projection
/// shortcut with the same stride, summed and passed through ReLU.
struct ResBlock {
  Conv2d conv1, conv2, proj;

  std::size_t param_count() const { return conv1.param_count() + conv2.param_count() + proj.param_count(); }
};

/// One stored copy of every weight. Both branches use the same encoder and
/// decoder objects; the two fusion convs are distinct.
struct ModelParams {
  std::vector<ResBlock> encoder;       // n down blocks
  Conv2d fuse_left, fuse_right;        // concat(self, other) -> widths.back()
  std::vector<ResBlock> decoder;       // n up blocks
  std::vector<Conv2d> heads;           // per scale s, from decoder block n-1-s
  std::vector<AttentionParams> enc_attention;  // encoder stages n-3 .. n-1
  std::vector<AttentionParams> dec_attention;  // inputs of decoder blocks 0 .. 2
};

using NamedTensor = std::pair<std::string, Tensor*>;
using ConstNamedTensor = std::pair<std::string, const Tensor*>;

namespace detail {

template <class T, class Out>
void list_conv(const std::string& prefix, T& c, Out& out) {
  out.emplace_back(prefix + ".weight", &c.weight);
  out.emplace_back(prefix + ".bias", &c.bias);
}

template <class P, class Out>
void list_params(P& p, Out& out) {
  auto block = [&](const std::string& pre, auto& b) {
    list_conv(pre + ".conv1", b.conv1, out);
    list_conv(pre + ".conv2", b.conv2, out);
    list_conv(pre + ".proj", b.proj, out);
  };
  auto attention = [&](const std::string& pre, auto& a) {
    list_conv(pre + ".value", a.value, out);
    list_conv(pre + ".sim_1", a.retrieval.sim_1, out);
    list_conv(pre + ".sim_2", a.retrieval.sim_2, out);
    if (a.retrieval.mass_1.weight.defined()) {
      list_conv(pre + ".mass_1", a.retrieval.mass_1, out);
      list_conv(pre + ".mass_2", a.retrieval.mass_2, out);
    }
  };
  for (std::size_t k = 0; k < p.encoder.size(); ++k) block("encoder." + std::to_string(k), p.encoder[k]);
  list_conv("fuse_left", p.fuse_left, out);
  list_conv("fuse_right", p.fuse_right, out);
  for (std::size_t j = 0; j < p.decoder.size(); ++j) block("decoder." + std::to_string(j), p.decoder[j]);
  for (std::size_t s = 0; s < p.heads.size(); ++s) list_conv("head." + std::to_string(s), p.heads[s], out);
  for (std::size_t k = 0; k < p.enc_attention.size(); ++k)
    attention("enc_attention." + std::to_string(k), p.enc_attention[k]);
  for (std::size_t j = 0; j < p.dec_attention.size(); ++j)
    attention("dec_attention." + std::to_string(j), p.dec_attention[j]);
}

}  // namespace detail

/// Every tensor of `p` with a stable dotted name, in a fixed order.
inline std::vector<NamedTensor> named_params(ModelParams& p) {
  std::vector<NamedTensor> out;
  detail::list_params(p, out);
  return out;
}

inline std::vector<ConstNamedTensor> named_params(const ModelParams& p) {
  std::vector<ConstNamedTensor> out;
  detail::list_params(p, out);
  return out;
}

/// Same structure as `p`, every tensor zero.
inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  for (auto& [name, t] : named_params(z)) t->fill(0.0);
  return z;
}

struct ParamBreakdown {
  std::size_t encoder = 0, fusion = 0, decoder = 0, heads = 0;
  std::size_t enc_attention = 0, dec_attention = 0;

  std::size_t attention() const { return enc_attention + dec_attention; }
  std::size_t backbone() const { return encoder + fusion + decoder + heads; }
  std::size_t total() const { return backbone() + attention(); }
};

inline ParamBreakdown param_count(const ModelParams& p) {
  ParamBreakdown b;
  for (const auto& e : p.encoder) b.encoder += e.param_count();
  b.fusion = p.fuse_left.param_count() + p.fuse_right.param_count();
  for (const auto& d : p.decoder) b.decoder += d.param_count();
  for (const auto& h : p.heads) b.heads += h.param_count();
  for (const auto& a : p.enc_attention) b.enc_attention += a.param_count();
  for (const auto& a : p.dec_attention) b.dec_attention += a.param_count();
  return b;
}

namespace detail {

/// Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) weights, zero bias.
inline Conv2d init_conv2d(Rng& rng, std::size_t co, std::size_t ci, std::size_t k, std::size_t stride) {
  const double bound = std::sqrt(6.0 / static_cast<double>(ci * k * k));
  return {rng.uniform_tensor({co, ci, k, k}, -bound, bound), Tensor({co}), stride};
}

inline Conv1x1 init_conv1x1(Rng& rng, std::size_t co, std::size_t ci) {
  const double bound = std::sqrt(6.0 / static_cast<double>(ci));
  return {rng.uniform_tensor({co, ci}, -bound, bound), Tensor({co})};
}

inline ResBlock init_block(Rng& rng, std::size_t ci, std::size_t co, std::size_t stride) {
  ResBlock b;
  b.conv1 = init_conv2d(rng, co, ci, 3, stride);
  b.conv2 = init_conv2d(rng, co, co, 3, 1);
  b.proj = init_conv2d(rng, co, ci, 1, stride);
  return b;
}

/// Value conv zero (block starts as identity); mass bias 1 so the initial
/// marginals are strictly positive.
inline AttentionParams init_attention(Rng& rng, std::size_t c, AttentionMode mode) {
  AttentionParams a;
  a.mode = mode;
  a.value = {Tensor({c, c}), Tensor({c})};
  a.retrieval.sim_1 = init_conv1x1(rng, c, c);
  a.retrieval.sim_2 = init_conv1x1(rng, c, c);
  if (uses_ot(mode)) {
    a.retrieval.mass_1 = init_conv1x1(rng, 1, c);
    a.retrieval.mass_2 = init_conv1x1(rng, 1, c);
    a.retrieval.mass_1.bias.fill(1.0);
    a.retrieval.mass_2.bias.fill(1.0);
  }
  return a;
}

}  // namespace detail

/// Draws the backbone first and attention weights afterwards, so a seed gives
/// the same backbone for every attention choice.
inline ModelParams build(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t n = cfg.stages();
  ModelParams p;
  for (std::size_t k = 0; k < n; ++k)
    p.encoder.push_back(detail::init_block(rng, k == 0 ? 3 : cfg.widths[k - 1], cfg.widths[k], 2));
  const std::size_t wb = cfg.widths.back();
  p.fuse_left = detail::init_conv2d(rng, wb, 2 * wb, 3, 1);
  p.fuse_right = detail::init_conv2d(rng, wb, 2 * wb, 3, 1);
  for (std::size_t j = 0; j < n; ++j) {
    const auto skip = cfg.skip_stage(j);
    const std::size_t ci = cfg.decoder_input_width(j) + (skip ? cfg.widths[*skip] : 0);
    p.decoder.push_back(detail::init_block(rng, ci, cfg.decoder_width(j), 1));
  }
  for (std::size_t s = 0; s < cfg.scales; ++s)
    p.heads.push_back(detail::init_conv2d(rng, 1, cfg.decoder_width(n - 1 - s), 3, 1));
  if (cfg.attention) {
    for (std::size_t k = n - kAttentionSites; k < n; ++k)
      p.enc_attention.push_back(detail::init_attention(rng, cfg.widths[k], *cfg.attention));
    for (std::size_t j = 0; j < kAttentionSites; ++j)
      p.dec_attention.push_back(detail::init_attention(rng, cfg.decoder_input_width(j), *cfg.attention));
  }
  return p;
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

struct ResCache {
  Tensor x, pre1, act1, pre_out;
};

inline Tensor resblock_forward(const ResBlock& b, const Tensor& x, ResCache& c) {
  c.x = x;
  c.pre1 = conv2d(x, b.conv1);
  c.act1 = relu(c.pre1);
  c.pre_out = add(conv2d(c.act1, b.conv2), conv2d(x, b.proj));
  return relu(c.pre_out);
}

inline void add_grad(Conv2d& dst, const Conv2dGrad& g) {
  accumulate(dst.weight, g.dw);
  accumulate(dst.bias, g.dbias);
}

inline Tensor resblock_vjp(const ResBlock& b, const ResCache& c, const Tensor& dy, ResBlock& g) {
  const Tensor ds = relu_vjp(c.pre_out, dy);
  const auto g2 = conv2d_vjp(c.act1, b.conv2.weight, b.conv2.stride, ds);
  const auto gp = conv2d_vjp(c.x, b.proj.weight, b.proj.stride, ds);
  const auto g1 = conv2d_vjp(c.x, b.conv1.weight, b.conv1.stride, relu_vjp(c.pre1, g2.dx));
  add_grad(g.conv2, g2);
  add_grad(g.proj, gp);
  add_grad(g.conv1, g1);
  return add(g1.dx, gp.dx);
}

/// Per branch (0 = left, 1 = right), per scale s: Ω_s in [0,1], shape [1, h0/2^s, w0/2^s].
struct MultiScaleOutput {
  std::array<std::vector<Tensor>, 2> omega;
};

struct ForwardCache {
  std::array<std::vector<ResCache>, 2> enc, dec;
  std::vector<AttentionCache> enc_att, dec_att;
  std::array<std::vector<Tensor>, 2> enc_out;  // post-attention stage outputs (skips)
  std::array<Tensor, 2> fuse_in, fuse_pre;
  std::array<std::vector<Tensor>, 2> dec_in;   // post-attention block inputs
  std::array<std::vector<Tensor>, 2> dec_out;
};

struct ForwardResult {
  MultiScaleOutput output;
  ForwardCache cache;
};

inline void check_image(const Tensor& img, const ModelConfig& cfg, const char* which) {
  if (img.shape() != Shape{3, cfg.height, cfg.width}) {
    throw ShapeError(std::string("forward: ") + which + " image has shape " + shape_str(img.shape()) +
                     ", model expects " + shape_str({3, cfg.height, cfg.width}));
  }
}

inline ForwardResult forward(const Tensor& left, const Tensor& right, const ModelParams& p,
                             const ModelConfig& cfg) {
  check_image(left, cfg, "left");
  check_image(right, cfg, "right");
  const std::size_t n = cfg.stages();
  const std::size_t first_att = n - std::min(n, kAttentionSites);
  const bool att = !p.enc_attention.empty();
  ForwardResult r;
  auto& c = r.cache;
  std::array<Tensor, 2> x{left, right};

  for (std::size_t k = 0; k < n; ++k) {
    for (int b = 0; b < 2; ++b) {
      c.enc[b].emplace_back();
      x[b] = resblock_forward(p.encoder[k], x[b], c.enc[b].back());
    }
    if (att && k >= first_att) {
      auto out = attention_block(x[0], x[1], p.enc_attention[k - first_att], cfg.sinkhorn);
      x = {std::move(out.left), std::move(out.right)};
      c.enc_att.push_back(std::move(out.cache));
    }
    for (int b = 0; b < 2; ++b) c.enc_out[b].push_back(x[b]);
  }

  c.fuse_in = {concat_channels(x[0], x[1]), concat_channels(x[1], x[0])};
  c.fuse_pre = {conv2d(c.fuse_in[0], p.fuse_left), conv2d(c.fuse_in[1], p.fuse_right)};
  x = {relu(c.fuse_pre[0]), relu(c.fuse_pre[1])};

  for (std::size_t j = 0; j < n; ++j) {
    if (att && j < kAttentionSites) {
      auto out = attention_block(x[0], x[1], p.dec_attention[j], cfg.sinkhorn);
      x = {std::move(out.left), std::move(out.right)};
      c.dec_att.push_back(std::move(out.cache));
    }
    const auto skip = cfg.skip_stage(j);
    for (int b = 0; b < 2; ++b) {
      c.dec_in[b].push_back(x[b]);
      Tensor u = upsample_bilinear(x[b], 2);
      if (skip) u = concat_channels(u, c.enc_out[b][*skip]);
      c.dec[b].emplace_back();
      x[b] = resblock_forward(p.decoder[j], u, c.dec[b].back());
      c.dec_out[b].push_back(x[b]);
    }
  }

  for (int b = 0; b < 2; ++b)
    for (std::size_t s = 0; s < cfg.scales; ++s)
      r.output.omega[b].push_back(sigmoid(conv2d(c.dec_out[b][n - 1 - s], p.heads[s])));
  return r;
}

struct BackwardResult {
  ModelParams grads;
  std::array<Tensor, 2> dimage;
};

/// Reverse pass given cotangents for every Ω (undefined entries count as zero).
inline BackwardResult backward(const ForwardResult& fr, const ModelParams& p, const ModelConfig& cfg,
                               const std::array<std::vector<Tensor>, 2>& domega) {
  const std::size_t n = cfg.stages();
  const std::size_t first_att = n - std::min(n, kAttentionSites);
  const bool att = !p.enc_attention.empty();
  const auto& c = fr.cache;
  BackwardResult res;
  res.grads = zeros_like(p);
  auto& g = res.grads;

  std::array<std::vector<Tensor>, 2> ddec_out;
  for (int b = 0; b < 2; ++b) {
    ddec_out[b].resize(n);
    for (std::size_t s = 0; s < cfg.scales; ++s) {
      if (s >= domega[b].size() || !domega[b][s].defined()) continue;
      const std::size_t j = n - 1 - s;
      const Tensor dz = sigmoid_vjp(fr.output.omega[b][s], domega[b][s]);
      const auto hg = conv2d_vjp(c.dec_out[b][j], p.heads[s].weight, 1, dz);
      add_grad(g.heads[s], hg);
      accumulate(ddec_out[b][j], hg.dx);
    }
  }

  std::array<std::vector<Tensor>, 2> denc_out;
  for (int b = 0; b < 2; ++b) denc_out[b].resize(n);
  std::array<Tensor, 2> dx;
  for (std::size_t j = n; j-- > 0;) {
    const auto skip = cfg.skip_stage(j);
    for (int b = 0; b < 2; ++b) {
      Tensor dy = ddec_out[b][j];
      if (dx[b].defined()) accumulate(dy, dx[b]);
      if (!dy.defined()) dy = Tensor(c.dec_out[b][j].shape());
      Tensor du = resblock_vjp(p.decoder[j], c.dec[b][j], dy, g.decoder[j]);
      const Shape in_shape = c.dec_in[b][j].shape();
      if (skip) {
        auto [dup, dskip] = split_channels(du, in_shape[0]);
        accumulate(denc_out[b][*skip], dskip);
        du = std::move(dup);
      }
      dx[b] = upsample_bilinear_vjp(du, in_shape, 2);
    }
    if (att && j < kAttentionSites) {
      auto ag = attention_block_vjp(c.dec_att[j], p.dec_attention[j], cfg.sinkhorn, dx[0], dx[1]);
      dx = {std::move(ag.dxl), std::move(ag.dxr)};
      accumulate(g.dec_attention[j], ag.dparams);
    }
  }

  const std::size_t wb = cfg.widths.back();
  const auto fl = conv2d_vjp(c.fuse_in[0], p.fuse_left.weight, 1, relu_vjp(c.fuse_pre[0], dx[0]));
  const auto fr_ = conv2d_vjp(c.fuse_in[1], p.fuse_right.weight, 1, relu_vjp(c.fuse_pre[1], dx[1]));
  add_grad(g.fuse_left, fl);
  add_grad(g.fuse_right, fr_);
  {
    auto [l_self, l_other] = split_channels(fl.dx, wb);
    auto [r_self, r_other] = split_channels(fr_.dx, wb);
    dx = {add(l_self, r_other), add(r_self, l_other)};
  }

  for (std::size_t k = n; k-- > 0;) {
    for (int b = 0; b < 2; ++b)
      if (denc_out[b][k].defined()) accumulate(dx[b], denc_out[b][k]);
    if (att && k >= first_att) {
      auto ag = attention_block_vjp(c.enc_att[k - first_att], p.enc_attention[k - first_att], cfg.sinkhorn,
                                    dx[0], dx[1]);
      dx = {std::move(ag.dxl), std::move(ag.dxr)};
      accumulate(g.enc_attention[k - first_att], ag.dparams);
    }
    for (int b = 0; b < 2; ++b) dx[b] = resblock_vjp(p.encoder[k], c.enc[b][k], dx[b], g.encoder[k]);
  }
  res.dimage = dx;
  return res;
}

// ---------------------------------------------------------------------------
// depth
// ---------------------------------------------------------------------------

/// D = 1 / (aΩ + b): Ω = 1 maps to 0.1, Ω = 0 to 100.
struct DepthTransform {
  double a = 9.99;
  double b = 0.01;
  double d_min() const { return 1.0 / (a + b); }
  double d_max() const { return 1.0 / b; }
};

inline Tensor sigmoid_to_inverse_depth(const Tensor& omega, const DepthTransform& t = {}) {
  return map(omega, [&](double o) { return t.a * o + t.b; });
}

inline Tensor sigmoid_to_depth(const Tensor& omega, const DepthTransform& t = {}) {
  return map(omega, [&](double o) { return 1.0 / (t.a * o + t.b); });
}

inline Tensor sigmoid_to_depth_vjp(const Tensor& depth, const Tensor& dd, const DepthTransform& t = {}) {
  Tensor g(depth.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = -t.a * depth[i] * depth[i] * dd[i];
  return g;
}

inline Tensor depth_to_disparity(const Tensor& depth, double focal, double baseline) {
  const double fb = focal * baseline;
  return map(depth, [fb](double d) { return fb / d; });
}

inline Tensor disparity_to_depth(const Tensor& disp, double focal, double baseline) {
  const double fb = focal * baseline;
  return map(disp, [fb](double d) { return fb / d; });
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'H', 'N', 'E', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class U>
U get_le(std::istream& is) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int ch = is.get();
    if (ch == EOF) throw ValidationError("checkpoint: unexpected end of file");
    v |= static_cast<U>(static_cast<unsigned char>(ch)) << (8 * i);
  }
  return v;
}

inline std::string get_bytes(std::istream& is, std::size_t n) {
  if (n > (std::size_t{1} << 30)) throw ValidationError("checkpoint: implausible length field");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw ValidationError("checkpoint: unexpected end of file");
  return s;
}

}  // namespace detail

/// Layout: magic, u32 version, u64 + config text, u64 tensor count, then per
/// tensor: u32 + name, u32 rank, u64 dims, f64 values; all little-endian.
inline void save_checkpoint(std::ostream& os, const ModelConfig& cfg, const ModelParams& p) {
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  const std::string text = cfg.to_text();
  detail::put_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto params = named_params(p);
  detail::put_le<std::uint64_t>(os, params.size());
  for (const auto& [name, t] : params) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape()) detail::put_le<std::uint64_t>(os, d);
    for (double v : t->data()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw ValidationError("checkpoint: write failed");
}

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("checkpoint: cannot open '" + path + "' for writing");
  save_checkpoint(os, cfg, p);
}

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

/// Rebuilds the parameter structure from the stored config and fills it; names
/// and shapes must match exactly.
inline Checkpoint load_checkpoint(std::istream& is) {
  char magic[sizeof kCheckpointMagic];
  is.read(magic, sizeof magic);
  if (is.gcount() != sizeof magic || !std::equal(magic, magic + sizeof magic, kCheckpointMagic))
    throw ValidationError("checkpoint: bad magic (not an HNETCKPT file)");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
  const std::string text = detail::get_bytes(is, detail::get_le<std::uint64_t>(is));
  const KvDoc doc = KvDoc::parse(text);
  doc.reject_unknown(ModelConfig::is_key);
  Checkpoint ck;
  ck.config = ModelConfig::read(doc);
  Rng scratch(0);
  ck.params = build(ck.config, scratch);
  const auto params = named_params(ck.params);
  const auto count = detail::get_le<std::uint64_t>(is);
  if (count != params.size()) {
    throw ValidationError("checkpoint: holds " + std::to_string(count) + " tensors, config implies " +
                          std::to_string(params.size()));
  }
  for (const auto& [name, t] : params) {
    const std::string stored = detail::get_bytes(is, detail::get_le<std::uint32_t>(is));
    if (stored != name) throw ValidationError("checkpoint: expected tensor '" + name + "', found '" + stored + "'");
    const auto rank = detail::get_le<std::uint32_t>(is);
    Shape s(rank);
    for (auto& d : s) d = detail::get_le<std::uint64_t>(is);
    if (s != t->shape()) {
      throw ValidationError("checkpoint: tensor '" + name + "' has shape " + shape_str(s) + ", expected " +
                            shape_str(t->shape()));
    }
    for (double& v : t->data()) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("checkpoint: cannot open '" + path + "'");
  return load_checkpoint(is);
}

}  // namespace hnet
