#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "hnet/model.hpp"

namespace hnet {

struct LossConfig {
  double gamma = 0.85;    // SSIM weight in the photometric term
  double lambda = 0.001;  // smoothness weight
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValidationError("loss: gamma must lie in [0, 1]");
    if (!(lambda >= 0.0)) throw ValidationError("loss: lambda must be >= 0");
    if (!(c1 > 0.0 && c2 > 0.0)) throw ValidationError("loss: SSIM constants must be > 0");
  }
};

/// Rectified stereo camera; disparity = focal * baseline / depth.
struct Camera {
  double focal = 32.0;      // pixels
  double baseline = 0.03125;  // depth units

  double fb() const { return focal * baseline; }
};

// ---------------------------------------------------------------------------
// horizontal re-projection sampler
// ---------------------------------------------------------------------------

/// left_from_right reconstructs the left view from the right image by sampling
/// at x - d; right_from_left reconstructs the right view at x + d.
enum class WarpDirection { left_from_right, right_from_left };

namespace detail {
struct Sample {
  std::size_t x0, x1;
  double t;
  bool clamped;
};

inline Sample horizontal_sample(double x, std::size_t w) {
  const double hi = static_cast<double>(w - 1);
  if (!(x > 0.0)) return {0, 0, 0.0, true};
  if (!(x < hi)) return {w - 1, w - 1, 0.0, true};
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  return {x0, x0 + 1, x - static_cast<double>(x0), false};
}

inline double warp_sign(WarpDirection d) { return d == WarpDirection::left_from_right ? -1.0 : 1.0; }

inline void check_warp_args(const Tensor& src, const Tensor& disp) {
  require_rank(src, 3, "warp");
  if (disp.shape() != Shape{1, src.dim(1), src.dim(2)}) {
    throw ShapeError("warp: disparity shape " + shape_str(disp.shape()) + " does not match image " +
                     shape_str(src.shape()));
  }
}
}  // namespace detail

/// out[c, i, j] = linear interpolation of source row i at j ∓ disp[i, j],
/// clamped to the border columns.
inline Tensor warp(const Tensor& source, const Tensor& disp, WarpDirection dir) {
  detail::check_warp_args(source, disp);
  const std::size_t c = source.dim(0), h = source.dim(1), w = source.dim(2);
  const double sgn = detail::warp_sign(dir);
  Tensor out(source.shape());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const auto s = detail::horizontal_sample(static_cast<double>(j) + sgn * disp[i * w + j], w);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* row = source.ptr() + (ch * h + i) * w;
        out[(ch * h + i) * w + j] = (1.0 - s.t) * row[s.x0] + s.t * row[s.x1];
      }
    }
  return out;
}

struct WarpGrad {
  Tensor dsource, ddisp;
};

/// Clamped samples pass no gradient to the disparity. At integer sample
/// positions the right-sided slope is used.
inline WarpGrad warp_vjp(const Tensor& source, const Tensor& disp, WarpDirection dir, const Tensor& dout) {
  detail::check_warp_args(source, disp);
  require_same_shape(source, dout, "warp_vjp");
  const std::size_t c = source.dim(0), h = source.dim(1), w = source.dim(2);
  const double sgn = detail::warp_sign(dir);
  WarpGrad g{Tensor(source.shape()), Tensor(disp.shape())};
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const auto s = detail::horizontal_sample(static_cast<double>(j) + sgn * disp[i * w + j], w);
      double dd = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t r = (ch * h + i) * w;
        const double go = dout[r + j];
        g.dsource[r + s.x0] += (1.0 - s.t) * go;
        g.dsource[r + s.x1] += s.t * go;
        if (!s.clamped) dd += go * (source[r + s.x1] - source[r + s.x0]);
      }
      g.ddisp[i * w + j] = sgn * dd;
    }
  return g;
}

// ---------------------------------------------------------------------------
// SSIM with 3x3 box statistics; windows are truncated at the image border
// ---------------------------------------------------------------------------

namespace detail {

/// Mean over the in-image part of the 3x3 window around each pixel, per channel.
inline Tensor box3_mean(const Tensor& x) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor y(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t i0 = i > 0 ? i - 1 : 0, i1 = std::min(i + 1, h - 1);
        const std::size_t j0 = j > 0 ? j - 1 : 0, j1 = std::min(j + 1, w - 1);
        double s = 0.0;
        for (std::size_t a = i0; a <= i1; ++a)
          for (std::size_t b = j0; b <= j1; ++b) s += x[(ch * h + a) * w + b];
        y[(ch * h + i) * w + j] = s / static_cast<double>((i1 - i0 + 1) * (j1 - j0 + 1));
      }
  return y;
}

inline Tensor box3_mean_adjoint(const Tensor& g) {
  const std::size_t c = g.dim(0), h = g.dim(1), w = g.dim(2);
  Tensor x(g.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t i0 = i > 0 ? i - 1 : 0, i1 = std::min(i + 1, h - 1);
        const std::size_t j0 = j > 0 ? j - 1 : 0, j1 = std::min(j + 1, w - 1);
        const double v = g[(ch * h + i) * w + j] / static_cast<double>((i1 - i0 + 1) * (j1 - j0 + 1));
        for (std::size_t a = i0; a <= i1; ++a)
          for (std::size_t b = j0; b <= j1; ++b) x[(ch * h + a) * w + b] += v;
      }
  return x;
}

struct SsimStats {
  Tensor mx, my, exx, eyy, exy;
};

inline SsimStats ssim_stats(const Tensor& x, const Tensor& y) {
  return {box3_mean(x), box3_mean(y), box3_mean(mul(x, x)), box3_mean(mul(y, y)), box3_mean(mul(x, y))};
}

}  // namespace detail

/// Per-pixel, per-channel SSIM map [c, h, w].
inline Tensor ssim(const Tensor& x, const Tensor& y, const LossConfig& cfg = {}) {
  require_rank(x, 3, "ssim");
  require_same_shape(x, y, "ssim");
  const auto st = detail::ssim_stats(x, y);
  Tensor out(x.shape());
  for (std::size_t q = 0; q < out.size(); ++q) {
    const double mx = st.mx[q], my = st.my[q];
    const double vx = st.exx[q] - mx * mx, vy = st.eyy[q] - my * my, cxy = st.exy[q] - mx * my;
    out[q] = (2 * mx * my + cfg.c1) * (2 * cxy + cfg.c2) / ((mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2));
  }
  return out;
}

struct PairGrad {
  Tensor dx, dy;
};

inline PairGrad ssim_vjp(const Tensor& x, const Tensor& y, const Tensor& dout, const LossConfig& cfg = {}) {
  const auto st = detail::ssim_stats(x, y);
  Tensor dmx(x.shape()), dmy(x.shape()), dexx(x.shape()), deyy(x.shape()), dexy(x.shape());
  for (std::size_t q = 0; q < x.size(); ++q) {
    const double mx = st.mx[q], my = st.my[q];
    const double vx = st.exx[q] - mx * mx, vy = st.eyy[q] - my * my, cxy = st.exy[q] - mx * my;
    const double a = 2 * mx * my + cfg.c1, b = 2 * cxy + cfg.c2;
    const double cc = mx * mx + my * my + cfg.c1, d = vx + vy + cfg.c2;
    const double s = a * b / (cc * d);
    const double g = dout[q];
    // s as a function of (mx, my, vx, vy, cxy)
    const double ds_da = b / (cc * d), ds_db = a / (cc * d);
    const double ds_dc = -s / cc, ds_dd = -s / d;
    const double g_mx = g * (ds_da * 2 * my + ds_dc * 2 * mx);
    const double g_my = g * (ds_da * 2 * mx + ds_dc * 2 * my);
    const double g_vx = g * ds_dd, g_vy = g * ds_dd, g_cxy = g * ds_db * 2;
    // vx = exx - mx², vy = eyy - my², cxy = exy - mx·my
    dmx[q] = g_mx - 2 * mx * g_vx - my * g_cxy;
    dmy[q] = g_my - 2 * my * g_vy - mx * g_cxy;
    dexx[q] = g_vx;
    deyy[q] = g_vy;
    dexy[q] = g_cxy;
  }
  const Tensor amx = detail::box3_mean_adjoint(dmx), amy = detail::box3_mean_adjoint(dmy);
  const Tensor axx = detail::box3_mean_adjoint(dexx), ayy = detail::box3_mean_adjoint(deyy);
  const Tensor axy = detail::box3_mean_adjoint(dexy);
  PairGrad pg{Tensor(x.shape()), Tensor(x.shape())};
  for (std::size_t q = 0; q < x.size(); ++q) {
    pg.dx[q] = amx[q] + 2 * x[q] * axx[q] + y[q] * axy[q];
    pg.dy[q] = amy[q] + 2 * y[q] * ayy[q] + x[q] * axy[q];
  }
  return pg;
}

// ---------------------------------------------------------------------------
// photometric term
// ---------------------------------------------------------------------------

/// Per-pixel error (γ/2)(1 - SSIM) + (1 - γ)|I - I*|, per channel [c, h, w].
inline Tensor photometric_error_map(const Tensor& img, const Tensor& recon, const LossConfig& cfg = {}) {
  require_same_shape(img, recon, "photometric_loss");
  const Tensor s = ssim(img, recon, cfg);
  Tensor e(img.shape());
  for (std::size_t q = 0; q < e.size(); ++q)
    e[q] = 0.5 * cfg.gamma * (1.0 - s[q]) + (1.0 - cfg.gamma) * std::abs(img[q] - recon[q]);
  return e;
}

/// Mean of the error map over channels and pixels.
inline double photometric_loss(const Tensor& img, const Tensor& recon, const LossConfig& cfg = {}) {
  return mean(photometric_error_map(img, recon, cfg)).item();
}

inline PairGrad photometric_loss_vjp(const Tensor& img, const Tensor& recon, double dl, const LossConfig& cfg = {}) {
  require_same_shape(img, recon, "photometric_loss_vjp");
  const double k = dl / static_cast<double>(img.size());
  const Tensor dssim(img.shape(), -0.5 * cfg.gamma * k);
  PairGrad g = ssim_vjp(img, recon, dssim, cfg);
  for (std::size_t q = 0; q < img.size(); ++q) {
    const double diff = img[q] - recon[q];
    const double sg = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    g.dx[q] += (1.0 - cfg.gamma) * k * sg;
    g.dy[q] -= (1.0 - cfg.gamma) * k * sg;
  }
  return g;
}

/// Mean error over pixels whose 3x3 neighbourhood holds no excluded pixel
/// (exclude: [1, h, w], nonzero = excluded). Returns the mean and the count used.
inline std::pair<double, std::size_t> masked_photometric_loss(const Tensor& img, const Tensor& recon,
                                                               const Tensor& exclude, const LossConfig& cfg = {}) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (exclude.shape() != Shape{1, h, w}) throw ShapeError("masked_photometric_loss: mask shape mismatch");
  const Tensor e = photometric_error_map(img, recon, cfg);
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      bool clear = true;
      for (std::size_t a = (i > 0 ? i - 1 : 0); a <= std::min(i + 1, h - 1); ++a)
        for (std::size_t b = (j > 0 ? j - 1 : 0); b <= std::min(j + 1, w - 1); ++b) clear &= exclude[a * w + b] == 0.0;
      if (!clear) continue;
      for (std::size_t ch = 0; ch < c; ++ch) s += e[(ch * h + i) * w + j];
      n += c;
    }
  if (n == 0) throw ValidationError("masked_photometric_loss: every pixel is excluded");
  return {s / static_cast<double>(n), n / c};
}

// ---------------------------------------------------------------------------
// edge-aware smoothness on the mean-normalised map
// ---------------------------------------------------------------------------

namespace detail {
struct EdgeWeights {
  Tensor wx, wy;  // [h, w-1], [h-1, w] stored in [h, w] with unused last column/row
};

inline EdgeWeights edge_weights(const Tensor& img) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  EdgeWeights e{Tensor({h, w}), Tensor({h, w})};
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double gx = 0.0, gy = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = img.ptr() + ch * h * w;
        if (j + 1 < w) gx += std::abs(p[i * w + j + 1] - p[i * w + j]);
        if (i + 1 < h) gy += std::abs(p[(i + 1) * w + j] - p[i * w + j]);
      }
      e.wx[i * w + j] = std::exp(-gx / static_cast<double>(c));
      e.wy[i * w + j] = std::exp(-gy / static_cast<double>(c));
    }
  return e;
}

inline double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline double checked_mean(const Tensor& d) {
  const double m = mean(d).item();
  if (!(m >= 1e-12)) throw ValidationError("smoothness_loss: mean of the map is below 1e-12");
  return m;
}

inline void check_smooth_args(const Tensor& d, const Tensor& img) {
  require_rank(img, 3, "smoothness_loss");
  if (d.shape() != Shape{1, img.dim(1), img.dim(2)}) {
    throw ShapeError("smoothness_loss: map shape " + shape_str(d.shape()) + " does not match image " +
                     shape_str(img.shape()));
  }
}
}  // namespace detail

/// (1/N) Σ |∂x d*| e^{-|∂x I|} + |∂y d*| e^{-|∂y I|}, d* = d / mean(d), N = h·w.
inline double smoothness_loss(const Tensor& d, const Tensor& img) {
  detail::check_smooth_args(d, img);
  const std::size_t h = d.dim(1), w = d.dim(2);
  const double m = detail::checked_mean(d);
  const auto e = detail::edge_weights(img);
  double s = 0.0;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double v = d[i * w + j];
      if (j + 1 < w) s += std::abs(d[i * w + j + 1] - v) / m * e.wx[i * w + j];
      if (i + 1 < h) s += std::abs(d[(i + 1) * w + j] - v) / m * e.wy[i * w + j];
    }
  return s / static_cast<double>(h * w);
}

inline Tensor smoothness_loss_vjp(const Tensor& d, const Tensor& img, double dl) {
  detail::check_smooth_args(d, img);
  const std::size_t h = d.dim(1), w = d.dim(2), n = h * w;
  const double m = detail::checked_mean(d);
  const auto e = detail::edge_weights(img);
  Tensor g(d.shape());
  // L = S / m with S = Σ |Δd| w / N; dL/dd = dS/dd / m - S / m² · (1/N)
  double s = 0.0;
  const double k = dl / static_cast<double>(n) / m;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t q = i * w + j;
      if (j + 1 < w) {
        const double diff = d[q + 1] - d[q];
        s += std::abs(diff) * e.wx[q];
        const double t = k * detail::sign_of(diff) * e.wx[q];
        g[q + 1] += t;
        g[q] -= t;
      }
      if (i + 1 < h) {
        const double diff = d[q + w] - d[q];
        s += std::abs(diff) * e.wy[q];
        const double t = k * detail::sign_of(diff) * e.wy[q];
        g[q + w] += t;
        g[q] -= t;
      }
    }
  const double shift = dl * s / static_cast<double>(n) / (m * m) / static_cast<double>(n);
  for (double& v : g.data()) v -= shift;
  return g;
}

// ---------------------------------------------------------------------------
// multi-scale total
// ---------------------------------------------------------------------------

struct BranchTerms {
  double photometric = 0.0;
  double smoothness = 0.0;
};

/// terms[b][s]; b = 0 left, 1 right.
struct LossReport {
  std::array<std::vector<BranchTerms>, 2> terms;
  double lambda = 0.0;
  double photometric = 0.0;  // (1/2m) Σ photometric terms
  double smoothness = 0.0;   // (1/2m) Σ smoothness terms
  double total = 0.0;

  std::size_t scales() const { return terms[0].size(); }

  /// (1/2m) Σ_s (L^l_s + L^r_s) recomputed from the parts.
  double recombine() const {
    double s = 0.0;
    for (int b = 0; b < 2; ++b)
      for (const auto& t : terms[b]) s += t.photometric + lambda * t.smoothness;
    return s / (2.0 * static_cast<double>(scales()));
  }
};

namespace detail {
struct ScaleCache {
  Tensor omega_up;     // [1, h0, w0]
  Tensor inv_depth;    // aΩ + b
  Tensor disparity;    // fB (aΩ + b)
  Tensor recon;        // warped counterpart
};
}  // namespace detail

struct LossCache {
  std::array<std::vector<detail::ScaleCache>, 2> scales;
};

struct LossEvaluation {
  LossReport report;
  LossCache cache;
};

/// Every Ω_s is upsampled to full resolution, mapped to inverse depth and to
/// disparity; the counterpart image is warped, then the photometric and
/// smoothness terms are evaluated at full resolution.
inline LossEvaluation total_loss(const MultiScaleOutput& out, const Tensor& left, const Tensor& right,
                                 const Camera& cam, const LossConfig& cfg, const DepthTransform& dt = {}) {
  cfg.validate();
  require_same_shape(left, right, "total_loss");
  const std::size_t m = out.omega[0].size();
  if (m == 0 || out.omega[1].size() != m) throw ValidationError("total_loss: both branches need m >= 1 scales");
  const std::size_t h = left.dim(1), w = left.dim(2);
  LossEvaluation ev;
  ev.report.lambda = cfg.lambda;
  const std::array<const Tensor*, 2> self{&left, &right}, other{&right, &left};
  const std::array<WarpDirection, 2> dirs{WarpDirection::left_from_right, WarpDirection::right_from_left};
  for (int b = 0; b < 2; ++b) {
    for (std::size_t s = 0; s < m; ++s) {
      const Tensor& om = out.omega[b][s];
      const std::size_t f = std::size_t{1} << s;
      if (om.shape() != Shape{1, h / f, w / f} || h % f != 0 || w % f != 0) {
        throw ShapeError("total_loss: scale " + std::to_string(s) + " map has shape " + shape_str(om.shape()));
      }
      detail::ScaleCache sc;
      sc.omega_up = upsample_bilinear(om, f);
      sc.inv_depth = sigmoid_to_inverse_depth(sc.omega_up, dt);
      sc.disparity = scaled(sc.inv_depth, cam.fb());
      sc.recon = warp(*other[b], sc.disparity, dirs[b]);
      BranchTerms t;
      t.photometric = photometric_loss(*self[b], sc.recon, cfg);
      t.smoothness = smoothness_loss(sc.inv_depth, *self[b]);
      ev.report.terms[b].push_back(t);
      ev.report.photometric += t.photometric;
      ev.report.smoothness += t.smoothness;
      ev.cache.scales[b].push_back(std::move(sc));
    }
  }
  const double norm = 1.0 / (2.0 * static_cast<double>(m));
  ev.report.photometric *= norm;
  ev.report.smoothness *= norm;
  ev.report.total = ev.report.recombine();
  return ev;
}

/// Gradient of the total with respect to every Ω_s (same layout as the output).
inline std::array<std::vector<Tensor>, 2> total_loss_vjp(const MultiScaleOutput& out, const LossEvaluation& ev,
                                                         const Tensor& left, const Tensor& right,
                                                         const Camera& cam, const LossConfig& cfg,
                                                         const DepthTransform& dt = {}, double dtotal = 1.0) {
  const std::size_t m = out.omega[0].size();
  const double k = dtotal / (2.0 * static_cast<double>(m));
  const std::array<const Tensor*, 2> self{&left, &right}, other{&right, &left};
  const std::array<WarpDirection, 2> dirs{WarpDirection::left_from_right, WarpDirection::right_from_left};
  std::array<std::vector<Tensor>, 2> grads;
  for (int b = 0; b < 2; ++b) {
    for (std::size_t s = 0; s < m; ++s) {
      const auto& sc = ev.cache.scales[b][s];
      const PairGrad pg = photometric_loss_vjp(*self[b], sc.recon, k, cfg);
      const WarpGrad wg = warp_vjp(*other[b], sc.disparity, dirs[b], pg.dy);
      Tensor dinv = scaled(wg.ddisp, cam.fb());
      accumulate(dinv, smoothness_loss_vjp(sc.inv_depth, *self[b], k * cfg.lambda));
      const Tensor dup = scaled(dinv, dt.a);
      grads[b].push_back(upsample_bilinear_vjp(dup, out.omega[b][s].shape(), std::size_t{1} << s));
    }
  }
  return grads;
}

}  // namespace hnet
