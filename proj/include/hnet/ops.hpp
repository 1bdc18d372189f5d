#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "hnet/tensor.hpp"

namespace hnet {

// ---------------------------------------------------------------------------
// batched matrix multiplication
// ---------------------------------------------------------------------------

inline Tensor batched_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("batched_matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor c({nb, m, n});
  for (std::size_t t = 0; t < nb; ++t) {
    const double* ap = a.ptr() + t * m * k;
    const double* bp = b.ptr() + t * k * n;
    double* cp = c.ptr() + t * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ap[i * k + p];
        const double* brow = bp + p * n;
        double* crow = cp + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  return c;
}

struct MatmulGrad {
  Tensor da;
  Tensor db;
};

/// dA = dC·Bᵀ, dB = Aᵀ·dC per batch.
inline MatmulGrad batched_matmul_vjp(const Tensor& a, const Tensor& b, const Tensor& dc) {
  const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (dc.shape() != Shape{nb, m, n}) throw ShapeError("batched_matmul_vjp: bad cotangent shape");
  MatmulGrad g{Tensor(a.shape()), Tensor(b.shape())};
  for (std::size_t t = 0; t < nb; ++t) {
    const double* ap = a.ptr() + t * m * k;
    const double* bp = b.ptr() + t * k * n;
    const double* dp = dc.ptr() + t * m * n;
    double* dap = g.da.ptr() + t * m * k;
    double* dbp = g.db.ptr() + t * k * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        double s = 0.0;
        const double av = ap[i * k + p];
        for (std::size_t j = 0; j < n; ++j) {
          s += dp[i * n + j] * bp[p * n + j];
          dbp[p * n + j] += av * dp[i * n + j];
        }
        dap[i * k + p] = s;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// softmax over the last axis
// ---------------------------------------------------------------------------

inline Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax_lastdim: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xp = x.ptr() + r * n;
    double* yp = y.ptr() + r * n;
    const double mx = *std::max_element(xp, xp + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yp[j] = std::exp(xp[j] - mx);
      s += yp[j];
    }
    for (std::size_t j = 0; j < n; ++j) yp[j] /= s;
  }
  return y;
}

/// Uses the forward output y.
inline Tensor softmax_lastdim_vjp(const Tensor& y, const Tensor& dy) {
  require_same_shape(y, dy, "softmax_lastdim_vjp");
  const std::size_t n = y.shape().back();
  const std::size_t rows = y.size() / n;
  Tensor dx(y.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* yp = y.ptr() + r * n;
    const double* gp = dy.ptr() + r * n;
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += yp[j] * gp[j];
    for (std::size_t j = 0; j < n; ++j) dx[r * n + j] = yp[j] * (gp[j] - dot);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// 1x1 convolution: per-pixel linear map across channels
// ---------------------------------------------------------------------------

/// Weights of a 1×1 convolution. A default-constructed instance is "absent".
struct Conv1x1 {
  Tensor weight;  // [c_out, c_in]
  Tensor bias;    // [c_out]

  std::size_t param_count() const { return weight.size() + bias.size(); }
};

/// X: [c_in, ...spatial], W: [c_out, c_in], bias: [c_out].
inline Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() < 1 || w.rank() != 2 || bias.rank() != 1 || w.dim(1) != x.dim(0) ||
      bias.dim(0) != w.dim(0)) {
    throw ShapeError("conv1x1: incompatible shapes x=" + shape_str(x.shape()) +
                     " w=" + shape_str(w.shape()) + " bias=" + shape_str(bias.shape()));
  }
  const std::size_t ci = w.dim(1), co = w.dim(0), p = x.size() / ci;
  Shape out_shape = x.shape();
  out_shape[0] = co;
  Tensor y(out_shape);
  for (std::size_t o = 0; o < co; ++o) {
    double* yp = y.ptr() + o * p;
    std::fill(yp, yp + p, bias[o]);
    for (std::size_t c = 0; c < ci; ++c) {
      const double wv = w.at(o, c);
      const double* xp = x.ptr() + c * p;
      for (std::size_t q = 0; q < p; ++q) yp[q] += wv * xp[q];
    }
  }
  return y;
}

inline Tensor conv1x1(const Tensor& x, const Conv1x1& c) { return conv1x1(x, c.weight, c.bias); }

struct Conv1x1Grad {
  Tensor dx;
  Tensor dw;
  Tensor dbias;
};

inline Conv1x1Grad conv1x1_vjp(const Tensor& x, const Tensor& w, const Tensor& dy) {
  const std::size_t ci = w.dim(1), co = w.dim(0), p = x.size() / ci;
  Conv1x1Grad g{Tensor(x.shape()), Tensor(w.shape()), Tensor({co})};
  for (std::size_t o = 0; o < co; ++o) {
    const double* gp = dy.ptr() + o * p;
    double bsum = 0.0;
    for (std::size_t q = 0; q < p; ++q) bsum += gp[q];
    g.dbias[o] = bsum;
    for (std::size_t c = 0; c < ci; ++c) {
      const double* xp = x.ptr() + c * p;
      double* dxp = g.dx.ptr() + c * p;
      const double wv = w.at(o, c);
      double s = 0.0;
      for (std::size_t q = 0; q < p; ++q) {
        s += gp[q] * xp[q];
        dxp[q] += wv * gp[q];
      }
      g.dw.at(o, c) = s;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// normalization along an axis
// ---------------------------------------------------------------------------

enum class NormMode { euclidean, l1 };

/// Norms at or below this floor are treated as zero; zero slices map to the
/// uniform vector (1/√n for euclidean, 1/n for l1).
inline constexpr double kNormFloor = 1e-12;

namespace detail {
struct AxisView {
  std::size_t outer, n, inner;
};
inline AxisView axis_view(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(x.shape()));
  }
  AxisView v{1, x.dim(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) v.inner *= x.dim(i);
  return v;
}
}  // namespace detail

inline Tensor normalize(const Tensor& x, std::size_t axis, NormMode mode) {
  const auto v = detail::axis_view(x, axis);
  Tensor y(x.shape());
  if (mode == NormMode::l1) {
    for (double e : x.data())
      if (e < 0.0) throw ValidationError("normalize(l1): input has negative entries");
  }
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.n * v.inner + in;
      double norm = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const double e = x[base + j * v.inner];
        norm += mode == NormMode::l1 ? e : e * e;
      }
      if (mode == NormMode::euclidean) norm = std::sqrt(norm);
      if (norm <= kNormFloor) {
        const double u = mode == NormMode::l1 ? 1.0 / static_cast<double>(v.n)
                                              : 1.0 / std::sqrt(static_cast<double>(v.n));
        for (std::size_t j = 0; j < v.n; ++j) y[base + j * v.inner] = u;
      } else {
        for (std::size_t j = 0; j < v.n; ++j) y[base + j * v.inner] = x[base + j * v.inner] / norm;
      }
    }
  }
  return y;
}

/// Slices that hit the zero-norm fallback are constant and receive zero gradient.
inline Tensor normalize_vjp(const Tensor& x, const Tensor& y, const Tensor& dy, std::size_t axis,
                            NormMode mode) {
  const auto v = detail::axis_view(x, axis);
  Tensor dx(x.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.n * v.inner + in;
      double norm = 0.0, dot = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const std::size_t q = base + j * v.inner;
        norm += mode == NormMode::l1 ? x[q] : x[q] * x[q];
        dot += y[q] * dy[q];
      }
      if (mode == NormMode::euclidean) norm = std::sqrt(norm);
      if (norm <= kNormFloor) continue;
      for (std::size_t j = 0; j < v.n; ++j) {
        const std::size_t q = base + j * v.inner;
        // y = x/n(x); dn/dx is x/n (euclidean) or 1 (l1).
        dx[q] = mode == NormMode::l1 ? (dy[q] - dot) / norm : (dy[q] - y[q] * dot) / norm;
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class F>
Tensor map(const Tensor& x, F f) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

inline Tensor relu(const Tensor& x) {
  return map(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

inline Tensor relu_vjp(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
  return dx;
}

inline double sigmoid(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

inline Tensor sigmoid(const Tensor& x) {
  return map(x, [](double v) { return sigmoid(v); });
}

/// Uses the forward output y.
inline Tensor sigmoid_vjp(const Tensor& y, const Tensor& dy) {
  Tensor dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (1.0 - y[i]);
  return dx;
}

inline Tensor exp(const Tensor& x) {
  return map(x, [](double v) { return std::exp(v); });
}

/// Uses the forward output y.
inline Tensor exp_vjp(const Tensor& y, const Tensor& dy) {
  Tensor dx(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i];
  return dx;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
  return y;
}

inline std::pair<Tensor, Tensor> mul_vjp(const Tensor& a, const Tensor& b, const Tensor& dy) {
  return {mul(dy, b), mul(dy, a)};
}

inline Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::scalar(s / static_cast<double>(x.size()));
}

inline Tensor mean_vjp(const Shape& in_shape, double dy) {
  return Tensor(in_shape, dy / static_cast<double>(shape_numel(in_shape)));
}

inline Tensor scaled(const Tensor& x, double s) {
  return map(x, [s](double v) { return s * v; });
}

/// dst += src
inline void accumulate(Tensor& dst, const Tensor& src) {
  if (!dst.defined()) {
    dst = src;
    return;
  }
  require_same_shape(dst, src, "accumulate");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// ---------------------------------------------------------------------------
// layout helpers
// ---------------------------------------------------------------------------

/// [a,b,c] -> [b,a,c]. Its own adjoint.
inline Tensor swap_leading_axes(const Tensor& x) {
  require_rank(x, 3, "swap_leading_axes");
  const std::size_t a = x.dim(0), b = x.dim(1), c = x.dim(2);
  Tensor y({b, a, c});
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      std::copy_n(x.ptr() + (i * b + j) * c, c, y.ptr() + (j * a + i) * c);
  return y;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "concat_channels");
  require_rank(b, 3, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor y({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.data().begin(), a.data().end(), y.ptr());
  std::copy(b.data().begin(), b.data().end(), y.ptr() + a.size());
  return y;
}

inline std::pair<Tensor, Tensor> split_channels(const Tensor& y, std::size_t first) {
  const std::size_t h = y.dim(1), w = y.dim(2), second = y.dim(0) - first;
  Tensor a({first, h, w}), b({second, h, w});
  std::copy_n(y.ptr(), a.size(), a.ptr());
  std::copy_n(y.ptr() + a.size(), b.size(), b.ptr());
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// bilinear upsampling, half-pixel centres: source = (i + 0.5)/f - 0.5, clamped
// ---------------------------------------------------------------------------

namespace detail {
struct Tap {
  std::size_t i0, i1;
  double t;
};
inline std::vector<Tap> upsample_taps(std::size_t n, std::size_t f) {
  std::vector<Tap> taps(n * f);
  for (std::size_t o = 0; o < n * f; ++o) {
    double s = (static_cast<double>(o) + 0.5) / static_cast<double>(f) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    taps[o] = {i0, i1, s - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace detail

inline Tensor upsample_bilinear(const Tensor& x, std::size_t factor) {
  require_rank(x, 3, "upsample_bilinear");
  if (factor < 1) throw ValidationError("upsample_bilinear: factor must be >= 1");
  if (factor == 1) return x;
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  const auto ty = detail::upsample_taps(h, factor);
  const auto tx = detail::upsample_taps(w, factor);
  Tensor y({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* xp = x.ptr() + ch * h * w;
    double* yp = y.ptr() + ch * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const auto& a = ty[i];
      const double* r0 = xp + a.i0 * w;
      const double* r1 = xp + a.i1 * w;
      for (std::size_t j = 0; j < ow; ++j) {
        const auto& b = tx[j];
        const double top = r0[b.i0] + b.t * (r0[b.i1] - r0[b.i0]);
        const double bot = r1[b.i0] + b.t * (r1[b.i1] - r1[b.i0]);
        yp[i * ow + j] = top + a.t * (bot - top);
      }
    }
  }
  return y;
}

inline Tensor upsample_bilinear_vjp(const Tensor& dy, const Shape& in_shape, std::size_t factor) {
  if (factor == 1) return dy;
  const std::size_t c = in_shape[0], h = in_shape[1], w = in_shape[2];
  const std::size_t oh = h * factor, ow = w * factor;
  const auto ty = detail::upsample_taps(h, factor);
  const auto tx = detail::upsample_taps(w, factor);
  Tensor dx(in_shape);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double* dp = dx.ptr() + ch * h * w;
    const double* gp = dy.ptr() + ch * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const auto& a = ty[i];
      for (std::size_t j = 0; j < ow; ++j) {
        const auto& b = tx[j];
        const double g = gp[i * ow + j];
        const double gt = g * (1.0 - a.t), gb = g * a.t;
        dp[a.i0 * w + b.i0] += gt * (1.0 - b.t);
        dp[a.i0 * w + b.i1] += gt * b.t;
        dp[a.i1 * w + b.i0] += gb * (1.0 - b.t);
        dp[a.i1 * w + b.i1] += gb * b.t;
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// k×k convolution, zero padding k/2, stride 1 or 2
// ---------------------------------------------------------------------------

struct Conv2d {
  Tensor weight;  // [c_out, c_in, k, k]
  Tensor bias;    // [c_out]
  std::size_t stride = 1;

  std::size_t param_count() const { return weight.size() + bias.size(); }
  std::size_t kernel() const { return weight.dim(2); }
};

namespace detail {
inline std::size_t conv_out(std::size_t n, std::size_t stride) { return (n + stride - 1) / stride; }

/// Output index range [lo, hi) for which in = o*stride + k - pad lies in [0, n).
inline std::pair<std::size_t, std::size_t> conv_range(std::size_t n_in, std::size_t n_out,
                                                      std::size_t stride, std::size_t k,
                                                      std::size_t pad) {
  std::size_t lo = 0;
  while (lo < n_out && lo * stride + k < pad) ++lo;
  std::size_t hi = n_out;
  while (hi > lo && (hi - 1) * stride + k >= n_in + pad) --hi;
  return {lo, hi};
}
}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3) ||
      w.dim(2) % 2 == 0 || bias.rank() != 1 || bias.dim(0) != w.dim(0) || stride < 1) {
    throw ShapeError("conv2d: incompatible shapes x=" + shape_str(x.shape()) +
                     " w=" + shape_str(w.shape()) + " bias=" + shape_str(bias.shape()));
  }
  const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t co = w.dim(0), k = w.dim(2), pad = k / 2;
  const std::size_t oh = detail::conv_out(h, stride), ow = detail::conv_out(wd, stride);
  Tensor y({co, oh, ow});
  for (std::size_t o = 0; o < co; ++o) {
    double* yp = y.ptr() + o * oh * ow;
    std::fill(yp, yp + oh * ow, bias[o]);
    for (std::size_t c = 0; c < ci; ++c) {
      const double* xp = x.ptr() + c * h * wd;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const auto [ylo, yhi] = detail::conv_range(h, oh, stride, ky, pad);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wv = w[((o * ci + c) * k + ky) * k + kx];
          const auto [xlo, xhi] = detail::conv_range(wd, ow, stride, kx, pad);
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const double* xrow = xp + (oy * stride + ky - pad) * wd;
            double* yrow = yp + oy * ow;
            if (stride == 1) {
              for (std::size_t ox = xlo; ox < xhi; ++ox) yrow[ox] += wv * xrow[ox + kx - pad];
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) yrow[ox] += wv * xrow[ox * stride + kx - pad];
            }
          }
        }
      }
    }
  }
  return y;
}

inline Tensor conv2d(const Tensor& x, const Conv2d& c) {
  return conv2d(x, c.weight, c.bias, c.stride);
}

struct Conv2dGrad {
  Tensor dx;
  Tensor dw;
  Tensor dbias;
};

inline Conv2dGrad conv2d_vjp(const Tensor& x, const Tensor& w, std::size_t stride, const Tensor& dy) {
  const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t co = w.dim(0), k = w.dim(2), pad = k / 2;
  const std::size_t oh = dy.dim(1), ow = dy.dim(2);
  Conv2dGrad g{Tensor(x.shape()), Tensor(w.shape()), Tensor({co})};
  for (std::size_t o = 0; o < co; ++o) {
    const double* gp = dy.ptr() + o * oh * ow;
    double bsum = 0.0;
    for (std::size_t q = 0; q < oh * ow; ++q) bsum += gp[q];
    g.dbias[o] = bsum;
    for (std::size_t c = 0; c < ci; ++c) {
      const double* xp = x.ptr() + c * h * wd;
      double* dxp = g.dx.ptr() + c * h * wd;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const auto [ylo, yhi] = detail::conv_range(h, oh, stride, ky, pad);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t widx = ((o * ci + c) * k + ky) * k + kx;
          const double wv = w[widx];
          const auto [xlo, xhi] = detail::conv_range(wd, ow, stride, kx, pad);
          double s = 0.0;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t off = (oy * stride + ky - pad) * wd;
            const double* xrow = xp + off;
            double* dxrow = dxp + off;
            const double* grow = gp + oy * ow;
            for (std::size_t ox = xlo; ox < xhi; ++ox) {
              const std::size_t ix = ox * stride + kx - pad;
              s += grow[ox] * xrow[ix];
              dxrow[ix] += wv * grow[ox];
            }
          }
          g.dw[widx] = s;
        }
      }
    }
  }
  return g;
}

}  // namespace hnet
