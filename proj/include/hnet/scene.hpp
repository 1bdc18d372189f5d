#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hnet/kv.hpp"
#include "hnet/losses.hpp"

namespace hnet {

/// A textured planar surface seen through a rectangle of the left image.
/// Depth varies with the left-image column so that disparity is affine in x
/// (a plane slanted about the vertical axis); equal depths give a
/// fronto-parallel plane. Later planes are not implicitly nearer: the nearest
/// surface (largest disparity) wins at every pixel.
struct PlaneSpec {
  double depth_left = 1.0;   // depth at column 0
  double depth_right = 1.0;  // depth at column w - 1
  std::size_t x0 = 0, x1 = 0, y0 = 0, y1 = 0;  // left-image rectangle [x0, x1) x [y0, y1); x1 = 0 means full image
  std::uint64_t texture_seed = 1;
  double texture_period = 6.0;  // value-noise lattice spacing in pixels
};

struct SceneConfig {
  std::size_t height = 32;
  std::size_t width = 64;
  Camera camera{};
  std::vector<PlaneSpec> planes;
  double noise = 0.0;  // uniform per-pixel noise amplitude

  /// Depth units are scaled so the representable range is [0.1, 100].
  static constexpr double kMinDepth = 0.1, kMaxDepth = 100.0;

  void validate() const {
    if (height == 0 || width < 2) throw ValidationError("scene: image must be at least 1x2");
    if (!(camera.focal > 0.0)) throw ValidationError("scene: focal length must be > 0");
    if (!(camera.baseline > 0.0)) throw ValidationError("scene: baseline must be > 0");
    if (planes.empty()) throw ValidationError("scene: at least one plane is required");
    if (!(noise >= 0.0 && noise <= 0.5)) throw ValidationError("scene: noise must lie in [0, 0.5]");
    for (std::size_t k = 0; k < planes.size(); ++k) {
      const auto& p = planes[k];
      const std::string tag = "scene: plane " + std::to_string(k);
      for (double d : {p.depth_left, p.depth_right}) {
        if (!(d >= kMinDepth && d <= kMaxDepth)) {
          throw ValidationError(tag + " depth " + KvDoc::format_double(d) + " outside [0.1, 100]");
        }
      }
      if (p.x1 != 0 && !(p.x0 < p.x1 && p.x1 <= width)) throw ValidationError(tag + " has an invalid column range");
      if (p.y1 != 0 && !(p.y0 < p.y1 && p.y1 <= height)) throw ValidationError(tag + " has an invalid row range");
      if (!(p.texture_period >= 1.0)) throw ValidationError(tag + " texture period must be >= 1");
      const double slope = (disparity_at(p, static_cast<double>(width - 1)) - disparity_at(p, 0.0));
      if (!(std::abs(slope) / static_cast<double>(width - 1) < 0.5)) {
        throw ValidationError(tag + " is slanted too steeply");
      }
    }
  }

  /// Disparity of plane p at left-image column x.
  double disparity_at(const PlaneSpec& p, double x) const {
    const double dl = camera.fb() / p.depth_left, dr = camera.fb() / p.depth_right;
    return dl + (dr - dl) * x / static_cast<double>(width - 1);
  }

  void write(KvDoc& doc) const {
    doc.set("scene.height", height);
    doc.set("scene.width", width);
    doc.set("scene.focal", camera.focal);
    doc.set("scene.baseline", camera.baseline);
    doc.set("scene.noise", noise);
    doc.set("scene.planes", planes.size());
    for (std::size_t k = 0; k < planes.size(); ++k) {
      const auto& p = planes[k];
      const std::string b = "plane." + std::to_string(k) + ".";
      doc.set(b + "depth_left", p.depth_left);
      doc.set(b + "depth_right", p.depth_right);
      doc.set(b + "rect", KvDoc::join({p.x0, p.x1, p.y0, p.y1}));
      doc.set(b + "texture_seed", static_cast<std::size_t>(p.texture_seed));
      doc.set(b + "texture_period", p.texture_period);
    }
  }

  std::string to_text() const {
    KvDoc d;
    write(d);
    return d.to_text();
  }

  static bool is_key(const std::string& k) {
    if (k.rfind("scene.", 0) == 0) {
      return k == "scene.height" || k == "scene.width" || k == "scene.focal" || k == "scene.baseline" ||
             k == "scene.noise" || k == "scene.planes";
    }
    if (k.rfind("plane.", 0) != 0) return false;
    const auto dot = k.find('.', 6);
    if (dot == std::string::npos || dot == 6) return false;
    for (std::size_t i = 6; i < dot; ++i)
      if (!std::isdigit(static_cast<unsigned char>(k[i]))) return false;
    const std::string f = k.substr(dot + 1);
    return f == "depth_left" || f == "depth_right" || f == "rect" || f == "texture_seed" || f == "texture_period";
  }

  /// Reads scene keys over `base`; other keys are ignored.
  static SceneConfig read(const KvDoc& doc, const SceneConfig& base) {
    SceneConfig c = base;
    c.height = doc.get_size("scene.height", c.height);
    c.width = doc.get_size("scene.width", c.width);
    c.camera.focal = doc.get_double("scene.focal", c.camera.focal);
    c.camera.baseline = doc.get_double("scene.baseline", c.camera.baseline);
    c.noise = doc.get_double("scene.noise", c.noise);
    if (doc.has("scene.planes")) {
      const std::size_t n = doc.get_size("scene.planes", 0);
      if (n > 64) throw ValidationError("scene: at most 64 planes");
      c.planes.assign(n, PlaneSpec{});
    }
    for (std::size_t k = 0; k < c.planes.size(); ++k) {
      auto& p = c.planes[k];
      const std::string b = "plane." + std::to_string(k) + ".";
      p.depth_left = doc.get_double(b + "depth_left", p.depth_left);
      p.depth_right = doc.get_double(b + "depth_right", p.depth_right);
      const auto r = doc.get_size_list(b + "rect", {p.x0, p.x1, p.y0, p.y1});
      if (r.size() != 4) throw ValidationError("config key '" + b + "rect': expected x0,x1,y0,y1");
      p.x0 = r[0];
      p.x1 = r[1];
      p.y0 = r[2];
      p.y1 = r[3];
      p.texture_seed = doc.get_size(b + "texture_seed", p.texture_seed);
      p.texture_period = doc.get_double(b + "texture_period", p.texture_period);
    }
    for (const auto& [key, v] : doc.entries()) {
      if (key.rfind("plane.", 0) == 0 && is_key(key)) {
        const std::size_t idx = std::stoul(key.substr(6, key.find('.', 6) - 6));
        if (idx >= c.planes.size()) throw ValidationError("config key '" + key + "': plane index out of range");
      }
    }
    c.validate();
    return c;
  }

  bool operator==(const SceneConfig& o) const { return to_text() == o.to_text(); }
};

/// Background plane at disparity 2 and a fronto-parallel box at disparity 5.
inline SceneConfig two_plane_scene() {
  SceneConfig c;
  c.planes.push_back({0.5, 0.5, 0, 0, 0, 0, 11, 6.0});
  c.planes.push_back({0.2, 0.2, 22, 46, 8, 24, 23, 5.0});
  return c;
}

/// Background slanted from disparity 1.5 to 4, plus a box at disparity 6.
inline SceneConfig slanted_scene() {
  SceneConfig c;
  c.planes.push_back({1.0 / 1.5, 0.25, 0, 0, 0, 0, 31, 12.0});
  c.planes.push_back({1.0 / 6.0, 1.0 / 6.0, 24, 44, 6, 22, 47, 12.0});
  return c;
}

/// One fronto-parallel plane covering the whole image.
inline SceneConfig single_plane_scene(double depth = 0.25) {
  SceneConfig c;
  c.planes.push_back({depth, depth, 0, 0, 0, 0, 5, 6.0});
  return c;
}

inline const std::vector<std::string>& scene_presets() {
  static const std::vector<std::string> names{"two-plane", "slanted", "single-plane"};
  return names;
}

inline SceneConfig scene_preset(const std::string& name) {
  if (name == "two-plane") return two_plane_scene();
  if (name == "slanted") return slanted_scene();
  if (name == "single-plane") return single_plane_scene();
  throw ValidationError("unknown scene preset '" + name + "' (expected two-plane, slanted or single-plane)");
}

struct StereoSample {
  Tensor left, right;     // [3, h, w] in [0, 1]
  Tensor gt_disparity;    // [1, h, w], pixels, left frame
  Tensor gt_depth;        // [1, h, w]
  Tensor occlusion_mask;  // [1, h, w], 1 where the left pixel has no clean match in the right view
};

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline double lattice_value(std::uint64_t seed, std::int64_t ix, std::int64_t iy, std::uint64_t ch) {
  std::uint64_t h = splitmix(seed ^ splitmix(static_cast<std::uint64_t>(ix) ^ splitmix(static_cast<std::uint64_t>(iy) ^ splitmix(ch))));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

/// Two-octave value noise in [0.1, 0.9]; continuous with continuous slope.
inline double value_noise(std::uint64_t seed, double u, double v, std::uint64_t ch, double period) {
  double acc = 0.0;
  const std::array<double, 2> amp{0.65, 0.35};
  for (std::size_t o = 0; o < 2; ++o) {
    const double p = period / static_cast<double>(1u << o);
    const double x = u / p, y = v / p;
    const double fx = std::floor(x), fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
    const double tx = fade(x - fx), ty = fade(y - fy);
    const std::uint64_t s = seed * 31 + o;
    const double a = lattice_value(s, ix, iy, ch), b = lattice_value(s, ix + 1, iy, ch);
    const double c = lattice_value(s, ix, iy + 1, ch), d = lattice_value(s, ix + 1, iy + 1, ch);
    acc += amp[o] * ((a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty);
  }
  return 0.1 + 0.8 * acc;
}

inline bool covers_row(const PlaneSpec& p, std::size_t i) { return p.y1 == 0 || (i >= p.y0 && i < p.y1); }

inline bool covers_left_col(const PlaneSpec& p, double x) {
  return p.x1 == 0 || (x >= static_cast<double>(p.x0) && x < static_cast<double>(p.x1));
}

/// Left column seen at right column xr on plane p: xr = xl - d(xl), d affine in xl.
inline double left_col_from_right(const SceneConfig& cfg, const PlaneSpec& p, double xr) {
  const double d0 = cfg.disparity_at(p, 0.0);
  const double g = (cfg.disparity_at(p, 1.0) - d0);
  return (xr + d0) / (1.0 - g);
}

/// Index of the nearest plane visible at left pixel (i, x), or -1.
inline int visible_left(const SceneConfig& cfg, std::size_t i, double x) {
  int best = -1;
  double best_d = -1.0;
  for (std::size_t k = 0; k < cfg.planes.size(); ++k) {
    const auto& p = cfg.planes[k];
    if (!covers_row(p, i) || !covers_left_col(p, x)) continue;
    const double d = cfg.disparity_at(p, x);
    if (d > best_d) best = static_cast<int>(k), best_d = d;
  }
  return best;
}

/// Index of the nearest plane visible at right pixel (i, xr), or -1.
inline int visible_right(const SceneConfig& cfg, std::size_t i, double xr) {
  int best = -1;
  double best_d = -1.0;
  for (std::size_t k = 0; k < cfg.planes.size(); ++k) {
    const auto& p = cfg.planes[k];
    if (!covers_row(p, i)) continue;
    const double xl = left_col_from_right(cfg, p, xr);
    if (!covers_left_col(p, xl)) continue;
    const double d = cfg.disparity_at(p, xl);
    if (d > best_d) best = static_cast<int>(k), best_d = d;
  }
  return best;
}

}  // namespace detail

/// Renders both views from the plane layout. The right view is obtained by
/// exact geometric resampling: right pixel xr shows the texture point of the
/// nearest plane whose left column xl satisfies xr = xl - d(xl).
inline StereoSample generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t h = cfg.height, w = cfg.width;
  StereoSample s{Tensor({3, h, w}), Tensor({3, h, w}), Tensor({1, h, w}), Tensor({1, h, w}), Tensor({1, h, w})};
  auto tex_seed = [&](std::size_t k) { return detail::splitmix(cfg.planes[k].texture_seed ^ detail::splitmix(seed)); };
  std::vector<int> right_owner(h * w, -1);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double x = static_cast<double>(j), y = static_cast<double>(i);
      const int kl = detail::visible_left(cfg, i, x);
      if (kl < 0) throw ValidationError("scene: left pixel (" + std::to_string(i) + ", " + std::to_string(j) + ") sees no plane; add a full-image background plane");
      const auto& pl = cfg.planes[static_cast<std::size_t>(kl)];
      const double d = cfg.disparity_at(pl, x);
      s.gt_disparity[i * w + j] = d;
      s.gt_depth[i * w + j] = cfg.camera.fb() / d;
      for (std::size_t c = 0; c < 3; ++c)
        s.left.at(c, i, j) = detail::value_noise(tex_seed(static_cast<std::size_t>(kl)), x, y, c, pl.texture_period);
      const int kr = detail::visible_right(cfg, i, x);
      right_owner[i * w + j] = kr;
      if (kr < 0) {
        // Nothing projects here: extend the nearest left column's texture of the background.
        for (std::size_t c = 0; c < 3; ++c) s.right.at(c, i, j) = s.left.at(c, i, 0);
        continue;
      }
      const auto& pr = cfg.planes[static_cast<std::size_t>(kr)];
      const double xl = detail::left_col_from_right(cfg, pr, x);
      for (std::size_t c = 0; c < 3; ++c)
        s.right.at(c, i, j) = detail::value_noise(tex_seed(static_cast<std::size_t>(kr)), xl, y, c, pr.texture_period);
    }
  // A left pixel has a clean match when its right-view position lies inside
  // the image and both interpolation neighbours show the same plane.
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double xr = static_cast<double>(j) - s.gt_disparity[i * w + j];
      const int k = detail::visible_left(cfg, i, static_cast<double>(j));
      bool clean = xr >= 0.0 && xr <= static_cast<double>(w - 1);
      if (clean) {
        const auto x0 = static_cast<std::size_t>(std::floor(xr));
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        clean = right_owner[i * w + x0] == k && right_owner[i * w + x1] == k;
      }
      s.occlusion_mask[i * w + j] = clean ? 0.0 : 1.0;
    }
  // The left border band as wide as the largest disparity is always excluded.
  double max_d = 0.0;
  for (double d : s.gt_disparity.data()) max_d = std::max(max_d, d);
  const auto band = std::min(w, static_cast<std::size_t>(std::ceil(max_d)));
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < band; ++j) s.occlusion_mask[i * w + j] = 1.0;
  if (cfg.noise > 0.0) {
    Rng rng(detail::splitmix(seed ^ 0x6e6f697365ull));
    for (Tensor* img : {&s.left, &s.right})
      for (double& v : img->data()) v = std::clamp(v + rng.uniform(-cfg.noise, cfg.noise), 0.0, 1.0);
  }
  return s;
}

}  // namespace hnet
