#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "hnet/kv.hpp"
#include "hnet/tensor.hpp"

namespace hnet {

namespace fs = std::filesystem;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open '" + p.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), {}};
}

inline void write_file(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + p.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + p.string() + "' failed");
}

inline std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Reads "P? w h maxval" followed by one whitespace byte.
inline std::size_t parse_pnm_header(const std::string& bytes, const char* magic, std::size_t& w, std::size_t& h,
                                    std::size_t& maxval, const fs::path& p) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t b = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(b, pos - b);
  };
  if (token() != magic) throw IoError("'" + p.string() + "' is not a " + magic + " image");
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw IoError("'" + p.string() + "': malformed image header");
  }
  return pos + 1;
}

}  // namespace detail

/// Binary PPM (P6, maxval 255) from a [3, h, w] tensor in [0, 1].
inline void write_ppm(const fs::path& p, const Tensor& img) {
  require_rank(img, 3, "write_ppm");
  if (img.dim(0) != 3) throw ShapeError("write_ppm: expected 3 channels, got " + shape_str(img.shape()));
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::string bytes = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < 3; ++c) bytes.push_back(static_cast<char>(detail::to_u8(img.at(c, i, j))));
  detail::write_file(p, bytes);
}

inline Tensor read_ppm(const fs::path& p) {
  const std::string bytes = detail::read_file(p);
  std::size_t w = 0, h = 0, maxval = 0;
  const std::size_t off = detail::parse_pnm_header(bytes, "P6", w, h, maxval, p);
  if (maxval != 255) throw IoError("'" + p.string() + "': only maxval 255 is supported");
  if (bytes.size() < off + 3 * w * h) throw IoError("'" + p.string() + "': truncated pixel data");
  Tensor img({3, h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, i, j) = static_cast<unsigned char>(bytes[off + (i * w + j) * 3 + c]) / 255.0;
  return img;
}

/// Affine map between 16-bit codes and values: value = offset + scale * code.
struct PgmEncoding {
  double offset = 0.0;
  double scale = 1.0;
};

/// Binary PGM (P5, maxval 65535, big-endian samples) of a [1, h, w] map,
/// linearly stretched over [lo, hi]; the map is recorded in `<path>.txt`.
inline PgmEncoding write_pgm16(const fs::path& p, const Tensor& map, double lo, double hi,
                               const std::string& units, const std::string& command) {
  require_rank(map, 3, "write_pgm16");
  if (map.dim(0) != 1) throw ShapeError("write_pgm16: expected 1 channel, got " + shape_str(map.shape()));
  if (!(hi > lo)) hi = lo + 1.0;
  const std::size_t h = map.dim(1), w = map.dim(2);
  const PgmEncoding enc{lo, (hi - lo) / 65535.0};
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n65535\n";
  for (double v : map.data()) {
    const auto code = static_cast<std::uint16_t>(std::lround(std::clamp((v - lo) / enc.scale, 0.0, 65535.0)));
    bytes.push_back(static_cast<char>(code >> 8));
    bytes.push_back(static_cast<char>(code & 0xff));
  }
  detail::write_file(p, bytes);
  KvDoc side;
  side.set("format", "pgm-p5-16bit");
  side.set("shape", KvDoc::join(map.shape()));
  side.set("units", units);
  side.set("value_offset", enc.offset);
  side.set("value_scale", enc.scale);
  side.set("mapping", "value = value_offset + value_scale * code");
  side.set("command", command);
  detail::write_file(p.string() + ".txt", side.to_text());
  return enc;
}

/// Decodes a PGM written by write_pgm16 back into values via its sidecar.
inline Tensor read_pgm16(const fs::path& p) {
  const std::string bytes = detail::read_file(p);
  std::size_t w = 0, h = 0, maxval = 0;
  const std::size_t off = detail::parse_pnm_header(bytes, "P5", w, h, maxval, p);
  if (maxval != 65535) throw IoError("'" + p.string() + "': expected maxval 65535");
  if (bytes.size() < off + 2 * w * h) throw IoError("'" + p.string() + "': truncated pixel data");
  const KvDoc side = KvDoc::parse(detail::read_file(p.string() + ".txt"));
  const double offset = side.get_double("value_offset", 0.0), scale = side.get_double("value_scale", 1.0);
  Tensor map({1, h, w});
  for (std::size_t q = 0; q < w * h; ++q) {
    const auto hi = static_cast<unsigned char>(bytes[off + 2 * q]), lo = static_cast<unsigned char>(bytes[off + 2 * q + 1]);
    map[q] = offset + scale * static_cast<double>((hi << 8) | lo);
  }
  return map;
}

/// Little-endian f32, row-major; `<path>.txt` records shape, units and command.
inline void write_raw_f32(const fs::path& p, const Tensor& t, const std::string& units, const std::string& command) {
  std::string bytes;
  bytes.reserve(4 * t.size());
  for (double v : t.data()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
  }
  detail::write_file(p, bytes);
  KvDoc side;
  side.set("format", "f32le");
  side.set("order", "row-major");
  side.set("shape", KvDoc::join(t.shape()));
  side.set("units", units);
  side.set("command", command);
  detail::write_file(p.string() + ".txt", side.to_text());
}

inline Tensor read_raw_f32(const fs::path& p) {
  const KvDoc side = KvDoc::parse(detail::read_file(p.string() + ".txt"));
  if (side.get_string("format", "") != "f32le") throw IoError("'" + p.string() + "': sidecar format is not f32le");
  const Shape shape = side.get_size_list("shape", {});
  Tensor t(shape);
  const std::string bytes = detail::read_file(p);
  if (bytes.size() != 4 * t.size()) {
    throw IoError("'" + p.string() + "': expected " + std::to_string(4 * t.size()) + " bytes, found " +
                  std::to_string(bytes.size()));
  }
  for (std::size_t q = 0; q < t.size(); ++q) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * q + k])) << (8 * k);
    t[q] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return t;
}

}  // namespace hnet
