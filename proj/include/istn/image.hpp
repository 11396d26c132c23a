#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "istn/common.hpp"

namespace istn {

struct Shape2 {
  int height = 0;
  int width = 0;

  std::size_t size() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
  friend bool operator==(const Shape2&, const Shape2&) = default;
};

inline std::string to_string(const Shape2& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width);
}

/// Row-major 2D scalar grid. Used for images (M, F, M', F') and SoI encodings.
class Image {
 public:
  Image() = default;
  Image(int height, int width, double fill = 0.0)
      : height_(height), width_(width), data_(static_cast<std::size_t>(height) * width, fill) {
    if (height < 0 || width < 0) throw DataError("negative image dimensions");
  }
  explicit Image(Shape2 shape, double fill = 0.0) : Image(shape.height, shape.width, fill) {}

  int height() const { return height_; }
  int width() const { return width_; }
  Shape2 shape() const { return {height_, width_}; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double spacing() const { return spacing_; }
  void set_spacing(double mm) { spacing_ = mm; }

  double& operator()(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  double operator()(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  double spacing_ = 1.0;
  std::vector<double> data_;
};

/// Structures-of-interest encoding (binary mask, distance map or centroid map).
using SoIMap = Image;

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DataError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                    to_string(b.shape()));
  }
}

// ---------------------------------------------------------------------------
// 16-bit raster I/O.
//
// Values are stored on a uniform 16-bit lattice over [lo, hi]. Images that were
// passed through snap_to_raster() before writing round-trip bit-identically.

struct RasterRange {
  double lo = 0.0;
  double hi = 1.0;
  friend bool operator==(const RasterRange&, const RasterRange&) = default;
};

inline std::uint16_t raster_code(double v, RasterRange r) {
  const double u = std::clamp((v - r.lo) / (r.hi - r.lo), 0.0, 1.0);
  return static_cast<std::uint16_t>(std::lround(u * 65535.0));
}

inline double raster_value(std::uint16_t code, RasterRange r) {
  return r.lo + (r.hi - r.lo) * (static_cast<double>(code) / 65535.0);
}

inline Image snap_to_raster(const Image& img, RasterRange r) {
  Image out = img;
  for (auto& v : out.values()) v = raster_value(raster_code(v, r), r);
  return out;
}

/// Writes a binary 16-bit PGM. The value range is recorded in a header comment.
inline void write_raster(const std::filesystem::path& path, const Image& img, RasterRange r) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  char header[160];
  std::snprintf(header, sizeof header, "P5\n# istn-range %.17g %.17g\n%d %d\n65535\n", r.lo, r.hi,
                img.width(), img.height());
  os << header;
  std::vector<unsigned char> bytes(img.size() * 2);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const std::uint16_t c = raster_code(img[i], r);
    bytes[2 * i] = static_cast<unsigned char>(c >> 8);
    bytes[2 * i + 1] = static_cast<unsigned char>(c & 0xff);
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("write failed: " + path.string());
}

inline Image read_raster(const std::filesystem::path& path, RasterRange* range_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing raster file: " + path.string());
  std::string magic;
  is >> magic;
  if (magic != "P5") throw DataError("not a binary PGM: " + path.string());
  RasterRange r;
  int width = -1, height = -1, maxval = -1;
  auto next_token = [&]() -> std::string {
    std::string tok;
    while (is >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(is, rest);
        std::istringstream cs(rest);
        std::string key;
        if (tok == "#" && (cs >> key) && key == "istn-range") cs >> r.lo >> r.hi;
        continue;
      }
      return tok;
    }
    throw DataError("truncated PGM header: " + path.string());
  };
  width = std::stoi(next_token());
  height = std::stoi(next_token());
  maxval = std::stoi(next_token());
  is.get();
  if (maxval != 65535 || width <= 0 || height <= 0) throw DataError("unsupported PGM: " + path.string());
  std::vector<unsigned char> bytes(static_cast<std::size_t>(width) * height * 2);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw DataError("truncated PGM data: " + path.string());
  }
  Image img(height, width);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const auto c = static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]);
    img[i] = raster_value(c, r);
  }
  if (range_out) *range_out = r;
  return img;
}

// ---------------------------------------------------------------------------
// Minimal PNG writer (8-bit gray or RGB) for montages and previews.

namespace detail {

inline void png_chunk(std::ofstream& os, const char* type, const std::vector<unsigned char>& data) {
  auto be32 = [&](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  be32(static_cast<std::uint32_t>(data.size()));
  os.write(type, 4);
  if (!data.empty()) os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
  if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
  be32(static_cast<std::uint32_t>(crc));
}

}  // namespace detail

/// channels = 1 (gray) or 3 (RGB); pixels are row-major, interleaved.
inline void write_png(const std::filesystem::path& path, int width, int height, int channels,
                      std::span<const unsigned char> pixels) {
  if (channels != 1 && channels != 3) throw UsageError("png: channels must be 1 or 3");
  std::vector<unsigned char> raw;
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  raw.reserve((stride + 1) * height);
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), pixels.begin() + y * stride, pixels.begin() + (y + 1) * stride);
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> packed(packed_size);
  if (compress(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size())) != Z_OK) {
    throw DataError("png: compression failed");
  }
  packed.resize(packed_size);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  const unsigned char signature[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  os.write(reinterpret_cast<const char*>(signature), 8);
  std::vector<unsigned char> ihdr = {
      static_cast<unsigned char>(width >> 24), static_cast<unsigned char>(width >> 16),
      static_cast<unsigned char>(width >> 8),  static_cast<unsigned char>(width),
      static_cast<unsigned char>(height >> 24), static_cast<unsigned char>(height >> 16),
      static_cast<unsigned char>(height >> 8), static_cast<unsigned char>(height),
      8, static_cast<unsigned char>(channels == 1 ? 0 : 2), 0, 0, 0};
  detail::png_chunk(os, "IHDR", ihdr);
  detail::png_chunk(os, "IDAT", packed);
  detail::png_chunk(os, "IEND", {});
}

/// Linearly maps [lo, hi] to 0..255.
inline std::vector<unsigned char> to_gray8(const Image& img, double lo, double hi) {
  std::vector<unsigned char> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double u = std::clamp((img[i] - lo) / (hi - lo), 0.0, 1.0);
    out[i] = static_cast<unsigned char>(std::lround(u * 255.0));
  }
  return out;
}

}  // namespace istn
