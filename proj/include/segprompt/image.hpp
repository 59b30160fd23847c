#pragma once

// RGB images in [0,1], preprocessing for the classifier, and binary
// PPM (P6) / PGM (P5) file IO.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "segprompt/checkpoint.hpp"
#include "segprompt/segmap.hpp"

namespace segprompt {

struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;  // channel-major, [C x H x W]

  static Image zeros(std::size_t c, std::size_t h, std::size_t w) {
    return Image{c, h, w, std::vector<double>(c * h * w, 0.0)};
  }

  double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }

  Tensor to_tensor() const { return Tensor({channels, height, width}, data); }

  bool operator==(const Image&) const = default;
};

// Per-channel normalisation applied before every model.
inline constexpr double kNormMean = 0.5;
inline constexpr double kNormStd = 0.25;

inline Image normalize(const Image& img) {
  Image out = img;
  for (auto& v : out.data) v = (v - kNormMean) / kNormStd;
  return out;
}

/// Bilinear resize with corner-aligned sampling; same-size resize is exact.
inline Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  Image out = Image::zeros(img.channels, out_h, out_w);
  auto src_coord = [](std::size_t i, std::size_t out_n, std::size_t in_n) {
    if (out_n == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = src_coord(y, out_h, img.height);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = src_coord(x, out_w, img.width);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = img.at(c, y0, x0) * (1 - fx) + img.at(c, y0, x1) * fx;
        const double bot = img.at(c, y1, x0) * (1 - fx) + img.at(c, y1, x1) * fx;
        out.at(c, y, x) = top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

/// Nearest-neighbour resize for masks, which must stay binary.
inline SegMap resize_nearest(const SegMap& m, std::size_t out_h, std::size_t out_w) {
  if (out_h == m.height() && out_w == m.width()) return m;
  SegMap out = SegMap::background(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x)
      out.set(y, x, m.foreground(y * m.height() / out_h, x * m.width() / out_w));
  return out;
}

struct BoundingBox {
  std::size_t y0, x0, y1, x1;  // inclusive-exclusive
};

inline std::optional<BoundingBox> foreground_box(const SegMap& m) {
  std::size_t y0 = m.height(), x0 = m.width(), y1 = 0, x1 = 0;
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x)
      if (m.foreground(y, x)) {
        y0 = std::min(y0, y);
        x0 = std::min(x0, x);
        y1 = std::max(y1, y + 1);
        x1 = std::max(x1, x + 1);
      }
  if (y1 == 0) return std::nullopt;
  return BoundingBox{y0, x0, y1, x1};
}

/// Tight foreground box, background zeroed inside it, resized back to the
/// input size. An empty mask leaves the image unchanged.
inline Image crop_to_foreground(const Image& img, const SegMap& mask) {
  if (mask.height() != img.height || mask.width() != img.width) {
    throw DimensionError("crop: mask " + std::to_string(mask.height()) + "x" +
                         std::to_string(mask.width()) + " does not match image " +
                         std::to_string(img.height) + "x" + std::to_string(img.width));
  }
  const auto box = foreground_box(mask);
  if (!box) return img;
  const std::size_t h = box->y1 - box->y0, w = box->x1 - box->x0;
  Image crop = Image::zeros(img.channels, h, w);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if (mask.foreground(box->y0 + y, box->x0 + x))
          crop.at(c, y, x) = img.at(c, box->y0 + y, box->x0 + x);
  return resize_bilinear(crop, img.height, img.width);
}

/// Rotates by k * 90 degrees counter-clockwise. Requires a square image.
inline Image rotate90(const Image& img, int k) {
  k = ((k % 4) + 4) % 4;
  Image out = img;
  const std::size_t n = img.height;
  for (int r = 0; r < k; ++r) {
    Image src = out;
    for (std::size_t c = 0; c < img.channels; ++c)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) out.at(c, n - 1 - x, y) = src.at(c, y, x);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNM

namespace detail {

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

struct PnmHeader {
  char kind = 0;  // '5' or '6'
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

inline PnmHeader parse_pnm_header(const std::string& bytes, const std::string& path) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& msg) -> void { throw IoError(path + ": " + msg); };
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_ws();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      ++pos;
      ++digits;
    }
    if (digits == 0) fail("malformed PNM header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    fail("not a binary PGM/PPM file");
  }
  PnmHeader h;
  h.kind = bytes[1];
  pos = 2;
  h.width = number();
  h.height = number();
  h.maxval = number();
  if (h.maxval != 255) fail("only 8-bit PNM is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    fail("malformed PNM header");
  h.data_offset = pos + 1;
  const std::size_t channels = h.kind == '6' ? 3 : 1;
  if (bytes.size() - h.data_offset < h.width * h.height * channels) fail("truncated pixel data");
  return h;
}

}  // namespace detail

inline void write_ppm(const std::string& path, const Image& img) {
  if (img.channels != 3) throw DimensionError("write_ppm: image must have 3 channels");
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(detail::quantize(img.at(c, y, x))));
  write_file_bytes(path, out);
}

inline Image read_ppm(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  const auto h = detail::parse_pnm_header(bytes, path);
  if (h.kind != '6') throw IoError(path + ": expected a P6 (PPM) image");
  Image img = Image::zeros(3, h.height, h.width);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + h.data_offset);
  for (std::size_t y = 0; y < h.height; ++y)
    for (std::size_t x = 0; x < h.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<double>(*p++) / 255.0;
  return img;
}

/// Masks are stored as PGM with foreground 255 and background 0.
inline void write_mask_pgm(const std::string& path, const SegMap& mask) {
  std::string out =
      "P5\n" + std::to_string(mask.width()) + " " + std::to_string(mask.height()) + "\n255\n";
  for (double v : mask.values()) out.push_back(static_cast<char>(v > 0 ? 255 : 0));
  write_file_bytes(path, out);
}

inline SegMap read_mask_pgm(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  const auto h = detail::parse_pnm_header(bytes, path);
  if (h.kind != '5') throw IoError(path + ": expected a P5 (PGM) mask");
  std::vector<double> v(h.width * h.height);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + h.data_offset);
  for (auto& x : v) {
    const unsigned char b = *p++;
    if (b != 0 && b != 255) {
      throw IoError(path + ": mask value " + std::to_string(b) + " is not 0 or 255");
    }
    x = b == 255 ? 1.0 : -1.0;
  }
  return SegMap(h.height, h.width, std::move(v));
}

}  // namespace segprompt
