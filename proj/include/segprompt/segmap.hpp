#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "segprompt/errors.hpp"
#include "segprompt/tensor.hpp"

namespace segprompt {

/// Binarized segmentation map: +1 foreground (stone), -1 background.
class SegMap {
 public:
  SegMap() = default;
  SegMap(std::size_t height, std::size_t width, std::vector<double> values)
      : height_(height), width_(width), values_(std::move(values)) {
    if (height == 0 || width == 0 || values_.size() != height * width) {
      throw DimensionError("SegMap: " + std::to_string(values_.size()) + " values for " +
                           std::to_string(height) + "x" + std::to_string(width));
    }
    for (double v : values_) {
      if (v != 1.0 && v != -1.0) throw ConfigError("SegMap entries must be exactly -1 or +1");
    }
  }

  static SegMap background(std::size_t height, std::size_t width) {
    return SegMap(height, width, std::vector<double>(height * width, -1.0));
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return values_.size(); }
  std::span<const double> values() const { return values_; }

  bool foreground(std::size_t y, std::size_t x) const { return values_[y * width_ + x] > 0.0; }
  void set(std::size_t y, std::size_t x, bool fg) { values_[y * width_ + x] = fg ? 1.0 : -1.0; }
  void flip(std::size_t i) { values_[i] = -values_[i]; }

  std::size_t foreground_count() const {
    std::size_t n = 0;
    for (double v : values_) n += v > 0.0;
    return n;
  }
  double foreground_fraction() const {
    return static_cast<double>(foreground_count()) / static_cast<double>(size());
  }

  /// The map replicated over `channels` planes, [channels x H x W].
  Tensor to_tensor(std::size_t channels = 1) const {
    std::vector<double> v;
    v.reserve(channels * values_.size());
    for (std::size_t c = 0; c < channels; ++c) v.insert(v.end(), values_.begin(), values_.end());
    return Tensor({channels, height_, width_}, std::move(v));
  }

  bool operator==(const SegMap&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<double> values_;
};

/// Probability map -> SegMap; p >= threshold is foreground.
inline SegMap binarize(std::span<const double> probs, std::size_t height, std::size_t width,
                       double threshold = 0.5) {
  if (probs.size() != height * width) {
    throw DimensionError("binarize: " + std::to_string(probs.size()) + " probabilities for " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  std::vector<double> v(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ConfigError("binarize: probability " + std::to_string(p) + " outside [0, 1]");
    }
    v[i] = p >= threshold ? 1.0 : -1.0;
  }
  return SegMap(height, width, std::move(v));
}

}  // namespace segprompt
