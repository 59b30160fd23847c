#pragma once

// Synthetic kidney-stone-like videos: one textured blob per frame on a
// class-independent endoscopic background. The class signal lives only
// inside the blob.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "segprompt/image.hpp"
#include "segprompt/metrics.hpp"
#include "segprompt/rng.hpp"
#include "segprompt/segmap.hpp"

namespace segprompt {

inline constexpr int kClassCom = 0;
inline constexpr int kClassCap = 1;

inline const char* class_name(int label) { return label == kClassCom ? "com" : "cap"; }

struct Sample {
  Image image;                 // 3 x H x W in [0, 1]
  std::optional<SegMap> mask;  // absent when a dataset ships without masks
  int label = 0;
  std::string video_id;
  int frame_id = 0;

  const SegMap& require_mask() const {
    if (!mask) throw ConfigError("sample " + video_id + "/" + std::to_string(frame_id) + " has no mask");
    return *mask;
  }
};

/// Procedural stone surface: a hue band, speckle spots of a given size and
/// density, and the spot contrast.
struct ClassTexture {
  double hue_lo = 0.0, hue_hi = 0.0;  // degrees
  double saturation = 0.5;
  double value = 0.5;
  double spot_frequency = 0.3;  // fraction of the surface covered by spots
  double granularity = 2.0;     // spot size in pixels
  double spot_contrast = 0.3;
};

struct GeneratorConfig {
  std::size_t com_videos = 3;
  std::size_t cap_videos = 2;
  std::size_t frames_per_video = 40;
  std::size_t image_size = 32;
  ClassTexture com{20.0, 34.0, 0.55, 0.52, 0.45, 1.2, 0.40};
  ClassTexture cap{30.0, 44.0, 0.38, 0.68, 0.20, 3.0, 0.30};
  double noise = 0.02;
  std::size_t max_debris = 3;  // class-agnostic distractor spots in the background
  double debris_radius = 1.8;  // upper bound, pixels
  double stone_relief = 0.35;  // strength of the top-lit dome shading on the stone
  double spot_relief = 0.0;   // embossing of surface spots under the same light
  double ambient_spread = 0.0;  // range of the background gradient around the light
  double video_variation = 0.3;  // scales every per-video nuisance (exposure, cast, lighting, stone size)
  double decoy_probability = 0.0;  // chance of a class-agnostic stone-like fragment
  std::uint64_t seed = 0;
  std::string video_prefix;    // prepended to video ids, e.g. "pretext_"
  bool suppress_foreground = false;  // paint background where the stone would be

  void validate() const {
    if (com_videos == 0 || cap_videos == 0) throw ConfigError("each class needs at least one video");
    if (frames_per_video == 0) throw ConfigError("frames_per_video must be positive");
    if (image_size < 8) throw ConfigError("image_size must be at least 8");
    for (const auto* t : {&com, &cap}) {
      if (t->granularity <= 0.0 || t->spot_frequency < 0.0 || t->spot_frequency > 1.0) {
        throw ConfigError("texture granularity must be positive and spot_frequency in [0, 1]");
      }
    }
    if (noise < 0.0) throw ConfigError("noise must be non-negative");
    if (!(video_variation >= 0.0 && video_variation <= 2.0)) {
      throw ConfigError("video_variation must lie in [0, 2]");
    }
  }
};

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = v - c;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (auto& ch : rgb) ch += m;
  return rgb;
}

/// Bilinearly interpolated lattice noise in [0, 1] with the given cell size.
class ValueNoise {
 public:
  ValueNoise(std::size_t size, double cell, Rng& rng) : cell_(cell) {
    n_ = static_cast<std::size_t>(std::ceil(static_cast<double>(size) / cell)) + 2;
    lattice_.resize(n_ * n_);
    for (auto& v : lattice_) v = rng.uniform();
    off_y_ = rng.uniform(0.0, 1.0);
    off_x_ = rng.uniform(0.0, 1.0);
  }

  double at(double y, double x) const {
    const double gy = y / cell_ + off_y_, gx = x / cell_ + off_x_;
    const auto y0 = static_cast<std::size_t>(gy), x0 = static_cast<std::size_t>(gx);
    const double fy = gy - static_cast<double>(y0), fx = gx - static_cast<double>(x0);
    auto l = [&](std::size_t yy, std::size_t xx) {
      return lattice_[std::min(yy, n_ - 1) * n_ + std::min(xx, n_ - 1)];
    };
    const double top = l(y0, x0) * (1 - fx) + l(y0, x0 + 1) * fx;
    const double bot = l(y0 + 1, x0) * (1 - fx) + l(y0 + 1, x0 + 1) * fx;
    return top * (1 - fy) + bot * fy;
  }

 private:
  double cell_;
  std::size_t n_ = 0;
  double off_y_ = 0, off_x_ = 0;
  std::vector<double> lattice_;
};

/// Speckled surface colour at a pixel; `hue` is fixed per frame.
struct TexturePainter {
  const ClassTexture& tex;
  double hue;
  ValueNoise spots;
  ValueNoise shade;

  TexturePainter(const ClassTexture& t, std::size_t size, Rng& rng)
      : tex(t), hue(rng.uniform(t.hue_lo, t.hue_hi)), spots(size, t.granularity, rng),
        shade(size, 6.0, rng) {}

  // Soft threshold so spot edges are not aliased.
  double spot(double y, double x) const {
    return std::clamp((spots.at(y, x) - (1.0 - tex.spot_frequency)) / 0.08 + 0.5, 0.0, 1.0);
  }

  /// `relief` embosses the spots as seen under a light from (ly, lx).
  std::array<double, 3> at(double y, double x, double relief = 0.0, double ly = 0.0,
                           double lx = 0.0) const {
    const double sp = spot(y, x);
    double v = tex.value * (1.0 - tex.spot_contrast * sp) * (0.9 + 0.2 * shade.at(y, x));
    if (relief != 0.0) v *= 1.0 + relief * (spot(y - ly, x - lx) - spot(y + ly, x + lx));
    return hsv_to_rgb(hue, tex.saturation, std::clamp(v, 0.0, 1.0));
  }
};

struct VideoParams {
  double gain = 1.0;
  std::array<double, 3> cast{};
  double ambient_angle = 0.0;  // direction the background gradient rises towards
  double ambient_strength = 0.3;
  double light_angle = 0.0;    // direction of the light hitting the stone
  double blob_scale = 1.0;
};

inline VideoParams draw_video_params(Rng& rng, const GeneratorConfig& cfg) {
  const double k = cfg.video_variation;
  VideoParams v;
  v.gain = 1.0 + k * rng.uniform(-0.15, 0.15);
  for (auto& c : v.cast) c = k * 0.03 * rng.normal();
  const double ambient_offset = rng.uniform(-0.5, 0.5) * cfg.ambient_spread;
  v.ambient_strength = 0.25 + k * rng.uniform(-0.1, 0.1);
  // The scope light sits above the stone, give or take.
  v.light_angle = -std::numbers::pi / 2 + k * 0.3 * rng.normal();
  // The wall nearest the light is brightest; a spread of 2 pi decouples them.
  v.ambient_angle = v.light_angle + ambient_offset;
  v.blob_scale = 1.0 + k * rng.uniform(-0.2, 0.2);
  return v;
}

struct Blob {
  SegMap mask;
  double cy = 0, cx = 0, r0 = 0;
};

/// Smoothed random polygon: r(theta) = r0 (1 + sum_k a_k cos(k theta + phi_k)).
/// Centres are drawn from [margin, 1 - margin] of the frame.
inline Blob draw_blob(std::size_t size, double blob_scale, Rng& rng, double margin = 0.12) {
  const double s = static_cast<double>(size);
  for (int attempt = 0;; ++attempt) {
    const double r0 = s * blob_scale * rng.uniform(0.14, 0.25);
    const double cy = rng.uniform(margin * s, (1 - margin) * s);
    const double cx = rng.uniform(margin * s, (1 - margin) * s);
    std::array<double, 3> amp{}, phase{};
    for (std::size_t k = 0; k < 3; ++k) {
      amp[k] = rng.uniform(0.0, 0.14);
      phase[k] = rng.uniform(0.0, 2 * std::numbers::pi);
    }
    SegMap m = SegMap::background(size, size);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        const double theta = std::atan2(dy, dx);
        double r = 1.0;
        for (std::size_t k = 0; k < 3; ++k)
          r += amp[k] * std::cos(static_cast<double>(k + 2) * theta + phase[k]);
        if (std::hypot(dy, dx) < r0 * r) m.set(y, x, true);
      }
    const double f = m.foreground_fraction();
    if (f >= 0.05 && f <= 0.6) return Blob{std::move(m), cy, cx, r0};
    if (attempt > 1000) throw ContractError("blob generator cannot meet the foreground bounds");
  }
}

inline Image render_frame(const GeneratorConfig& cfg, int label, const VideoParams& vp,
                          const Blob& stone_blob, Rng& rng) {
  const SegMap& blob = stone_blob.mask;
  const std::size_t n = cfg.image_size;
  const double s = static_cast<double>(n);
  Image img = Image::zeros(3, n, n);

  const ClassTexture tissue{350.0, 372.0, 0.5, 0.72, 0.25, 5.0, 0.18};
  TexturePainter background(tissue, n, rng);
  TexturePainter stone(label == kClassCom ? cfg.com : cfg.cap, n, rng);

  // Class-agnostic debris: small spots with either class's surface.
  struct Debris {
    double y, x, r;
    TexturePainter painter;
  };
  std::vector<Debris> debris;
  const auto n_debris = rng.below(cfg.max_debris + 1);
  for (std::uint64_t i = 0; i < n_debris; ++i) {
    const auto& tex = rng.uniform() < 0.5 ? cfg.com : cfg.cap;
    const double y = rng.uniform(0.0, s), x = rng.uniform(0.0, s);
    const double r = rng.uniform(0.45, 1.0) * cfg.debris_radius;
    debris.push_back({y, x, r, TexturePainter(tex, n, rng)});
  }

  // A stone-sized fragment with either class's surface, never touching the
  // stone; only the mask tells the two apart.
  std::optional<Blob> decoy;
  std::optional<TexturePainter> decoy_painter;
  if (rng.uniform() < cfg.decoy_probability) {
    const auto& tex = rng.uniform() < 0.5 ? cfg.com : cfg.cap;
    decoy_painter.emplace(tex, n, rng);
    for (int attempt = 0; attempt < 100 && !decoy; ++attempt) {
      auto b = draw_blob(n, vp.blob_scale, rng);
      bool touches = false;
      for (std::size_t y = 0; y < n && !touches; ++y)
        for (std::size_t x = 0; x < n && !touches; ++x) {
          if (!b.mask.foreground(y, x)) continue;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const auto yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
              if (yy >= 0 && xx >= 0 && yy < static_cast<std::ptrdiff_t>(n) &&
                  xx < static_cast<std::ptrdiff_t>(n) &&
                  blob.foreground(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)))
                touches = true;
            }
        }
      if (!touches) decoy = std::move(b);
    }
  }

  const double amb_y = std::sin(vp.ambient_angle), amb_x = std::cos(vp.ambient_angle);
  const double light_y = std::sin(vp.light_angle), light_x = std::cos(vp.light_angle);
  const double half_diag = std::sqrt(2.0) * s / 2;
  // Dome shading: lit side brighter, with a specular spot near it.
  auto dome = [&](const Blob& b, double py, double px) {
    const double ry = (py - b.cy) / b.r0, rx = (px - b.cx) / b.r0;
    const double facing = ry * light_y + rx * light_x;
    const double hy = ry - 0.45 * light_y, hx = rx - 0.45 * light_x;
    return 1.0 + cfg.stone_relief * (0.8 * facing + std::exp(-(hy * hy + hx * hx) / 0.08));
  };
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      std::array<double, 3> rgb;
      double relief = 1.0;
      if (blob.foreground(y, x) && !cfg.suppress_foreground) {
        rgb = stone.at(py, px, cfg.spot_relief, light_y, light_x);
        relief = dome(stone_blob, py, px);
      } else if (decoy && decoy->mask.foreground(y, x)) {
        rgb = decoy_painter->at(py, px, cfg.spot_relief, light_y, light_x);
        relief = dome(*decoy, py, px);
      } else {
        rgb = background.at(py, px);
        for (const auto& d : debris) {
          if (blob.foreground(y, x)) break;
          if (std::hypot(py - d.y, px - d.x) < d.r) {
            rgb = d.painter.at(py, px, cfg.spot_relief, light_y, light_x);
            break;
          }
        }
      }
      const double cy = (py - s / 2) / (s / 2), cx = (px - s / 2) / (s / 2);
      const double radial = std::hypot(py - s / 2, px - s / 2) / half_diag;
      const double vignette = 1.0 - 0.55 * radial * radial;
      const double ambient = 1.0 + vp.ambient_strength * (cy * amb_y + cx * amb_x);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v =
            (rgb[c] * relief + vp.cast[c]) * vp.gain * vignette * ambient + cfg.noise * rng.normal();
        img.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return img;
}

}  // namespace detail

inline std::string video_id_for(const GeneratorConfig& cfg, int label, std::size_t index) {
  return cfg.video_prefix + class_name(label) + "_" + std::to_string(index);
}

/// Videos are emitted COM first, then CAP; frames in order. Every video and
/// every frame draws from its own substream of cfg.seed.
inline std::vector<Sample> generate(const GeneratorConfig& cfg) {
  cfg.validate();
  std::vector<Sample> out;
  out.reserve((cfg.com_videos + cfg.cap_videos) * cfg.frames_per_video);
  for (int label : {kClassCom, kClassCap}) {
    const std::size_t videos = label == kClassCom ? cfg.com_videos : cfg.cap_videos;
    for (std::size_t v = 0; v < videos; ++v) {
      const std::string vid = video_id_for(cfg, label, v);
      Rng video_rng(substream_seed(cfg.seed, "video/" + vid));
      const auto vp = detail::draw_video_params(video_rng, cfg);
      for (std::size_t f = 0; f < cfg.frames_per_video; ++f) {
        Rng rng(substream_seed(cfg.seed, "frame/" + vid, f));
        Sample s;
        auto blob = detail::draw_blob(cfg.image_size, vp.blob_scale, rng);
        s.image = detail::render_frame(cfg, label, vp, blob, rng);
        // Stored at 8 bits, so in-memory and on-disk datasets agree exactly.
        for (auto& px : s.image.data) px = static_cast<double>(detail::quantize(px)) / 255.0;
        s.mask = std::move(blob.mask);
        s.label = label;
        s.video_id = vid;
        s.frame_id = static_cast<int>(f);
        out.push_back(std::move(s));
      }
    }
  }
  return out;
}

/// Auxiliary unlabeled videos for backbone pretraining, drawn from a
/// separate substream and named apart from any evaluation video.
inline std::vector<Sample> generate_pretext(GeneratorConfig cfg) {
  cfg.seed = substream_seed(cfg.seed, "pretext");
  cfg.video_prefix = "pretext_" + cfg.video_prefix;
  return generate(cfg);
}

/// Resizes frames (bilinear) and masks (nearest) to the model input size.
inline Sample prepare_sample(const Sample& s, std::size_t size) {
  if (s.image.height == size && s.image.width == size) return s;
  Sample out = s;
  out.image = resize_bilinear(s.image, size, size);
  if (s.mask) out.mask = resize_nearest(*s.mask, size, size);
  return out;
}

// ---------------------------------------------------------------------------
// Mask degradation

/// Emulates an imperfect segmenter: boundary erosion/dilation and speckle
/// flips until dice(mask, result) lands in target +- 0.02.
inline SegMap degrade_mask(const SegMap& mask, double dice_target, std::uint64_t seed) {
  if (!(dice_target > 0.5 && dice_target <= 1.0)) {
    throw ConfigError("dice target " + std::to_string(dice_target) + " outside (0.5, 1]");
  }
  if (dice_target == 1.0) return mask;
  constexpr double kTolerance = 0.02;
  constexpr int kAttempts = 8;
  const std::size_t h = mask.height(), w = mask.width();
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    Rng rng(substream_seed(seed, "degrade", static_cast<std::uint64_t>(attempt)));
    SegMap out = mask;
    const std::size_t budget = 4 * mask.size();
    for (std::size_t it = 0; it < budget && dice(mask, out) > dice_target; ++it) {
      if (rng.uniform() < 0.85) {
        // Boundary move: flip a pixel that has a differing 4-neighbour.
        std::vector<std::size_t> edge;
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const bool f = out.foreground(y, x);
            if ((y > 0 && out.foreground(y - 1, x) != f) || (y + 1 < h && out.foreground(y + 1, x) != f) ||
                (x > 0 && out.foreground(y, x - 1) != f) || (x + 1 < w && out.foreground(y, x + 1) != f))
              edge.push_back(y * w + x);
          }
        if (edge.empty()) continue;
        out.flip(edge[rng.below(edge.size())]);
      } else {
        out.flip(rng.below(out.size()));
      }
    }
    if (std::abs(dice(mask, out) - dice_target) <= kTolerance) return out;
  }
  throw ContractError("degrade_mask: Dice " + std::to_string(dice_target) + " +- " +
                      std::to_string(kTolerance) + " unreachable after " +
                      std::to_string(kAttempts) + " attempts");
}

/// Degrades every mask in place with per-sample substreams of `seed`.
inline void degrade_masks(std::vector<Sample>& samples, double dice_target, std::uint64_t seed) {
  for (auto& s : samples) {
    const auto key = s.video_id + "/" + std::to_string(s.frame_id);
    s.mask = degrade_mask(s.require_mask(), dice_target, substream_seed(seed, key));
  }
}

// ---------------------------------------------------------------------------
// Folds

struct Fold {
  std::vector<std::string> train_videos;
  std::vector<std::string> val_videos;  // one COM video, one CAP video
};

struct FoldPlan {
  std::vector<Fold> folds;
};

/// Sorted video ids of each class; a video whose frames disagree on the
/// label is rejected.
inline std::array<std::vector<std::string>, 2> videos_by_class(const std::vector<Sample>& samples) {
  std::map<std::string, int> label_of;
  for (const auto& s : samples) {
    if (s.label != kClassCom && s.label != kClassCap) {
      throw ConfigError("label " + std::to_string(s.label) + " of " + s.video_id + " is not 0 or 1");
    }
    auto [it, inserted] = label_of.emplace(s.video_id, s.label);
    if (!inserted && it->second != s.label) {
      throw ConfigError("video " + s.video_id + " mixes both classes");
    }
  }
  std::array<std::vector<std::string>, 2> out;
  for (const auto& [vid, label] : label_of) out[static_cast<std::size_t>(label)].push_back(vid);
  return out;
}

/// Every COM x CAP pair becomes one validation split; the rest trains.
inline FoldPlan plan_folds(const std::vector<Sample>& samples) {
  const auto by_class = videos_by_class(samples);
  if (by_class[0].empty() || by_class[1].empty()) {
    throw ConfigError("plan_folds: need at least one video per class (found " +
                      std::to_string(by_class[0].size()) + " COM, " +
                      std::to_string(by_class[1].size()) + " CAP)");
  }
  FoldPlan plan;
  for (const auto& com : by_class[0])
    for (const auto& cap : by_class[1]) {
      Fold f;
      f.val_videos = {com, cap};
      for (const auto& group : by_class)
        for (const auto& v : group)
          if (v != com && v != cap) f.train_videos.push_back(v);
      plan.folds.push_back(std::move(f));
    }
  return plan;
}

inline std::vector<Sample> select_videos(const std::vector<Sample>& samples,
                                         const std::vector<std::string>& videos) {
  const std::set<std::string> keep(videos.begin(), videos.end());
  std::vector<Sample> out;
  for (const auto& s : samples)
    if (keep.count(s.video_id)) out.push_back(s);
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline constexpr const char* kManifestHeader = "frame_path,mask_path,label,video_id,frame_id";

inline void save_dataset(const std::vector<Sample>& samples, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  std::string manifest = std::string(kManifestHeader) + "\n";
  for (const auto& s : samples) {
    if (s.video_id.empty() || s.video_id.find_first_of(",/\\\n") != std::string::npos) {
      throw ConfigError("video id '" + s.video_id + "' cannot be stored in the manifest");
    }
    const std::string name = "frame_" + std::to_string(s.frame_id);
    const std::string frame_rel = "videos/" + s.video_id + "/" + name + ".ppm";
    fs::create_directories(fs::path(dir) / "videos" / s.video_id, ec);
    if (ec) throw IoError("cannot create video directory for " + s.video_id);
    write_ppm((fs::path(dir) / frame_rel).string(), s.image);
    std::string mask_rel;
    if (s.mask) {
      mask_rel = "masks/" + s.video_id + "/" + name + ".pgm";
      fs::create_directories(fs::path(dir) / "masks" / s.video_id, ec);
      if (ec) throw IoError("cannot create mask directory for " + s.video_id);
      write_mask_pgm((fs::path(dir) / mask_rel).string(), *s.mask);
    }
    manifest += frame_rel + "," + mask_rel + "," + std::to_string(s.label) + "," + s.video_id + "," +
                std::to_string(s.frame_id) + "\n";
  }
  write_file_bytes((fs::path(dir) / "manifest.csv").string(), manifest);
}

inline std::vector<Sample> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string manifest_path = (fs::path(dir) / "manifest.csv").string();
  std::istringstream in(read_file_bytes(manifest_path));
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw IoError(manifest_path + ": missing header '" + kManifestHeader + "'");
  }
  auto parse_int = [&](const std::string& text, std::size_t row) {
    int v = 0;
    const auto [p, err] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (err != std::errc() || p != text.data() + text.size()) {
      throw IoError(manifest_path + ":" + std::to_string(row) + ": '" + text + "' is not an integer");
    }
    return v;
  };
  std::vector<Sample> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cols.push_back(cell);
    if (!line.empty() && line.back() == ',') cols.emplace_back();
    if (cols.size() != 5) {
      throw IoError(manifest_path + ":" + std::to_string(row) + ": expected 5 columns, found " +
                    std::to_string(cols.size()));
    }
    Sample s;
    const std::string frame_path = (fs::path(dir) / cols[0]).string();
    s.image = read_ppm(frame_path);
    if (!cols[1].empty()) {
      const std::string mask_path = (fs::path(dir) / cols[1]).string();
      s.mask = read_mask_pgm(mask_path);
      if (s.mask->height() != s.image.height || s.mask->width() != s.image.width) {
        throw DimensionError(mask_path + ": mask " + std::to_string(s.mask->height()) + "x" +
                             std::to_string(s.mask->width()) + " does not match frame " +
                             std::to_string(s.image.height) + "x" + std::to_string(s.image.width));
      }
    }
    s.label = parse_int(cols[2], row);
    if (s.label != kClassCom && s.label != kClassCap) {
      throw IoError(manifest_path + ":" + std::to_string(row) + ": label must be 0 or 1");
    }
    s.video_id = cols[3];
    s.frame_id = parse_int(cols[4], row);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError(manifest_path + ": no samples");
  return out;
}

/// Content hash over the 8-bit quantized frames, masks, labels and ids, so
/// a dataset and its on-disk copy hash identically.
inline std::string dataset_checksum(const std::vector<Sample>& samples) {
  std::uint64_t h = fnv1a(nullptr, 0);
  auto mix = [&](const void* p, std::size_t n) { h = fnv1a(p, n, h); };
  for (const auto& s : samples) {
    mix(s.video_id.data(), s.video_id.size());
    const std::int32_t meta[2] = {s.label, s.frame_id};
    mix(meta, sizeof meta);
    const std::uint64_t dims[2] = {s.image.height, s.image.width};
    mix(dims, sizeof dims);
    for (double v : s.image.data) {
      const auto q = detail::quantize(v);
      mix(&q, 1);
    }
    const char has_mask = s.mask ? 1 : 0;
    mix(&has_mask, 1);
    if (s.mask)
      for (double v : s.mask->values()) {
        const char b = v > 0 ? 1 : 0;
        mix(&b, 1);
      }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace segprompt
