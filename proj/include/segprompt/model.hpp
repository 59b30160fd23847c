#pragma once

// Segmentation-map prompt tuning of a frozen ViT, plus every baseline
// tuning mode, each defined by what it feeds the backbone and which
// parameters it trains.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "segprompt/image.hpp"
#include "segprompt/segmap.hpp"
#include "segprompt/vit.hpp"

namespace segprompt {

// ---------------------------------------------------------------------------
// Tuning modes

enum class ModeKind {
  ft,
  ft_crop,
  ft_concat,
  resnet,
  resnet_crop,
  resnet_concat,
  vpt,
  vpt_deep,
  segprompt,
  segprompt_deep,
};

inline constexpr std::array<std::pair<ModeKind, std::string_view>, 10> kModeNames{{
    {ModeKind::ft, "ft"},
    {ModeKind::ft_crop, "ft-crop"},
    {ModeKind::ft_concat, "ft-concat"},
    {ModeKind::resnet, "resnet"},
    {ModeKind::resnet_crop, "resnet-crop"},
    {ModeKind::resnet_concat, "resnet-concat"},
    {ModeKind::vpt, "vpt"},
    {ModeKind::vpt_deep, "vpt-deep"},
    {ModeKind::segprompt, "segprompt"},
    {ModeKind::segprompt_deep, "segprompt-deep"},
}};

inline std::string_view mode_name(ModeKind k) {
  for (const auto& [kind, name] : kModeNames)
    if (kind == k) return name;
  return "?";
}

inline ModeKind parse_mode_kind(std::string_view name) {
  for (const auto& [kind, n] : kModeNames)
    if (n == name) return kind;
  throw ConfigError("unknown mode '" + std::string(name) +
                    "' (expected ft, ft-crop, ft-concat, resnet, resnet-crop, resnet-concat, vpt, "
                    "vpt-deep, segprompt, segprompt-deep)");
}

struct TuningMode {
  ModeKind kind = ModeKind::segprompt;
  bool no_indicator = false;     // omit r from the segmentation tokens
  bool no_extra_tokens = false;  // l_e = 0
  std::optional<std::size_t> seg_tokens_override{};

  bool is_segprompt() const { return kind == ModeKind::segprompt || kind == ModeKind::segprompt_deep; }
  bool is_vpt() const { return kind == ModeKind::vpt || kind == ModeKind::vpt_deep; }
  bool is_prompt() const { return is_segprompt() || is_vpt(); }
  bool is_deep() const { return kind == ModeKind::vpt_deep || kind == ModeKind::segprompt_deep; }
  bool is_resnet() const {
    return kind == ModeKind::resnet || kind == ModeKind::resnet_crop || kind == ModeKind::resnet_concat;
  }
  bool is_crop() const { return kind == ModeKind::ft_crop || kind == ModeKind::resnet_crop; }
  bool is_concat() const { return kind == ModeKind::ft_concat || kind == ModeKind::resnet_concat; }
  bool uses_segmap() const { return is_segprompt() || is_crop() || is_concat(); }

  void validate() const {
    if ((no_indicator || no_extra_tokens || seg_tokens_override) && !is_segprompt()) {
      throw ConfigError("ablation options apply only to segprompt modes, not " +
                        std::string(mode_name(kind)));
    }
  }

  /// Mode label with ablation suffixes, e.g. "segprompt w/o r".
  std::string label() const {
    std::string s(mode_name(kind));
    if (no_indicator) s += " w/o r";
    if (no_extra_tokens) s += " w/o z_e";
    if (seg_tokens_override) s += " l_s=" + std::to_string(*seg_tokens_override);
    return s;
  }
};

// ---------------------------------------------------------------------------
// Model configuration

struct ModelConfig {
  ViTConfig vit;
  ResNetStemConfig stem{3, 8, 16, 2};
  std::size_t seg_tokens = 16;   // l_s, must be a perfect square
  std::size_t extra_tokens = 2;  // l_e
  std::size_t prompt_tokens = 18;  // VPT prompt count l_p

  ModelConfig() {
    vit.embed_dim = 32;
    vit.num_layers = 4;
    vit.num_heads = 4;
    vit.mlp_ratio = 2;
  }
};

/// Side length of the pooled segmentation grid, s with s * s == l_s.
inline std::size_t seg_grid_side(std::size_t seg_tokens) {
  const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(seg_tokens))));
  if (seg_tokens == 0 || s * s != seg_tokens) {
    throw ConfigError("segmentation token count " + std::to_string(seg_tokens) +
                      " is not a positive perfect square");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Segmentation map encoder

struct SegEncoderConfig {
  std::size_t input_size = 32;
  std::size_t embed_dim = 32;
  std::size_t seg_tokens = 16;
  ResNetStemConfig stem{3, 8, 16, 2};
  bool use_indicator = true;
};

/// Encoder h (ResNet stem + 1x1 conv + adaptive pooling) with position
/// embeddings P_s and indicator token r:
///   M = flatten(h(O)),  z_s^i = m^i + p_s^i + r.
class SegEncoder {
 public:
  SegEncoder() = default;
  SegEncoder(SegEncoderConfig cfg, Rng& rng) : cfg_(cfg) {
    grid_ = seg_grid_side(cfg.seg_tokens);
    // Use the coarsest stem that still leaves room for an s x s pooled grid.
    cfg_.stem.in_channels = 3;
    if (grid_ * 4 <= cfg.input_size && cfg.input_size % 4 == 0) {
      cfg_.stem.stage2_stride = 2;
    } else if (grid_ * 2 <= cfg.input_size && cfg.input_size % 2 == 0) {
      cfg_.stem.stage2_stride = 1;
    } else {
      throw ConfigError("l_s = " + std::to_string(cfg.seg_tokens) + " needs a " +
                        std::to_string(grid_) + "x" + std::to_string(grid_) +
                        " grid, too fine for " + std::to_string(cfg.input_size) + "px maps");
    }
    stem = ResNetStem(cfg_.stem, rng);
    projector = Conv2d(cfg_.stem.stage2_channels, cfg.embed_dim, 1, 1, 0, rng, true);
    pos = init::truncated_normal({cfg.seg_tokens, cfg.embed_dim}, 0.02, rng);
    if (cfg.use_indicator) indicator = init::truncated_normal({cfg.embed_dim}, 0.02, rng);
  }

  const SegEncoderConfig& config() const { return cfg_; }
  std::size_t grid() const { return grid_; }

  /// M = flatten(h(O)) as [l_s x d], rows in row-major order over the grid.
  Tensor embed(const SegMap& o) const {
    if (o.height() != cfg_.input_size || o.width() != cfg_.input_size) {
      throw DimensionError("SegEncoder: map " + std::to_string(o.height()) + "x" +
                           std::to_string(o.width()) + " does not match configured size " +
                           std::to_string(cfg_.input_size));
    }
    auto features = projector.forward(stem.forward(o.to_tensor(3)));
    auto pooled = adaptive_avg_pool(features, grid_, grid_);
    return transpose(reshape(pooled, {cfg_.embed_dim, cfg_.seg_tokens}));
  }

  /// Segmentation tokens Z_s [l_s x d].
  Tensor encode(const SegMap& o) const {
    auto z = add(embed(o), pos);
    if (indicator.defined()) z = add(z, indicator);
    return z;
  }

  ParamList parameters() const {
    ParamList p;
    append_params(p, "stem.", stem.parameters());
    append_params(p, "projector.", projector.parameters());
    p.push_back({"pos", pos});
    if (indicator.defined()) p.push_back({"indicator", indicator});
    return p;
  }

  ResNetStem stem;
  Conv2d projector;
  Tensor pos;        // P_s [l_s x d]
  Tensor indicator;  // r [d], undefined when ablated

 private:
  SegEncoderConfig cfg_;
  std::size_t grid_ = 0;
};

/// Learnable prompt tokens: one shallow bank, or one bank per layer.
struct PromptSet {
  Tensor shallow;             // [count x d] or undefined
  std::vector<Tensor> deep;   // L banks, each [count x d]

  static PromptSet make(std::size_t count, std::size_t d, std::size_t layers, bool deep_variant,
                        Rng& rng) {
    PromptSet ps;
    if (count == 0) return ps;
    if (deep_variant) {
      for (std::size_t i = 0; i < layers; ++i)
        ps.deep.push_back(init::truncated_normal({count, d}, 0.02, rng));
    } else {
      ps.shallow = init::truncated_normal({count, d}, 0.02, rng);
    }
    return ps;
  }

  std::size_t count() const {
    if (shallow.defined()) return shallow.dim(0);
    if (!deep.empty()) return deep.front().dim(0);
    return 0;
  }

  ParamList parameters() const {
    ParamList p;
    if (shallow.defined()) p.push_back({"tokens", shallow});
    for (std::size_t i = 0; i < deep.size(); ++i) p.push_back({"layer" + std::to_string(i), deep[i]});
    return p;
  }
};

/// Z = [z_cls, Z_x, Z_s, Z_e]; Z_s and Z_e may be undefined (zero tokens).
inline TokenSequence assemble(const Tensor& z_cls, const Tensor& z_x, const Tensor& z_s,
                              const Tensor& z_e) {
  if (!z_cls.defined() || z_cls.rank() != 2 || z_cls.dim(0) != 1) {
    throw DimensionError("assemble: classification token must be [1 x d]");
  }
  const std::size_t d = z_cls.dim(1);
  TokenSequence seq;
  seq.roles.push_back(TokenRole::cls);
  auto add_part = [&](const Tensor& t, TokenRole role, const char* what) {
    if (!t.defined()) return;
    if (t.rank() != 2 || t.dim(1) != d) {
      throw DimensionError(std::string("assemble: ") + what + " tokens " + shape_str(t.shape()) +
                           " do not have width " + std::to_string(d));
    }
    seq.roles.insert(seq.roles.end(), t.dim(0), role);
  };
  add_part(z_x, TokenRole::image, "image");
  add_part(z_s, TokenRole::segmentation, "segmentation");
  add_part(z_e, TokenRole::extra, "extra");
  seq.tokens = concat_rows({z_cls, z_x, z_s, z_e});
  return seq;
}

// ---------------------------------------------------------------------------
// Full classifier

/// Checkpoint tensor prefixes for pretrained weights.
inline constexpr std::string_view kVitPrefix = "vit.";
inline constexpr std::string_view kResNetPrefix = "resnet.";

class SegPromptModel {
 public:
  /// `pretrained` supplies "vit.*" and "resnet.*" tensors; without it the
  /// backbone and stems are fixed-seed random draws.
  SegPromptModel(const ModelConfig& cfg, const TuningMode& mode, const Checkpoint* pretrained,
                 Rng& rng)
      : cfg_(cfg), mode_(mode) {
    mode.validate();
    cfg.vit.validate();
    const std::size_t d = cfg.vit.embed_dim;
    seg_tokens_ = mode.seg_tokens_override.value_or(cfg.seg_tokens);
    if (mode.is_segprompt()) seg_grid_side(seg_tokens_);

    if (mode.is_resnet()) {
      ResNetStemConfig sc = cfg.stem;
      sc.in_channels = 3;
      sc.stage2_stride = 2;
      resnet = ResNetStem(sc, rng);
      if (pretrained) load_values(resnet.parameters(), pretrained->tensors, std::string(kResNetPrefix));
      classifier = Linear(sc.stage2_channels, cfg.vit.num_classes, rng);
    } else {
      backbone = ViTBackbone(cfg.vit, rng);
      if (pretrained) load_values(backbone.parameters(), pretrained->tensors, std::string(kVitPrefix));
      classifier = Linear(d, cfg.vit.num_classes, rng);
    }

    if (mode.is_concat()) {
      // 4 -> 3 channel reduction that starts as a pass-through of RGB.
      concat_conv = Conv2d(4, 3, 1, 1, 0, rng, true);
      auto w = concat_conv.weight.mutable_data();
      std::fill(w.begin(), w.end(), 0.0);
      for (std::size_t c = 0; c < 3; ++c) w[c * 4 + c] = 1.0;
    }

    if (mode.is_segprompt()) {
      SegEncoderConfig ec;
      ec.input_size = cfg.vit.image_size;
      ec.embed_dim = d;
      ec.seg_tokens = seg_tokens_;
      ec.stem = cfg.stem;
      ec.use_indicator = !mode.no_indicator;
      seg_encoder = SegEncoder(ec, rng);
      if (pretrained) {
        // A finer grid uses a stride-1 second stage whose kernels differ in
        // shape from the pretrained stem; those start from fresh draws.
        const bool exact = seg_encoder.config().stem.stage2_stride == 2;
        load_values(seg_encoder.stem.parameters(), pretrained->tensors, std::string(kResNetPrefix),
                    !exact);
      }
      const std::size_t le = mode.no_extra_tokens ? 0 : cfg.extra_tokens;
      prompts = PromptSet::make(le, d, cfg.vit.num_layers, mode.is_deep(), rng);
    } else if (mode.is_vpt()) {
      prompts = PromptSet::make(cfg.prompt_tokens, d, cfg.vit.num_layers, mode.is_deep(), rng);
    }

    if (mode.is_prompt()) backbone.set_frozen(true);
  }

  const ModelConfig& config() const { return cfg_; }
  const TuningMode& mode() const { return mode_; }
  std::size_t seg_tokens() const { return seg_tokens_; }

  /// Logits [1 x num_classes] for one image.
  Tensor forward(const Image& image, const SegMap* mask) const {
    if (mode_.uses_segmap() && !mask) {
      throw ConfigError("mode " + std::string(mode_name(mode_.kind)) +
                        " requires a segmentation map");
    }
    Image input = mode_.is_crop() ? crop_to_foreground(image, *mask) : image;
    Tensor x = normalize(input).to_tensor();
    if (mode_.is_concat()) {
      auto m = mask->to_tensor(1);
      std::vector<double> stacked(x.data().begin(), x.data().end());
      stacked.insert(stacked.end(), m.data().begin(), m.data().end());
      x = concat_conv.forward(Tensor({4, image.height, image.width}, std::move(stacked)));
    }

    if (mode_.is_resnet()) {
      auto f = adaptive_avg_pool(resnet.forward(x), 1, 1);
      return classifier.forward(reshape(f, {1, resnet.out_channels()}));
    }

    const auto seq = token_sequence(x, mask);
    Tensor out;
    if (mode_.is_deep()) {
      out = backbone.encode_with_layer_prompts(seq.tokens, prompts.deep);
    } else {
      out = backbone.encode(seq);
    }
    return classifier.forward(slice_rows(out, 0, 1));
  }

  /// Input sequence for the ViT modes. Deep modes exclude the per-layer
  /// prompt banks, which are injected block by block.
  TokenSequence token_sequence(const Tensor& normalized_image, const SegMap* mask) const {
    auto z_x = backbone.patchify(normalized_image);
    Tensor z_s;
    if (mode_.is_segprompt()) z_s = seg_encoder.encode(*mask);
    return assemble(backbone.cls_token(), z_x, z_s, prompts.shallow);
  }

  /// Every parameter with a stable, unique name.
  ParamList all_parameters() const {
    ParamList p;
    if (mode_.is_resnet()) {
      append_params(p, "resnet.", resnet.parameters());
    } else {
      append_params(p, "backbone.", backbone.parameters());
    }
    if (mode_.is_concat()) append_params(p, "concat_conv.", concat_conv.parameters());
    if (mode_.is_segprompt()) append_params(p, "seg_encoder.", seg_encoder.parameters());
    append_params(p, "prompts.", prompts.parameters());
    append_params(p, "classifier.", classifier.parameters());
    return p;
  }

  /// FT/ResNet modes: everything. VPT: prompts + classifier. SegPrompt:
  /// seg encoder (incl. P_s and r) + Z_e + classifier.
  ParamList trainable_parameters() const {
    ParamList p;
    if (!mode_.is_prompt()) return all_parameters();
    if (mode_.is_segprompt()) append_params(p, "seg_encoder.", seg_encoder.parameters());
    append_params(p, "prompts.", prompts.parameters());
    append_params(p, "classifier.", classifier.parameters());
    return p;
  }

  ParamList backbone_parameters() const {
    ParamList p;
    if (mode_.is_resnet()) {
      append_params(p, "resnet.", resnet.parameters());
    } else {
      append_params(p, "backbone.", backbone.parameters());
    }
    return p;
  }

  ViTBackbone backbone;
  ResNetStem resnet;
  SegEncoder seg_encoder;
  PromptSet prompts;
  Conv2d concat_conv;
  Linear classifier;

 private:
  ModelConfig cfg_;
  TuningMode mode_;
  std::size_t seg_tokens_ = 0;
};

}  // namespace segprompt
