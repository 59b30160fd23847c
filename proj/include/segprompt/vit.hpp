#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "segprompt/nn.hpp"

namespace segprompt {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t num_classes = 2;
  std::size_t in_channels = 3;

  /// 224 / 16 / 768 / 12 layers / 12 heads. Only practical for shape checks.
  static ViTConfig vit_b16() {
    ViTConfig c;
    c.image_size = 224;
    c.patch_size = 16;
    c.embed_dim = 768;
    c.num_layers = 12;
    c.num_heads = 12;
    c.mlp_ratio = 4;
    return c;
  }

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t n_img() const { return grid() * grid(); }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("image_size " + std::to_string(image_size) +
                        " is not divisible by patch_size " + std::to_string(patch_size));
    }
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by " +
                        std::to_string(num_heads) + " heads");
    }
    if (mlp_ratio == 0 || num_classes < 2 || in_channels == 0) {
      throw ConfigError("mlp_ratio, num_classes and in_channels must be positive (classes >= 2)");
    }
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "image_size=" << image_size << '\n'
       << "patch_size=" << patch_size << '\n'
       << "embed_dim=" << embed_dim << '\n'
       << "num_layers=" << num_layers << '\n'
       << "num_heads=" << num_heads << '\n'
       << "mlp_ratio=" << mlp_ratio << '\n'
       << "num_classes=" << num_classes << '\n'
       << "in_channels=" << in_channels << '\n';
    return os.str();
  }

  static ViTConfig from_text(std::string_view text) {
    const auto kv = parse_key_values(text);
    ViTConfig c;
    auto get = [&](const char* key, std::size_t& field) {
      auto it = kv.find(key);
      if (it != kv.end()) field = std::stoul(it->second);
    };
    get("image_size", c.image_size);
    get("patch_size", c.patch_size);
    get("embed_dim", c.embed_dim);
    get("num_layers", c.num_layers);
    get("num_heads", c.num_heads);
    get("mlp_ratio", c.mlp_ratio);
    get("num_classes", c.num_classes);
    get("in_channels", c.in_channels);
    c.validate();
    return c;
  }

  bool operator==(const ViTConfig&) const = default;
};

enum class TokenRole : std::uint8_t { cls, image, segmentation, extra };

/// Token matrix [n x d] with one role label per row.
struct TokenSequence {
  Tensor tokens;
  std::vector<TokenRole> roles;

  std::size_t size() const { return roles.size(); }
  std::size_t count(TokenRole r) const {
    return static_cast<std::size_t>(std::count(roles.begin(), roles.end(), r));
  }
};

class ViTBackbone {
 public:
  ViTBackbone() = default;
  ViTBackbone(const ViTConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t d = cfg.embed_dim;
    patch_embed = Linear(cfg.in_channels * cfg.patch_size * cfg.patch_size, d, rng);
    cls = init::truncated_normal({1, d}, 0.02, rng);
    pos_embed = init::truncated_normal({cfg.n_img() + 1, d}, 0.02, rng);
    blocks.reserve(cfg.num_layers);
    for (std::size_t i = 0; i < cfg.num_layers; ++i)
      blocks.emplace_back(d, cfg.num_heads, d * cfg.mlp_ratio, rng);
    final_norm = LayerNorm(d);
  }

  const ViTConfig& config() const { return cfg_; }

  /// Image [C x S x S] -> image tokens [n_img x d] with their position
  /// embeddings (rows 1..n_img of pos_embed) added.
  Tensor patchify(const Tensor& img) const {
    if (img.rank() != 3 || img.dim(0) != cfg_.in_channels || img.dim(1) != cfg_.image_size ||
        img.dim(2) != cfg_.image_size) {
      throw DimensionError("patchify: expected image [" + std::to_string(cfg_.in_channels) + "x" +
                           std::to_string(cfg_.image_size) + "x" +
                           std::to_string(cfg_.image_size) + "], got " + shape_str(img.shape()));
    }
    auto tokens = patch_embed.forward(patches(img, cfg_.patch_size));
    return add(tokens, slice_rows(pos_embed, 1, cfg_.n_img() + 1));
  }

  /// z_cls with its position embedding, [1 x d].
  Tensor cls_token() const { return add(cls, slice_rows(pos_embed, 0, 1)); }

  /// L pre-norm transformer blocks then the final norm. Sequence length is
  /// free, so prompt tokens go through the same mechanism as image tokens.
  Tensor encode(const Tensor& tokens) const {
    check_tokens(tokens);
    Tensor x = tokens;
    for (const auto& b : blocks) x = b.forward(x);
    return final_norm.forward(x);
  }

  Tensor encode(const TokenSequence& seq) const { return encode(seq.tokens); }

  /// Deep prompting: before block i the trailing prompt slots are replaced
  /// by per_layer_prompts[i] (undefined entries mean zero prompt tokens).
  Tensor encode_with_layer_prompts(const Tensor& tokens,
                                   const std::vector<Tensor>& per_layer_prompts) const {
    check_tokens(tokens);
    if (per_layer_prompts.size() != blocks.size()) {
      throw DimensionError("encode_with_layer_prompts: " +
                           std::to_string(per_layer_prompts.size()) + " prompt banks for " +
                           std::to_string(blocks.size()) + " layers");
    }
    const std::size_t base = tokens.dim(0);
    Tensor x = tokens;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const Tensor& p = per_layer_prompts[i];
      if (p.defined()) {
        if (p.rank() != 2 || p.dim(1) != cfg_.embed_dim) {
          throw DimensionError("layer prompt " + shape_str(p.shape()) + " has wrong width");
        }
        x = concat_rows({x.dim(0) == base ? x : slice_rows(x, 0, base), p});
      }
      x = blocks[i].forward(x);
    }
    return final_norm.forward(x);
  }

  ParamList parameters() const {
    ParamList p;
    append_params(p, "patch_embed.", patch_embed.parameters());
    p.push_back({"cls", cls});
    p.push_back({"pos_embed", pos_embed});
    for (std::size_t i = 0; i < blocks.size(); ++i)
      append_params(p, "blocks." + std::to_string(i) + ".", blocks[i].parameters());
    append_params(p, "final_norm.", final_norm.parameters());
    return p;
  }

  /// Frozen backbones record no gradients for any of their parameters.
  void set_frozen(bool frozen) {
    frozen_ = frozen;
    set_requires_grad(parameters(), !frozen);
  }
  bool frozen() const { return frozen_; }

  Linear patch_embed;
  Tensor cls;        // [1 x d]
  Tensor pos_embed;  // [(n_img + 1) x d]
  std::vector<TransformerBlock> blocks;
  LayerNorm final_norm;

 private:
  void check_tokens(const Tensor& tokens) const {
    if (tokens.rank() != 2 || tokens.dim(1) != cfg_.embed_dim) {
      throw DimensionError("encode: tokens " + shape_str(tokens.shape()) +
                           " do not match embed_dim " + std::to_string(cfg_.embed_dim));
    }
  }

  ViTConfig cfg_;
  bool frozen_ = false;
};

}  // namespace segprompt
