#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "segprompt/checkpoint.hpp"
#include "segprompt/ops.hpp"
#include "segprompt/rng.hpp"

namespace segprompt {

namespace init {

inline Tensor xavier_uniform(std::size_t out, std::size_t in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> v(out * in);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return Tensor({out, in}, std::move(v), true);
}

inline Tensor kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * sd;
  return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor truncated_normal(Shape shape, double sigma, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.truncated_normal(sigma);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace init

inline void append_params(ParamList& out, const std::string& prefix, const ParamList& sub) {
  for (const auto& nt : sub) out.push_back({prefix + nt.name, nt.tensor});
}

inline std::size_t count_elements(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& nt : params) n += nt.tensor.numel();
  return n;
}

inline void set_requires_grad(ParamList params, bool on) {
  for (auto& nt : params) nt.tensor.set_requires_grad(on);
}

/// Copies values from `src` into the same-named tensors of `dst`. Every
/// destination name must be present in `src` with an identical shape.
/// Copies values by name. With `skip_mismatched`, tensors whose shape
/// differs keep their current values and are counted in the return value.
inline std::size_t load_values(ParamList dst, const ParamList& src, const std::string& src_prefix = "",
                               bool skip_mismatched = false) {
  std::size_t skipped = 0;
  for (auto& nt : dst) {
    const Tensor* found = nullptr;
    for (const auto& s : src)
      if (s.name == src_prefix + nt.name) found = &s.tensor;
    if (!found) throw IoError("checkpoint is missing tensor '" + src_prefix + nt.name + "'");
    if (found->shape() != nt.tensor.shape()) {
      if (skip_mismatched) {
        ++skipped;
        continue;
      }
      throw DimensionError("checkpoint tensor '" + src_prefix + nt.name + "' has shape " +
                           shape_str(found->shape()) + ", expected " +
                           shape_str(nt.tensor.shape()));
    }
    std::copy(found->data().begin(), found->data().end(), nt.tensor.mutable_data().begin());
  }
  return skipped;
}

// ---------------------------------------------------------------------------

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(init::xavier_uniform(out, in, rng)), bias(Tensor::zeros({out}, true)) {}

  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }

  ParamList parameters() const { return {{"weight", weight}, {"bias", bias}}; }
  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  Tensor weight;  // [out x in]
  Tensor bias;    // [out]
};

class LayerNorm {
 public:
  static constexpr double kEps = 1e-6;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gamma(Tensor::full({d}, 1.0, true)), beta(Tensor::zeros({d}, true)) {}

  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, kEps); }
  ParamList parameters() const { return {{"gamma", gamma}, {"beta", beta}}; }

  Tensor gamma;
  Tensor beta;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d, std::size_t num_heads, Rng& rng) : num_heads_(num_heads) {
    if (num_heads == 0 || d % num_heads != 0) {
      throw ConfigError("attention width " + std::to_string(d) + " is not divisible by " +
                        std::to_string(num_heads) + " heads");
    }
    q = Linear(d, d, rng);
    k = Linear(d, d, rng);
    v = Linear(d, d, rng);
    o = Linear(d, d, rng);
  }

  /// softmax(Q K^T / sqrt(d/h)) V per head, concatenated, then W_o.
  Tensor forward(const Tensor& z) const {
    return o.forward(attention(q.forward(z), k.forward(z), v.forward(z), num_heads_));
  }

  /// Attention probabilities (heads x n x n), no tape recording.
  std::vector<double> attention_weights(const Tensor& z) const {
    NoGradGuard ng;
    return attention_probs(q.forward(z), k.forward(z), num_heads_);
  }

  ParamList parameters() const {
    ParamList p;
    append_params(p, "q.", q.parameters());
    append_params(p, "k.", k.parameters());
    append_params(p, "v.", v.parameters());
    append_params(p, "o.", o.parameters());
    return p;
  }
  std::size_t num_heads() const { return num_heads_; }

  Linear q, k, v, o;

 private:
  std::size_t num_heads_ = 1;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t d, std::size_t hidden, Rng& rng) : fc1(d, hidden, rng), fc2(hidden, d, rng) {}

  Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }
  ParamList parameters() const {
    ParamList p;
    append_params(p, "fc1.", fc1.parameters());
    append_params(p, "fc2.", fc2.parameters());
    return p;
  }

  Linear fc1, fc2;
};

/// Pre-norm transformer block: x + MHSA(LN(x)), then + MLP(LN(.)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t d, std::size_t heads, std::size_t mlp_hidden, Rng& rng)
      : ln1(d), attn(d, heads, rng), ln2(d), mlp(d, mlp_hidden, rng) {}

  Tensor forward(const Tensor& x) const {
    auto h = add(x, attn.forward(ln1.forward(x)));
    return add(h, mlp.forward(ln2.forward(h)));
  }

  ParamList parameters() const {
    ParamList p;
    append_params(p, "ln1.", ln1.parameters());
    append_params(p, "attn.", attn.parameters());
    append_params(p, "ln2.", ln2.parameters());
    append_params(p, "mlp.", mlp.parameters());
    return p;
  }

  LayerNorm ln1;
  MultiHeadAttention attn;
  LayerNorm ln2;
  Mlp mlp;
};

/// Mean cross-entropy of logits [n x c] against class indices, via
/// log-sum-exp.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ConfigError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(c) + ")");
    }
  }
  const auto ld = logits.data();
  auto probs = std::make_shared<std::vector<double>>(n * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = ld.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    loss += lse - row[labels[i]];
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<double>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  auto li = logits.impl();
  return detail::make_result({1}, {loss}, {logits}, [li, probs, ys, n, c](const TensorImpl& o) {
    auto& g = li->grad_buffer();
    const double s = o.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += s * ((*probs)[i * c + j] - (static_cast<int>(j) == ys[i] ? 1.0 : 0.0));
  });
}

// ---------------------------------------------------------------------------
// Convolutional pieces. Batch norm is replaced by a trainable per-channel
// affine (no running statistics).

class ChannelAffine {
 public:
  ChannelAffine() = default;
  explicit ChannelAffine(std::size_t c)
      : gamma(Tensor::full({c}, 1.0, true)), beta(Tensor::zeros({c}, true)) {}

  Tensor forward(const Tensor& x) const { return channel_affine(x, gamma, beta); }
  ParamList parameters() const { return {{"gamma", gamma}, {"beta", beta}}; }

  Tensor gamma;
  Tensor beta;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad,
         Rng& rng, bool with_bias = false)
      : weight(init::kaiming_normal({out, in, kernel, kernel}, in * kernel * kernel, rng)),
        stride(stride),
        pad(pad) {
    if (with_bias) bias = Tensor::zeros({out}, true);
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
  ParamList parameters() const {
    ParamList p{{"weight", weight}};
    if (bias.defined()) p.push_back({"bias", bias});
    return p;
  }

  Tensor weight;  // [out x in x k x k]
  Tensor bias;    // optional [out]
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// ResNet basic block. Downsampling blocks use a 4x4/stride-2 main conv and
/// a 2x2/stride-2 projection so every output size is integral.
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
      : conv_a(in, out, stride == 2 ? 4 : 3, stride, 1, rng),
        norm_a(out),
        conv_b(out, out, 3, 1, 1, rng),
        norm_b(out) {
    if (stride != 1 && stride != 2) throw ConfigError("BasicBlock stride must be 1 or 2");
    if (stride != 1 || in != out) {
      has_projection = true;
      proj = Conv2d(in, out, stride, stride, 0, rng);
      norm_proj = ChannelAffine(out);
    }
  }

  Tensor forward(const Tensor& x) const {
    auto h = relu(norm_a.forward(conv_a.forward(x)));
    h = norm_b.forward(conv_b.forward(h));
    auto skip = has_projection ? norm_proj.forward(proj.forward(x)) : x;
    return relu(add(h, skip));
  }

  ParamList parameters() const {
    ParamList p;
    append_params(p, "conv_a.", conv_a.parameters());
    append_params(p, "norm_a.", norm_a.parameters());
    append_params(p, "conv_b.", conv_b.parameters());
    append_params(p, "norm_b.", norm_b.parameters());
    if (has_projection) {
      append_params(p, "proj.", proj.parameters());
      append_params(p, "norm_proj.", norm_proj.parameters());
    }
    return p;
  }

  Conv2d conv_a;
  ChannelAffine norm_a;
  Conv2d conv_b;
  ChannelAffine norm_b;
  bool has_projection = false;
  Conv2d proj;
  ChannelAffine norm_proj;
};

struct ResNetStemConfig {
  std::size_t in_channels = 3;
  std::size_t stage1_channels = 16;
  std::size_t stage2_channels = 32;
  std::size_t stage2_stride = 2;  // total downsampling = 2 * stage2_stride

  std::size_t downsample_factor() const { return 2 * stage2_stride; }
};

/// Stem conv followed by two residual stages: the first two blocks of a
/// ResNet18-shaped network at reduced width.
class ResNetStem {
 public:
  ResNetStem() = default;
  ResNetStem(const ResNetStemConfig& cfg, Rng& rng)
      : cfg_(cfg),
        conv1(cfg.in_channels, cfg.stage1_channels, 4, 2, 1, rng),
        norm1(cfg.stage1_channels),
        stage1(cfg.stage1_channels, cfg.stage1_channels, 1, rng),
        stage2(cfg.stage1_channels, cfg.stage2_channels, cfg.stage2_stride, rng) {}

  Tensor forward(const Tensor& x) const {
    const std::size_t f = cfg_.downsample_factor();
    if (x.rank() != 3 || x.dim(0) != cfg_.in_channels || x.dim(1) % f != 0 || x.dim(2) % f != 0 ||
        x.dim(1) < f || x.dim(2) < f) {
      throw DimensionError("ResNetStem: input " + shape_str(x.shape()) + " incompatible with " +
                           std::to_string(cfg_.in_channels) + " channels and downsampling x" +
                           std::to_string(f));
    }
    auto h = relu(norm1.forward(conv1.forward(x)));
    h = stage1.forward(h);
    return stage2.forward(h);
  }

  ParamList parameters() const {
    ParamList p;
    append_params(p, "conv1.", conv1.parameters());
    append_params(p, "norm1.", norm1.parameters());
    append_params(p, "stage1.", stage1.parameters());
    append_params(p, "stage2.", stage2.parameters());
    return p;
  }

  const ResNetStemConfig& config() const { return cfg_; }
  std::size_t out_channels() const { return cfg_.stage2_channels; }

  ResNetStemConfig cfg_;
  Conv2d conv1;
  ChannelAffine norm1;
  BasicBlock stage1;
  BasicBlock stage2;
};

}  // namespace segprompt
