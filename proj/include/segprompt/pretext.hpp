#pragma once

// Self-supervised backbone pretraining on auxiliary videos: predict which
// of four 90-degree rotations was applied. Both the ViT and the ResNet stem
// are trained this way and exported as one checkpoint.

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "segprompt/dataset.hpp"
#include "segprompt/model.hpp"
#include "segprompt/optim.hpp"

namespace segprompt {

struct PretextConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double learning_rate = 0.001;
  std::uint64_t seed = 0;
  ModelConfig model;
};

struct PretextResult {
  ParamList tensors;  // "vit.*" and "resnet.*"
  std::string config_text;
  double vit_accuracy = 0.0;     // rotation accuracy on held-out pretext frames
  double resnet_accuracy = 0.0;
  std::vector<double> vit_loss;  // per epoch
  std::vector<double> resnet_loss;

  Checkpoint checkpoint() const { return Checkpoint{config_text, tensors}; }
};

/// Hash of one frame's 8-bit content.
inline std::uint64_t frame_hash(const Sample& s) {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (double v : s.image.data) {
    const auto q = detail::quantize(v);
    h = fnv1a(&q, 1, h);
  }
  return h;
}

/// Refuses pretext data that shares a video id or an identical frame with
/// the evaluation data.
inline void check_pretext_disjoint(const std::vector<Sample>& pretext,
                                   const std::vector<Sample>& evaluation) {
  std::set<std::string> eval_videos;
  std::set<std::uint64_t> eval_frames;
  for (const auto& s : evaluation) {
    eval_videos.insert(s.video_id);
    eval_frames.insert(frame_hash(s));
  }
  for (const auto& s : pretext) {
    if (eval_videos.count(s.video_id)) {
      throw ContractError("pretext data overlaps evaluation data: video '" + s.video_id + "'");
    }
    if (eval_frames.count(frame_hash(s))) {
      throw ContractError("pretext data overlaps evaluation data: frame " + s.video_id + "/frame_" +
                          std::to_string(s.frame_id) + " also appears in the evaluation set");
    }
  }
}

namespace detail {

/// Model config as key=value lines stored beside the weights.
inline std::string model_config_text(const ModelConfig& m) {
  std::string s = m.vit.to_text();
  s += "stem_stage1=" + std::to_string(m.stem.stage1_channels) + "\n";
  s += "stem_stage2=" + std::to_string(m.stem.stage2_channels) + "\n";
  return s;
}

struct RotationTask {
  std::vector<Image> images;  // normalized and rotated
  std::vector<int> labels;
};

inline RotationTask make_rotation_task(const std::vector<Sample>& samples, Rng& rng) {
  RotationTask t;
  for (const auto& s : samples) {
    const int k = static_cast<int>(rng.below(4));
    t.images.push_back(normalize(rotate90(s.image, k)));
    t.labels.push_back(k);
  }
  return t;
}

/// Generic minibatch loop for a [1 x 4] rotation classifier.
inline std::vector<double> fit_rotation(const std::function<Tensor(const Tensor&)>& logits_fn,
                                        const ParamList& params, const std::vector<Sample>& train,
                                        const PretextConfig& cfg, Rng& rng) {
  Adam opt(AdamConfig{cfg.learning_rate});
  auto& tape = GradTape::current();
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fresh rotations every epoch.
    const auto task = make_rotation_task(train, rng);
    std::vector<std::size_t> order(task.images.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      Adam::zero_grad(params);
      for (std::size_t i = b; i < end; ++i) {
        tape.clear();
        const std::vector<int> label{task.labels[order[i]]};
        auto loss = cross_entropy(logits_fn(task.images[order[i]].to_tensor()), label);
        if (!std::isfinite(loss.item())) throw ContractError("non-finite pretext loss");
        loss_sum += loss.item();
        tape.backward(scale(loss, 1.0 / static_cast<double>(end - b)));
        tape.clear();
      }
      opt.step(params);
    }
    losses.push_back(loss_sum / static_cast<double>(order.size()));
  }
  return losses;
}

inline double rotation_accuracy(const std::function<Tensor(const Tensor&)>& logits_fn,
                                const std::vector<Sample>& samples, Rng& rng) {
  NoGradGuard no_grad;
  const auto task = make_rotation_task(samples, rng);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < task.images.size(); ++i) {
    const Tensor logits = logits_fn(task.images[i].to_tensor());
    const auto z = logits.data();
    const auto best = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    correct += best == task.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(task.images.size());
}

}  // namespace detail

/// Pretrains on `pretext` (every 5th frame held out to measure rotation
/// accuracy). `evaluation` is only used for the overlap guard.
inline PretextResult pretext_pretrain(const PretextConfig& cfg, const std::vector<Sample>& pretext,
                                      const std::vector<Sample>& evaluation) {
  if (pretext.size() < 5) throw ConfigError("pretext set needs at least 5 frames");
  check_pretext_disjoint(pretext, evaluation);
  cfg.model.vit.validate();
  std::vector<Sample> train, held_out;
  for (std::size_t i = 0; i < pretext.size(); ++i) {
    auto s = prepare_sample(pretext[i], cfg.model.vit.image_size);
    (i % 5 == 4 ? held_out : train).push_back(std::move(s));
  }

  PretextResult result;
  result.config_text = detail::model_config_text(cfg.model);

  Rng init_rng(substream_seed(cfg.seed, "pretext-init"));
  ViTBackbone vit(cfg.model.vit, init_rng);
  Linear vit_head(cfg.model.vit.embed_dim, 4, init_rng);
  ResNetStemConfig sc = cfg.model.stem;
  sc.in_channels = 3;
  sc.stage2_stride = 2;
  ResNetStem stem(sc, init_rng);
  Linear stem_head(sc.stage2_channels, 4, init_rng);

  auto vit_logits = [&](const Tensor& x) {
    auto seq = concat_rows({vit.cls_token(), vit.patchify(x)});
    return vit_head.forward(slice_rows(vit.encode(seq), 0, 1));
  };
  auto stem_logits = [&](const Tensor& x) {
    auto f = adaptive_avg_pool(stem.forward(x), 1, 1);
    return stem_head.forward(reshape(f, {1, sc.stage2_channels}));
  };

  ParamList vit_params = vit.parameters();
  append_params(vit_params, "head.", vit_head.parameters());
  ParamList stem_params = stem.parameters();
  append_params(stem_params, "head.", stem_head.parameters());

  Rng vit_rng(substream_seed(cfg.seed, "pretext-vit"));
  result.vit_loss = detail::fit_rotation(vit_logits, vit_params, train, cfg, vit_rng);
  Rng stem_rng(substream_seed(cfg.seed, "pretext-resnet"));
  result.resnet_loss = detail::fit_rotation(stem_logits, stem_params, train, cfg, stem_rng);

  Rng eval_rng(substream_seed(cfg.seed, "pretext-eval"));
  result.vit_accuracy = detail::rotation_accuracy(vit_logits, held_out, eval_rng);
  Rng eval_rng2(substream_seed(cfg.seed, "pretext-eval"));
  result.resnet_accuracy = detail::rotation_accuracy(stem_logits, held_out, eval_rng2);

  // Exported weights are detached copies so the checkpoint owns its data.
  for (const auto& p : vit.parameters()) result.tensors.push_back({std::string(kVitPrefix) + p.name, p.tensor.detach()});
  for (const auto& p : stem.parameters())
    result.tensors.push_back({std::string(kResNetPrefix) + p.name, p.tensor.detach()});
  GradTape::current().clear();
  return result;
}

}  // namespace segprompt
