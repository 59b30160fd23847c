#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "segprompt/dataset.hpp"
#include "segprompt/metrics.hpp"
#include "segprompt/model.hpp"
#include "segprompt/optim.hpp"

namespace segprompt {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 20;
  double learning_rate = 0.001;
  std::uint64_t seed = 0;
  TuningMode mode;
  ModelConfig model;

  void validate() const {
    if (batch_size == 0 || epochs == 0 || !(learning_rate > 0.0)) {
      throw ConfigError("batch_size, epochs and learning_rate must be positive");
    }
    mode.validate();
    model.vit.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  MetricsReport val;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  std::size_t trainable_params = 0;
  std::size_t frozen_params = 0;
  double wall_seconds = 0.0;  // informational; excluded from deterministic outputs

  std::size_t total_params() const { return trainable_params + frozen_params; }
  const MetricsReport& best() const { return epochs.at(best_epoch - 1).val; }
};

/// Per-epoch CSV followed by a '#'-prefixed summary block.
inline std::string train_report_csv(const TrainReport& r, bool with_timing = false) {
  std::ostringstream os;
  os << "epoch,loss,val_acc,val_precision,val_recall,val_f1,val_auc\n";
  char buf[256];
  for (const auto& e : r.epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss,
                  e.val.accuracy, e.val.precision, e.val.recall, e.val.f1, e.val.auc);
    os << buf;
  }
  os << "# best_epoch=" << r.best_epoch << '\n'
     << "# steps=" << r.steps << '\n'
     << "# trainable_params=" << r.trainable_params << '\n'
     << "# frozen_params=" << r.frozen_params << '\n'
     << "# total_params=" << r.total_params() << '\n';
  if (with_timing) {
    std::snprintf(buf, sizeof buf, "# wall_seconds=%.3f\n", r.wall_seconds);
    os << buf;
  }
  return os.str();
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

/// Snapshot of parameter values, used to keep the best epoch.
inline std::vector<std::vector<double>> snapshot(const ParamList& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

inline void restore(const ParamList& params, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    std::copy(values[i].begin(), values[i].end(), t.mutable_data().begin());
  }
}

inline void check_video_disjoint(const std::vector<Sample>& train, const std::vector<Sample>& val) {
  std::set<std::string> train_videos;
  for (const auto& s : train) train_videos.insert(s.video_id);
  for (const auto& s : val) {
    if (train_videos.count(s.video_id)) {
      throw ContractError("video leak: '" + s.video_id + "' appears in both train and validation");
    }
  }
}

struct Prediction {
  std::vector<int> preds;
  std::vector<double> scores;  // probability of class 1
  std::vector<int> labels;
};

inline Prediction predict(const SegPromptModel& model, const std::vector<Sample>& samples) {
  NoGradGuard no_grad;
  Prediction p;
  for (const auto& s : samples) {
    const SegMap* mask = s.mask ? &*s.mask : nullptr;
    const Tensor prob_t = softmax(model.forward(s.image, mask), 1);
    const auto probs = prob_t.data();
    p.scores.push_back(probs[1]);
    p.preds.push_back(probs[1] > probs[0] ? 1 : 0);
    p.labels.push_back(s.label);
  }
  return p;
}

inline MetricsReport evaluate(const SegPromptModel& model, const std::vector<Sample>& samples) {
  const auto p = predict(model, samples);
  return compute_metrics(p.preds, p.scores, p.labels);
}

struct FoldOutcome {
  std::unique_ptr<SegPromptModel> model;
  TrainReport report;
};

/// Trains one fresh model; `fold_index` selects the init and shuffle
/// substreams. The returned model holds the best-validation-accuracy epoch.
inline FoldOutcome train_fold(const TrainConfig& cfg, const std::vector<Sample>& train_in,
                              const std::vector<Sample>& val_in, const Checkpoint* backbone_ckpt,
                              std::size_t fold_index = 0) {
  cfg.validate();
  if (train_in.empty() || val_in.empty()) throw ConfigError("train_fold: empty train or validation set");
  check_video_disjoint(train_in, val_in);
  if (cfg.mode.is_prompt() && !backbone_ckpt) {
    throw ConfigError("mode " + std::string(mode_name(cfg.mode.kind)) +
                      " tunes a frozen backbone and needs a pretrained checkpoint");
  }
  const std::size_t size = cfg.model.vit.image_size;
  std::vector<Sample> train, val;
  for (const auto& s : train_in) train.push_back(prepare_sample(s, size));
  for (const auto& s : val_in) val.push_back(prepare_sample(s, size));
  if (cfg.mode.uses_segmap()) {
    for (const auto* set : {&train, &val})
      for (const auto& s : *set)
        if (!s.mask) {
          throw ConfigError("mode " + std::string(mode_name(cfg.mode.kind)) +
                            " requires segmentation masks, but " + s.video_id + "/frame_" +
                            std::to_string(s.frame_id) + " has none");
        }
  }

  const auto start = std::chrono::steady_clock::now();
  Rng init_rng(substream_seed(cfg.seed, "init", fold_index));
  FoldOutcome out;
  out.model = std::make_unique<SegPromptModel>(cfg.model, cfg.mode, backbone_ckpt, init_rng);
  auto& model = *out.model;
  const ParamList trainable = model.trainable_parameters();
  for (const auto& p : trainable) {
    Tensor t = p.tensor;
    t.set_requires_grad(true);
  }
  auto& report = out.report;
  report.trainable_params = count_elements(trainable);
  report.frozen_params = count_elements(model.all_parameters()) - report.trainable_params;

  Adam opt(AdamConfig{cfg.learning_rate});
  Rng shuffle_rng(substream_seed(cfg.seed, "shuffle", fold_index));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  auto& tape = GradTape::current();
  std::vector<std::vector<double>> best;
  double best_acc = -1.0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - b);
      Adam::zero_grad(trainable);
      for (std::size_t i = b; i < end; ++i) {
        const auto& s = train[order[i]];
        tape.clear();
        const SegMap* mask = s.mask ? &*s.mask : nullptr;
        const std::vector<int> label{s.label};
        auto loss = cross_entropy(model.forward(s.image, mask), label);
        if (!std::isfinite(loss.item())) {
          tape.clear();
          throw ContractError("non-finite loss " + std::to_string(loss.item()) + " at epoch " +
                              std::to_string(epoch) + ", step " + std::to_string(report.steps + 1) +
                              ", sample " + s.video_id + "/frame_" + std::to_string(s.frame_id) +
                              " (mode " + cfg.mode.label() + ")");
        }
        loss_sum += loss.item();
        tape.backward(scale(loss, inv_batch));
        tape.clear();
      }
      opt.step(trainable);
      ++report.steps;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.val = evaluate(model, val);
    if (rec.val.accuracy > best_acc) {
      best_acc = rec.val.accuracy;
      report.best_epoch = epoch;
      best = snapshot(trainable);
    }
    report.epochs.push_back(rec);
  }
  restore(trainable, best);
  for (const auto& p : trainable) {
    Tensor t = p.tensor;
    t.clear_grad();
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct FoldResult {
  std::size_t fold_id = 0;
  Fold fold;
  MetricsReport metrics;  // best-epoch validation metrics
  TrainReport report;
};

struct CrossValidationResult {
  std::vector<FoldResult> folds;  // in fold order regardless of scheduling
  AggregateReport aggregate;
};

/// One fresh model per fold, all starting from the same backbone checkpoint.
/// Folds run on `jobs` worker threads; results are stored by fold index so
/// output does not depend on scheduling.
inline CrossValidationResult run_cross_validation(const TrainConfig& cfg,
                                                  const std::vector<Sample>& samples,
                                                  const FoldPlan& plan, const Checkpoint* backbone_ckpt,
                                                  std::size_t jobs = 1) {
  cfg.validate();
  if (plan.folds.empty()) throw ConfigError("fold plan is empty");
  std::set<std::string> known;
  for (const auto& s : samples) known.insert(s.video_id);
  for (const auto& f : plan.folds) {
    std::set<std::string> seen;
    for (const auto* group : {&f.train_videos, &f.val_videos})
      for (const auto& v : *group) {
        if (!known.count(v)) throw ConfigError("fold plan names unknown video '" + v + "'");
        if (!seen.insert(v).second) throw ContractError("video leak: '" + v + "' on both sides of a fold");
      }
  }

  CrossValidationResult result;
  result.folds.resize(plan.folds.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < plan.folds.size(); i = next++) {
      try {
        const auto& f = plan.folds[i];
        auto outcome = train_fold(cfg, select_videos(samples, f.train_videos),
                                  select_videos(samples, f.val_videos), backbone_ckpt, i);
        auto& r = result.folds[i];
        r.fold_id = i;
        r.fold = f;
        r.report = std::move(outcome.report);
        r.metrics = r.report.best();
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next = plan.folds.size();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, plan.folds.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (error) std::rethrow_exception(error);
  std::vector<MetricsReport> per_fold;
  for (const auto& f : result.folds) per_fold.push_back(f.metrics);
  result.aggregate = aggregate(per_fold);
  return result;
}

}  // namespace segprompt
