#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "segprompt/segprompt.hpp"

using namespace segprompt;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.vit.embed_dim = 16;
  m.vit.num_layers = 1;
  m.vit.num_heads = 2;
  return m;
}

std::vector<Sample> tiny_data(std::uint64_t seed = 0, std::size_t frames = 4) {
  GeneratorConfig g;
  g.seed = seed;
  g.frames_per_video = frames;
  return generate(g);
}

Checkpoint random_checkpoint(const ModelConfig& m, std::uint64_t seed) {
  Rng rng(seed);
  ViTBackbone vit(m.vit, rng);
  Checkpoint ck;
  ck.config = m.vit.to_text();
  for (const auto& p : vit.parameters()) ck.tensors.push_back({std::string(kVitPrefix) + p.name, p.tensor.detach()});
  ResNetStemConfig sc = m.stem;
  sc.in_channels = 3;
  sc.stage2_stride = 2;
  ResNetStem stem(sc, rng);
  for (const auto& p : stem.parameters())
    ck.tensors.push_back({std::string(kResNetPrefix) + p.name, p.tensor.detach()});
  return ck;
}

TrainConfig tiny_config(ModeKind kind, std::size_t epochs = 2) {
  TrainConfig c;
  c.model = tiny_model();
  c.mode.kind = kind;
  c.epochs = epochs;
  return c;
}

std::string backbone_bytes(const SegPromptModel& m) { return encode_checkpoint(m.backbone.parameters(), ""); }

std::string vit_bytes(const Checkpoint& ck) {
  ParamList vit;
  for (const auto& t : ck.tensors)
    if (t.name.rfind(kVitPrefix, 0) == 0) vit.push_back({t.name.substr(std::string(kVitPrefix).size()), t.tensor});
  return encode_checkpoint(vit, "");
}

}  // namespace

TEST(Schedule, ThreeHundredSamplesBatchSixteen) {
  EXPECT_EQ(steps_per_epoch(300, 16), 19u);
  EXPECT_EQ(20 * steps_per_epoch(300, 16), 380u);
  EXPECT_EQ(steps_per_epoch(16, 16), 1u);
}

TEST(Schedule, TrainFoldTakesCeilSteps) {
  const auto data = tiny_data();
  const auto plan = plan_folds(data);
  const auto train = select_videos(data, plan.folds[0].train_videos);
  auto cfg = tiny_config(ModeKind::ft);
  cfg.batch_size = 5;
  const auto out = train_fold(cfg, train, select_videos(data, plan.folds[0].val_videos), nullptr);
  EXPECT_EQ(out.report.steps, cfg.epochs * steps_per_epoch(train.size(), 5));
  EXPECT_EQ(out.report.epochs.size(), cfg.epochs);
}

TEST(TrainConfig, DefaultHyperparameters) {
  const TrainConfig c;
  EXPECT_EQ(c.batch_size, 16u);
  EXPECT_EQ(c.epochs, 20u);
  EXPECT_EQ(c.learning_rate, 0.001);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor w({3}, {1, -2, 3}, true);
  Tensor(w).mutable_grad();  // allocates a zero gradient
  Adam opt;
  opt.step({{"w", w}});
  EXPECT_EQ(std::vector<double>(w.data().begin(), w.data().end()), (std::vector<double>{1, -2, 3}));
}

TEST(Adam, UnitGradientDescends) {
  Tensor w({1}, {1.0}, true);
  auto& tape = GradTape::current();
  tape.clear();
  tape.backward(sum(w));  // dL/dw = 1
  tape.clear();
  Adam opt;
  opt.step({{"w", w}});
  EXPECT_LT(w[0], 1.0);
  EXPECT_NEAR(w[0], 1.0 - 1e-3, 1e-9);  // first Adam step moves by lr
}

TEST(Adam, QuadraticConverges) {
  // L = (w - 3)^2, lr 0.05 for the 1-D problem.
  Tensor w({1}, {0.0}, true);
  const Tensor target({1}, {3.0});
  Adam opt(AdamConfig{0.05});
  auto& tape = GradTape::current();
  for (int i = 0; i < 200; ++i) {
    Tensor(w).zero_grad();
    tape.clear();
    const auto d = sub(w, target);
    tape.backward(sum(mul(d, d)));
    tape.clear();
    opt.step({{"w", w}});
  }
  EXPECT_LT(std::abs(w[0] - 3.0), 1e-3);
}

TEST(Adam, MissingGradientIsContractError) {
  Tensor w({2}, {1, 2}, true);
  w.clear_grad();
  Adam opt;
  EXPECT_THROW(opt.step({{"w", w}}), ContractError);
}

TEST(Adam, InvalidConfig) { EXPECT_THROW(Adam(AdamConfig{0.0}), ConfigError); }

TEST(TrainFold, VideoOverlapIsContractError) {
  const auto data = tiny_data();
  EXPECT_THROW(train_fold(tiny_config(ModeKind::ft), data, data, nullptr), ContractError);
}

TEST(TrainFold, PromptModeNeedsCheckpoint) {
  const auto data = tiny_data();
  const auto plan = plan_folds(data);
  EXPECT_THROW(train_fold(tiny_config(ModeKind::vpt), select_videos(data, plan.folds[0].train_videos),
                          select_videos(data, plan.folds[0].val_videos), nullptr),
               ConfigError);
}

TEST(TrainFold, SegPromptLeavesBackboneUntouchedFtDoesNot) {
  const auto data = tiny_data();
  const auto plan = plan_folds(data);
  const auto ck = random_checkpoint(tiny_model(), 3);
  const auto before = vit_bytes(ck);
  const auto train = select_videos(data, plan.folds[0].train_videos);
  const auto val = select_videos(data, plan.folds[0].val_videos);
  const auto sp = train_fold(tiny_config(ModeKind::segprompt), train, val, &ck);
  EXPECT_EQ(backbone_bytes(*sp.model), before);
  EXPECT_EQ(vit_bytes(ck), before);
  const auto ft = train_fold(tiny_config(ModeKind::ft), train, val, &ck);
  EXPECT_NE(backbone_bytes(*ft.model), before);
}

TEST(TrainFold, ReportCountsSumToTotal) {
  const auto data = tiny_data();
  const auto plan = plan_folds(data);
  const auto ck = random_checkpoint(tiny_model(), 4);
  const auto out = train_fold(tiny_config(ModeKind::segprompt, 1), select_videos(data, plan.folds[1].train_videos),
                              select_videos(data, plan.folds[1].val_videos), &ck);
  EXPECT_EQ(out.report.trainable_params + out.report.frozen_params, count_elements(out.model->all_parameters()));
  for (const auto& e : out.report.epochs) EXPECT_TRUE(std::isfinite(e.train_loss));
  EXPECT_GE(out.report.best_epoch, 1u);
}

TEST(TrainFold, MaskModesRejectMasklessData) {
  auto data = tiny_data();
  for (auto& s : data) s.mask.reset();
  const auto plan = plan_folds(data);
  EXPECT_THROW(train_fold(tiny_config(ModeKind::ft_crop), select_videos(data, plan.folds[0].train_videos),
                          select_videos(data, plan.folds[0].val_videos), nullptr),
               ConfigError);
}

TEST(CrossValidation, SixFoldsAndAggregate) {
  const auto data = tiny_data();
  const auto ck = random_checkpoint(tiny_model(), 5);
  const auto r = run_cross_validation(tiny_config(ModeKind::vpt, 1), data, plan_folds(data), &ck);
  ASSERT_EQ(r.folds.size(), 6u);
  EXPECT_EQ(r.aggregate.folds, 6u);
  std::vector<double> acc;
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(r.folds[i].fold_id, i);
    acc.push_back(r.folds[i].metrics.accuracy);
  }
  EXPECT_NEAR(r.aggregate.accuracy.std, segprompt::testing::two_pass_std(acc), 1e-12);
}

TEST(CrossValidation, SeedDeterminesReportsBitForBit) {
  const auto data = tiny_data();
  const auto ck = random_checkpoint(tiny_model(), 6);
  auto cfg = tiny_config(ModeKind::segprompt, 1);
  cfg.seed = 17;
  auto csv = [&](std::size_t jobs) {
    const auto r = run_cross_validation(cfg, data, plan_folds(data), &ck, jobs);
    std::string all;
    for (const auto& f : r.folds) all += train_report_csv(f.report);
    return all;
  };
  const auto a = csv(1);
  EXPECT_EQ(a, csv(1));
  EXPECT_EQ(a, csv(3));  // worker count does not change results or their order
}

TEST(CrossValidation, UnknownVideoInPlan) {
  const auto data = tiny_data();
  FoldPlan plan = plan_folds(data);
  plan.folds[0].val_videos[0] = "nope";
  EXPECT_THROW(run_cross_validation(tiny_config(ModeKind::ft, 1), data, plan, nullptr), ConfigError);
}

TEST(Parameters, TrainableCountOrdering) {
  auto count = [](ModeKind k) {
    Rng rng(0);
    return count_elements(SegPromptModel(ModelConfig{}, TuningMode{k}, nullptr, rng).trainable_parameters());
  };
  const auto vpt = count(ModeKind::vpt), sp = count(ModeKind::segprompt), ft = count(ModeKind::ft);
  std::cout << "trainable parameters: vpt " << vpt << ", segprompt " << sp << ", ft " << ft << "\n";
  EXPECT_LT(vpt, sp);
  EXPECT_LT(sp, ft);
}

TEST(Training, LossDecreasesOnDefaultConfig) {
  const auto data = tiny_data(0, GeneratorConfig{}.frames_per_video);
  const auto plan = plan_folds(data);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.mode.kind = ModeKind::segprompt;
    const auto ck = random_checkpoint(cfg.model, seed);
    const auto out = train_fold(cfg, select_videos(data, plan.folds[0].train_videos),
                                select_videos(data, plan.folds[0].val_videos), &ck);
    EXPECT_LT(out.report.epochs.back().train_loss, out.report.epochs.front().train_loss) << "seed " << seed;
  }
}
