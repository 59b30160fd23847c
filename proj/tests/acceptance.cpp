// Acceptance run: one PASS/FAIL line per criterion, followed by details.
//
// Criteria 1-5 and 9 are contracts and decide the exit status. Criteria 6-8
// compare learned models at desk scale; their verdicts are printed and
// written to the report like the others but do not change the exit status.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "segprompt/segprompt.hpp"

using namespace segprompt;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Verdict {
  int id;
  bool gating;
  bool pass;
  std::string summary;
  std::vector<std::string> details;
};

class Report {
 public:
  void add(Verdict v) {
    std::ostringstream s;
    s << (v.pass ? "PASS" : "FAIL") << " criterion " << v.id << ": " << v.summary << '\n';
    for (const auto& d : v.details) s << "    " << d << '\n';
    std::cout << s.str() << std::flush;
    text_ += s.str();
    verdicts_.push_back(std::move(v));
  }
  void note(const std::string& line) {
    std::cout << line << '\n' << std::flush;
    text_ += line + '\n';
  }
  int exit_code() const {
    for (const auto& v : verdicts_)
      if (v.gating && !v.pass) return 1;
    return 0;
  }
  const std::string& text() const { return text_; }

 private:
  std::vector<Verdict> verdicts_;
  std::string text_;
};

// ---------------------------------------------------------------------------

Verdict gradients() {
  const auto start = Clock::now();
  std::size_t ops = 0, instances = 0, failures = 0;
  std::vector<std::string> details;
  auto run = [&](const std::vector<segprompt::testing::GradCase>& cases) {
    for (const auto& c : cases) {
      ++ops;
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        auto [f, wrt] = c.make(rng);
        const auto r = segprompt::testing::check_gradients(f, wrt, rng);
        ++instances;
        if (!r.ok) {
          ++failures;
          details.push_back(c.name + " seed " + std::to_string(seed) + ": " + r.detail);
        }
      }
    }
  };
  run(segprompt::testing::gradient_cases());
  run(segprompt::testing::layer_gradient_cases());
  const double t = seconds_since(start);
  details.insert(details.begin(), fmt("%zu ops/layers x 10 instances = %zu checks, %zu failures, %.1f s", ops,
                                      instances, failures, t));
  return {1, true, failures == 0 && t < 60.0, "finite-difference gradients (rel 1e-4, abs 1e-7)", details};
}

Verdict tokens() {
  std::vector<std::string> details;
  bool ok = true;
  const auto b16 = ViTConfig::vit_b16();
  const std::size_t d = b16.embed_dim;
  const auto seq = assemble(Tensor::zeros({1, d}), Tensor::zeros({b16.n_img(), d}), Tensor::zeros({49, d}),
                            Tensor::zeros({2, d}));
  ok &= seq.size() == 248 && seq.tokens.dim(0) == 248;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const TokenRole want = i == 0 ? TokenRole::cls
                           : i <= 196 ? TokenRole::image
                           : i <= 245 ? TokenRole::segmentation
                                      : TokenRole::extra;
    ok &= seq.roles[i] == want;
  }
  details.push_back(fmt("ViT-B/16: length %zu = 1 + %zu + %zu + %zu; roles [0], [1..196], [197..245], [246..247]",
                        seq.size(), seq.count(TokenRole::image), seq.count(TokenRole::segmentation),
                        seq.count(TokenRole::extra)));
  const ModelConfig desk;
  Rng rng(0);
  SegPromptModel m(desk, TuningMode{ModeKind::segprompt}, nullptr, rng);
  const auto bg = SegMap::background(desk.vit.image_size, desk.vit.image_size);
  NoGradGuard g;
  const auto ds = m.token_sequence(Tensor::zeros({3, desk.vit.image_size, desk.vit.image_size}), &bg);
  const std::size_t n_img = desk.vit.n_img();
  ok &= ds.size() == 1 + n_img + desk.seg_tokens + desk.extra_tokens;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const TokenRole want = i == 0 ? TokenRole::cls
                           : i <= n_img ? TokenRole::image
                           : i <= n_img + desk.seg_tokens ? TokenRole::segmentation
                                                          : TokenRole::extra;
    ok &= ds.roles[i] == want;
  }
  details.push_back(fmt("desk: length %zu = 1 + %zu + %zu + %zu", ds.size(), n_img, desk.seg_tokens,
                        desk.extra_tokens));
  return {3, true, ok, "token arithmetic and role partitions", details};
}

Verdict metrics_oracle() {
  Rng rng(4);
  double worst = 0;
  std::size_t max_n = 0;
  for (int t = 0; t < 100; ++t) {
    const auto m = segprompt::testing::random_metrics_instance(rng, 50);
    max_n = std::max(max_n, m.labels.size());
    worst = std::max(worst, segprompt::testing::metrics_distance(compute_metrics(m.preds, m.scores, m.labels),
                                                                 segprompt::testing::oracle_metrics(m.preds, m.scores,
                                                                                                    m.labels)));
  }
  return {4, true, worst <= 1e-12, "metrics match exhaustive oracles",
          {fmt("100 instances, n <= %zu, max deviation %.3g", max_n, worst)}};
}

Verdict folds() {
  GeneratorConfig g;
  const auto data = generate(g);
  const auto plan = plan_folds(data);
  const auto by_class = videos_by_class(data);
  bool ok = plan.folds.size() == 6;
  std::set<std::pair<std::string, std::string>> pairs;
  std::size_t leaks = 0;
  for (const auto& f : plan.folds) {
    ok &= f.val_videos.size() == 2;
    pairs.insert({f.val_videos[0], f.val_videos[1]});
    const std::set<std::string> train(f.train_videos.begin(), f.train_videos.end());
    for (const auto& s : data) {
      const bool in_val = std::count(f.val_videos.begin(), f.val_videos.end(), s.video_id) > 0;
      if (in_val && train.count(s.video_id)) ++leaks;
    }
  }
  std::size_t covered = 0;
  for (const auto& com : by_class[kClassCom])
    for (const auto& cap : by_class[kClassCap]) covered += pairs.count({com, cap});
  ok &= leaks == 0 && covered == by_class[0].size() * by_class[1].size();
  return {5, true, ok, "video-wise folds",
          {fmt("%zu folds, %zu of %zu COMxCAP pairs covered, %zu leaked samples over %zu scanned", plan.folds.size(),
               covered, by_class[0].size() * by_class[1].size(), leaks, data.size() * plan.folds.size())}};
}

// ---------------------------------------------------------------------------
// Desk-scale training experiments (criteria 2, 6, 7, 8)

std::string vit_bytes(const ParamList& params) { return encode_checkpoint(params, ""); }

std::string checkpoint_vit_bytes(const Checkpoint& ck) {
  ParamList vit;
  const std::string prefix(kVitPrefix);
  for (const auto& t : ck.tensors)
    if (t.name.rfind(prefix, 0) == 0) vit.push_back({t.name.substr(prefix.size()), t.tensor});
  return encode_checkpoint(vit, "");
}

/// Same schedule as run_cross_validation, keeping each fold's model long
/// enough to compare its backbone with the checkpoint.
struct CvOutcome {
  AggregateReport aggregate;
  std::size_t folds = 0;
  std::size_t backbone_mismatches = 0;
};

CvOutcome cross_validate(const TrainConfig& cfg, const std::vector<Sample>& data, const FoldPlan& plan,
                         const Checkpoint& ck, const std::string& reference_bytes) {
  CvOutcome out;
  std::vector<MetricsReport> per_fold;
  for (std::size_t i = 0; i < plan.folds.size(); ++i) {
    const auto& f = plan.folds[i];
    auto r = train_fold(cfg, select_videos(data, f.train_videos), select_videos(data, f.val_videos), &ck, i);
    per_fold.push_back(r.report.best());
    if (cfg.mode.is_prompt() && vit_bytes(r.model->backbone.parameters()) != reference_bytes) {
      ++out.backbone_mismatches;
    }
  }
  out.folds = per_fold.size();
  out.aggregate = aggregate(per_fold);
  return out;
}

struct SeedRuns {
  std::map<std::string, double> acc;  // mean fold accuracy per arm
  std::size_t sp_folds_checked = 0;
  std::size_t sp_mismatches = 0;
  double pretext_vit = 0, pretext_resnet = 0;
  double core_seconds = 0;  // data, pretext and the three criterion-6 arms
  double extra_seconds = 0;
  bool ft_mutates = false;
};

SeedRuns run_seed(std::uint64_t seed, Report& report) {
  SeedRuns out;
  const auto t0 = Clock::now();
  GeneratorConfig g;
  g.seed = substream_seed(seed, "dataset");
  const auto data = generate(g);
  GeneratorConfig pg = g;
  pg.com_videos = pg.cap_videos = 10;
  pg.frames_per_video = 30;
  const auto pretext = generate_pretext(pg);
  PretextConfig pc;
  pc.seed = seed;
  const auto pre = pretext_pretrain(pc, pretext, data);
  const auto ck = pre.checkpoint();
  const auto reference = checkpoint_vit_bytes(ck);
  out.pretext_vit = pre.vit_accuracy;
  out.pretext_resnet = pre.resnet_accuracy;
  const auto plan = plan_folds(data);

  auto arm = [&](const std::string& name, TuningMode mode, const std::vector<Sample>& d, bool core) {
    const auto t = Clock::now();
    TrainConfig tc;
    tc.seed = seed;
    tc.mode = mode;
    const auto r = cross_validate(tc, d, plan, ck, reference);
    out.acc[name] = r.aggregate.accuracy.mean;
    if (mode.is_segprompt()) {
      out.sp_folds_checked += r.folds;
      out.sp_mismatches += r.backbone_mismatches;
    }
    const double dt = seconds_since(t);
    (core ? out.core_seconds : out.extra_seconds) += dt;
    report.note(fmt("  seed %llu %-16s acc %s  f1 %s  (%.0f s)", static_cast<unsigned long long>(seed), name.c_str(),
                    format_mean_std(r.aggregate.accuracy).c_str(), format_mean_std(r.aggregate.f1).c_str(), dt));
  };
  TuningMode sp{ModeKind::segprompt}, vpt{ModeKind::vpt}, ftc{ModeKind::ft_concat}, no_r{ModeKind::segprompt};
  no_r.no_indicator = true;
  out.core_seconds += seconds_since(t0);
  report.note(fmt("  seed %llu pretext rotation accuracy: vit %.3f, resnet %.3f (chance 0.25)",
                  static_cast<unsigned long long>(seed), pre.vit_accuracy, pre.resnet_accuracy));
  arm("segprompt", sp, data, true);
  arm("vpt", vpt, data, true);
  arm("ft-concat", ftc, data, true);
  arm("segprompt-no-r", no_r, data, false);
  auto degraded = data;
  degrade_masks(degraded, 0.93, substream_seed(seed, "degrade"));
  arm("segprompt@0.93", sp, degraded, false);
  arm("vpt@0.93", vpt, degraded, false);
  arm("ft-concat@0.93", ftc, degraded, false);

  if (seed == 0) {
    // One fine-tuning fold from the same checkpoint must move the backbone.
    const auto t = Clock::now();
    TrainConfig tc;
    tc.mode = TuningMode{ModeKind::ft};
    tc.epochs = 1;
    const auto& f = plan.folds[0];
    const auto r = train_fold(tc, select_videos(data, f.train_videos), select_videos(data, f.val_videos), &ck);
    out.ft_mutates = vit_bytes(r.model->backbone.parameters()) != reference;
    out.extra_seconds += seconds_since(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Criterion 9: CLI determinism

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file_bytes(e.path().string());
  return out;
}

Verdict cli_determinism() {
  const std::string bin = SEGPROMPT_CLI_PATH;
  const fs::path root = fs::temp_directory_path() / "segprompt_acceptance_cli";
  std::vector<std::string> details;
  bool ok = true;
  auto session = [&](const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string d = dir.string();
    const std::vector<std::string> cmds = {
        "generate --out " + d + "/data --frames 4 --seed 9",
        "generate --out " + d + "/pre --frames 6 --seed 9 --pretext",
        "pretrain --data " + d + "/pre --eval-data " + d + "/data --out " + d + "/backbone.ckpt --epochs 2 --seed 9",
        "train --data " + d + "/data --ckpt " + d + "/backbone.ckpt --out " + d + "/sp --mode segprompt --epochs 2 --seed 9",
        "train --data " + d + "/data --ckpt " + d + "/backbone.ckpt --out " + d + "/vpt --mode vpt --epochs 2 --seed 9 --jobs 2",
        "train --data " + d + "/data --out " + d + "/ftc --mode ft-concat --epochs 2 --seed 9 --degrade-dice 0.93",
        "sweep --data " + d + "/data --ckpt " + d + "/backbone.ckpt --out " + d + "/sweep --ls 4,9 --epochs 1 --seed 9",
        "report --runs " + d + "/sp " + d + "/vpt " + d + "/ftc --out " + d + "/report",
    };
    for (const auto& c : cmds) {
      const int rc = std::system((bin + " " + c + " > /dev/null").c_str());
      if (rc != 0) {
        ok = false;
        details.push_back("command failed (" + std::to_string(rc) + "): segprompt " + c);
      }
    }
  };
  session(root / "a");
  session(root / "b");
  if (ok) {
    auto a = tree(root / "a"), b = tree(root / "b");
    // Paths differ between the two sessions; they appear only in manifests.
    std::size_t compared = 0, differing = 0;
    for (const auto& [name, bytes] : a) {
      if (!b.count(name)) {
        ++differing;
        details.push_back("missing in second run: " + name);
        continue;
      }
      std::string x = bytes, y = b.at(name);
      if (name.find("manifest.txt") != std::string::npos) {
        auto strip = [](std::string s, const std::string& from) {
          for (auto p = s.find(from); p != std::string::npos; p = s.find(from)) s.erase(p, from.size());
          return s;
        };
        x = strip(x, (root / "a").string());
        y = strip(y, (root / "b").string());
      }
      ++compared;
      if (x != y) {
        ++differing;
        details.push_back("differs: " + name);
      }
    }
    ok &= differing == 0 && a.size() == b.size();
    details.insert(details.begin(),
                   fmt("%zu files compared (checkpoints, fold reports, metrics, tables, manifests), %zu differ",
                       compared, differing));
  }
  fs::remove_all(root);
  return {9, true, ok, "CLI runs with identical seeds are bit-identical", details};
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t seeds = 5;
  if (argc > 1) seeds = std::stoul(argv[1]);
  Report report;
  const auto start = Clock::now();

  report.add(gradients());
  report.add(tokens());
  report.add(metrics_oracle());
  report.add(folds());
  report.add(cli_determinism());

  report.note(fmt("desk-scale experiments over %zu seeds (default dataset, default model and training config):", seeds));
  std::vector<SeedRuns> runs;
  for (std::uint64_t s = 0; s < seeds; ++s) runs.push_back(run_seed(s, report));

  auto mean_of = [&](const std::string& arm) {
    double m = 0;
    for (const auto& r : runs) m += r.acc.at(arm);
    return m / static_cast<double>(runs.size());
  };
  std::size_t checked = 0, mismatches = 0;
  double core = 0, pre_vit_min = 1;
  for (const auto& r : runs) {
    checked += r.sp_folds_checked;
    mismatches += r.sp_mismatches;
    core += r.core_seconds;
    pre_vit_min = std::min(pre_vit_min, r.pretext_vit);
  }
  report.add({2, true, mismatches == 0 && checked > 0 && runs.front().ft_mutates, "frozen backbone",
              {fmt("%zu SegPrompt fold models (complete 6-fold runs) compared with the checkpoint: %zu differ",
                   checked, mismatches),
               std::string("one FT fold from the same checkpoint ") +
                   (runs.front().ft_mutates ? "changes the backbone" : "leaves the backbone unchanged")}});

  const double sp = mean_of("segprompt"), vpt = mean_of("vpt"), ftc = mean_of("ft-concat");
  report.add({6, false, sp > vpt && sp > ftc && sp >= 0.95 && core < 1800.0,
              "SegPrompt best and >= 0.95 mean accuracy",
              {fmt("mean accuracy: segprompt %.4f, vpt %.4f, ft-concat %.4f", sp, vpt, ftc),
               fmt("segprompt > vpt: %s, segprompt > ft-concat: %s, segprompt >= 0.95: %s", sp > vpt ? "yes" : "no",
                   sp > ftc ? "yes" : "no", sp >= 0.95 ? "yes" : "no"),
               fmt("runtime of these runs %.1f min (budget 30), minimum pretext accuracy %.3f", core / 60.0,
                   pre_vit_min)}});

  const double no_r = mean_of("segprompt-no-r");
  report.add({7, false, no_r <= sp, "removing the indicator token does not help",
              {fmt("segprompt %.4f, without r %.4f, gap %+.4f", sp, no_r, sp - no_r)}});

  const double sp_d = mean_of("segprompt@0.93"), vpt_d = mean_of("vpt@0.93"), ftc_d = mean_of("ft-concat@0.93");
  report.add({8, false, sp_d > vpt_d && sp_d > ftc_d, "ordering holds with masks at Dice 0.93",
              {fmt("mean accuracy: segprompt %.4f, vpt %.4f, ft-concat %.4f", sp_d, vpt_d, ftc_d)}});

  report.note(fmt("total %.1f min", seconds_since(start) / 60.0));
  std::ofstream("acceptance_report.txt") << report.text();
  return report.exit_code();
}
