#pragma once

// Command-line front end: generate | pretrain | train | sweep | report.
// Every command writes a run manifest of key=value lines that can be fed
// back through --config; flags given on the command line win over it.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "segprompt/segprompt.hpp"

namespace segprompt {

inline constexpr const char* kCodeVersion = "segprompt 0.1.0";

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitContract = 2 };

namespace cli {

namespace fs = std::filesystem;

/// Resolved options of one command, in a stable order, for the manifest.
struct RunManifest {
  std::string command;
  std::vector<std::pair<std::string, std::string>> options;
  std::vector<std::pair<std::string, std::string>> facts;  // checksums, versions, outputs

  void set(const std::string& k, const std::string& v) { options.emplace_back(k, v); }
  void fact(const std::string& k, const std::string& v) { facts.emplace_back(k, v); }

  /// Options as plain key=value lines; everything else as '#' comments so
  /// the file is directly usable with --config.
  std::string text() const {
    std::ostringstream os;
    os << "# command=" << command << '\n';
    for (const auto& [k, v] : facts) os << "# " << k << '=' << v << '\n';
    for (const auto& [k, v] : options) os << k << '=' << v << '\n';
    return os.str();
  }

  void write(const std::string& path) const { write_file_bytes(path, text()); }
};

inline std::string join(const std::vector<std::string>& v, char sep = ',') {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? std::string(1, sep) : "") + v[i];
  return s;
}

template <typename T>
std::string join_numbers(const std::vector<T>& v) {
  std::vector<std::string> s;
  for (const auto& x : v) s.push_back(std::to_string(x));
  return join(s);
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::vector<std::size_t> parse_size_list(const std::string& text, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": '" + item + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + " is empty");
  return out;
}

/// Expands `--config FILE`: each key=value line becomes `--key value` unless
/// the key is already present on the command line.
inline std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string config_path;
  std::vector<std::string> kept;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw ConfigError("--config needs a file argument");
      config_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    } else {
      kept.push_back(args[i]);
    }
  }
  if (config_path.empty()) return kept;
  const auto kv = parse_key_values(read_file_bytes(config_path));
  auto given = [&](const std::string& key) {
    for (const auto& a : kept)
      if (a == "--" + key || a.rfind("--" + key + "=", 0) == 0) return true;
    return false;
  };
  for (const auto& [k, v] : kv) {
    if (given(k)) continue;
    if (v == "true") {
      kept.push_back("--" + k);
    } else if (v == "false") {
      continue;
    } else {
      kept.push_back("--" + k);
      // Multi-valued options are stored space separated.
      std::istringstream vs(v);
      std::string part;
      while (vs >> part) kept.push_back(part);
    }
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Tables

inline std::string metrics_row_csv(const std::string& label, const AggregateReport& a) {
  std::ostringstream os;
  os << label;
  for (const auto* m : {&a.accuracy, &a.precision, &a.recall, &a.f1, &a.auc})
    os << ',' << fmt_double(m->mean) << ',' << fmt_double(m->std);
  return os.str();
}

inline constexpr const char* kAggregateHeader =
    "label,accuracy_mean,accuracy_std,precision_mean,precision_std,recall_mean,recall_std,f1_mean,"
    "f1_std,auc_mean,auc_std";

/// Text table with one row per entry: "mean ± std" percentages.
inline std::string format_table(const std::string& first_col,
                                const std::vector<std::pair<std::string, AggregateReport>>& rows) {
  const std::vector<std::string> cols = {"Accuracy", "Precision", "Recall", "F1", "AUC"};
  std::vector<std::vector<std::string>> cells;
  std::size_t w0 = first_col.size();
  for (const auto& [label, a] : rows) {
    std::vector<std::string> r = {label};
    for (const auto* m : {&a.accuracy, &a.precision, &a.recall, &a.f1, &a.auc})
      r.push_back(format_mean_std(*m));
    w0 = std::max(w0, label.size());
    cells.push_back(std::move(r));
  }
  // "±" is two bytes but one column wide.
  auto width = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;
    return n;
  };
  auto pad = [&](const std::string& s, std::size_t w) { return s + std::string(w - std::min(w, width(s)), ' '); };
  constexpr std::size_t kw = 14;
  std::ostringstream os;
  os << pad(first_col, w0);
  for (const auto& c : cols) os << "  " << pad(c, kw);
  os << '\n';
  for (const auto& r : cells) {
    os << pad(r[0], w0);
    for (std::size_t i = 1; i < r.size(); ++i) os << "  " << pad(r[i], kw);
    os << '\n';
  }
  return os.str();
}

inline void write_cv_outputs(const std::string& dir, const std::string& label,
                             const CrossValidationResult& cv, bool save_timing) {
  fs::create_directories(fs::path(dir) / "folds");
  std::ostringstream folds;
  folds << "fold,val_videos,accuracy,precision,recall,f1,auc,best_epoch\n";
  for (const auto& f : cv.folds) {
    folds << f.fold_id << ',' << join(f.fold.val_videos, '+') << ',' << fmt_double(f.metrics.accuracy)
          << ',' << fmt_double(f.metrics.precision) << ',' << fmt_double(f.metrics.recall) << ','
          << fmt_double(f.metrics.f1) << ',' << fmt_double(f.metrics.auc) << ',' << f.report.best_epoch
          << '\n';
    write_file_bytes((fs::path(dir) / "folds" / ("fold_" + std::to_string(f.fold_id) + ".csv")).string(),
                     train_report_csv(f.report, save_timing));
  }
  write_file_bytes((fs::path(dir) / "folds.csv").string(), folds.str());
  write_file_bytes((fs::path(dir) / "metrics.csv").string(),
                   std::string(kAggregateHeader) + "\n" + metrics_row_csv(label, cv.aggregate) + "\n");
  write_file_bytes((fs::path(dir) / "table.txt").string(), format_table("Mode", {{label, cv.aggregate}}));
}

/// Reads back a metrics.csv written by train or sweep.
inline std::vector<std::pair<std::string, AggregateReport>> read_metrics_csv(const std::string& path) {
  if (!fs::exists(path)) throw IoError("missing metrics file " + path);
  std::istringstream in(read_file_bytes(path));
  std::string line;
  if (!std::getline(in, line) || line != kAggregateHeader) {
    throw IoError(path + ": unexpected header");
  }
  std::vector<std::pair<std::string, AggregateReport>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> c;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) c.push_back(cell);
    if (c.size() != 11) throw IoError(path + ": expected 11 columns, found " + std::to_string(c.size()));
    AggregateReport a;
    try {
      std::size_t i = 1;
      for (auto* m : {&a.accuracy, &a.precision, &a.recall, &a.f1, &a.auc}) {
        m->mean = std::stod(c[i++]);
        m->std = std::stod(c[i++]);
      }
    } catch (const std::exception&) {
      throw IoError(path + ": malformed number in row '" + c[0] + "'");
    }
    rows.emplace_back(c[0], a);
  }
  if (rows.empty()) throw IoError(path + ": no rows");
  return rows;
}

// ---------------------------------------------------------------------------
// Shared model settings

/// Model geometry from a pretrained checkpoint's config block, or defaults.
inline ModelConfig model_config_from(const Checkpoint* ck) {
  ModelConfig m;
  if (!ck) return m;
  m.vit = ViTConfig::from_text(ck->config);
  const auto kv = parse_key_values(ck->config);
  if (auto it = kv.find("stem_stage1"); it != kv.end()) m.stem.stage1_channels = std::stoul(it->second);
  if (auto it = kv.find("stem_stage2"); it != kv.end()) m.stem.stage2_channels = std::stoul(it->second);
  return m;
}

struct TrainArgs {
  std::string data;
  std::string ckpt;
  std::string out;
  std::string mode = "segprompt";
  std::string ablate;
  std::size_t ls = ModelConfig{}.seg_tokens;
  std::size_t le = ModelConfig{}.extra_tokens;
  std::size_t lp = ModelConfig{}.prompt_tokens;
  double degrade_dice = 1.0;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::size_t epochs = TrainConfig{}.epochs;
  std::size_t batch = TrainConfig{}.batch_size;
  double lr = TrainConfig{}.learning_rate;
  bool timing = false;

  void add_options(CLI::App* app, bool sweep) {
    app->add_option("--data", data, "dataset directory")->required();
    app->add_option("--ckpt", ckpt, "pretrained backbone checkpoint");
    app->add_option("--out", out, "run output directory")->required();
    app->add_option("--mode", mode, "tuning mode");
    if (!sweep) app->add_option("--ls", ls, "segmentation tokens l_s (perfect square)");
    app->add_option("--le", le, "extra tokens l_e");
    app->add_option("--lp", lp, "VPT prompt tokens");
    app->add_option("--ablate", ablate, "no-r or no-ze");
    app->add_option("--degrade-dice", degrade_dice, "emulate imperfect masks at this Dice");
    app->add_option("--seed", seed);
    app->add_option("--jobs", jobs, "folds trained in parallel");
    app->add_option("--epochs", epochs);
    app->add_option("--batch", batch);
    app->add_option("--lr", lr);
    app->add_flag("--timing", timing, "append wall time to fold reports");
  }

  void record(RunManifest& m, bool sweep) const {
    m.set("data", data);
    if (!ckpt.empty()) m.set("ckpt", ckpt);
    m.set("out", out);
    m.set("mode", mode);
    if (!sweep) m.set("ls", std::to_string(ls));
    m.set("le", std::to_string(le));
    m.set("lp", std::to_string(lp));
    if (!ablate.empty()) m.set("ablate", ablate);
    m.set("degrade-dice", fmt_double(degrade_dice));
    m.set("seed", std::to_string(seed));
    m.set("jobs", std::to_string(jobs));
    m.set("epochs", std::to_string(epochs));
    m.set("batch", std::to_string(batch));
    m.set("lr", fmt_double(lr));
    if (timing) m.set("timing", "true");
  }

  TrainConfig train_config(const Checkpoint* ck, std::size_t seg_tokens) const {
    TrainConfig tc;
    tc.batch_size = batch;
    tc.epochs = epochs;
    tc.learning_rate = lr;
    tc.seed = seed;
    tc.model = model_config_from(ck);
    tc.model.seg_tokens = seg_tokens;
    tc.model.extra_tokens = le;
    tc.model.prompt_tokens = lp;
    tc.mode.kind = parse_mode_kind(mode);
    if (ablate == "no-r") {
      tc.mode.no_indicator = true;
    } else if (ablate == "no-ze") {
      tc.mode.no_extra_tokens = true;
    } else if (!ablate.empty()) {
      throw ConfigError("--ablate must be no-r or no-ze, got '" + ablate + "'");
    }
    tc.validate();
    if (tc.mode.is_segprompt()) seg_grid_side(seg_tokens);
    return tc;
  }
};

struct LoadedData {
  std::vector<Sample> samples;
  std::string checksum;
};

inline LoadedData load_for_training(const TrainArgs& a) {
  LoadedData d;
  d.samples = load_dataset(a.data);
  d.checksum = dataset_checksum(d.samples);
  if (a.degrade_dice < 1.0) {
    bool missing = false;
    for (const auto& s : d.samples) missing |= !s.mask.has_value();
    if (missing) throw ConfigError("--degrade-dice needs masks, but " + a.data + " has samples without one");
    degrade_masks(d.samples, a.degrade_dice, substream_seed(a.seed, "degrade"));
  } else if (!(a.degrade_dice > 0.5 && a.degrade_dice <= 1.0)) {
    throw ConfigError("--degrade-dice must be in (0.5, 1]");
  }
  return d;
}

inline std::optional<Checkpoint> load_optional_ckpt(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return load_checkpoint(path);
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_generate(const std::string& out, std::uint64_t seed, const std::string& videos,
                        std::size_t frames, std::size_t size, bool pretext, bool no_masks,
                        double decoy, double video_variation, RunManifest& m) {
  const auto counts = parse_size_list(videos, "--videos");
  if (counts.size() != 2) throw ConfigError("--videos takes two counts, COM,CAP (e.g. 3,2)");
  GeneratorConfig g;
  g.com_videos = counts[0];
  g.cap_videos = counts[1];
  g.frames_per_video = frames;
  g.image_size = size;
  g.decoy_probability = decoy;
  g.video_variation = video_variation;
  g.seed = substream_seed(seed, "dataset");
  auto samples = pretext ? generate_pretext(g) : generate(g);
  if (no_masks)
    for (auto& s : samples) s.mask.reset();
  save_dataset(samples, out);
  const auto checksum = dataset_checksum(samples);
  m.fact("dataset_checksum", checksum);
  m.fact("samples", std::to_string(samples.size()));
  m.write((fs::path(out) / "run_manifest.txt").string());
  std::cout << "wrote " << samples.size() << " samples from " << (g.com_videos + g.cap_videos)
            << " videos to " << out << " (checksum " << checksum << ")\n";
  return kExitOk;
}

inline int cmd_pretrain(const std::string& data, const std::string& eval_data, const std::string& out,
                        const PretextConfig& pc, RunManifest& m) {
  const auto pretext = load_dataset(data);
  std::vector<Sample> evaluation;
  if (!eval_data.empty()) {
    evaluation = load_dataset(eval_data);
    const auto a = dataset_checksum(pretext), b = dataset_checksum(evaluation);
    if (a == b) throw ContractError("pretext data " + data + " is the evaluation dataset (checksum " + a + ")");
    m.fact("eval_checksum", b);
  }
  const auto r = pretext_pretrain(pc, pretext, evaluation);
  save_checkpoint(out, r.tensors, r.config_text);
  m.fact("dataset_checksum", dataset_checksum(pretext));
  m.fact("pretext_accuracy_vit", fmt_double(r.vit_accuracy));
  m.fact("pretext_accuracy_resnet", fmt_double(r.resnet_accuracy));
  m.write(out + ".manifest.txt");
  std::printf("pretext accuracy (chance 0.25): vit %.3f, resnet %.3f\n", r.vit_accuracy, r.resnet_accuracy);
  std::printf("wrote %s\n", out.c_str());
  return kExitOk;
}

inline int cmd_train(const TrainArgs& a, RunManifest& m) {
  const auto ck = load_optional_ckpt(a.ckpt);
  const auto tc = a.train_config(ck ? &*ck : nullptr, a.ls);
  const auto d = load_for_training(a);
  const auto plan = plan_folds(d.samples);
  const auto cv = run_cross_validation(tc, d.samples, plan, ck ? &*ck : nullptr, a.jobs);
  const std::string label = tc.mode.label();
  write_cv_outputs(a.out, label, cv, a.timing);
  m.fact("dataset_checksum", d.checksum);
  m.fact("folds", std::to_string(plan.folds.size()));
  m.write((fs::path(a.out) / "run_manifest.txt").string());
  std::cout << format_table("Mode", {{label, cv.aggregate}});
  return kExitOk;
}

inline int cmd_sweep(const TrainArgs& a, const std::vector<std::size_t>& ls_values, RunManifest& m) {
  const auto ck = load_optional_ckpt(a.ckpt);
  std::vector<TrainConfig> configs;
  for (auto ls : ls_values) configs.push_back(a.train_config(ck ? &*ck : nullptr, ls));
  if (!configs.front().mode.is_segprompt()) throw ConfigError("sweep varies l_s and needs a segprompt mode");
  const auto d = load_for_training(a);
  const auto plan = plan_folds(d.samples);
  std::vector<std::pair<std::string, AggregateReport>> rows;
  std::string csv = std::string(kAggregateHeader) + "\n";
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto cv = run_cross_validation(configs[i], d.samples, plan, ck ? &*ck : nullptr, a.jobs);
    const std::string label = "l_s=" + std::to_string(ls_values[i]);
    write_cv_outputs((fs::path(a.out) / ("ls_" + std::to_string(ls_values[i]))).string(), label, cv, a.timing);
    rows.emplace_back(label, cv.aggregate);
    csv += metrics_row_csv(label, cv.aggregate) + "\n";
  }
  write_file_bytes((fs::path(a.out) / "metrics.csv").string(), csv);
  const auto table = format_table("Tokens", rows);
  write_file_bytes((fs::path(a.out) / "table.txt").string(), table);
  m.fact("dataset_checksum", d.checksum);
  m.write((fs::path(a.out) / "run_manifest.txt").string());
  std::cout << table;
  return kExitOk;
}

inline int cmd_report(const std::vector<std::string>& runs, const std::string& out, RunManifest& m) {
  std::vector<std::pair<std::string, AggregateReport>> rows;
  std::string csv = std::string(kAggregateHeader) + "\n";
  for (const auto& r : runs) {
    for (auto& row : read_metrics_csv((fs::path(r) / "metrics.csv").string())) {
      csv += metrics_row_csv(row.first, row.second) + "\n";
      rows.push_back(std::move(row));
    }
  }
  const auto table = format_table("Mode", rows);
  std::cout << table;
  if (!out.empty()) {
    fs::create_directories(out);
    write_file_bytes((fs::path(out) / "table.txt").string(), table);
    write_file_bytes((fs::path(out) / "metrics.csv").string(), csv);
    m.write((fs::path(out) / "run_manifest.txt").string());
  }
  return kExitOk;
}

}  // namespace cli

/// Entry point shared by the binary and the tests. Returns the exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  using namespace cli;
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  try {
    args = expand_config(std::move(args));
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  CLI::App app{"Segmentation-map prompt tuning of a frozen vision transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kCodeVersion);
  RunManifest manifest;

  // generate
  std::string gen_out, gen_videos = "3,2";
  std::uint64_t gen_seed = 0;
  std::size_t gen_frames = GeneratorConfig{}.frames_per_video, gen_size = GeneratorConfig{}.image_size;
  double gen_decoy = GeneratorConfig{}.decoy_probability;
  double gen_variation = GeneratorConfig{}.video_variation;
  bool gen_pretext = false, gen_no_masks = false;
  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed);
  gen->add_option("--videos", gen_videos, "COM,CAP video counts");
  gen->add_option("--frames", gen_frames, "frames per video");
  gen->add_option("--size", gen_size, "image side in pixels");
  gen->add_option("--decoy", gen_decoy, "probability of a stone-like distractor per frame");
  gen->add_option("--video-variation", gen_variation, "scale of per-video lighting and stone-size nuisances");
  gen->add_flag("--pretext", gen_pretext, "write auxiliary pretraining videos instead");
  gen->add_flag("--no-masks", gen_no_masks, "omit segmentation masks");

  // pretrain
  std::string pre_data, pre_eval, pre_out;
  PretextConfig pc;
  auto* pre = app.add_subcommand("pretrain", "self-supervised backbone pretraining");
  pre->add_option("--data", pre_data, "pretext dataset directory")->required();
  pre->add_option("--eval-data", pre_eval, "evaluation dataset that must not overlap");
  pre->add_option("--out", pre_out, "checkpoint path")->required();
  pre->add_option("--epochs", pc.epochs);
  pre->add_option("--seed", pc.seed);

  // train / sweep
  TrainArgs train_args, sweep_args;
  auto* train = app.add_subcommand("train", "video-wise cross-validation of one tuning mode");
  train_args.add_options(train, false);
  std::string sweep_ls = "25,36,49,64,81";
  auto* sweep = app.add_subcommand("sweep", "cross-validate several segmentation token counts");
  sweep_args.add_options(sweep, true);
  sweep->add_option("--ls", sweep_ls, "comma-separated l_s values");

  // report
  std::vector<std::string> report_runs;
  std::string report_out;
  auto* report = app.add_subcommand("report", "combine run directories into one table");
  report->add_option("--runs", report_runs, "run directories")->required();
  report->add_option("--out", report_out, "directory for the combined table");

  try {
    // CLI11 consumes a vector from the back.
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    std::cout << kCodeVersion << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  }

  manifest.fact("code_version", kCodeVersion);
  try {
    if (gen->parsed()) {
      manifest.command = "generate";
      manifest.set("out", gen_out);
      manifest.set("seed", std::to_string(gen_seed));
      manifest.set("videos", gen_videos);
      manifest.set("frames", std::to_string(gen_frames));
      manifest.set("size", std::to_string(gen_size));
      manifest.set("decoy", fmt_double(gen_decoy));
      manifest.set("video-variation", fmt_double(gen_variation));
      if (gen_pretext) manifest.set("pretext", "true");
      if (gen_no_masks) manifest.set("no-masks", "true");
      return cmd_generate(gen_out, gen_seed, gen_videos, gen_frames, gen_size, gen_pretext, gen_no_masks,
                          gen_decoy, gen_variation, manifest);
    }
    if (pre->parsed()) {
      manifest.command = "pretrain";
      manifest.set("data", pre_data);
      if (!pre_eval.empty()) manifest.set("eval-data", pre_eval);
      manifest.set("out", pre_out);
      manifest.set("epochs", std::to_string(pc.epochs));
      manifest.set("seed", std::to_string(pc.seed));
      return cmd_pretrain(pre_data, pre_eval, pre_out, pc, manifest);
    }
    if (train->parsed()) {
      manifest.command = "train";
      train_args.record(manifest, false);
      return cmd_train(train_args, manifest);
    }
    if (sweep->parsed()) {
      manifest.command = "sweep";
      sweep_args.record(manifest, true);
      manifest.set("ls", sweep_ls);
      return cmd_sweep(sweep_args, parse_size_list(sweep_ls, "--ls"), manifest);
    }
    manifest.command = "report";
    manifest.set("runs", join(report_runs, ' '));
    if (!report_out.empty()) manifest.set("out", report_out);
    return cmd_report(report_runs, report_out, manifest);
  } catch (const ContractError& e) {
    err << "contract violation: " << e.what() << '\n';
    return kExitContract;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

}  // namespace segprompt
