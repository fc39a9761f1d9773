// Experiment command line: gen, train, eval, gradcheck.
//
// Exit codes: 0 success, 1 check failure, 2 usage / config / IO error,
// 3 numerical failure.
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mmfuse/data.hpp"
#include "mmfuse/evaluate.hpp"
#include "mmfuse/gradcheck.hpp"
#include "mmfuse/json_io.hpp"
#include "mmfuse/train.hpp"

namespace mmfuse::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kNumerical = 3 };

inline constexpr const char* kOutputDirEnv = "MMFUSE_OUTPUT_DIR";

/// A failure that maps straight to an exit code.
class CommandError : public std::runtime_error {
 public:
  CommandError(int code, const std::string& what) : std::runtime_error(what), code_(code) {}
  int code() const noexcept { return code_; }

 private:
  int code_;
};

inline Json dataset_config_to_json(const DatasetConfig& c) {
  return Json{{"k", c.k},
              {"n_head", c.n_head},
              {"imbalance_ratio", c.imbalance_ratio},
              {"d_a", c.d_a},
              {"d_b", c.d_b},
              {"len_min", c.len_min},
              {"len_max", c.len_max},
              {"noise_sigma", c.noise_sigma},
              {"confusion_rate", c.confusion_rate},
              {"prototype_scale", c.prototype_scale},
              {"seed", c.seed}};
}

inline Json experiment_config_to_json(const ExperimentConfig& c) {
  const GammaSchedule s = c.effective_schedule();
  return Json{{"dataset", dataset_config_to_json(c.dataset)},
              {"loss", to_string(c.loss)},
              {"schedule",
               {{"gamma_start", s.gamma_start},
                {"gamma_end", s.gamma_end},
                {"total_epochs", s.total_epochs}}},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"hidden_dim", c.hidden_dim},
              {"clip_len", c.clip_len},
              {"merge_val_into_train", c.merge_val_into_train}};
}

namespace detail {

inline void add_dataset_options(CLI::App& app, DatasetConfig& c) {
  app.add_option("--k", c.k, "Number of classes")->capture_default_str();
  app.add_option("--n-head", c.n_head, "Training samples of the most frequent class")->capture_default_str();
  app.add_option("--imbalance-ratio", c.imbalance_ratio, "Head / tail training count ratio")->capture_default_str();
  app.add_option("--d-a", c.d_a, "Feature dimension of modality A")->capture_default_str();
  app.add_option("--d-b", c.d_b, "Feature dimension of modality B")->capture_default_str();
  app.add_option("--len-min", c.len_min, "Shortest sequence length")->capture_default_str();
  app.add_option("--len-max", c.len_max, "Longest sequence length")->capture_default_str();
  app.add_option("--noise-sigma", c.noise_sigma, "Per-frame noise std")->capture_default_str();
  app.add_option("--confusion-rate", c.confusion_rate, "Probability that one modality is blurred toward the neighbour class")->capture_default_str();
  app.add_option("--prototype-scale", c.prototype_scale, "Std of class prototype entries")->capture_default_str();
  app.add_option("--seed", c.seed, "Dataset and training seed")->capture_default_str();
}

inline void add_output_dir(CLI::App& app, std::string& dir) {
  app.add_option("--output-dir", dir, "Directory for produced files")
      ->envname(kOutputDirEnv)
      ->capture_default_str();
}

inline fs::path prepare_output_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw CommandError(kUsage, "cannot create output directory '" + dir + "'");
  return fs::path(dir);
}

inline std::vector<Sample> load_split(const fs::path& dataset_dir, const std::string& split) {
  const fs::path path = dataset_dir / (split + ".jsonl");
  if (!fs::exists(path)) throw CommandError(kUsage, "dataset file '" + path.string() + "' not found");
  return read_dataset(path);
}

/// Compares class count and feature dims against the dataset's generation
/// manifest, when the directory has one.
inline void check_against_manifest(const fs::path& dataset_dir, std::size_t k, std::size_t d_a,
                                   std::size_t d_b) {
  const fs::path path = dataset_dir / "gen_manifest.json";
  if (!fs::exists(path)) return;
  const Json manifest = read_json_file(path);
  const Json& c = manifest.at("config");
  const std::size_t mk = c.at("k").get<std::size_t>();
  const std::size_t ma = c.at("d_a").get<std::size_t>();
  const std::size_t mb = c.at("d_b").get<std::size_t>();
  if (mk != k || ma != d_a || mb != d_b) {
    std::ostringstream os;
    os << "dataset has k=" << mk << ", d_a=" << ma << ", d_b=" << mb << " but config expects k=" << k
       << ", d_a=" << d_a << ", d_b=" << d_b;
    throw CommandError(kUsage, os.str());
  }
}

inline void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

/// Reads a `key = value` document (blank lines and lines starting with # or ;
/// are skipped). Keys may use snake_case or kebab-case.
inline std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError(lineno, path.filename().string(), "expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front())
      value = value.substr(1, value.size() - 2);
    std::ranges::replace(key, '_', '-');
    if (key.empty()) throw FormatError(lineno, path.filename().string(), "empty key");
    entries.emplace_back(std::move(key), std::move(value));
  }
  return entries;
}

/// Expands `--config FILE` into `--key=value` tokens placed right after the
/// subcommand name, skipping keys the command line already sets. The output
/// directory from a file yields to the environment override.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> out;
  std::vector<std::string> files;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw CommandError(kUsage, "--config needs a file argument");
      files.push_back(args[++i]);
    } else if (args[i].starts_with("--config=")) {
      files.push_back(args[i].substr(9));
    } else {
      out.push_back(args[i]);
    }
  }
  if (files.empty() || out.empty()) return out;

  auto given = [&](const std::string& key) {
    const std::string flag = "--" + key;
    return std::ranges::any_of(out, [&](const std::string& a) {
      return a == flag || a.starts_with(flag + "=");
    });
  };
  std::vector<std::string> injected;
  for (const auto& file : files) {
    if (!fs::exists(file)) throw CommandError(kUsage, "config file '" + file + "' not found");
    for (auto& [key, value] : read_config_file(file)) {
      if (given(key)) continue;
      if (key == "output-dir" && std::getenv(kOutputDirEnv)) continue;
      injected.push_back("--" + key + "=" + value);
    }
  }
  out.insert(out.begin() + 1, injected.begin(), injected.end());
  return out;
}

inline std::string fmt(double x, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << x;
  return os.str();
}

}  // namespace detail

inline int cmd_gen(const DatasetConfig& cfg, const std::string& out_dir, std::ostream& out) {
  cfg.validate();
  const fs::path dir = detail::prepare_output_dir(out_dir);
  const Dataset ds = generate(cfg);
  write_dataset(dir / "train.jsonl", ds.train);
  write_dataset(dir / "val.jsonl", ds.val);
  write_dataset(dir / "test.jsonl", ds.test);
  const auto counts = class_counts(cfg);
  detail::write_json(dir / "gen_manifest.json",
                     Json{{"config", dataset_config_to_json(cfg)},
                          {"class_counts", counts},
                          {"eval_per_class", eval_count_per_class(cfg)},
                          {"sizes",
                           {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()}}},
                          {"seed", cfg.seed},
                          {"version", kVersion}});
  out << "wrote " << ds.train.size() << " train, " << ds.val.size() << " val, " << ds.test.size()
      << " test samples to " << dir.string() << "\n";
  return kOk;
}

struct TrainOptions {
  ExperimentConfig config;
  std::string dataset_dir;
  std::string modality = "a";
  std::string output_dir = ".";
  std::string resume;
};

inline int cmd_train(const TrainOptions& opt, std::ostream& out) {
  const ExperimentConfig& cfg = opt.config;
  cfg.validate();
  const Modality modality = parse_modality(opt.modality);
  const fs::path dataset_dir(opt.dataset_dir);
  detail::check_against_manifest(dataset_dir, cfg.dataset.k, cfg.dataset.d_a, cfg.dataset.d_b);
  std::vector<Sample> train = detail::load_split(dataset_dir, "train");
  if (cfg.merge_val_into_train) {
    std::vector<Sample> val = detail::load_split(dataset_dir, "val");
    train.insert(train.end(), std::make_move_iterator(val.begin()), std::make_move_iterator(val.end()));
  }
  std::optional<Checkpoint> resume;
  if (!opt.resume.empty()) resume = checkpoint_from_json(read_json_file(opt.resume));

  const fs::path dir = detail::prepare_output_dir(opt.output_dir);
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result;
  try {
    result = train_modality(cfg, train, modality, resume);
  } catch (const ShapeError& e) {
    throw CommandError(kUsage, std::string("dataset does not match config: ") + e.what());
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const std::string tag = to_string(modality);
  const fs::path ck_path = dir / ("checkpoint_" + tag + ".json");
  detail::write_json(ck_path, checkpoint_to_json(result.checkpoint));

  Json manifest{{"config", experiment_config_to_json(cfg)},
                {"modality", tag},
                {"dataset", dataset_dir.string()},
                {"train_size", result.train_size},
                {"epoch_loss", result.epoch_loss},
                {"checkpoint", ck_path.string()},
                {"wall_clock_seconds", seconds},
                {"version", kVersion}};
  if (cfg.loss == LossKind::focal) manifest["epoch_gamma"] = result.epoch_gamma;
  detail::write_json(dir / ("train_manifest_" + tag + ".json"), manifest);

  const std::size_t first = resume ? resume->epochs_completed : 0;
  for (std::size_t i = 0; i < result.epoch_loss.size(); ++i) {
    out << "epoch " << first + i << " loss " << detail::fmt(result.epoch_loss[i], 6);
    if (cfg.loss == LossKind::focal) out << " gamma " << detail::fmt(result.epoch_gamma[i], 6);
    out << "\n";
  }
  out << "modality " << tag << ": " << result.train_size << " samples, " << detail::fmt(seconds, 2)
      << " s, checkpoint " << ck_path.string() << "\n";
  return kOk;
}

struct EvalOptions {
  std::string checkpoint_a;
  std::string checkpoint_b;
  std::string dataset_dir;
  std::string split = "test";
  std::string output_dir = ".";
};

/// Training class counts of a dataset directory, or nothing if it has no train split.
inline std::optional<std::vector<std::size_t>> train_counts_of(const fs::path& dataset_dir,
                                                               std::size_t k) {
  const fs::path path = dataset_dir / "train.jsonl";
  if (!fs::exists(path)) return std::nullopt;
  std::vector<std::size_t> counts(k, 0);
  for (const Sample& s : read_dataset(path)) {
    if (s.label >= k) throw CommandError(kUsage, "train split has labels beyond the checkpoint's classes");
    ++counts[s.label];
  }
  return counts;
}

inline int cmd_eval(const EvalOptions& opt, std::ostream& out) {
  if (opt.checkpoint_a.empty() && opt.checkpoint_b.empty())
    throw CommandError(kUsage, "eval needs --checkpoint-a and/or --checkpoint-b");
  if (opt.split != "val" && opt.split != "test")
    throw CommandError(kUsage, "--split must be val or test");

  std::optional<Checkpoint> ck_a, ck_b;
  if (!opt.checkpoint_a.empty()) ck_a = checkpoint_from_json(read_json_file(opt.checkpoint_a));
  if (!opt.checkpoint_b.empty()) ck_b = checkpoint_from_json(read_json_file(opt.checkpoint_b));
  if (ck_a && ck_b && ck_a->params.num_classes() != ck_b->params.num_classes())
    throw CommandError(kUsage, "checkpoints disagree on class count");

  const fs::path dataset_dir(opt.dataset_dir);
  const std::vector<Sample> samples = detail::load_split(dataset_dir, opt.split);
  if (samples.empty()) throw CommandError(kUsage, "split '" + opt.split + "' is empty");
  const std::size_t k = (ck_a ? *ck_a : *ck_b).params.num_classes();
  for (const Sample& s : samples) {
    if (s.label >= k)
      throw CommandError(kUsage, "sample " + std::to_string(s.id) + " has a label beyond the checkpoint's classes");
    if ((ck_a && s.seq_a.cols() != ck_a->params.input_dim()) ||
        (ck_b && s.seq_b.cols() != ck_b->params.input_dim()))
      throw CommandError(kUsage, "sample " + std::to_string(s.id) + " feature width does not match the checkpoint");
  }
  const auto counts = k >= 3 ? train_counts_of(dataset_dir, k) : std::nullopt;

  std::vector<FusionMode> modes;
  if (ck_a) modes.push_back(FusionMode::a_only);
  if (ck_b) modes.push_back(FusionMode::b_only);
  if (ck_a && ck_b) modes.push_back(FusionMode::fused);

  const fs::path dir = detail::prepare_output_dir(opt.output_dir);
  const HeadParams* pa = ck_a ? &ck_a->params : nullptr;
  const HeadParams* pb = ck_b ? &ck_b->params : nullptr;
  out << std::left << std::setw(8) << "mode" << std::right << std::setw(9) << "top1" << std::setw(9)
      << "top5" << std::setw(9) << "prec" << std::setw(9) << "recall" << std::setw(9) << "f1"
      << std::setw(9) << "head_f1" << std::setw(9) << "tail_f1" << "\n";
  for (FusionMode mode : modes) {
    const std::size_t clip_len = mode == FusionMode::b_only ? ck_b->clip_len : ck_a->clip_len;
    MetricsReport report = evaluate_models(pa, pb, samples, mode, clip_len);
    if (counts) report.slices = tail_slice(report, *counts);
    detail::write_json(dir / (std::string("report_") + to_string(mode) + ".json"), report_to_json(report));
    if (mode == FusionMode::fused || modes.size() == 1)
      write_text(dir / (std::string("confusion_") + to_string(mode) + ".csv"),
                 confusion_to_csv(report.confusion));
    out << std::left << std::setw(8) << to_string(mode) << std::right << std::setw(9)
        << detail::fmt(report.top1) << std::setw(9) << detail::fmt(report.top5) << std::setw(9)
        << detail::fmt(report.prf.macro_precision) << std::setw(9)
        << detail::fmt(report.prf.macro_recall) << std::setw(9) << detail::fmt(report.prf.macro_f1);
    if (report.slices)
      out << std::setw(9) << detail::fmt(report.slices->head_f1) << std::setw(9)
          << detail::fmt(report.slices->tail_f1);
    out << "\n";
  }
  return kOk;
}

inline int cmd_gradcheck(std::uint64_t seed, double perturbation, std::ostream& out) {
  GradcheckOptions opt;
  opt.seed = seed;
  opt.perturbation = perturbation;
  const GradcheckSummary s = run_gradcheck(opt);
  out << std::scientific << std::setprecision(3);
  for (const auto& [gamma, err] : s.loss_max_by_gamma)
    out << "loss gamma=" << std::defaultfloat << gamma << std::scientific << " max_rel_err " << err << "\n";
  out << "head (20 cases) max_rel_err " << s.head_max << "\n";
  out << "max_rel_err " << s.max_error() << " tolerance " << kGradcheckTolerance << "\n";
  out << std::defaultfloat;
  if (s.passed()) {
    out << "PASS\n";
    return kOk;
  }
  for (const auto& c : s.failures())
    out << "FAIL " << c.suite << " case " << c.index << " loss " << c.loss << " gamma " << c.gamma
        << " rel_err " << c.rel_err << "\n";
  return kCheckFailed;
}

/// Parses and dispatches one invocation; args excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Focal-loss training and late fusion on paired-modality sequences", "mmfuse"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  DatasetConfig gen_cfg;
  std::string gen_out = ".";
  CLI::App* gen = app.add_subcommand("gen", "Generate the synthetic long-tailed benchmark");
  detail::add_dataset_options(*gen, gen_cfg);
  detail::add_output_dir(*gen, gen_out);

  TrainOptions topt;
  std::string loss = "focal";
  CLI::App* train = app.add_subcommand("train", "Train one modality head");
  detail::add_dataset_options(*train, topt.config.dataset);
  train->add_option("--dataset", topt.dataset_dir, "Dataset directory (train.jsonl, val.jsonl)")->required();
  train->add_option("--modality", topt.modality, "a or b")->check(CLI::IsMember({"a", "b"}))->required();
  train->add_option("--loss", loss, "ce or focal")->check(CLI::IsMember({"ce", "focal"}))->capture_default_str();
  train->add_option("--gamma-start", topt.config.schedule.gamma_start)->capture_default_str();
  train->add_option("--gamma-end", topt.config.schedule.gamma_end)->capture_default_str();
  train->add_option("--epochs", topt.config.epochs)->capture_default_str();
  train->add_option("--batch-size", topt.config.batch_size, "Minibatch size; >= training size means full batch")->capture_default_str();
  train->add_option("--lr", topt.config.lr)->capture_default_str();
  train->add_option("--weight-decay", topt.config.weight_decay)->capture_default_str();
  train->add_option("--hidden-dim", topt.config.hidden_dim)->capture_default_str();
  train->add_option("--clip-len", topt.config.clip_len)->capture_default_str();
  train->add_flag("--merge-val-into-train", topt.config.merge_val_into_train, "Train on train + val");
  train->add_option("--resume", topt.resume, "Continue from a checkpoint");
  detail::add_output_dir(*train, topt.output_dir);

  EvalOptions eopt;
  CLI::App* eval = app.add_subcommand("eval", "Score checkpoints on a split");
  eval->add_option("--checkpoint-a", eopt.checkpoint_a, "Modality A checkpoint");
  eval->add_option("--checkpoint-b", eopt.checkpoint_b, "Modality B checkpoint");
  eval->add_option("--dataset", eopt.dataset_dir, "Dataset directory")->required();
  eval->add_option("--split", eopt.split, "val or test")->capture_default_str();
  detail::add_output_dir(*eval, eopt.output_dir);

  std::uint64_t gc_seed = 0;
  double gc_perturb = 0.0;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient self-test");
  gradcheck->add_option("--seed", gc_seed)->capture_default_str();
  gradcheck->add_option("--perturb-gradient", gc_perturb,
                        "Scale analytic gradients by 1 + value (negative control)")
      ->group("");

  // Shown in --help; the value itself is consumed by expand_config.
  std::string config_path;
  for (CLI::App* sub : {gen, train, eval})
    sub->add_option("--config", config_path, "Key-value file of option defaults; flags override it");

  std::vector<std::string> argv_store{"mmfuse"};
  try {
    const auto expanded = detail::expand_config(args);
    argv_store.insert(argv_store.end(), expanded.begin(), expanded.end());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_cfg, gen_out, out);
    if (*train) {
      topt.config.loss = parse_loss(loss);
      return cmd_train(topt, out);
    }
    if (*eval) return cmd_eval(eopt, out);
    if (*gradcheck) return cmd_gradcheck(gc_seed, gc_perturb, out);
  } catch (const CommandError& e) {
    err << "error: " << e.what() << "\n";
    return e.code();
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace mmfuse::cli
