#pragma once

// Command-line driver: train | eval | ablate | verify.
//
// Exit codes: 0 success, 1 verification failure, 2 configuration or usage
// error, 3 non-finite loss.
//
// Run directory layout (train):
//   manifest.json   resolved config, seeds, version, dataset checksum, timestamps
//   dataset.jsonl   generated dataset
//   metrics.jsonl   one record per logging interval
//   timing.jsonl    wall-clock seconds per logged step
//   policy.snap     final policy snapshot
//   summary.csv     final accuracies
//
// Ablation layout: <out>/<arm>/seed-<n>/{metrics.jsonl,summary.csv},
// <out>/<arm>/summary.csv, <out>/comparison.csv and <out>/seeds.csv.

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "darl/config.hpp"
#include "darl/io.hpp"
#include "darl/trainer.hpp"
#include "darl/verify.hpp"

namespace darl::cli {

inline constexpr const char* kVersion = "1.0.0";

enum Exit { kOk = 0, kVerifyFailed = 1, kConfigError = 2, kNumericError = 3 };

namespace fs = std::filesystem;

inline std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("", "cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Loads a key=value config, or the `config` object of a run manifest.
inline ExperimentConfig load_config(const std::string& path) {
  ExperimentConfig cfg;
  if (path.empty()) return cfg;
  if (!fs::is_regular_file(path)) throw ConfigError("", "config file '" + path + "' not found");
  const std::string text = read_file(path);
  if (fs::path(path).extension() == ".json") {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("", "manifest '" + path + "': " + e.what());
    }
    if (!j.contains("config") || !j["config"].is_object()) throw ConfigError("", "manifest '" + path + "' has no config");
    for (const auto& [k, v] : j["config"].items()) set_value(cfg, k, v.get<std::string>());
    return cfg;
  }
  return parse_config(text);
}

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::uint64_t> seeds;
  std::string out;
  int jobs = 1;
  std::string snapshot;
};

inline ExperimentConfig resolve(const Options& o) {
  ExperimentConfig cfg = load_config(o.config);
  for (const auto& s : o.sets) apply_override(cfg, s);
  return cfg;
}

inline fs::path run_root() {
  const char* env = std::getenv("DARL_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

inline std::string arm_dir_name(std::string arm) {
  for (char& c : arm)
    if (c == '/' || c == ':') c = '_';
  return arm;
}

inline nlohmann::json config_json(const ExperimentConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : to_key_values(cfg)) j[k] = v;
  return j;
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

inline std::string summary_csv(const TrainResult& r) {
  std::ostringstream os;
  os << "steps,canonical_accuracy,transformed_accuracy\n"
     << r.steps << ',' << detail::fmt_double(r.canonical_accuracy) << ',' << detail::fmt_double(r.transformed_accuracy) << '\n';
  return os.str();
}

inline std::string metrics_stream(const std::vector<MetricsRecord>& records) {
  std::string s;
  for (const auto& r : records) s += metrics_json(r).dump() + "\n";
  return s;
}

inline int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  ExperimentConfig cfg = resolve(o);
  if (!o.seeds.empty()) {
    cfg.train.seed = o.seeds.front();
    cfg.task.seed = o.seeds.front();
  }
  validate(cfg.train);
  // Fails before any directory exists when the task cannot be generated.
  const Dataset ds = generate_dataset(cfg.task);
  std::ostringstream dataset;
  dump_dataset(dataset, ds);

  const fs::path dir = o.out.empty() ? run_root() / ("run-seed" + std::to_string(cfg.train.seed) + "-" +
                                                     checksum(to_text(cfg)).substr(0, 8))
                                     : fs::path(o.out);
  fs::create_directories(dir);
  nlohmann::json manifest = {{"artifact", "darl"},
                             {"version", kVersion},
                             {"config", config_json(cfg)},
                             {"seeds", {cfg.train.seed}},
                             {"dataset_checksum", checksum(dataset.str())},
                             {"started_at", utc_now()},
                             {"finished_at", nullptr}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  write_text(dir / "dataset.jsonl", dataset.str());

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  std::ofstream timing(dir / "timing.jsonl", std::ios::binary);
  TrainHooks hooks;
  hooks.on_metrics = [&](const MetricsRecord& r) {
    metrics << metrics_json(r).dump() << '\n';
    timing << nlohmann::json{{"step", r.step}, {"wall_clock_s", r.wall_clock_s}}.dump() << '\n';
    metrics.flush();
  };
  try {
    const TrainResult r = train(cfg.train, cfg.task, hooks);
    std::ofstream snap(dir / "policy.snap", std::ios::binary);
    save_snapshot(snap, r.final_policy);
    write_text(dir / "summary.csv", summary_csv(r));
    out << "run " << dir.string() << ": steps " << r.steps << ", canonical " << r.canonical_accuracy
        << ", transformed " << r.transformed_accuracy << '\n';
  } catch (const NonFiniteLoss& e) {
    nlohmann::json diag = metrics_json(e.record());
    diag["error"] = e.what();
    metrics << diag.dump() << '\n';
    err << "darl: " << e.what() << '\n';
    return kNumericError;
  } catch (const NumericError& e) {
    err << "darl: " << e.what() << '\n';
    return kNumericError;
  }
  manifest["finished_at"] = utc_now();
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  return kOk;
}

inline int cmd_eval(const Options& o, std::ostream& out, std::ostream&) {
  const ExperimentConfig cfg = resolve(o);
  std::string snap_path = o.snapshot;
  if (snap_path.empty() && !o.config.empty()) snap_path = (fs::path(o.config).parent_path() / "policy.snap").string();
  if (snap_path.empty() || !fs::is_regular_file(snap_path)) {
    throw ConfigError("", "snapshot '" + snap_path + "' not found (use --snapshot)");
  }
  std::ifstream in(snap_path);
  const PolicySnapshot snap = load_snapshot(in);
  const Dataset ds = generate_dataset(cfg.task);
  const AnswerGrammar g{cfg.task.num_classes};
  if (snap.params().arch.vocab_size != g.vocab_size() || snap.params().arch.grid_size != cfg.task.grid_size) {
    throw ConfigError("task.classes", "snapshot does not match the configured task");
  }
  out << "split,accuracy\n";
  out << "test-canonical," << detail::fmt_double(evaluate(snap, g, ds.test_canonical)) << '\n';
  out << "test-transformed," << detail::fmt_double(evaluate(snap, g, ds.test_transformed)) << '\n';
  return kOk;
}

inline int cmd_ablate(const Options& o, std::ostream& out, std::ostream& err) {
  const ExperimentConfig cfg = resolve(o);
  validate(cfg.train);
  const auto arms = select_arms(cfg.arms);
  std::vector<std::uint64_t> seeds = o.seeds;
  if (seeds.empty()) seeds = {1, 2, 3, 4, 5};
  for (auto s : seeds) {
    TaskSpec probe = cfg.task;
    probe.seed = s;
    generate_dataset(probe);
  }
  const fs::path dir = o.out.empty() ? run_root() / ("ablate-" + checksum(to_text(cfg)).substr(0, 8)) : fs::path(o.out);
  fs::create_directories(dir);
  nlohmann::json manifest = {{"artifact", "darl"},     {"version", kVersion},  {"config", config_json(cfg)},
                             {"seeds", seeds},         {"started_at", utc_now()}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  const auto table = ablation_suite(cfg.train, cfg.task, seeds, arms, o.jobs, true,
                                    [&](const std::string& arm, const SeedOutcome& s) {
                                      err << arm << " seed " << s.seed << (s.ok ? " done" : " failed: " + s.error)
                                          << '\n';
                                    });
  std::ostringstream cmp, long_form;
  cmp << "arm,runs,mean_transformed,std_transformed,se_transformed,mean_canonical,std_canonical\n";
  long_form << "arm,seed,ok,canonical_accuracy,transformed_accuracy\n";
  bool any_failed = false;
  for (const auto& a : table) {
    cmp << a.arm << ',' << a.runs << ',' << detail::fmt_double(a.mean) << ',' << detail::fmt_double(a.stddev) << ','
        << detail::fmt_double(a.standard_error()) << ',' << detail::fmt_double(a.canonical_mean) << ','
        << detail::fmt_double(a.canonical_stddev) << '\n';
    std::ostringstream arm_csv;
    arm_csv << "seed,ok,canonical_accuracy,transformed_accuracy,error\n";
    const fs::path arm_dir = dir / arm_dir_name(a.arm);
    for (const auto& s : a.seeds) {
      any_failed = any_failed || !s.ok;
      arm_csv << s.seed << ',' << s.ok << ',' << detail::fmt_double(s.canonical_accuracy) << ','
              << detail::fmt_double(s.transformed_accuracy) << ",\""
              << s.error << "\"\n";
      long_form << a.arm << ',' << s.seed << ',' << s.ok << ',' << detail::fmt_double(s.canonical_accuracy) << ','
                << detail::fmt_double(s.transformed_accuracy) << '\n';
      const fs::path run_dir = arm_dir / ("seed-" + std::to_string(s.seed));
      fs::create_directories(run_dir);
      if (s.run) {
        write_text(run_dir / "metrics.jsonl", metrics_stream(s.run->metrics));
        write_text(run_dir / "summary.csv", summary_csv(*s.run));
      } else {
        write_text(run_dir / "error.txt", s.error + "\n");
      }
    }
    write_text(arm_dir / "summary.csv", arm_csv.str());
  }
  write_text(dir / "comparison.csv", cmp.str());
  write_text(dir / "seeds.csv", long_form.str());
  out << cmp.str();
  return any_failed ? kNumericError : kOk;
}

inline int cmd_verify(std::ostream& out) {
  VerifyOptions opt;
  if (const char* m = std::getenv("DARL_VERIFY_MUTATION"); m && std::string(m) == "shaping-sign") {
    opt.mutation = Mutation::ShapingSign;
  }
  const bool ok = run_verify(out, opt);
  out << (ok ? "verify: all properties hold\n" : "verify: FAILED\n");
  return ok ? kOk : kVerifyFailed;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Domain-aware GRPO at desk scale"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Config file (key = value) or run manifest.json");
    sub->add_option("--set", o.sets, "Override KEY=VALUE (repeatable)")->take_all();
    sub->add_option("--seed", o.seeds, "Seed (repeatable)")->take_all();
    sub->add_option("--out", o.out, "Output directory");
  };
  auto* train_cmd = app.add_subcommand("train", "Train one policy");
  common(train_cmd);
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a snapshot on the test splits");
  common(eval_cmd);
  eval_cmd->add_option("--snapshot", o.snapshot, "Policy snapshot (default: policy.snap next to --config)");
  auto* ablate_cmd = app.add_subcommand("ablate", "Run the ablation grid");
  common(ablate_cmd);
  ablate_cmd->add_option("--jobs", o.jobs, "Parallel runs")->check(CLI::PositiveNumber);
  auto* verify_cmd = app.add_subcommand("verify", "Check invariants on micro instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }
  try {
    if (*train_cmd) return cmd_train(o, out, err);
    if (*eval_cmd) return cmd_eval(o, out, err);
    if (*ablate_cmd) return cmd_ablate(o, out, err);
    if (*verify_cmd) return cmd_verify(out);
  } catch (const ConfigError& e) {
    err << "darl: " << e.what() << '\n';
    return kConfigError;
  } catch (const ContractError& e) {
    err << "darl: invalid configuration: " << e.what() << '\n';
    return kConfigError;
  } catch (const FormatError& e) {
    err << "darl: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    err << "darl: " << e.what() << '\n';
    return kConfigError;
  }
  return kConfigError;
}

}  // namespace darl::cli
