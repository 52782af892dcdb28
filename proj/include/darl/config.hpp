#pragma once

// Flat `key = value` configuration with dotted sections.
//
//   # comment
//   task.shots = 8
//   train.lr = 0.01
//   dc = true
//
// Unknown keys and unparsable values raise ConfigError naming the key.

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "darl/task.hpp"
#include "darl/trainer.hpp"

namespace darl {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what) : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct ExperimentConfig {
  TaskSpec task;
  TrainingConfig train;
  std::vector<std::string> arms;  // ablation subset; empty means all
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// Shortest decimal form that parses back to the same double.
inline std::string fmt_double(double v) {
  for (int prec = 15; prec <= 17; ++prec) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    if (prec == 17 || std::stod(os.str()) == v) return os.str();
  }
  return {};
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key, "config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key, "config key '" + key + "': expected a boolean, got '" + v + "'");
}

struct Entry {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

inline std::map<std::string, Entry> entries() {
  std::map<std::string, Entry> m;
  auto int_entry = [&](const std::string& key, auto ref) {
    m[key] = {[ref](const ExperimentConfig& c) { return std::to_string(ref(const_cast<ExperimentConfig&>(c))); },
              [ref, key](ExperimentConfig& c, const std::string& v) { ref(c) = parse_number<std::remove_reference_t<decltype(ref(c))>>(key, v); }};
  };
  auto dbl_entry = [&](const std::string& key, auto ref) {
    m[key] = {[ref](const ExperimentConfig& c) { return fmt_double(ref(const_cast<ExperimentConfig&>(c))); },
              [ref, key](ExperimentConfig& c, const std::string& v) { ref(c) = parse_number<double>(key, v); }};
  };
  auto bool_entry = [&](const std::string& key, auto ref) {
    m[key] = {[ref](const ExperimentConfig& c) { return std::string(ref(const_cast<ExperimentConfig&>(c)) ? "true" : "false"); },
              [ref, key](ExperimentConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); }};
  };
  auto enum_entry = [&](const std::string& key, auto ref, auto parse) {
    m[key] = {[ref](const ExperimentConfig& c) { return std::string(to_string(ref(const_cast<ExperimentConfig&>(c)))); },
              [ref, parse, key](ExperimentConfig& c, const std::string& v) {
                try {
                  ref(c) = parse(v);
                } catch (const std::invalid_argument& e) {
                  throw ConfigError(key, "config key '" + key + "': " + e.what());
                }
              }};
  };

  enum_entry("task.family", [](ExperimentConfig& c) -> TaskFamily& { return c.task.family; }, parse_family);
  int_entry("task.grid_size", [](ExperimentConfig& c) -> int& { return c.task.grid_size; });
  int_entry("task.classes", [](ExperimentConfig& c) -> int& { return c.task.num_classes; });
  int_entry("task.shots", [](ExperimentConfig& c) -> int& { return c.task.shots; });
  int_entry("task.seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.task.seed; });
  int_entry("task.obs_values", [](ExperimentConfig& c) -> int& { return c.task.obs_values; });
  int_entry("task.noise", [](ExperimentConfig& c) -> int& { return c.task.noise; });
  int_entry("task.test_size", [](ExperimentConfig& c) -> int& { return c.task.test_size; });

  int_entry("policy.embed_dim", [](ExperimentConfig& c) -> int& { return c.train.embed_dim; });
  int_entry("policy.hidden", [](ExperimentConfig& c) -> int& { return c.train.hidden; });
  int_entry("policy.max_len", [](ExperimentConfig& c) -> int& { return c.train.max_len; });
  dbl_entry("policy.grid_embed_std", [](ExperimentConfig& c) -> double& { return c.train.init.grid_embed_std; });
  dbl_entry("policy.token_embed_std", [](ExperimentConfig& c) -> double& { return c.train.init.token_embed_std; });
  dbl_entry("policy.hidden_gain", [](ExperimentConfig& c) -> double& { return c.train.init.hidden_gain; });
  dbl_entry("policy.answer_embed_std", [](ExperimentConfig& c) -> double& { return c.train.init.answer_embed_std; });
  dbl_entry("policy.output_gain", [](ExperimentConfig& c) -> double& { return c.train.init.output_gain; });

  int_entry("train.group_size", [](ExperimentConfig& c) -> int& { return c.train.group_size; });
  dbl_entry("train.beta", [](ExperimentConfig& c) -> double& { return c.train.beta; });
  dbl_entry("train.lr", [](ExperimentConfig& c) -> double& { return c.train.learning_rate; });
  int_entry("train.batch_size", [](ExperimentConfig& c) -> int& { return c.train.batch_size; });
  int_entry("train.epochs", [](ExperimentConfig& c) -> int& { return c.train.epochs; });
  int_entry("train.repeat_factor", [](ExperimentConfig& c) -> int& { return c.train.repeat_factor; });
  int_entry("train.max_steps", [](ExperimentConfig& c) -> int& { return c.train.max_steps; });
  int_entry("train.inner_updates", [](ExperimentConfig& c) -> int& { return c.train.inner_updates; });
  enum_entry("train.ratio_mode", [](ExperimentConfig& c) -> RatioMode& { return c.train.ratio_mode; }, parse_ratio_mode);
  dbl_entry("train.clip", [](ExperimentConfig& c) -> double& { return c.train.clip; });
  dbl_entry("train.adv_epsilon", [](ExperimentConfig& c) -> double& { return c.train.adv_epsilon; });
  dbl_entry("train.adam_beta1", [](ExperimentConfig& c) -> double& { return c.train.adam_beta1; });
  dbl_entry("train.adam_beta2", [](ExperimentConfig& c) -> double& { return c.train.adam_beta2; });
  dbl_entry("train.adam_eps", [](ExperimentConfig& c) -> double& { return c.train.adam_eps; });
  int_entry("train.warmup_steps", [](ExperimentConfig& c) -> int& { return c.train.warmup_steps; });
  dbl_entry("train.warmup_lr", [](ExperimentConfig& c) -> double& { return c.train.warmup_lr; });
  int_entry("train.seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.train.seed; });
  int_entry("train.log_interval", [](ExperimentConfig& c) -> int& { return c.train.log_interval; });
  int_entry("train.eval_interval", [](ExperimentConfig& c) -> int& { return c.train.eval_interval; });

  dbl_entry("reward.accuracy_weight", [](ExperimentConfig& c) -> double& { return c.train.reward.accuracy_weight; });
  dbl_entry("reward.format_weight", [](ExperimentConfig& c) -> double& { return c.train.reward.format_weight; });

  bool_entry("dc", [](ExperimentConfig& c) -> bool& { return c.train.dc; });
  bool_entry("dr", [](ExperimentConfig& c) -> bool& { return c.train.dr; });
  enum_entry("dc_divergence", [](ExperimentConfig& c) -> DivergenceKind& { return c.train.dc_divergence; }, parse_divergence);
  enum_entry("dr_divergence", [](ExperimentConfig& c) -> DivergenceKind& { return c.train.dr_divergence; }, parse_divergence);
  dbl_entry("dc_weight", [](ExperimentConfig& c) -> double& { return c.train.dc_weight; });
  bool_entry("dc_stop_grad", [](ExperimentConfig& c) -> bool& { return c.train.dc_stop_grad; });
  bool_entry("oc", [](ExperimentConfig& c) -> bool& { return c.train.oc; });
  bool_entry("augment", [](ExperimentConfig& c) -> bool& { return c.train.augment; });
  m["transform"] = {[](const ExperimentConfig& c) {
                      return c.train.transform ? std::string(to_string(*c.train.transform)) : std::string("auto");
                    },
                    [](ExperimentConfig& c, const std::string& v) {
                      if (v == "auto") {
                        c.train.transform.reset();
                        return;
                      }
                      try {
                        c.train.transform = parse_transform(v);
                      } catch (const std::invalid_argument& e) {
                        throw ConfigError("transform", std::string("config key 'transform': ") + e.what());
                      }
                    }};
  m["ablate.arms"] = {[](const ExperimentConfig& c) {
                        std::string s;
                        for (const auto& a : c.arms) s += (s.empty() ? "" : ",") + a;
                        return s;
                      },
                      [](ExperimentConfig& c, const std::string& v) {
                        c.arms.clear();
                        std::stringstream ss(v);
                        std::string item;
                        while (std::getline(ss, item, ',')) {
                          item = trim(item);
                          if (item.empty()) continue;
                          try {
                            select_arms({item});
                          } catch (const std::invalid_argument& e) {
                            throw ConfigError("ablate.arms", std::string("config key 'ablate.arms': ") + e.what());
                          }
                          c.arms.push_back(item);
                        }
                      }};
  return m;
}

inline const std::map<std::string, Entry>& entry_table() {
  static const std::map<std::string, Entry> table = entries();
  return table;
}

}  // namespace detail

inline void set_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = detail::entry_table();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError(key, "unknown config key '" + key + "'");
  it->second.set(cfg, detail::trim(value));
}

// Applies one `KEY=VALUE` override.
inline void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError(detail::trim(assignment), "override '" + assignment + "' is not KEY=VALUE");
  }
  set_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void apply_text(ExperimentConfig& cfg, std::istream& in) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.find('=') == std::string::npos) {
      throw ConfigError(line, "line " + std::to_string(lineno) + ": expected KEY = VALUE");
    }
    apply_override(cfg, line);
  }
}

inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  apply_text(base, in);
  return base;
}

// Every key with its resolved value, sorted by key.
inline std::vector<std::pair<std::string, std::string>> to_key_values(const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, e] : detail::entry_table()) out.emplace_back(k, e.get(cfg));
  return out;
}

inline std::string to_text(const ExperimentConfig& cfg) {
  std::string s;
  for (const auto& [k, v] : to_key_values(cfg)) s += k + " = " + v + "\n";
  return s;
}

}  // namespace darl
