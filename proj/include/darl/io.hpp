#pragma once

// On-disk formats.
//
// Snapshot (text, version 1):
//   darl-policy-snapshot 1
//   role <reference|old>
//   arch vocab_size=V eos_token=E grid_size=K obs_values=O embed_dim=D hidden=H max_len=L
//   tensor <name> <rows> <cols>
//   <rows lines of cols values, %.17g>
//   ...                      (seven tensors in ParamId order)
//   end
//
// Dataset (JSON lines, version 1): a header object
//   {"schema":"darl-dataset","version":1,"family":...,"grid_size":...,...}
// followed by one object per episode
//   {"split":"train","label":2,"grid":[...],"question":[...]}
//
// Metrics (JSON lines): one object per MetricsRecord; wall-clock time is kept
// out of this stream so reruns reproduce it byte for byte.

#include <cstdint>
#include <cstdio>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "darl/policy.hpp"
#include "darl/task.hpp"
#include "darl/trainer.hpp"

namespace darl {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kSnapshotVersion = 1;
inline constexpr int kDatasetVersion = 1;

inline void save_snapshot(std::ostream& out, const PolicySnapshot& snap) {
  const auto& p = snap.params();
  const auto& a = p.arch;
  out << "darl-policy-snapshot " << kSnapshotVersion << '\n';
  out << "role " << to_string(snap.role()) << '\n';
  out << "arch vocab_size=" << a.vocab_size << " eos_token=" << a.eos_token << " grid_size=" << a.grid_size
      << " obs_values=" << a.obs_values << " embed_dim=" << a.embed_dim << " hidden=" << a.hidden
      << " max_len=" << a.max_len << '\n';
  char buf[32];
  for (std::size_t k = 0; k < kParamCount; ++k) {
    const auto& t = p.tensors[k];
    out << "tensor " << kParamNames[k] << ' ' << t.rows() << ' ' << t.cols() << '\n';
    for (std::size_t r = 0; r < t.rows(); ++r) {
      for (std::size_t c = 0; c < t.cols(); ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", t(r, c));
        out << (c ? " " : "") << buf;
      }
      out << '\n';
    }
  }
  out << "end\n";
}

inline PolicySnapshot load_snapshot(std::istream& in) {
  std::string word;
  int version = 0;
  if (!(in >> word >> version) || word != "darl-policy-snapshot") throw FormatError("snapshot: bad header");
  if (version != kSnapshotVersion) throw FormatError("snapshot: unsupported version " + std::to_string(version));
  std::string role;
  if (!(in >> word >> role) || word != "role" || (role != "reference" && role != "old")) {
    throw FormatError("snapshot: bad role line");
  }
  if (!(in >> word) || word != "arch") throw FormatError("snapshot: missing arch line");
  PolicyArch arch;
  for (auto [name, field] : {std::pair{"vocab_size", &arch.vocab_size}, {"eos_token", &arch.eos_token},
                             {"grid_size", &arch.grid_size}, {"obs_values", &arch.obs_values},
                             {"embed_dim", &arch.embed_dim}, {"hidden", &arch.hidden}, {"max_len", &arch.max_len}}) {
    std::string kv;
    in >> kv;
    const std::string prefix = std::string(name) + "=";
    if (kv.rfind(prefix, 0) != 0) throw FormatError("snapshot: expected " + prefix);
    try {
      *field = std::stoi(kv.substr(prefix.size()));
    } catch (const std::exception&) {
      throw FormatError("snapshot: bad value in " + kv);
    }
  }
  PolicyParameters p = zero_policy(arch);
  for (std::size_t k = 0; k < kParamCount; ++k) {
    std::string name;
    std::size_t rows = 0, cols = 0;
    if (!(in >> word >> name >> rows >> cols) || word != "tensor" || name != kParamNames[k]) {
      throw FormatError("snapshot: expected tensor " + std::string(kParamNames[k]));
    }
    auto& t = p.tensors[k];
    if (rows != t.rows() || cols != t.cols()) throw FormatError("snapshot: shape mismatch for " + name);
    for (double& x : t.data) {
      std::string tok;
      if (!(in >> tok)) throw FormatError("snapshot: truncated tensor " + name);
      x = std::strtod(tok.c_str(), nullptr);
    }
  }
  if (!(in >> word) || word != "end") throw FormatError("snapshot: missing end marker");
  return PolicySnapshot(std::move(p), role == "reference" ? SnapshotRole::Reference : SnapshotRole::Old);
}

inline nlohmann::json episode_json(const Episode& e) {
  return {{"split", to_string(e.split)}, {"label", e.label}, {"grid", e.context.grid}, {"question", e.context.question}};
}

inline void dump_dataset(std::ostream& out, const Dataset& ds) {
  const auto& s = ds.spec;
  nlohmann::json header = {{"schema", "darl-dataset"},   {"version", kDatasetVersion},   {"family", to_string(s.family)},
                           {"grid_size", s.grid_size},   {"classes", s.num_classes},     {"shots", s.shots},
                           {"seed", s.seed},             {"obs_values", s.obs_values},   {"noise", s.noise},
                           {"test_size", s.test_size}};
  out << header.dump() << '\n';
  for (const auto* split : {&ds.train, &ds.test_canonical, &ds.test_transformed})
    for (const auto& e : *split) out << episode_json(e).dump() << '\n';
}

inline Dataset load_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("dataset: empty input");
  Dataset ds;
  try {
    const auto h = nlohmann::json::parse(line);
    if (h.at("schema") != "darl-dataset") throw FormatError("dataset: wrong schema");
    if (h.at("version") != kDatasetVersion) throw FormatError("dataset: unsupported version");
    auto& s = ds.spec;
    s.family = parse_family(h.at("family").get<std::string>());
    s.grid_size = h.at("grid_size");
    s.num_classes = h.at("classes");
    s.shots = h.at("shots");
    s.seed = h.at("seed");
    s.obs_values = h.at("obs_values");
    s.noise = h.at("noise");
    s.test_size = h.at("test_size");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      Episode e;
      e.split = parse_split(j.at("split").get<std::string>());
      e.label = j.at("label");
      e.context = Context{s.grid_size, j.at("grid").get<std::vector<int>>(), j.at("question").get<TokenSeq>()};
      if (e.context.grid.size() != static_cast<std::size_t>(s.grid_size * s.grid_size)) {
        throw FormatError("dataset: grid has wrong size");
      }
      (e.split == Split::Train ? ds.train : e.split == Split::TestCanonical ? ds.test_canonical : ds.test_transformed)
          .push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("dataset: ") + e.what());
  }
  return ds;
}

// FNV-1a, 64-bit, as 16 hex digits.
inline std::string checksum(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline nlohmann::json metrics_json(const MetricsRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"step", r.step},
          {"epoch", r.epoch},
          {"mean_reward", r.mean_reward},
          {"mean_abs_advantage", r.mean_abs_advantage},
          {"mean_divergence", r.mean_divergence},
          {"domain_loss", r.domain_loss},
          {"ref_kl", r.ref_kl},
          {"objective",
           {{"policy_term", r.objective.policy_term},
            {"ref_kl_term", r.objective.ref_kl_term},
            {"domain_loss_term", r.objective.domain_loss_term},
            {"beta", r.objective.beta},
            {"total", r.objective.total}}},
          {"canonical_accuracy", opt(r.canonical_accuracy)},
          {"transformed_accuracy", opt(r.transformed_accuracy)}};
}

}  // namespace darl
