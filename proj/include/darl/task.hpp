#pragma once

// Synthetic few-shot classification tasks whose labels are constant on
// transform orbits, plus rule-based rewards and greedy-decode accuracy.
//
// Each class is a random prototype grid. Instances are prototypes with a few
// cells changed, kept only if the orbit oracle (nearest prototype under any
// group element) maps them back to their own class. Training instances are
// presented in the canonical orientation; the transformed test split shows
// held-out instances under random non-identity group elements.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "darl/domain.hpp"
#include "darl/grammar.hpp"
#include "darl/policy.hpp"

namespace darl {

enum class TaskFamily { RotationInvariantGrids, MirrorSymmetricPatterns };

inline std::string_view to_string(TaskFamily f) {
  return f == TaskFamily::RotationInvariantGrids ? "rotation" : "mirror";
}

inline TaskFamily parse_family(std::string_view s) {
  if (s == "rotation") return TaskFamily::RotationInvariantGrids;
  if (s == "mirror") return TaskFamily::MirrorSymmetricPatterns;
  throw std::invalid_argument("unknown task family '" + std::string(s) + "'");
}

// Concrete transforms forming the family's group, identity first.
inline std::vector<TransformKind> group_elements(TaskFamily f) {
  if (f == TaskFamily::RotationInvariantGrids) {
    return {TransformKind::Identity, TransformKind::Rotate90, TransformKind::Rotate180, TransformKind::Rotate270};
  }
  return {TransformKind::Identity, TransformKind::ReflectHorizontal, TransformKind::ReflectVertical,
          TransformKind::Rotate180};
}

// Transform used by the domain constraint when none is configured.
inline DomainTransform family_transform(TaskFamily f) {
  return {f == TaskFamily::RotationInvariantGrids ? TransformKind::RotateRandom : TransformKind::ReflectRandom};
}

struct TaskSpec {
  TaskFamily family = TaskFamily::RotationInvariantGrids;
  int grid_size = 5;
  int num_classes = 6;
  int shots = 8;
  std::uint64_t seed = 1;
  int obs_values = 2;
  int noise = 2;        // cells changed per instance
  int test_size = 200;  // per test split
};

enum class Split { Train, TestCanonical, TestTransformed };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::TestCanonical: return "test-canonical";
    case Split::TestTransformed: return "test-transformed";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "test-canonical") return Split::TestCanonical;
  if (s == "test-transformed") return Split::TestTransformed;
  throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

struct Episode {
  Context context;
  int label = 0;
  Split split = Split::Train;
  bool operator==(const Episode&) const = default;
};

struct Dataset {
  TaskSpec spec;
  std::vector<std::vector<int>> prototypes;
  std::vector<Episode> train;
  std::vector<Episode> test_canonical;
  std::vector<Episode> test_transformed;
};

inline int hamming(std::span<const int> a, std::span<const int> b) {
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

inline int orbit_distance(TaskFamily f, std::span<const int> grid, std::span<const int> proto, int k) {
  int best = static_cast<int>(grid.size()) + 1;
  for (auto g : group_elements(f)) best = std::min(best, hamming(transform_grid(g, grid, k), proto));
  return best;
}

// Lexicographically smallest member of the orbit.
inline std::vector<int> canonical_form(TaskFamily f, std::span<const int> grid, int k) {
  std::vector<int> best(grid.begin(), grid.end());
  for (auto g : group_elements(f)) best = std::min(best, transform_grid(g, grid, k));
  return best;
}

// Class whose prototype orbit is strictly nearest, if unique.
inline std::optional<int> orbit_label(TaskFamily f, std::span<const std::vector<int>> prototypes,
                                      std::span<const int> grid, int k) {
  int best = -1, best_d = 0;
  bool tie = false;
  for (std::size_t c = 0; c < prototypes.size(); ++c) {
    const int d = orbit_distance(f, grid, prototypes[c], k);
    if (best < 0 || d < best_d) {
      best = static_cast<int>(c);
      best_d = d;
      tie = false;
    } else if (d == best_d) {
      tie = true;
    }
  }
  if (best < 0 || tie) return std::nullopt;
  return best;
}

inline Context make_context(std::vector<int> grid, int k) {
  return Context{k, std::move(grid), TokenSeq{AnswerGrammar::kPrompt}};
}

inline Dataset generate_dataset(const TaskSpec& spec) {
  if (spec.num_classes < 2 || spec.grid_size < 3 || spec.shots < 1 || spec.obs_values < 2 || spec.noise < 0 ||
      spec.test_size < 1) {
    throw ContractError("generate_dataset: need classes >= 2, grid >= 3, shots >= 1, obs_values >= 2");
  }
  const int k = spec.grid_size;
  const int cells = k * k;
  const auto group = group_elements(spec.family);
  const double grids = std::pow(static_cast<double>(spec.obs_values), cells);
  if (static_cast<double>(spec.num_classes) * static_cast<double>(group.size()) > grids) {
    throw ContractError("generate_dataset: " + std::to_string(spec.num_classes) +
                        " classes exceed the distinct orbits of a " + std::to_string(k) + "x" + std::to_string(k) +
                        " grid");
  }

  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> value(0, spec.obs_values - 1);
  const int separation = spec.noise + 1;
  constexpr int kMaxAttempts = 200000;

  Dataset ds;
  ds.spec = spec;
  for (int attempt = 0; static_cast<int>(ds.prototypes.size()) < spec.num_classes; ++attempt) {
    if (attempt >= kMaxAttempts) {
      throw ContractError("generate_dataset: cannot place " + std::to_string(spec.num_classes) +
                          " separated motifs on a " + std::to_string(k) + "x" + std::to_string(k) + " grid");
    }
    std::vector<int> g(static_cast<std::size_t>(cells));
    for (int& x : g) x = value(rng);
    std::set<std::vector<int>> orbit;
    for (auto t : group) orbit.insert(transform_grid(t, g, k));
    if (orbit.size() != group.size()) continue;  // self-symmetric motifs carry no orientation
    bool separated = true;
    for (const auto& p : ds.prototypes) separated = separated && orbit_distance(spec.family, g, p, k) >= separation;
    if (separated) ds.prototypes.push_back(std::move(g));
  }

  std::set<std::vector<int>> used;  // canonical forms of every emitted instance
  std::uniform_int_distribution<int> cell(0, cells - 1);
  auto instance = [&](int label) {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      std::vector<int> g = ds.prototypes[static_cast<std::size_t>(label)];
      std::set<int> touched;
      while (static_cast<int>(touched.size()) < spec.noise) touched.insert(cell(rng));
      for (int c : touched) {
        auto& x = g[static_cast<std::size_t>(c)];
        x = (x + 1 + std::uniform_int_distribution<int>(0, spec.obs_values - 2)(rng)) % spec.obs_values;
      }
      if (orbit_label(spec.family, ds.prototypes, g, k) != label) continue;
      if (!used.insert(canonical_form(spec.family, g, k)).second) continue;
      return g;
    }
    throw ContractError("generate_dataset: ran out of distinct instances for class " + std::to_string(label));
  };

  for (int s = 0; s < spec.shots; ++s)
    for (int c = 0; c < spec.num_classes; ++c) ds.train.push_back({make_context(instance(c), k), c, Split::Train});
  std::uniform_int_distribution<std::size_t> non_identity(1, group.size() - 1);
  for (int i = 0; i < spec.test_size; ++i) {
    const int c = i % spec.num_classes;
    auto g = instance(c);
    ds.test_transformed.push_back(
        {make_context(transform_grid(group[non_identity(rng)], g, k), k), c, Split::TestTransformed});
    ds.test_canonical.push_back({make_context(std::move(g), k), c, Split::TestCanonical});
  }
  return ds;
}

struct RewardConfig {
  double accuracy_weight = 1.0;
  double format_weight = 1.0;
};

inline double accuracy_indicator(const AnswerGrammar& g, std::span<const int> output, int gold) {
  const auto label = g.parse(output);
  return label && *label == gold ? 1.0 : 0.0;
}

inline double format_indicator(const AnswerGrammar& g, std::span<const int> output) {
  return g.parse(output) ? 1.0 : 0.0;
}

inline double reward(const AnswerGrammar& g, std::span<const int> output, int gold, const RewardConfig& cfg = {}) {
  return cfg.accuracy_weight * accuracy_indicator(g, output, gold) + cfg.format_weight * format_indicator(g, output);
}

// Fraction of episodes whose decoded answer is well-formed and correct.
inline double evaluate(const std::function<TokenSeq(const Context&)>& decode, const AnswerGrammar& g,
                       std::span<const Episode> episodes) {
  if (episodes.empty()) throw ContractError("evaluate: no episodes");
  std::size_t correct = 0;
  for (const auto& e : episodes) correct += accuracy_indicator(g, decode(e.context), e.label) > 0.0;
  return static_cast<double>(correct) / static_cast<double>(episodes.size());
}

// Greedy-decode accuracy.
inline double evaluate(const PolicyParameters& params, const AnswerGrammar& g, std::span<const Episode> episodes) {
  return evaluate([&](const Context& c) { return greedy_decode(params, c, params.arch.max_len); }, g, episodes);
}

inline double evaluate(const PolicySnapshot& snap, const AnswerGrammar& g, std::span<const Episode> episodes) {
  return evaluate(snap.params(), g, episodes);
}

}  // namespace darl
