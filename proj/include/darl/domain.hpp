#pragma once

// Domain priors expressed as grid transformations, and the two ways they
// enter training:
//
//   * a constraint loss KL(pi^D || pi) between the policy's distributions on
//     the transformed and original contexts, differentiated through both;
//   * per-sample weights D_i = JS(pi^D || pi) that shrink advantages of
//     outputs whose distributions move under the transform, A_i^d = (1 - D_i) A_i.
//
// pi^D is the live policy evaluated on the transformed context and teacher
// forced along the same sampled outputs.

#include <algorithm>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "darl/ad.hpp"
#include "darl/divergence.hpp"
#include "darl/grammar.hpp"
#include "darl/grpo.hpp"
#include "darl/policy.hpp"

namespace darl {

enum class TransformKind {
  Identity,
  Rotate90,
  Rotate180,
  Rotate270,
  RotateRandom,
  ReflectHorizontal,  // mirror left-right
  ReflectVertical,    // mirror top-bottom
  ReflectRandom,
};

inline std::string_view to_string(TransformKind k) {
  switch (k) {
    case TransformKind::Identity: return "identity";
    case TransformKind::Rotate90: return "rotate90";
    case TransformKind::Rotate180: return "rotate180";
    case TransformKind::Rotate270: return "rotate270";
    case TransformKind::RotateRandom: return "rotate_random";
    case TransformKind::ReflectHorizontal: return "reflect_h";
    case TransformKind::ReflectVertical: return "reflect_v";
    case TransformKind::ReflectRandom: return "reflect_random";
  }
  return "?";
}

inline TransformKind parse_transform(std::string_view s) {
  for (auto k : {TransformKind::Identity, TransformKind::Rotate90, TransformKind::Rotate180, TransformKind::Rotate270,
                 TransformKind::RotateRandom, TransformKind::ReflectHorizontal, TransformKind::ReflectVertical,
                 TransformKind::ReflectRandom}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown transform '" + std::string(s) + "'");
}

struct DomainTransform {
  TransformKind kind = TransformKind::RotateRandom;

  bool is_random() const { return kind == TransformKind::RotateRandom || kind == TransformKind::ReflectRandom; }
};

// Picks the concrete transform for one call. Only random kinds consume rng.
template <class Rng>
TransformKind resolve(const DomainTransform& t, Rng& rng) {
  if (t.kind == TransformKind::RotateRandom) {
    static constexpr TransformKind turns[] = {TransformKind::Rotate90, TransformKind::Rotate180,
                                              TransformKind::Rotate270};
    return turns[std::uniform_int_distribution<int>(0, 2)(rng)];
  }
  if (t.kind == TransformKind::ReflectRandom) {
    return std::uniform_int_distribution<int>(0, 1)(rng) == 0 ? TransformKind::ReflectHorizontal
                                                              : TransformKind::ReflectVertical;
  }
  return t.kind;
}

// Exact index permutation of a k x k grid for a concrete transform.
// A quarter turn is clockwise: (r, c) -> (c, k-1-r).
inline std::vector<int> transform_grid(TransformKind kind, std::span<const int> grid, int k) {
  if (k < 1 || grid.size() != static_cast<std::size_t>(k * k)) {
    throw ContractError("transform_grid: grid is not " + std::to_string(k) + "x" + std::to_string(k));
  }
  auto turns = [&]() -> int {
    switch (kind) {
      case TransformKind::Rotate90: return 1;
      case TransformKind::Rotate180: return 2;
      case TransformKind::Rotate270: return 3;
      default: return 0;
    }
  }();
  std::vector<int> out(grid.begin(), grid.end());
  switch (kind) {
    case TransformKind::Identity: break;
    case TransformKind::Rotate90:
    case TransformKind::Rotate180:
    case TransformKind::Rotate270:
      for (int q = 0; q < turns; ++q) {
        std::vector<int> next(out.size());
        for (int r = 0; r < k; ++r)
          for (int c = 0; c < k; ++c) next[static_cast<std::size_t>(c * k + (k - 1 - r))] = out[static_cast<std::size_t>(r * k + c)];
        out = std::move(next);
      }
      break;
    case TransformKind::ReflectHorizontal:
      for (int r = 0; r < k; ++r)
        for (int c = 0; c < k; ++c) out[static_cast<std::size_t>(r * k + (k - 1 - c))] = grid[static_cast<std::size_t>(r * k + c)];
      break;
    case TransformKind::ReflectVertical:
      for (int r = 0; r < k; ++r)
        for (int c = 0; c < k; ++c) out[static_cast<std::size_t>((k - 1 - r) * k + c)] = grid[static_cast<std::size_t>(r * k + c)];
      break;
    case TransformKind::RotateRandom:
    case TransformKind::ReflectRandom:
      throw ContractError("transform_grid: resolve random transforms first");
  }
  return out;
}

inline Context transformed_context(TransformKind concrete, const Context& ctx) {
  Context out = ctx;
  out.grid = transform_grid(concrete, ctx.grid, ctx.grid_size);
  return out;
}

template <class Rng>
Context apply_transform(const DomainTransform& t, const Context& ctx, Rng& rng) {
  return transformed_context(resolve(t, rng), ctx);
}

struct DomainSupportDistributions {
  Context transformed;
  TransformKind applied = TransformKind::Identity;
  std::vector<CategoricalSequenceDistribution> distributions;  // one per output
};

// pi^D for every output: teacher forcing on one transformed copy of the context.
template <class Rng>
DomainSupportDistributions domain_support(const PolicyParameters& live, const DomainTransform& t, const Context& ctx,
                                          std::span<const TokenSeq> outputs, Rng& rng) {
  DomainSupportDistributions s;
  s.applied = resolve(t, rng);
  s.transformed = transformed_context(s.applied, ctx);
  s.distributions.reserve(outputs.size());
  for (const auto& o : outputs) s.distributions.push_back(teacher_forced_distributions(live, s.transformed, o));
  return s;
}

namespace detail {

inline void check_matched(std::span<const CategoricalSequenceDistribution> live,
                          std::span<const CategoricalSequenceDistribution> support, const char* who) {
  if (live.size() != support.size() || live.empty()) {
    throw ContractError(std::string(who) + ": sample counts differ or are zero");
  }
  for (std::size_t i = 0; i < live.size(); ++i) {
    if (live[i].length != support[i].length) {
      throw ContractError(std::string(who) + ": length mismatch at sample " + std::to_string(i));
    }
  }
}

}  // namespace detail

// Mean over samples of D(support_i || live_i).
inline double domain_loss(std::span<const CategoricalSequenceDistribution> live,
                          std::span<const CategoricalSequenceDistribution> support,
                          DivergenceKind kind = DivergenceKind::KL) {
  detail::check_matched(live, support, "domain_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < live.size(); ++i) total += sequence_divergence(kind, support[i], live[i]);
  return total / static_cast<double>(live.size());
}

// Differentiable form over two teacher-forced passes with matching layout.
inline ad::Var domain_loss(const GroupForward& live, const GroupForward& support, DivergenceKind kind,
                           bool stop_support_gradient = false) {
  if (live.offsets != support.offsets) throw ContractError("domain_loss: length mismatch");
  const ad::Var lp = live.log_probs;
  const ad::Var lq = stop_support_gradient ? ad::detach(support.log_probs) : support.log_probs;
  const ad::Var q = ad::exp(lq);
  ad::Var rows;
  if (kind == DivergenceKind::KL) {
    rows = ad::row_sum(ad::mul(q, ad::sub(lq, lp)));
  } else {
    const ad::Var p = ad::exp(lp);
    const ad::Var log_m = ad::log(ad::scale(ad::add(p, q), 0.5));
    const ad::Var both = ad::add(ad::mul(q, ad::sub(lq, log_m)), ad::mul(p, ad::sub(lp, log_m)));
    rows = ad::scale(ad::row_sum(both), 0.5 / std::numbers::ln2);
  }
  return ad::mean(ad::segment_mean(rows, live.offsets));
}

// Per-sample D_i = D(support_i || live_i), clamped to [0, 1].
inline std::vector<double> domain_divergences(std::span<const CategoricalSequenceDistribution> live,
                                              std::span<const CategoricalSequenceDistribution> support,
                                              DivergenceKind kind = DivergenceKind::JS) {
  detail::check_matched(live, support, "domain_divergences");
  std::vector<double> d(live.size());
  for (std::size_t i = 0; i < live.size(); ++i)
    d[i] = std::clamp(sequence_divergence(kind, support[i], live[i]), 0.0, 1.0);
  return d;
}

inline std::vector<double> reweight_advantages(std::span<const double> advantages, std::span<const double> divergences) {
  if (advantages.size() != divergences.size()) throw ContractError("reweight_advantages: length mismatch");
  std::vector<double> out(advantages.size());
  for (std::size_t i = 0; i < advantages.size(); ++i) {
    const double d = divergences[i];
    if (!(d >= 0.0 && d <= 1.0)) throw ContractError("reweight_advantages: divergence outside [0,1]: " + std::to_string(d));
    out[i] = (1.0 - d) * advantages[i];
  }
  return out;
}

struct DomainConfig {
  bool constraint = true;  // DC
  bool shaping = true;     // DR
  DivergenceKind constraint_kind = DivergenceKind::KL;
  DivergenceKind shaping_kind = DivergenceKind::JS;
  double constraint_weight = 1.0;
  bool stop_support_gradient = false;
};

// Combined objective for one group. Fills group.domain_divergences and
// group.shaped_advantages whenever the transformed branch is evaluated.
// `frozen_divergences`, when given, replaces the computed D_i (used to hold
// the weights fixed while probing the objective numerically).
inline ObjectiveTerms domain_aware_objective(const PolicyArch& arch, std::span<const ad::Var> live,
                                             const PolicySnapshot& old, const PolicySnapshot& ref, SampleGroup& group,
                                             const Context& transformed, const GrpoOptions& grpo,
                                             const DomainConfig& cfg,
                                             std::optional<std::span<const double>> frozen_divergences = std::nullopt) {
  const GroupForward f = forward_group(arch, live, group.context, group.outputs);
  if (!cfg.constraint && !cfg.shaping) {
    group.domain_divergences.clear();
    group.shaped_advantages = group.advantages;
    return grpo_terms(f, old, ref, group.context, group.outputs, group.advantages, grpo);
  }

  const GroupForward s = forward_group(arch, live, transformed, group.outputs);
  if (frozen_divergences) {
    group.domain_divergences.assign(frozen_divergences->begin(), frozen_divergences->end());
  } else {
    std::vector<CategoricalSequenceDistribution> ld, sd;
    for (std::size_t i = 0; i < group.size(); ++i) {
      ld.push_back(f.distribution(i));
      sd.push_back(s.distribution(i));
    }
    group.domain_divergences = domain_divergences(ld, sd, cfg.shaping_kind);
  }
  group.shaped_advantages =
      cfg.shaping ? reweight_advantages(group.advantages, group.domain_divergences) : group.advantages;

  ObjectiveTerms terms = grpo_terms(f, old, ref, group.context, group.outputs, group.shaped_advantages, grpo);
  if (cfg.constraint) {
    terms.domain_loss = domain_loss(f, s, cfg.constraint_kind, cfg.stop_support_gradient);
    if (cfg.constraint_weight != 1.0) terms.domain_loss = ad::scale(terms.domain_loss, cfg.constraint_weight);
    terms.breakdown = combine(terms.breakdown.policy_term, terms.breakdown.ref_kl_term, terms.domain_loss.item(),
                              grpo.beta);
  }
  return terms;
}

// Output-level consistency bonus: 1 when the greedy answer on the transformed
// context matches the sample's own answer label.
template <class Rng>
std::vector<double> output_consistency_reward(const PolicyParameters& live, const AnswerGrammar& grammar,
                                              const DomainTransform& t, const Context& ctx,
                                              std::span<const TokenSeq> outputs, Rng& rng) {
  const Context transformed = apply_transform(t, ctx, rng);
  const auto greedy = grammar.parse(greedy_decode(live, transformed, live.arch.max_len));
  std::vector<double> bonus(outputs.size(), 0.0);
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto label = grammar.parse(outputs[i]);
    if (label && greedy && *label == *greedy) bonus[i] = 1.0;
  }
  return bonus;
}

}  // namespace darl
