#pragma once

// Group-relative advantages and the unclipped GRPO surrogate with an exact
// KL-to-reference penalty.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "darl/ad.hpp"
#include "darl/policy.hpp"

namespace darl {

class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::size_t sample) : std::runtime_error(what), sample_(sample) {}
  std::size_t sample() const { return sample_; }

 private:
  std::size_t sample_;
};

// A_i = (r_i - mean) / (population std + epsilon). Constant groups give exact zeros.
inline std::vector<double> normalize_advantages(std::span<const double> rewards, double epsilon = 1e-8) {
  if (rewards.size() < 2) throw ContractError("normalize_advantages: need at least two rewards");
  if (epsilon < 0.0) throw ContractError("normalize_advantages: epsilon must be non-negative");
  std::vector<double> out(rewards.size(), 0.0);
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) return out;
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double denom = std::sqrt(var / n) + epsilon;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / denom;
  return out;
}

enum class RatioMode { Sequence, Token };

inline std::string_view to_string(RatioMode m) { return m == RatioMode::Sequence ? "sequence" : "token"; }

inline RatioMode parse_ratio_mode(std::string_view s) {
  if (s == "sequence") return RatioMode::Sequence;
  if (s == "token") return RatioMode::Token;
  throw std::invalid_argument("unknown ratio mode '" + std::string(s) + "'");
}

struct SampleGroup {
  Context context;
  std::vector<TokenSeq> outputs;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<double> domain_divergences;
  std::vector<double> shaped_advantages;

  std::size_t size() const { return outputs.size(); }
};

// Objective to maximize: total = policy_term - beta * ref_kl_term - domain_loss_term.
struct ObjectiveBreakdown {
  double policy_term = 0.0;
  double ref_kl_term = 0.0;
  double domain_loss_term = 0.0;
  double total = 0.0;
  double beta = 0.0;
};

struct GrpoOptions {
  double beta = 0.04;
  RatioMode ratio_mode = RatioMode::Sequence;
  std::optional<double> clip;  // PPO ratio bound; unset means the unclipped objective
};

// Differentiable pieces of the objective. `domain_loss` is undefined when the
// domain constraint is off.
struct ObjectiveTerms {
  ad::Var policy_term;
  ad::Var ref_kl;
  ad::Var domain_loss;
  ObjectiveBreakdown breakdown;

  // -(policy - beta * ref_kl), the part of the loss shared with plain GRPO.
  ad::Var base_loss() const { return ad::scale(ad::sub(policy_term, ad::scale(ref_kl, breakdown.beta)), -1.0); }

  // The full objective `total` as a graph node.
  ad::Var total() const {
    const ad::Var loss = domain_loss.defined() ? ad::add(base_loss(), domain_loss) : base_loss();
    return ad::scale(loss, -1.0);
  }
};

inline ObjectiveBreakdown combine(double policy, double ref_kl, double domain_loss, double beta) {
  const double base = policy - beta * ref_kl;
  return {policy, ref_kl, domain_loss, base - domain_loss, beta};
}

// Surrogate and reference-KL terms for one group given the live forward pass.
inline ObjectiveTerms grpo_terms(const GroupForward& live, const PolicySnapshot& old, const PolicySnapshot& ref,
                                 const Context& ctx, std::span<const TokenSeq> outputs,
                                 std::span<const double> advantages, const GrpoOptions& opt) {
  const std::size_t G = outputs.size();
  if (advantages.size() != G || live.samples() != G) {
    throw ContractError("grpo_objective: advantages and outputs differ in length");
  }
  if (opt.beta < 0.0) throw ContractError("grpo_objective: beta must be non-negative");
  const std::size_t R = live.rows();
  const std::size_t V = live.log_probs.value().cols();

  // Old-policy token log-probs and reference rows are constants.
  ad::Array old_lp = ad::Array::zeros({R});
  ad::Array ref_lp = ad::Array::zeros({R, V});
  for (std::size_t i = 0; i < G; ++i) {
    const auto od = teacher_forced_distributions(old.params(), ctx, outputs[i]);
    const auto rd = teacher_forced_distributions(ref.params(), ctx, outputs[i]);
    for (std::size_t t = 0; t < outputs[i].size(); ++t) {
      const std::size_t r = live.offsets[i] + t;
      old_lp.data[r] = od.log_row(t)[static_cast<std::size_t>(outputs[i][t])];
      for (std::size_t v = 0; v < V; ++v) ref_lp(r, v) = rd.log_row(t)[v];
    }
  }

  const ad::Var token_lp = ad::pick(live.log_probs, live.tokens);
  ad::Var log_ratio;
  if (opt.ratio_mode == RatioMode::Sequence) {
    ad::Array old_seq = ad::Array::zeros({G});
    for (std::size_t i = 0; i < G; ++i)
      for (std::size_t r = live.offsets[i]; r < live.offsets[i + 1]; ++r) old_seq.data[i] += old_lp.data[r];
    log_ratio = ad::sub(ad::segment_sum(token_lp, live.offsets), ad::constant(std::move(old_seq)));
  } else {
    log_ratio = ad::sub(token_lp, ad::constant(std::move(old_lp)));
  }
  for (std::size_t k = 0; k < log_ratio.value().size(); ++k) {
    if (!std::isfinite(std::exp(log_ratio.value().data[k]))) {
      std::size_t sample = k;
      if (opt.ratio_mode == RatioMode::Token) {
        sample = 0;
        while (live.offsets[sample + 1] <= k) ++sample;
      }
      throw NumericError("grpo_objective: importance ratio overflow at sample " + std::to_string(sample), sample);
    }
  }
  ad::Var ratio = ad::exp(log_ratio);
  if (opt.ratio_mode == RatioMode::Token) ratio = ad::segment_mean(ratio, live.offsets);

  const ad::Var adv = ad::constant(ad::Array::vector(std::vector<double>(advantages.begin(), advantages.end())));
  ad::Var surrogate = ad::mul(ratio, adv);
  if (opt.clip) {
    const double c = *opt.clip;
    surrogate = ad::minimum(surrogate, ad::mul(ad::clamp(ratio, 1.0 - c, 1.0 + c), adv));
  }

  const ad::Var live_p = ad::exp(live.log_probs);
  const ad::Var row_kl = ad::row_sum(ad::mul(live_p, ad::sub(live.log_probs, ad::constant(std::move(ref_lp)))));

  ObjectiveTerms terms;
  terms.policy_term = ad::mean(surrogate);
  terms.ref_kl = ad::mean(ad::segment_mean(row_kl, live.offsets));
  terms.breakdown = combine(terms.policy_term.item(), terms.ref_kl.item(), 0.0, opt.beta);
  return terms;
}

// GRPO objective for one group, using `group.advantages`.
inline ObjectiveTerms grpo_objective(const PolicyArch& arch, std::span<const ad::Var> live, const PolicySnapshot& old,
                                     const PolicySnapshot& ref, const SampleGroup& group, const GrpoOptions& opt) {
  const GroupForward f = forward_group(arch, live, group.context, group.outputs);
  return grpo_terms(f, old, ref, group.context, group.outputs, group.advantages, opt);
}

}  // namespace darl
