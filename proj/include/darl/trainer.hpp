#pragma once

// Training loop: sample a group per context from pi_old, score, normalize,
// shape, and take Adam steps on the negated domain-aware objective.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "darl/domain.hpp"
#include "darl/grpo.hpp"
#include "darl/policy.hpp"
#include "darl/task.hpp"

namespace darl {

struct TrainingConfig {
  int group_size = 8;
  double beta = 0.04;
  double learning_rate = 5e-5;
  int batch_size = 4;
  int epochs = 0;  // 0 selects 2 for 1/2-shot and 4 otherwise
  int repeat_factor = 50;
  int max_steps = 0;  // 0 runs the full schedule
  int inner_updates = 1;
  RatioMode ratio_mode = RatioMode::Sequence;
  double clip = 0.0;  // 0 disables clipping
  double adv_epsilon = 1e-8;

  bool dc = true;
  bool dr = true;
  DivergenceKind dc_divergence = DivergenceKind::KL;
  DivergenceKind dr_divergence = DivergenceKind::JS;
  double dc_weight = 1.0;
  bool dc_stop_grad = false;
  bool oc = false;
  bool augment = false;
  std::optional<TransformKind> transform;  // unset: the task family's transform

  RewardConfig reward;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // Format warm-up before pi_ref is frozen: teacher-forced cross-entropy on
  // the answer template with a uniform target over label tokens.
  int warmup_steps = 0;
  double warmup_lr = 1e-2;

  int embed_dim = 16;
  int hidden = 64;
  int max_len = 6;
  InitOptions init;

  std::uint64_t seed = 1;
  int log_interval = 10;
  int eval_interval = 0;  // 0: accuracy only in the final record
};

inline int resolved_epochs(const TrainingConfig& cfg, const TaskSpec& spec) {
  if (cfg.epochs > 0) return cfg.epochs;
  return spec.shots <= 2 ? 2 : 4;
}

inline void validate(const TrainingConfig& c) {
  if (c.group_size < 2 || c.beta < 0 || !(c.learning_rate > 0) || c.batch_size < 1 || c.epochs < 0 ||
      c.repeat_factor < 1 || c.max_steps < 0 || c.inner_updates < 1 || c.clip < 0 || c.adv_epsilon < 0 ||
      c.dc_weight < 0 || c.warmup_steps < 0 || !(c.warmup_lr > 0) || c.log_interval < 1 || c.eval_interval < 0 ||
      c.max_len < 1 || c.embed_dim < 1 || c.hidden < 1) {
    throw ContractError("TrainingConfig: invalid value");
  }
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Adam {
 public:
  Adam(const PolicyParameters& shape_of, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& t : shape_of.tensors) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  // Descends along `grads` (gradient of the loss to minimize).
  void step(PolicyParameters& p, const std::vector<std::vector<double>>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < p.tensors.size(); ++k) {
      auto& data = p.tensors[k].data;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = grads[k][i];
        m_[k][i] = b1_ * m_[k][i] + (1.0 - b1_) * g;
        v_[k][i] = b2_ * v_[k][i] + (1.0 - b2_) * g * g;
        data[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct MetricsRecord {
  long step = 0;
  int epoch = 0;
  double mean_reward = 0;
  double mean_abs_advantage = 0;
  double mean_divergence = 0;
  double domain_loss = 0;
  double ref_kl = 0;
  ObjectiveBreakdown objective;
  std::optional<double> canonical_accuracy;
  std::optional<double> transformed_accuracy;
  double wall_clock_s = 0;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(MetricsRecord r)
      : std::runtime_error("non-finite loss at step " + std::to_string(r.step)), record_(std::move(r)) {}
  const MetricsRecord& record() const { return record_; }

 private:
  MetricsRecord record_;
};

struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_metrics;
  // Called after every optimizer step with the updated parameters.
  std::function<void(long step, const PolicyParameters&, std::span<const SampleGroup>)> on_step;
};

struct TrainResult {
  PolicySnapshot final_policy;
  PolicySnapshot reference;
  std::vector<MetricsRecord> metrics;
  double canonical_accuracy = 0;
  double transformed_accuracy = 0;
  long steps = 0;
};

inline PolicyArch make_arch(const TrainingConfig& cfg, const TaskSpec& spec) {
  const AnswerGrammar g{spec.num_classes};
  return PolicyArch{g.vocab_size(), AnswerGrammar::kEnd, spec.grid_size, spec.obs_values,
                    cfg.embed_dim,  cfg.hidden,          cfg.max_len};
}

namespace detail {

inline std::vector<std::vector<double>> zero_grads(const PolicyParameters& p) {
  std::vector<std::vector<double>> g;
  for (const auto& t : p.tensors) g.emplace_back(t.size(), 0.0);
  return g;
}

inline void add_leaf_grads(std::vector<std::vector<double>>& acc, std::span<const ad::Var> leaves) {
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const auto& g = leaves[k].grad();
    if (g.size() != acc[k].size()) continue;
    for (std::size_t i = 0; i < g.size(); ++i) acc[k][i] += g.data[i];
  }
}

// Teacher-forced cross-entropy on the answer template; label position targets
// the uniform distribution over labels, so no class information is used.
inline void format_warmup(PolicyParameters& params, const AnswerGrammar& grammar, std::span<const Episode> contexts,
                          const TrainingConfig& cfg) {
  if (cfg.warmup_steps == 0 || contexts.empty()) return;
  std::mt19937_64 rng(derive_seed(cfg.seed, 7));
  std::uniform_int_distribution<std::size_t> pick_ctx(0, contexts.size() - 1);
  std::uniform_int_distribution<int> pick_label(0, grammar.num_classes - 1);
  Adam adam(params, cfg.warmup_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  const auto V = static_cast<std::size_t>(params.arch.vocab_size);
  for (int step = 0; step < cfg.warmup_steps; ++step) {
    auto grads = zero_grads(params);
    for (int b = 0; b < cfg.batch_size; ++b) {
      const Context& ctx = contexts[pick_ctx(rng)].context;
      const TokenSeq answer = grammar.answer(pick_label(rng));
      const auto leaves = make_leaves(params);
      const GroupForward f = forward_group(params.arch, leaves, ctx, std::span(&answer, 1));
      ad::Array target = ad::Array::zeros({answer.size(), V});
      for (std::size_t t = 0; t < answer.size(); ++t) {
        if (t == 1) {
          for (int c = 0; c < grammar.num_classes; ++c)
            target(t, static_cast<std::size_t>(grammar.label_token(c))) = 1.0 / grammar.num_classes;
        } else {
          target(t, static_cast<std::size_t>(answer[t])) = 1.0;
        }
      }
      const ad::Var loss = ad::scale(ad::sum(ad::mul(ad::constant(std::move(target)), f.log_probs)),
                                     -1.0 / (static_cast<double>(answer.size()) * cfg.batch_size));
      ad::backward(loss);
      add_leaf_grads(grads, leaves);
    }
    adam.step(params, grads);
  }
}

}  // namespace detail

inline TrainResult train(const TrainingConfig& cfg, const TaskSpec& spec, const TrainHooks& hooks = {}) {
  validate(cfg);
  const auto started = std::chrono::steady_clock::now();
  const Dataset ds = generate_dataset(spec);
  const AnswerGrammar grammar{spec.num_classes};
  const PolicyArch arch = make_arch(cfg, spec);
  const DomainTransform transform{cfg.transform.value_or(family_transform(spec.family).kind)};
  const auto group = group_elements(spec.family);

  PolicyParameters params = init_policy(arch, derive_seed(cfg.seed, 0), cfg.init);
  detail::format_warmup(params, grammar, ds.train, cfg);
  const PolicySnapshot ref = snapshot(params, SnapshotRole::Reference);

  std::mt19937_64 sample_rng(derive_seed(cfg.seed, 1));
  std::mt19937_64 transform_rng(derive_seed(cfg.seed, 2));
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 3));
  std::mt19937_64 augment_rng(derive_seed(cfg.seed, 4));
  std::mt19937_64 oc_rng(derive_seed(cfg.seed, 5));

  const GrpoOptions grpo{cfg.beta, cfg.ratio_mode, cfg.clip > 0 ? std::optional<double>(cfg.clip) : std::nullopt};
  const DomainConfig dcfg{cfg.dc, cfg.dr, cfg.dc_divergence, cfg.dr_divergence, cfg.dc_weight, cfg.dc_stop_grad};
  const int epochs = resolved_epochs(cfg, spec);
  const std::size_t per_epoch_items = ds.train.size() * static_cast<std::size_t>(cfg.repeat_factor);
  const long steps_per_epoch =
      static_cast<long>((per_epoch_items + static_cast<std::size_t>(cfg.batch_size) - 1) / cfg.batch_size);
  long total_steps = steps_per_epoch * epochs;
  if (cfg.max_steps > 0) total_steps = std::min<long>(total_steps, cfg.max_steps);

  Adam adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  TrainResult result{ref, ref, {}, 0, 0, 0};

  MetricsRecord window;
  long window_steps = 0;
  auto flush = [&](long step, int epoch, bool final) {
    MetricsRecord r = window;
    const double n = static_cast<double>(std::max<long>(window_steps, 1));
    r.step = step;
    r.epoch = epoch;
    r.mean_reward /= n;
    r.mean_abs_advantage /= n;
    r.mean_divergence /= n;
    r.domain_loss /= n;
    r.ref_kl /= n;
    r.objective.policy_term /= n;
    r.objective.ref_kl_term /= n;
    r.objective.domain_loss_term /= n;
    r.objective.beta = cfg.beta;
    r.objective = combine(r.objective.policy_term, r.objective.ref_kl_term, r.objective.domain_loss_term, cfg.beta);
    if (final || (cfg.eval_interval > 0 && step % cfg.eval_interval == 0)) {
      r.canonical_accuracy = evaluate(params, grammar, ds.test_canonical);
      r.transformed_accuracy = evaluate(params, grammar, ds.test_transformed);
    }
    r.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.metrics.push_back(r);
    if (hooks.on_metrics) hooks.on_metrics(r);
    window = MetricsRecord{};
    window_steps = 0;
  };

  std::vector<std::size_t> order;
  long step = 0;
  for (int epoch = 1; epoch <= epochs && step < total_steps; ++epoch) {
    order.clear();
    for (int rep = 0; rep < cfg.repeat_factor; ++rep)
      for (std::size_t i = 0; i < ds.train.size(); ++i) order.push_back(i);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t pos = 0; pos < order.size() && step < total_steps; pos += static_cast<std::size_t>(cfg.batch_size)) {
      ++step;
      const std::size_t end = std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size));
      const PolicySnapshot old = snapshot(params, SnapshotRole::Old);

      std::vector<SampleGroup> groups;
      std::vector<Context> transformed;
      for (std::size_t b = pos; b < end; ++b) {
        const Episode& ep = ds.train[order[b]];
        SampleGroup g;
        g.context = ep.context;
        if (cfg.augment) {
          const auto pick = std::uniform_int_distribution<std::size_t>(0, group.size() - 1)(augment_rng);
          g.context = transformed_context(group[pick], ep.context);
        }
        for (auto& s : sample_group(old.params(), g.context, cfg.group_size, cfg.max_len, sample_rng))
          g.outputs.push_back(std::move(s.tokens));
        for (const auto& o : g.outputs) g.rewards.push_back(reward(grammar, o, ep.label, cfg.reward));
        if (cfg.oc) {
          const auto bonus = output_consistency_reward(old.params(), grammar, transform, g.context, g.outputs, oc_rng);
          for (std::size_t i = 0; i < bonus.size(); ++i) g.rewards[i] += bonus[i];
        }
        g.advantages = normalize_advantages(g.rewards, cfg.adv_epsilon);
        transformed.push_back((cfg.dc || cfg.dr) ? apply_transform(transform, g.context, transform_rng) : g.context);
        groups.push_back(std::move(g));
      }
      const double B = static_cast<double>(groups.size());

      for (int inner = 0; inner < cfg.inner_updates; ++inner) {
        auto base_grads = detail::zero_grads(params);
        auto dom_grads = detail::zero_grads(params);
        ObjectiveBreakdown sum{};
        for (std::size_t b = 0; b < groups.size(); ++b) {
          const auto leaves = make_leaves(params);
          const ObjectiveTerms terms =
              domain_aware_objective(arch, leaves, old, ref, groups[b], transformed[b], grpo, dcfg);
          sum.policy_term += terms.breakdown.policy_term;
          sum.ref_kl_term += terms.breakdown.ref_kl_term;
          sum.domain_loss_term += terms.breakdown.domain_loss_term;
          // Separate passes keep the constraint gradient an exact, separately
          // summed quantity; it is bitwise zero under the identity transform.
          ad::backward(terms.base_loss());
          detail::add_leaf_grads(base_grads, leaves);
          if (terms.domain_loss.defined()) {
            ad::backward(terms.domain_loss);
            detail::add_leaf_grads(dom_grads, leaves);
          }
        }
        const ObjectiveBreakdown mean =
            combine(sum.policy_term / B, sum.ref_kl_term / B, sum.domain_loss_term / B, cfg.beta);
        if (!std::isfinite(mean.total) || !std::isfinite(mean.policy_term) || !std::isfinite(mean.ref_kl_term) ||
            !std::isfinite(mean.domain_loss_term)) {
          MetricsRecord bad;
          bad.step = step;
          bad.epoch = epoch;
          bad.objective = mean;
          bad.domain_loss = mean.domain_loss_term;
          bad.ref_kl = mean.ref_kl_term;
          throw NonFiniteLoss(bad);
        }
        for (std::size_t k = 0; k < base_grads.size(); ++k)
          for (std::size_t i = 0; i < base_grads[k].size(); ++i) {
            base_grads[k][i] /= B;
            if (cfg.dc) base_grads[k][i] += dom_grads[k][i] / B;
          }
        adam.step(params, base_grads);

        if (inner == 0) {
          for (const auto& g : groups) {
            double r = 0, a = 0, d = 0;
            for (std::size_t i = 0; i < g.size(); ++i) {
              r += g.rewards[i];
              a += std::abs(g.advantages[i]);
              d += g.domain_divergences.empty() ? 0.0 : g.domain_divergences[i];
            }
            const double G = static_cast<double>(g.size());
            window.mean_reward += r / G / B;
            window.mean_abs_advantage += a / G / B;
            window.mean_divergence += d / G / B;
          }
          window.domain_loss += mean.domain_loss_term;
          window.ref_kl += mean.ref_kl_term;
          window.objective.policy_term += mean.policy_term;
          window.objective.ref_kl_term += mean.ref_kl_term;
          window.objective.domain_loss_term += mean.domain_loss_term;
          ++window_steps;
        }
      }
      if (hooks.on_step) hooks.on_step(step, params, groups);
      if (step % cfg.log_interval == 0 || step == total_steps) flush(step, epoch, step == total_steps);
    }
  }
  if (result.metrics.empty() || result.metrics.back().step != step) flush(step, epochs, true);

  result.final_policy = snapshot(params, SnapshotRole::Old);
  result.reference = ref;
  result.steps = step;
  result.canonical_accuracy = *result.metrics.back().canonical_accuracy;
  result.transformed_accuracy = *result.metrics.back().transformed_accuracy;
  return result;
}

// --- ablation grid ---------------------------------------------------------

struct Arm {
  std::string name;
  std::function<void(TrainingConfig&)> apply;
};

inline std::vector<Arm> standard_arms() {
  auto flags = [](bool dc, bool dr) {
    return [=](TrainingConfig& c) {
      c.dc = dc;
      c.dr = dr;
      c.oc = false;
      c.augment = false;
    };
  };
  std::vector<Arm> arms = {
      {"baseline", flags(false, false)},
      {"dc", flags(true, false)},
      {"dr", flags(false, true)},
      {"dc+dr", flags(true, true)},
      {"oc", [=](TrainingConfig& c) { flags(false, false)(c); c.oc = true; }},
      {"augment", [=](TrainingConfig& c) { flags(false, false)(c); c.augment = true; }},
  };
  for (auto dc : {DivergenceKind::KL, DivergenceKind::JS})
    for (auto dr : {DivergenceKind::KL, DivergenceKind::JS}) {
      arms.push_back({"div:" + std::string(to_string(dc)) + "/" + std::string(to_string(dr)),
                      [=](TrainingConfig& c) {
                        flags(true, true)(c);
                        c.dc_divergence = dc;
                        c.dr_divergence = dr;
                      }});
    }
  return arms;
}

inline std::vector<Arm> select_arms(const std::vector<std::string>& names) {
  const auto all = standard_arms();
  if (names.empty()) return all;
  std::vector<Arm> out;
  for (const auto& n : names) {
    auto it = std::find_if(all.begin(), all.end(), [&](const Arm& a) { return a.name == n; });
    if (it == all.end()) throw std::invalid_argument("unknown ablation arm '" + n + "'");
    out.push_back(*it);
  }
  return out;
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double canonical_accuracy = 0;
  double transformed_accuracy = 0;
  std::optional<TrainResult> run;
};

struct ArmSummary {
  std::string arm;
  std::size_t runs = 0;  // successful
  double mean = 0, stddev = 0;  // transformed-test accuracy, sample std
  double canonical_mean = 0, canonical_stddev = 0;
  std::vector<SeedOutcome> seeds;  // sorted by seed

  double standard_error() const { return runs > 0 ? stddev / std::sqrt(static_cast<double>(runs)) : 0.0; }
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0};
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

inline ArmSummary summarize(std::string arm, std::vector<SeedOutcome> seeds) {
  std::sort(seeds.begin(), seeds.end(), [](const auto& a, const auto& b) { return a.seed < b.seed; });
  std::vector<double> t, c;
  for (const auto& s : seeds)
    if (s.ok) {
      t.push_back(s.transformed_accuracy);
      c.push_back(s.canonical_accuracy);
    }
  ArmSummary out;
  out.arm = std::move(arm);
  out.runs = t.size();
  std::tie(out.mean, out.stddev) = mean_std(t);
  std::tie(out.canonical_mean, out.canonical_stddev) = mean_std(c);
  out.seeds = std::move(seeds);
  return out;
}

// Pooled standard error of the difference of two arm means.
inline double pooled_standard_error(const ArmSummary& a, const ArmSummary& b) {
  return std::sqrt(a.standard_error() * a.standard_error() + b.standard_error() * b.standard_error());
}

// Runs every (arm, seed) pair; each seed drives both the dataset and training.
// Results are ordered by arm name. Failures are recorded per seed.
inline std::vector<ArmSummary> ablation_suite(const TrainingConfig& base, const TaskSpec& spec,
                                              const std::vector<std::uint64_t>& seeds, const std::vector<Arm>& arms,
                                              int jobs = 1, bool keep_runs = false,
                                              const std::function<void(const std::string&, const SeedOutcome&)>& on_done = {}) {
  if (seeds.empty()) throw ContractError("ablation_suite: need at least one seed");
  struct Task {
    std::size_t arm;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (std::size_t a = 0; a < arms.size(); ++a)
    for (auto s : seeds) tasks.push_back({a, s});
  std::vector<SeedOutcome> outcomes(tasks.size());

  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= tasks.size()) return;
        i = next++;
      }
      TrainingConfig cfg = base;
      arms[tasks[i].arm].apply(cfg);
      cfg.seed = tasks[i].seed;
      TaskSpec ts = spec;
      ts.seed = tasks[i].seed;
      SeedOutcome o;
      o.seed = tasks[i].seed;
      try {
        TrainResult r = train(cfg, ts);
        o.ok = true;
        o.canonical_accuracy = r.canonical_accuracy;
        o.transformed_accuracy = r.transformed_accuracy;
        if (keep_runs) o.run = std::move(r);
      } catch (const std::exception& e) {
        o.error = e.what();
      }
      if (on_done) {
        std::lock_guard lock(mu);
        on_done(arms[tasks[i].arm].name, o);
      }
      outcomes[i] = std::move(o);
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
  std::vector<std::thread> pool;
  for (int j = 1; j < n; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<ArmSummary> table;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    std::vector<SeedOutcome> mine;
    for (std::size_t i = 0; i < tasks.size(); ++i)
      if (tasks[i].arm == a) mine.push_back(std::move(outcomes[i]));
    table.push_back(summarize(arms[a].name, std::move(mine)));
  }
  std::sort(table.begin(), table.end(), [](const auto& x, const auto& y) { return x.arm < y.arm; });
  return table;
}

}  // namespace darl
