#pragma once

// Executable invariant suite on micro instances. Each property prints one
// PASS/FAIL line; failures carry a witness.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "darl/ad.hpp"
#include "darl/divergence.hpp"
#include "darl/domain.hpp"
#include "darl/grpo.hpp"
#include "darl/policy.hpp"
#include "darl/trainer.hpp"

namespace darl {

// Micro problem for gradient and reduction checks: V=4, 2x2 grid, T <= 3.
struct MicroFixture {
  PolicyArch arch;
  PolicyParameters live;
  PolicySnapshot old;
  PolicySnapshot ref;
  SampleGroup group;
  Context transformed;
};

inline PolicyParameters perturbed(const PolicyParameters& p, double stddev, std::uint64_t seed) {
  PolicyParameters q = p;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& t : q.tensors)
    for (double& x : t.data) x += n(rng);
  return q;
}

inline MicroFixture make_micro_fixture(std::uint64_t seed = 11, int group_size = 3) {
  const PolicyArch arch{4, 3, 2, 2, 2, 3, 3};
  InitOptions init;
  init.output_gain = 1.0;
  PolicyParameters live = init_policy(arch, seed, init);
  MicroFixture f{arch, live, snapshot(perturbed(live, 0.05, seed + 1), SnapshotRole::Old),
                 snapshot(perturbed(live, 0.1, seed + 2), SnapshotRole::Reference), {}, {}};
  f.group.context = Context{2, {0, 1, 1, 1}, {0}};
  std::mt19937_64 rng(seed + 3);
  for (auto& s : sample_group(f.old.params(), f.group.context, group_size, arch.max_len, rng))
    f.group.outputs.push_back(std::move(s.tokens));
  for (int i = 0; i < group_size; ++i) f.group.rewards.push_back(static_cast<double>((i * 7 + 3) % 4));
  f.group.advantages = normalize_advantages(f.group.rewards);
  f.transformed = transformed_context(TransformKind::Rotate90, f.group.context);
  return f;
}

// Max relative finite-difference error of the full objective for one
// configuration. D_i are frozen at the unperturbed parameters because the
// objective treats them as constants.
inline double objective_gradient_error(const MicroFixture& fx, const DomainConfig& cfg, const GrpoOptions& grpo,
                                       double epsilon = 1e-5) {
  SampleGroup probe = fx.group;
  domain_aware_objective(fx.arch, make_leaves(fx.live), fx.old, fx.ref, probe, fx.transformed, grpo, cfg);
  const std::vector<double> frozen = probe.domain_divergences;
  auto f = [&](std::span<const ad::Var> leaves) {
    SampleGroup g = fx.group;
    std::optional<std::span<const double>> d;
    if (!frozen.empty()) d = std::span<const double>(frozen);
    return domain_aware_objective(fx.arch, leaves, fx.old, fx.ref, g, fx.transformed, grpo, cfg, d).total();
  };
  return ad::finite_difference_check(f, fx.live.tensors, epsilon);
}

struct ReductionReport {
  bool equal = true;
  long steps = 0;
  std::string witness;
};

// Trains `a` and `b` side by side and compares parameters bitwise after every
// step. Also requires D_i == 0 and L_dom == 0 in `a` at every step when
// `require_zero_domain_terms` is set.
inline ReductionReport compare_trajectories(const TrainingConfig& a, const TrainingConfig& b, const TaskSpec& spec,
                                            bool require_zero_domain_terms) {
  std::vector<PolicyParameters> ta, tb;
  ReductionReport rep;
  TrainHooks ha;
  ha.on_step = [&](long step, const PolicyParameters& p, std::span<const SampleGroup> groups) {
    ta.push_back(p);
    if (!require_zero_domain_terms || !rep.witness.empty()) return;
    for (const auto& g : groups)
      for (double d : g.domain_divergences)
        if (d != 0.0) rep.witness = "D_i = " + std::to_string(d) + " at step " + std::to_string(step);
  };
  ha.on_metrics = [&](const MetricsRecord& r) {
    if (require_zero_domain_terms && rep.witness.empty() && r.domain_loss != 0.0)
      rep.witness = "L_dom = " + std::to_string(r.domain_loss) + " at step " + std::to_string(r.step);
  };
  TrainHooks hb;
  hb.on_step = [&](long, const PolicyParameters& p, std::span<const SampleGroup>) { tb.push_back(p); };
  // Per-step L_dom: a nonzero value anywhere keeps the window mean nonzero.
  TrainingConfig la = a;
  la.log_interval = 1;
  train(la, spec, ha);
  train(b, spec, hb);
  rep.steps = static_cast<long>(ta.size());
  if (ta.size() != tb.size()) {
    rep.equal = false;
    rep.witness = "trajectory lengths differ";
    return rep;
  }
  for (std::size_t s = 0; s < ta.size(); ++s) {
    if (!(ta[s] == tb[s])) {
      rep.equal = false;
      rep.witness = "parameters diverge at step " + std::to_string(s + 1);
      return rep;
    }
  }
  rep.equal = rep.witness.empty();
  return rep;
}

inline TaskSpec micro_task() {
  TaskSpec s;
  s.grid_size = 3;
  s.num_classes = 2;
  s.shots = 2;
  s.obs_values = 3;
  s.test_size = 4;
  return s;
}

inline TrainingConfig micro_training(int steps) {
  TrainingConfig c;
  c.embed_dim = 4;
  c.hidden = 8;
  c.group_size = 4;
  c.batch_size = 2;
  c.max_steps = steps;
  c.warmup_steps = 10;
  c.learning_rate = 1e-2;
  c.log_interval = 10;
  return c;
}

enum class Mutation { None, ShapingSign };

struct VerifyOptions {
  Mutation mutation = Mutation::None;
  std::uint64_t seed = 2024;
};

using Witness = std::optional<std::string>;

namespace detail {

inline std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<double> p(n);
  double s = 0;
  for (double& x : p) s += (x = u(rng));
  for (double& x : p) x /= s;
  return p;
}

}  // namespace detail

inline bool run_verify(std::ostream& out, const VerifyOptions& opt = {}) {
  std::mt19937_64 rng(opt.seed);
  bool all = true;
  auto check = [&](const std::string& name, const std::function<Witness()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Witness w;
    try {
      w = body();
    } catch (const std::exception& e) {
      w = std::string("exception: ") + e.what();
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (w) {
      all = false;
      out << "FAIL " << name << ": " << *w << '\n';
    } else {
      out << "PASS " << name << " (" << static_cast<long>(ms) << " ms)\n";
    }
  };

  check("softmax-normalization", [&]() -> Witness {
    std::normal_distribution<double> n(0.0, 5.0);
    for (int trial = 0; trial < 200; ++trial) {
      ad::Array logits = ad::Array::zeros({3, 7});
      for (double& x : logits.data) x = n(rng);
      const auto p = ad::softmax(ad::constant(logits)).value();
      for (std::size_t r = 0; r < 3; ++r) {
        double s = 0;
        for (double x : p.row(r)) {
          if (!(x > 0)) return "non-positive softmax entry";
          s += x;
        }
        if (std::abs(s - 1.0) > 1e-12) return "row sums to " + std::to_string(s);
      }
    }
    return std::nullopt;
  });

  check("backward-accumulation", [&]() -> Witness {
    const ad::Array x0 = ad::Array::vector({0.3, -1.2, 0.7});
    const ad::Var x = ad::parameter(x0);
    const ad::Var shared = ad::exp(x);
    ad::backward(ad::sum(ad::mul(shared, shared)));
    const ad::Array g_shared = x.grad();
    const ad::Var y = ad::parameter(x0);
    ad::backward(ad::sum(ad::mul(ad::exp(y), ad::exp(y))));
    for (std::size_t i = 0; i < 3; ++i)
      if (std::abs(g_shared[i] - y.grad()[i]) > 1e-12) return "coordinate " + std::to_string(i) + " differs";
    return std::nullopt;
  });

  check("divergence-properties", [&]() -> Witness {
    std::uniform_int_distribution<std::size_t> dim(2, 16);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = dim(rng);
      const auto p = detail::random_simplex(rng, n);
      const auto q = detail::random_simplex(rng, n);
      if (kl(p, q) < 0) return "kl < 0 at trial " + std::to_string(trial);
      if (kl(p, p) != 0) return "kl(p,p) != 0";
      const double a = js(p, q), b = js(q, p);
      if (std::abs(a - b) > 1e-12) return "js asymmetric by " + std::to_string(a - b);
      if (a < 0 || a > 1) return "js out of [0,1]: " + std::to_string(a);
    }
    const double e = 1e-12;
    const std::vector<double> p{1 - e, e}, q{e, 1 - e};
    if (!(js(p, q) > 0.999999)) return "near-disjoint js = " + std::to_string(js(p, q));
    return std::nullopt;
  });

  check("advantage-normalization", [&]() -> Witness {
    std::uniform_int_distribution<int> gs(2, 16);
    std::normal_distribution<double> n(0.0, 3.0);
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<double> r(static_cast<std::size_t>(gs(rng)));
      for (double& x : r) x = n(rng);
      const auto a = normalize_advantages(r);
      double m = 0, v = 0;
      for (double x : a) m += x;
      m /= static_cast<double>(a.size());
      for (double x : a) v += (x - m) * (x - m);
      const double sd = std::sqrt(v / static_cast<double>(a.size()));
      if (std::abs(m) > 1e-9) return "mean " + std::to_string(m);
      if (std::abs(sd - 1) > 1e-6) return "std " + std::to_string(sd);
    }
    for (double x : normalize_advantages(std::vector<double>(5, 0.7)))
      if (x != 0.0) return "constant group gives nonzero advantage";
    return std::nullopt;
  });

  check("shaping-algebra", [&]() -> Witness {
    auto reweight = [&](std::span<const double> a, std::span<const double> d) {
      auto out = reweight_advantages(a, d);
      if (opt.mutation == Mutation::ShapingSign)
        for (double& x : out) x = -x;
      return out;
    };
    std::normal_distribution<double> n(0.0, 2.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<double> a(8), d(8);
      for (double& x : a) x = n(rng);
      for (double& x : d) x = u(rng);
      const auto s = reweight(a, d);
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::abs(s[i]) > std::abs(a[i])) return "|A^d| > |A| at trial " + std::to_string(trial);
        if (d[i] < 1 && a[i] != 0 && std::signbit(s[i]) != std::signbit(a[i]))
          return "sign flipped: A=" + std::to_string(a[i]) + " D=" + std::to_string(d[i]) + " A^d=" + std::to_string(s[i]);
      }
      if (reweight(a, std::vector<double>(8, 0.0)) != a) return "D=0 changes advantages";
      for (double x : reweight(a, std::vector<double>(8, 1.0)))
        if (x != 0.0) return "D=1 leaves nonzero advantage";
    }
    return std::nullopt;
  });

  check("gradient-check", [&]() -> Witness {
    const auto fx = make_micro_fixture();
    for (bool dc : {false, true})
      for (bool dr : {false, true})
        for (auto ck : {DivergenceKind::KL, DivergenceKind::JS})
          for (auto rk : {DivergenceKind::KL, DivergenceKind::JS}) {
            const DomainConfig cfg{dc, dr, ck, rk, 1.0, false};
            const double err = objective_gradient_error(fx, cfg, GrpoOptions{});
            if (!(err <= 1e-4)) {
              return "relative error " + std::to_string(err) + " with dc=" + std::to_string(dc) +
                     " dr=" + std::to_string(dr) + " " + std::string(to_string(ck)) + "/" + std::string(to_string(rk));
            }
          }
    return std::nullopt;
  });

  check("ablation-additivity", [&]() -> Witness {
    const auto fx = make_micro_fixture();
    SampleGroup g1 = fx.group, g2 = fx.group;
    const auto leaves = make_leaves(fx.live);
    const auto on = domain_aware_objective(fx.arch, leaves, fx.old, fx.ref, g1, fx.transformed, GrpoOptions{},
                                           DomainConfig{true, false});
    const auto off = domain_aware_objective(fx.arch, leaves, fx.old, fx.ref, g2, fx.transformed, GrpoOptions{},
                                            DomainConfig{false, false});
    const double diff = on.breakdown.total - off.breakdown.total;
    if (std::abs(diff + on.breakdown.domain_loss_term) > 1e-12) return "difference " + std::to_string(diff);
    if (!(on.breakdown.domain_loss_term > 0)) return "domain loss not positive under rotation";
    return std::nullopt;
  });

  check("identity-reduction", [&]() -> Witness {
    TrainingConfig method = micro_training(30);
    method.dc = method.dr = true;
    method.transform = TransformKind::Identity;
    TrainingConfig baseline = method;
    baseline.dc = baseline.dr = false;
    const auto rep = compare_trajectories(method, baseline, micro_task(), true);
    if (!rep.equal) return rep.witness;
    return std::nullopt;
  });

  check("snapshot-immutability", [&]() -> Witness {
    const auto fx = make_micro_fixture();
    PolicyParameters live = fx.live;
    const PolicySnapshot snap = snapshot(live, SnapshotRole::Reference);
    const auto before = teacher_forced_distributions(snap.params(), fx.group.context, fx.group.outputs[0]);
    Adam adam(live, 0.1);
    std::vector<std::vector<double>> grads;
    for (const auto& t : live.tensors) grads.emplace_back(t.size(), 1.0);
    adam.step(live, grads);
    const auto after = teacher_forced_distributions(snap.params(), fx.group.context, fx.group.outputs[0]);
    if (before.probs != after.probs) return "snapshot changed after an optimizer step";
    if (teacher_forced_distributions(live, fx.group.context, fx.group.outputs[0]).probs == before.probs)
      return "live policy did not change";
    return std::nullopt;
  });

  return all;
}

}  // namespace darl
