#include <gtest/gtest.h>

#include <random>

#include "darl/domain.hpp"
#include "darl/task.hpp"
#include "darl/verify.hpp"
#include "oracles.hpp"

using namespace darl;

namespace {

CategoricalSequenceDistribution seq(std::vector<std::vector<double>> rows) {
  CategoricalSequenceDistribution d;
  d.length = rows.size();
  d.vocab = rows[0].size();
  for (const auto& r : rows)
    for (double p : r) {
      d.probs.push_back(p);
      d.log_probs.push_back(std::log(p));
    }
  return d;
}

const PolicyArch kArch{6, 3, 3, 2, 3, 5, 4};

PolicyParameters random_policy(std::uint64_t seed) {
  InitOptions o;
  o.output_gain = 2.0;
  return init_policy(kArch, seed, o);
}

Context random_context(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Context c{3, std::vector<int>(9), {0}};
  for (int& x : c.grid) x = static_cast<int>(rng() % 2);
  c.grid[0] = 1;
  c.grid[1] = 0;
  return c;
}

}  // namespace

TEST(Transform, Rotate90HandExample) {
  EXPECT_EQ(transform_grid(TransformKind::Rotate90, std::vector<int>{1, 2, 3, 4}, 2), (std::vector<int>{3, 1, 4, 2}));
}

TEST(Transform, RotationsMatchOracle) {
  std::mt19937_64 rng(4);
  for (int k = 1; k <= 6; ++k) {
    std::vector<int> g(static_cast<std::size_t>(k * k));
    for (int& x : g) x = static_cast<int>(rng() % 10);
    const auto r1 = oracle::rotate90(g, k), r2 = oracle::rotate90(r1, k), r3 = oracle::rotate90(r2, k);
    EXPECT_EQ(transform_grid(TransformKind::Rotate90, g, k), r1);
    EXPECT_EQ(transform_grid(TransformKind::Rotate180, g, k), r2);
    EXPECT_EQ(transform_grid(TransformKind::Rotate270, g, k), r3);
    auto four = g;
    for (int q = 0; q < 4; ++q) four = transform_grid(TransformKind::Rotate90, four, k);
    EXPECT_EQ(four, g);
    EXPECT_EQ(transform_grid(TransformKind::Identity, g, k), g);
    for (auto kind : {TransformKind::ReflectHorizontal, TransformKind::ReflectVertical})
      EXPECT_EQ(transform_grid(kind, transform_grid(kind, g, k), k), g);
  }
}

TEST(Transform, ReflectionsHandExample) {
  const std::vector<int> g{1, 2, 3, 4};
  EXPECT_EQ(transform_grid(TransformKind::ReflectHorizontal, g, 2), (std::vector<int>{2, 1, 4, 3}));
  EXPECT_EQ(transform_grid(TransformKind::ReflectVertical, g, 2), (std::vector<int>{3, 4, 1, 2}));
}

TEST(Transform, ContractViolations) {
  EXPECT_THROW(transform_grid(TransformKind::Rotate90, std::vector<int>{1, 2, 3}, 2), ContractError);
  EXPECT_THROW(transform_grid(TransformKind::RotateRandom, std::vector<int>{1, 2, 3, 4}, 2), ContractError);
  EXPECT_THROW(parse_transform("shear"), std::invalid_argument);
}

TEST(Transform, RandomKindsResolveToNonIdentity) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto r = resolve(DomainTransform{TransformKind::RotateRandom}, rng);
    EXPECT_TRUE(r == TransformKind::Rotate90 || r == TransformKind::Rotate180 || r == TransformKind::Rotate270);
    const auto m = resolve(DomainTransform{TransformKind::ReflectRandom}, rng);
    EXPECT_TRUE(m == TransformKind::ReflectHorizontal || m == TransformKind::ReflectVertical);
  }
}

TEST(Support, IdentityReproducesLiveDistributions) {
  const auto p = random_policy(1);
  const auto c = random_context(2);
  const std::vector<TokenSeq> outs{{1, 4, 2, 3}, {0, 5}};
  std::mt19937_64 rng(1);
  const auto s = domain_support(p, DomainTransform{TransformKind::Identity}, c, outs, rng);
  for (std::size_t i = 0; i < outs.size(); ++i)
    EXPECT_EQ(s.distributions[i].probs, teacher_forced_distributions(p, c, outs[i]).probs);
}

TEST(Support, InputIndependentPolicyIsInvariant) {
  PolicyParameters p = random_policy(3);
  p[ParamId::GridEmbedding].data.assign(p[ParamId::GridEmbedding].size(), 0.0);
  const auto c = random_context(4);
  const std::vector<TokenSeq> outs{{1, 4, 2, 3}};
  std::mt19937_64 rng(1);
  for (auto kind : {TransformKind::Rotate90, TransformKind::Rotate180, TransformKind::ReflectHorizontal}) {
    const auto s = domain_support(p, DomainTransform{kind}, c, outs, rng);
    EXPECT_EQ(s.distributions[0].probs, teacher_forced_distributions(p, c, outs[0]).probs);
  }
}

TEST(Support, GenericPolicyChangesUnderRotation) {
  const auto p = random_policy(5);
  const auto c = random_context(6);
  const std::vector<TokenSeq> outs{{1, 4, 2, 3}};
  std::mt19937_64 rng(1);
  const auto s = domain_support(p, DomainTransform{TransformKind::Rotate90}, c, outs, rng);
  EXPECT_GT(sequence_divergence(DivergenceKind::KL, s.distributions[0], teacher_forced_distributions(p, c, outs[0])),
            0.0);
}

TEST(DomainLoss, ZeroWhenSupportEqualsLive) {
  const auto a = seq({{0.2, 0.8}, {0.6, 0.4}});
  const std::vector<CategoricalSequenceDistribution> v{a, a};
  EXPECT_EQ(domain_loss(v, v), 0.0);
  EXPECT_EQ(domain_loss(v, v, DivergenceKind::JS), 0.0);
}

TEST(DomainLoss, SingleRowMatchesOracle) {
  const std::vector<double> live{0.3, 0.7}, sup{0.6, 0.4};
  const std::vector<CategoricalSequenceDistribution> l{seq({live})}, s{seq({sup})};
  EXPECT_NEAR(domain_loss(l, s), oracle::kl(sup, live), 1e-14);
  const double j = domain_loss(l, s, DivergenceKind::JS);
  EXPECT_NEAR(j, oracle::js(sup, live), 1e-14);
  EXPECT_GE(j, 0.0);
  EXPECT_LE(j, 1.0);
}

TEST(DomainLoss, AutodiffMatchesNumeric) {
  const auto p = random_policy(7);
  const auto c = random_context(8);
  const Context t = transformed_context(TransformKind::Rotate90, c);
  const std::vector<TokenSeq> outs{{1, 4, 2, 3}, {0, 5}, {3}};
  const auto leaves = make_leaves(p);
  const auto f = forward_group(kArch, leaves, c, outs), s = forward_group(kArch, leaves, t, outs);
  std::vector<CategoricalSequenceDistribution> ld, sd;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    ld.push_back(teacher_forced_distributions(p, c, outs[i]));
    sd.push_back(teacher_forced_distributions(p, t, outs[i]));
  }
  for (auto kind : {DivergenceKind::KL, DivergenceKind::JS})
    EXPECT_NEAR(domain_loss(f, s, kind).item(), domain_loss(ld, sd, kind), 1e-12);
}

TEST(DomainDivergences, IdenticalNearDisjointAndClamped) {
  const auto a = seq({{0.5, 0.5}});
  EXPECT_EQ(domain_divergences(std::vector{a}, std::vector{a})[0], 0.0);
  const double e = 1e-12;
  const auto p = seq({{1 - e, e}, {e, 1 - e}}), q = seq({{e, 1 - e}, {1 - e, e}});
  EXPECT_GT(domain_divergences(std::vector{p}, std::vector{q})[0], 0.999999);
  // KL(support || live) = 0.9 ln(0.9/0.1) + 0.1 ln(0.1/0.9) ~ 1.758 nats, clamped.
  const auto live = seq({{0.1, 0.9}}), sup = seq({{0.9, 0.1}});
  ASSERT_GT(oracle::kl({0.9, 0.1}, {0.1, 0.9}), 1.7);
  EXPECT_EQ(domain_divergences(std::vector{live}, std::vector{sup}, DivergenceKind::KL)[0], 1.0);
}

TEST(Shaping, Examples) {
  const std::vector<double> a{1, -1};
  EXPECT_EQ(reweight_advantages(a, std::vector<double>{0.25, 0.5}), (std::vector<double>{0.75, -0.5}));
  EXPECT_EQ(reweight_advantages(a, std::vector<double>{0, 0}), a);
  EXPECT_EQ(reweight_advantages(a, std::vector<double>{1, 1}), (std::vector<double>{0, -0.0}));
  EXPECT_THROW(reweight_advantages(a, std::vector<double>{1.5, 0}), ContractError);
  EXPECT_THROW(reweight_advantages(a, std::vector<double>{0}), ContractError);
}

TEST(Shaping, RandomPairsShrinkAndKeepSign) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 2);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 1000; ++t) {
    const std::vector<double> a{n(rng)}, d{u(rng)};
    const double s = reweight_advantages(a, d)[0];
    EXPECT_LE(std::abs(s), std::abs(a[0]));
    if (d[0] < 1) EXPECT_EQ(std::signbit(s), std::signbit(a[0]));
  }
}

TEST(DomainObjective, IdentityTransformReducesToBaseline) {
  const auto fx = make_micro_fixture(31, 4);
  const auto leaves = make_leaves(fx.live);
  SampleGroup on = fx.group, off = fx.group;
  const auto t_on = domain_aware_objective(fx.arch, leaves, fx.old, fx.ref, on, fx.group.context, {},
                                           DomainConfig{true, true});
  const auto t_off = domain_aware_objective(fx.arch, leaves, fx.old, fx.ref, off, fx.group.context, {},
                                            DomainConfig{false, false});
  for (double d : on.domain_divergences) EXPECT_EQ(d, 0.0);
  EXPECT_EQ(on.shaped_advantages, fx.group.advantages);
  EXPECT_EQ(t_on.breakdown.domain_loss_term, 0.0);
  EXPECT_EQ(t_on.breakdown.total, t_off.breakdown.total);
}

TEST(DomainObjective, ConstraintIsAdditive) {
  const auto fx = make_micro_fixture(32, 4);
  const auto leaves = make_leaves(fx.live);
  SampleGroup a = fx.group, b = fx.group;
  const auto on = domain_aware_objective(fx.arch, leaves, fx.old, fx.ref, a, fx.transformed, {},
                                         DomainConfig{true, false});
  const auto off = domain_aware_objective(fx.arch, leaves, fx.old, fx.ref, b, fx.transformed, {},
                                          DomainConfig{false, false});
  EXPECT_GT(on.breakdown.domain_loss_term, 0.0);
  EXPECT_NEAR(off.breakdown.total - on.breakdown.total, on.breakdown.domain_loss_term, 1e-15);
  EXPECT_EQ(on.breakdown.policy_term, off.breakdown.policy_term);
}

TEST(DomainObjective, ShapingUsesReweightedAdvantages) {
  const auto fx = make_micro_fixture(33, 4);
  SampleGroup g = fx.group;
  domain_aware_objective(fx.arch, make_leaves(fx.live), fx.old, fx.ref, g, fx.transformed, {},
                         DomainConfig{false, true});
  ASSERT_EQ(g.domain_divergences.size(), g.size());
  EXPECT_EQ(g.shaped_advantages, reweight_advantages(g.advantages, g.domain_divergences));
  for (double d : g.domain_divergences) EXPECT_GT(d, 0.0);
}

TEST(DomainObjective, GradientMatchesFiniteDifferencesForAllArms) {
  const auto fx = make_micro_fixture(34);
  EXPECT_LE(fx.live.count(), 200u);
  for (bool dc : {false, true})
    for (bool dr : {false, true})
      for (auto ck : {DivergenceKind::KL, DivergenceKind::JS})
        for (auto rk : {DivergenceKind::KL, DivergenceKind::JS})
          EXPECT_LE(objective_gradient_error(fx, DomainConfig{dc, dr, ck, rk, 0.7}, {}), 1e-4)
              << dc << dr << to_string(ck) << to_string(rk);
}

// With the support branch detached, the gradient is that of the loss with
// the support distributions held fixed.
TEST(DomainObjective, StopGradientMatchesFixedSupport) {
  const auto fx = make_micro_fixture(35);
  const auto frozen = make_leaves(fx.live);
  const GroupForward support = forward_group(fx.arch, frozen, fx.transformed, fx.group.outputs);
  for (auto kind : {DivergenceKind::KL, DivergenceKind::JS}) {
    const auto leaves = make_leaves(fx.live);
    ad::backward(domain_loss(forward_group(fx.arch, leaves, fx.group.context, fx.group.outputs),
                             forward_group(fx.arch, leaves, fx.transformed, fx.group.outputs), kind, true));
    auto fixed = [&](std::span<const ad::Var> v) {
      GroupForward s = support;
      s.log_probs = ad::constant(support.log_probs.value());
      return domain_loss(forward_group(fx.arch, v, fx.group.context, fx.group.outputs), s, kind);
    };
    const double fd_err = ad::finite_difference_check(fixed, fx.live.tensors, 1e-6);
    EXPECT_LE(fd_err, 1e-6);
    // Compare the detached-support analytic gradient with the fixed-support one.
    const auto ref_leaves = make_leaves(fx.live);
    ad::backward(fixed(ref_leaves));
    for (std::size_t k = 0; k < leaves.size(); ++k)
      for (std::size_t i = 0; i < leaves[k].grad().size(); ++i)
        EXPECT_NEAR(leaves[k].grad()[i], ref_leaves[k].grad()[i], 1e-12);
  }
}

namespace {

// Greedy decode is <answer> label0 </answer> <end> regardless of the grid.
PolicyParameters fixed_answer_policy() {
  const PolicyArch arch{6, 3, 3, 2, 2, 3, 4};
  PolicyParameters p = zero_policy(arch);
  auto& ae = p[ParamId::AnswerEmbedding];
  ae(1, 0) = 3;
  ae(4, 1) = 3;
  ae(2, 2) = 3;
  auto& wo = p[ParamId::OutputWeight];
  wo(0, 4) = 5;
  wo(1, 2) = 10;
  wo(2, 3) = 20;
  p[ParamId::OutputBias].data[1] = 1;
  return p;
}

}  // namespace

TEST(OutputConsistency, InvariantPolicyAgreesWithItsOwnAnswers) {
  const auto p = fixed_answer_policy();
  const AnswerGrammar g{2};
  const auto c = random_context(9);
  ASSERT_EQ(greedy_decode(p, c, 4), g.answer(0));
  std::mt19937_64 rng(1);
  const std::vector<TokenSeq> outs{g.answer(0), g.answer(0), g.answer(1), {1, 4, 2}};
  const auto bonus = output_consistency_reward(p, g, DomainTransform{TransformKind::RotateRandom}, c, outs, rng);
  EXPECT_EQ(bonus, (std::vector<double>{1, 1, 0, 0}));
}

TEST(OutputConsistency, MatchesBruteForceAgreement) {
  const AnswerGrammar g{2};
  std::mt19937_64 srng(2);
  for (auto kind : {TransformKind::Identity, TransformKind::Rotate90}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto p = random_policy(100 + seed);
      const auto c = random_context(seed);
      std::vector<TokenSeq> outs{g.answer(0), g.answer(1), {1, 4, 3}};
      const auto expect = g.parse(greedy_decode(p, transformed_context(kind, c), 4));
      std::mt19937_64 rng(seed);
      const auto bonus = output_consistency_reward(p, g, DomainTransform{kind}, c, outs, rng);
      for (std::size_t i = 0; i < outs.size(); ++i) {
        const auto own = g.parse(outs[i]);
        EXPECT_EQ(bonus[i], own && expect && *own == *expect ? 1.0 : 0.0);
      }
    }
  }
}
