#include <gtest/gtest.h>

#include <random>

#include "darl/grpo.hpp"
#include "darl/verify.hpp"
#include "oracles.hpp"

using namespace darl;

TEST(Advantages, HandExample) {
  const auto a = normalize_advantages(std::vector<double>{1, 0, 0, 1}, 0.0);
  EXPECT_EQ(a, (std::vector<double>{1, -1, -1, 1}));
  const auto b = normalize_advantages(std::vector<double>{1, 0, 0, 1});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(b[i], a[i], 1e-7);
}

TEST(Advantages, ConstantGroupIsExactlyZero) {
  for (double eps : {0.0, 1e-8})
    for (double x : normalize_advantages(std::vector<double>{1, 1, 1, 1}, eps)) EXPECT_EQ(x, 0.0);
}

TEST(Advantages, MomentsAndOracle) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> g(2, 16);
  std::normal_distribution<double> n(3, 2);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> r(static_cast<std::size_t>(g(rng)));
    for (double& x : r) x = n(rng);
    const auto a = normalize_advantages(r);
    const auto o = oracle::normalize(r, 1e-8);
    double m = 0, v = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_NEAR(a[i], o[i], 1e-12);
      m += a[i];
    }
    m /= a.size();
    for (double x : a) v += (x - m) * (x - m);
    EXPECT_LE(std::abs(m), 1e-9);
    EXPECT_NEAR(std::sqrt(v / a.size()), 1.0, 1e-6);
  }
}

TEST(Advantages, ShiftAndScaleInvariance) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> r(8), shifted, scaled;
    for (double& x : r) x = n(rng);
    for (double x : r) {
      shifted.push_back(x + 3.5);
      scaled.push_back(x * 2.75);
    }
    const auto a = normalize_advantages(r, 0.0);
    const auto b = normalize_advantages(shifted, 0.0);
    const auto c = normalize_advantages(scaled, 0.0);
    for (std::size_t i = 0; i < r.size(); ++i) {
      EXPECT_NEAR(a[i], b[i], 1e-12);
      EXPECT_NEAR(a[i], c[i], 1e-12);
    }
  }
}

TEST(Advantages, RejectsDegenerateInput) {
  EXPECT_THROW(normalize_advantages(std::vector<double>{1.0}), ContractError);
  EXPECT_THROW(normalize_advantages(std::vector<double>{1.0, 2.0}, -1.0), ContractError);
}

namespace {

// V = 2, one-position outputs, distributions set only by the output bias.
const PolicyArch kBinary{2, 1, 1, 1, 1, 1, 1};
const Context kCtx{1, {0}, {0}};

PolicyParameters biased(double b0, double b1) {
  PolicyParameters p = zero_policy(kBinary);
  p[ParamId::OutputBias].data = {b0, b1};
  return p;
}

std::vector<double> probs(double b0, double b1) { return oracle::softmax({b0, b1}); }

ObjectiveTerms objective(const PolicyParameters& live, const PolicyParameters& old, const PolicyParameters& ref,
                         std::vector<TokenSeq> outs, std::vector<double> adv, GrpoOptions opt) {
  SampleGroup g;
  g.context = kCtx;
  g.outputs = std::move(outs);
  g.advantages = std::move(adv);
  return grpo_objective(kBinary, make_leaves(live), snapshot(old, SnapshotRole::Old),
                        snapshot(ref, SnapshotRole::Reference), g, opt);
}

}  // namespace

TEST(GrpoObjective, AllEqualAndZeroAdvantagesGiveZero) {
  const auto p = biased(0.3, -0.2);
  const auto t = objective(p, p, p, {{0}, {1}}, {0, 0}, {});
  EXPECT_EQ(t.breakdown.total, 0.0);
  EXPECT_EQ(t.breakdown.ref_kl_term, 0.0);
}

TEST(GrpoObjective, LiveEqualsOldWithZeroMeanAdvantages) {
  const auto p = biased(0.3, -0.2);
  const auto t = objective(p, p, biased(1, 0), {{0}, {1}}, {1, -1}, GrpoOptions{0.0});
  EXPECT_EQ(t.breakdown.policy_term, 0.0);
}

TEST(GrpoObjective, HandComputedTwoTokenCase) {
  const double l0 = 0.4, l1 = -0.3, o0 = -0.1, o1 = 0.6, r0 = 0.2, r1 = 0.2 - 1.1;
  const auto pl = probs(l0, l1), po = probs(o0, o1), pr = probs(r0, r1);
  const std::vector<double> adv{0.8, -1.3};
  const double policy = (pl[0] / po[0] * adv[0] + pl[1] / po[1] * adv[1]) / 2;
  const double refkl = oracle::kl(pl, pr);
  const auto t = objective(biased(l0, l1), biased(o0, o1), biased(r0, r1), {{0}, {1}}, adv, GrpoOptions{0.04});
  EXPECT_NEAR(t.breakdown.policy_term, policy, 1e-9);
  EXPECT_NEAR(t.breakdown.ref_kl_term, refkl, 1e-9);
  EXPECT_NEAR(t.breakdown.total, policy - 0.04 * refkl, 1e-9);
  EXPECT_EQ(t.breakdown.domain_loss_term, 0.0);
}

TEST(GrpoObjective, ClippedSurrogate) {
  const auto pl = probs(2, 0), po = probs(0, 0);
  const std::vector<double> adv{1.0, -1.0};
  const double r0 = pl[0] / po[0], r1 = pl[1] / po[1];
  auto clipped = [](double r, double a) { return std::min(r * a, std::clamp(r, 0.8, 1.2) * a); };
  GrpoOptions opt;
  opt.clip = 0.2;
  const auto t = objective(biased(2, 0), biased(0, 0), biased(0, 0), {{0}, {1}}, adv, opt);
  EXPECT_NEAR(t.breakdown.policy_term, (clipped(r0, 1.0) + clipped(r1, -1.0)) / 2, 1e-12);
}

TEST(GrpoObjective, TokenRatioModeAveragesPerTokenRatios) {
  // Two-position outputs: the prefix term is zero here, so both positions
  // share the same distribution.
  const PolicyArch arch{2, 1, 1, 1, 1, 1, 2};
  auto mk = [&](double b0, double b1) {
    PolicyParameters p = zero_policy(arch);
    p[ParamId::OutputBias].data = {b0, b1};
    return p;
  };
  const auto pl = probs(0.5, 0), po = probs(0, 0.5);
  SampleGroup g;
  g.context = kCtx;
  g.outputs = {{0, 0}, {0, 1}};
  g.advantages = {1.0, -1.0};
  GrpoOptions opt;
  opt.ratio_mode = RatioMode::Token;
  const auto t = grpo_objective(arch, make_leaves(mk(0.5, 0)), snapshot(mk(0, 0.5), SnapshotRole::Old),
                                snapshot(mk(0, 0), SnapshotRole::Reference), g, opt);
  const double s0 = pl[0] / po[0], s1 = (pl[0] / po[0] + pl[1] / po[1]) / 2;
  EXPECT_NEAR(t.breakdown.policy_term, (s0 - s1) / 2, 1e-12);
}

TEST(GrpoObjective, RatioOverflowNamesSample) {
  try {
    objective(biased(0, 0), biased(0, -1000), biased(0, 0), {{0}, {1}}, {1, -1}, {});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.sample(), 1u);
  }
}

TEST(GrpoObjective, LengthMismatchRaises) {
  const auto p = biased(0, 0);
  EXPECT_THROW(objective(p, p, p, {{0}, {1}}, {1.0}, {}), ContractError);
}

TEST(GrpoObjective, GradientMatchesFiniteDifferences) {
  const auto fx = make_micro_fixture(21);
  for (auto mode : {RatioMode::Sequence, RatioMode::Token}) {
    GrpoOptions opt;
    opt.ratio_mode = mode;
    EXPECT_LE(objective_gradient_error(fx, DomainConfig{false, false}, opt), 1e-4);
  }
}

TEST(GrpoObjective, ParseRatioMode) {
  EXPECT_EQ(parse_ratio_mode("token"), RatioMode::Token);
  EXPECT_EQ(to_string(RatioMode::Sequence), "sequence");
  EXPECT_THROW(parse_ratio_mode("tokens"), std::invalid_argument);
}
