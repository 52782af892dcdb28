#include <gtest/gtest.h>

#include <random>

#include "darl/divergence.hpp"
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

}  // namespace

TEST(Divergence, KlOfIdenticalIsZero) {
  const std::vector<double> p{0.2, 0.3, 0.5};
  EXPECT_EQ(kl(p, p), 0.0);
}

TEST(Divergence, KlHandComputed) {
  // 0.5 ln 2 + 0.5 ln(2/3)
  EXPECT_NEAR(kl(std::vector<double>{0.5, 0.5}, std::vector<double>{0.25, 0.75}), 0.143841, 1e-6);
  EXPECT_NEAR(kl(std::vector<double>{0.5, 0.5}, std::vector<double>{0.25, 0.75}),
              0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0), 1e-15);
}

TEST(Divergence, JsOfIdenticalIsZero) {
  const std::vector<double> p{0.1, 0.9};
  EXPECT_EQ(js(p, p), 0.0);
}

TEST(Divergence, JsNearDisjointApproachesOne) {
  const double e = 1e-12;
  EXPECT_GT(js(std::vector<double>{1 - e, e}, std::vector<double>{e, 1 - e}), 0.999999);
}

TEST(Divergence, JsSymmetricExample) {
  const std::vector<double> a{0.5, 0.5}, b{0.25, 0.75};
  EXPECT_EQ(js(a, b), js(b, a));
}

TEST(Divergence, RandomPairsMatchOraclesAndBounds) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> dim(2, 16);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = dim(rng);
    const auto p = oracle::random_simplex(rng, n), q = oracle::random_simplex(rng, n);
    EXPECT_NEAR(kl(p, q), oracle::kl(p, q), 1e-12);
    EXPECT_NEAR(js(p, q), oracle::js(p, q), 1e-12);
    EXPECT_GT(kl(p, q) + kl(q, p), 0.0);
    EXPECT_NEAR(js(p, q), js(q, p), 1e-12);
    EXPECT_GE(js(p, q), 0.0);
    EXPECT_LE(js(p, q), 1.0);
  }
}

TEST(Divergence, RejectsInvalidInputs) {
  EXPECT_THROW(kl(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0}), ContractError);
  EXPECT_THROW(kl(std::vector<double>{0.5, 0.6}, std::vector<double>{0.5, 0.5}), ContractError);
  EXPECT_THROW(js(std::vector<double>{1.0, 0.0}, std::vector<double>{0.5, 0.5}), ContractError);
}

TEST(Divergence, ParseAndName) {
  EXPECT_EQ(parse_divergence("KL"), DivergenceKind::KL);
  EXPECT_EQ(parse_divergence("JS"), DivergenceKind::JS);
  EXPECT_EQ(to_string(DivergenceKind::JS), "JS");
  EXPECT_THROW(parse_divergence("TV"), std::invalid_argument);
}

TEST(SequenceDivergence, IdenticalIsZero) {
  const auto a = seq({{0.3, 0.7}, {0.6, 0.4}});
  EXPECT_EQ(sequence_divergence(DivergenceKind::KL, a, a), 0.0);
  EXPECT_EQ(sequence_divergence(DivergenceKind::JS, a, a), 0.0);
}

TEST(SequenceDivergence, SingleRowEqualsRowDivergence) {
  const auto a = seq({{0.5, 0.5}}), b = seq({{0.25, 0.75}});
  EXPECT_EQ(sequence_divergence(DivergenceKind::KL, a, b), kl(a.row(0), b.row(0)));
}

TEST(SequenceDivergence, AveragesPositions) {
  const std::vector<double> p1{0.5, 0.5}, q1{0.25, 0.75}, p2{0.9, 0.1}, q2{0.2, 0.8};
  const auto a = seq({p1, p2}), b = seq({q1, q2});
  for (auto kind : {DivergenceKind::KL, DivergenceKind::JS}) {
    const double d1 = kind == DivergenceKind::KL ? oracle::kl(p1, q1) : oracle::js(p1, q1);
    const double d2 = kind == DivergenceKind::KL ? oracle::kl(p2, q2) : oracle::js(p2, q2);
    EXPECT_NEAR(sequence_divergence(kind, a, b), (d1 + d2) / 2, 1e-14);
  }
}

TEST(SequenceDivergence, LengthMismatchRaises) {
  EXPECT_THROW(sequence_divergence(DivergenceKind::KL, seq({{0.5, 0.5}}), seq({{0.5, 0.5}, {0.5, 0.5}})),
               ContractError);
}
