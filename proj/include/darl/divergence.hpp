#pragma once

// Exact categorical divergences over a full vocabulary.
//
// KL is in nats. JS is in bits, which bounds it to [0, 1].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "darl/ad.hpp"

namespace darl {

using ContractError = ad::ContractError;

enum class DivergenceKind { KL, JS };

inline std::string_view to_string(DivergenceKind k) { return k == DivergenceKind::KL ? "KL" : "JS"; }

inline DivergenceKind parse_divergence(std::string_view s) {
  if (s == "KL" || s == "kl") return DivergenceKind::KL;
  if (s == "JS" || s == "js") return DivergenceKind::JS;
  throw std::invalid_argument("unknown divergence kind '" + std::string(s) + "'");
}

// Per-position probability vectors for one output sequence.
struct CategoricalSequenceDistribution {
  std::size_t length = 0;
  std::size_t vocab = 0;
  std::vector<double> probs;      // length x vocab, row-major
  std::vector<double> log_probs;  // same layout

  std::span<const double> row(std::size_t t) const {
    return std::span<const double>(probs).subspan(t * vocab, vocab);
  }
  std::span<const double> log_row(std::size_t t) const {
    return std::span<const double>(log_probs).subspan(t * vocab, vocab);
  }
};

namespace detail {

inline constexpr double kNormTolerance = 1e-9;

inline void check_pair(std::span<const double> p, std::span<const double> q, const char* who) {
  if (p.size() != q.size() || p.empty()) {
    throw ContractError(std::string(who) + ": length mismatch " + std::to_string(p.size()) + " vs " +
                        std::to_string(q.size()));
  }
  for (auto v : {p, q}) {
    double total = 0.0;
    for (double x : v) {
      if (!(x > 0.0)) throw ContractError(std::string(who) + ": entries must be strictly positive");
      total += x;
    }
    if (std::abs(total - 1.0) > kNormTolerance) {
      throw ContractError(std::string(who) + ": distribution sums to " + std::to_string(total));
    }
  }
}

}  // namespace detail

inline double kl(std::span<const double> p, std::span<const double> q) {
  detail::check_pair(p, q, "kl");
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) d += p[i] * (std::log(p[i]) - std::log(q[i]));
  return std::max(d, 0.0);
}

inline double js(std::span<const double> p, std::span<const double> q) {
  detail::check_pair(p, q, "js");
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    const double lm = std::log2(m);
    d += 0.5 * p[i] * (std::log2(p[i]) - lm) + 0.5 * q[i] * (std::log2(q[i]) - lm);
  }
  return std::clamp(d, 0.0, 1.0);
}

inline double divergence(DivergenceKind kind, std::span<const double> p, std::span<const double> q) {
  return kind == DivergenceKind::KL ? kl(p, q) : js(p, q);
}

// Mean over positions of the row-wise divergence.
inline double sequence_divergence(DivergenceKind kind, const CategoricalSequenceDistribution& a,
                                  const CategoricalSequenceDistribution& b) {
  if (a.length != b.length || a.vocab != b.vocab || a.length == 0) {
    throw ContractError("sequence_divergence: shape mismatch (" + std::to_string(a.length) + "x" +
                        std::to_string(a.vocab) + " vs " + std::to_string(b.length) + "x" +
                        std::to_string(b.vocab) + ")");
  }
  double total = 0.0;
  for (std::size_t t = 0; t < a.length; ++t) total += divergence(kind, a.row(t), b.row(t));
  return total / static_cast<double>(a.length);
}

}  // namespace darl
