#pragma once

// Tiny autoregressive categorical policy over a fixed vocabulary.
//
// The context encoder mean-pools position-aware grid-cell embeddings and
// question-token embeddings, then applies one tanh hidden layer. The answer
// head adds the summed embeddings of the tokens generated so far to that
// hidden state, applies tanh, and projects to vocabulary logits.
//
// Two evaluation routes share the same parameters: plain double loops for
// sampling and scoring, and an autodiff route for training objectives.

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "darl/ad.hpp"
#include "darl/divergence.hpp"
#include "darl/grammar.hpp"

namespace darl {

struct Context {
  int grid_size = 0;
  std::vector<int> grid;  // grid_size x grid_size, row-major
  TokenSeq question;

  int at(int r, int c) const { return grid[static_cast<std::size_t>(r * grid_size + c)]; }
  bool operator==(const Context&) const = default;
};

struct PolicyArch {
  int vocab_size = 10;
  int eos_token = AnswerGrammar::kEnd;
  int grid_size = 5;
  int obs_values = 2;
  int embed_dim = 16;
  int hidden = 64;
  int max_len = 6;

  int grid_cells() const { return grid_size * grid_size; }
  bool operator==(const PolicyArch&) const = default;
};

enum class ParamId : std::size_t {
  GridEmbedding,
  TokenEmbedding,
  HiddenWeight,
  HiddenBias,
  AnswerEmbedding,
  OutputWeight,
  OutputBias,
};

inline constexpr std::size_t kParamCount = 7;
inline constexpr std::array<std::string_view, kParamCount> kParamNames = {
    "grid_embedding", "token_embedding", "hidden_weight", "hidden_bias",
    "answer_embedding", "output_weight", "output_bias"};

inline ad::Shape param_shape(const PolicyArch& a, ParamId id) {
  const auto E = static_cast<std::size_t>(a.embed_dim);
  const auto H = static_cast<std::size_t>(a.hidden);
  const auto V = static_cast<std::size_t>(a.vocab_size);
  switch (id) {
    case ParamId::GridEmbedding:
      return {static_cast<std::size_t>(a.grid_cells() * a.obs_values), E};
    case ParamId::TokenEmbedding: return {V, E};
    case ParamId::HiddenWeight: return {2 * E, H};
    case ParamId::HiddenBias: return {1, H};
    case ParamId::AnswerEmbedding: return {V, H};
    case ParamId::OutputWeight: return {H, V};
    case ParamId::OutputBias: return {1, V};
  }
  return {};
}

struct PolicyParameters {
  PolicyArch arch;
  std::vector<ad::Array> tensors;  // indexed by ParamId

  const ad::Array& operator[](ParamId id) const { return tensors[static_cast<std::size_t>(id)]; }
  ad::Array& operator[](ParamId id) { return tensors[static_cast<std::size_t>(id)]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }
  bool operator==(const PolicyParameters&) const = default;
};

inline void validate_arch(const PolicyArch& a) {
  if (a.vocab_size < 2 || a.eos_token < 0 || a.eos_token >= a.vocab_size || a.grid_size < 1 ||
      a.obs_values < 1 || a.embed_dim < 1 || a.hidden < 1 || a.max_len < 1) {
    throw ContractError("PolicyArch: invalid architecture");
  }
}

inline PolicyParameters zero_policy(const PolicyArch& arch) {
  validate_arch(arch);
  PolicyParameters p{arch, {}};
  for (std::size_t i = 0; i < kParamCount; ++i)
    p.tensors.push_back(ad::Array::zeros(param_shape(arch, static_cast<ParamId>(i))));
  return p;
}

struct InitOptions {
  double grid_embed_std = 1.0;
  double token_embed_std = 1.0;
  double hidden_gain = 1.0;  // times 1/sqrt(fan_in)
  double answer_embed_std = 1.0;
  double output_gain = 0.0;  // times 1/sqrt(hidden); 0 gives a uniform initial policy
};

inline PolicyParameters init_policy(const PolicyArch& arch, std::uint64_t seed, const InitOptions& opt = {}) {
  PolicyParameters p = zero_policy(arch);
  std::mt19937_64 rng(seed);
  auto fill = [&](ParamId id, double stddev) {
    if (stddev == 0.0) return;
    std::normal_distribution<double> n(0.0, stddev);
    for (double& x : p[id].data) x = n(rng);
  };
  fill(ParamId::GridEmbedding, opt.grid_embed_std);
  fill(ParamId::TokenEmbedding, opt.token_embed_std);
  fill(ParamId::HiddenWeight, opt.hidden_gain / std::sqrt(2.0 * arch.embed_dim));
  fill(ParamId::AnswerEmbedding, opt.answer_embed_std);
  fill(ParamId::OutputWeight, opt.output_gain / std::sqrt(static_cast<double>(arch.hidden)));
  return p;
}

enum class SnapshotRole { Reference, Old };

inline std::string_view to_string(SnapshotRole r) { return r == SnapshotRole::Reference ? "reference" : "old"; }

// Frozen parameter copy used as pi_ref or pi_old.
class PolicySnapshot {
 public:
  PolicySnapshot(PolicyParameters params, SnapshotRole role)
      : params_(std::make_shared<const PolicyParameters>(std::move(params))), role_(role) {}

  const PolicyParameters& params() const { return *params_; }
  SnapshotRole role() const { return role_; }

 private:
  std::shared_ptr<const PolicyParameters> params_;
  SnapshotRole role_;
};

inline PolicySnapshot snapshot(const PolicyParameters& params, SnapshotRole role) {
  for (const auto& t : params.tensors)
    for (double x : t.data)
      if (!std::isfinite(x)) throw ContractError("snapshot: non-finite parameter");
  return PolicySnapshot(params, role);
}

namespace detail {

inline void check_context(const PolicyArch& a, const Context& c) {
  if (c.grid_size != a.grid_size || c.grid.size() != static_cast<std::size_t>(a.grid_cells())) {
    throw ContractError("context grid does not match the policy architecture");
  }
  for (int v : c.grid)
    if (v < 0 || v >= a.obs_values) throw ContractError("grid value out of range: " + std::to_string(v));
  if (c.question.empty()) throw ContractError("context has no question tokens");
  for (int t : c.question)
    if (t < 0 || t >= a.vocab_size) throw ContractError("question token out of vocabulary: " + std::to_string(t));
}

inline void check_tokens(const PolicyArch& a, std::span<const int> tokens) {
  for (int t : tokens)
    if (t < 0 || t >= a.vocab_size) throw ContractError("token id out of vocabulary: " + std::to_string(t));
}

inline std::size_t cell_index(const PolicyArch& a, int cell, int value) {
  return static_cast<std::size_t>(cell * a.obs_values + value);
}

}  // namespace detail

// Plain-double evaluation of the next-token distribution, one context at a time.
class PolicyScorer {
 public:
  PolicyScorer(const PolicyParameters& params, const Context& ctx) : p_(params) {
    const auto& a = p_.arch;
    detail::check_context(a, ctx);
    const auto E = static_cast<std::size_t>(a.embed_dim);
    const auto H = static_cast<std::size_t>(a.hidden);
    std::vector<double> features(2 * E, 0.0);
    const auto& ge = p_[ParamId::GridEmbedding];
    for (int cell = 0; cell < a.grid_cells(); ++cell) {
      const auto row = detail::cell_index(a, cell, ctx.grid[static_cast<std::size_t>(cell)]);
      for (std::size_t e = 0; e < E; ++e) features[e] += ge(row, e);
    }
    for (std::size_t e = 0; e < E; ++e) features[e] /= static_cast<double>(a.grid_cells());
    const auto& te = p_[ParamId::TokenEmbedding];
    for (int tok : ctx.question)
      for (std::size_t e = 0; e < E; ++e) features[E + e] += te(static_cast<std::size_t>(tok), e);
    for (std::size_t e = 0; e < E; ++e) features[E + e] /= static_cast<double>(ctx.question.size());

    hidden_.assign(H, 0.0);
    const auto& w = p_[ParamId::HiddenWeight];
    for (std::size_t i = 0; i < 2 * E; ++i) {
      if (features[i] == 0.0) continue;
      for (std::size_t h = 0; h < H; ++h) hidden_[h] += features[i] * w(i, h);
    }
    const auto& b = p_[ParamId::HiddenBias];
    for (std::size_t h = 0; h < H; ++h) hidden_[h] = std::tanh(hidden_[h] + b.data[h]);
    prefix_.assign(H, 0.0);
  }

  void reset() { std::fill(prefix_.begin(), prefix_.end(), 0.0); }

  // Appends a generated token to the conditioning prefix.
  void push(int token) {
    const auto& ae = p_[ParamId::AnswerEmbedding];
    for (std::size_t h = 0; h < prefix_.size(); ++h) prefix_[h] += ae(static_cast<std::size_t>(token), h);
  }

  // Log-probabilities of the next token given the current prefix.
  void next_log_probs(std::span<double> out) const {
    const auto H = prefix_.size();
    const auto V = static_cast<std::size_t>(p_.arch.vocab_size);
    const auto& wo = p_[ParamId::OutputWeight];
    const auto& bo = p_[ParamId::OutputBias];
    std::vector<double> logits(bo.data);
    for (std::size_t h = 0; h < H; ++h) {
      const double z = std::tanh(hidden_[h] + prefix_[h]);
      if (z == 0.0) continue;
      for (std::size_t v = 0; v < V; ++v) logits[v] += z * wo(h, v);
    }
    const ad::Array ls = ad::detail::log_softmax_rows(ad::Array({V}, std::move(logits)));
    std::copy(ls.data.begin(), ls.data.end(), out.begin());
  }

 private:
  const PolicyParameters& p_;
  std::vector<double> hidden_;
  std::vector<double> prefix_;
};

// Row t is the next-token distribution after the first t tokens of `output`.
inline CategoricalSequenceDistribution teacher_forced_distributions(const PolicyParameters& params,
                                                                    const Context& ctx,
                                                                    std::span<const int> output) {
  if (output.empty()) throw ContractError("teacher_forced_distributions: empty output");
  detail::check_tokens(params.arch, output);
  PolicyScorer scorer(params, ctx);
  CategoricalSequenceDistribution d;
  d.length = output.size();
  d.vocab = static_cast<std::size_t>(params.arch.vocab_size);
  d.log_probs.resize(d.length * d.vocab);
  d.probs.resize(d.length * d.vocab);
  for (std::size_t t = 0; t < d.length; ++t) {
    std::span<double> row(d.log_probs.data() + t * d.vocab, d.vocab);
    scorer.next_log_probs(row);
    for (std::size_t v = 0; v < d.vocab; ++v) d.probs[t * d.vocab + v] = std::exp(row[v]);
    scorer.push(output[t]);
  }
  return d;
}

inline double sequence_log_prob(const CategoricalSequenceDistribution& d, std::span<const int> output) {
  double lp = 0.0;
  for (std::size_t t = 0; t < output.size(); ++t) lp += d.log_row(t)[static_cast<std::size_t>(output[t])];
  return lp;
}

struct SampledOutput {
  TokenSeq tokens;
  double log_prob = 0.0;  // accumulated while sampling
};

// Draws G outputs; each ends at the end token or after max_len tokens.
template <class Rng>
std::vector<SampledOutput> sample_group(const PolicyParameters& params, const Context& ctx, int group_size,
                                        int max_len, Rng& rng) {
  if (group_size < 2) throw ContractError("sample_group: group size must be at least 2");
  if (max_len < 1) throw ContractError("sample_group: max_len must be at least 1");
  PolicyScorer scorer(params, ctx);
  const auto V = static_cast<std::size_t>(params.arch.vocab_size);
  std::vector<double> lp(V);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<SampledOutput> out(static_cast<std::size_t>(group_size));
  for (auto& s : out) {
    scorer.reset();
    for (int t = 0; t < max_len; ++t) {
      scorer.next_log_probs(lp);
      const double u = unif(rng);
      double cdf = 0.0;
      std::size_t tok = V - 1;
      for (std::size_t v = 0; v < V; ++v) {
        cdf += std::exp(lp[v]);
        if (u < cdf) {
          tok = v;
          break;
        }
      }
      s.tokens.push_back(static_cast<int>(tok));
      s.log_prob += lp[tok];
      if (static_cast<int>(tok) == params.arch.eos_token) break;
      scorer.push(static_cast<int>(tok));
    }
  }
  return out;
}

inline TokenSeq greedy_decode(const PolicyParameters& params, const Context& ctx, int max_len) {
  PolicyScorer scorer(params, ctx);
  std::vector<double> lp(static_cast<std::size_t>(params.arch.vocab_size));
  TokenSeq out;
  for (int t = 0; t < max_len; ++t) {
    scorer.next_log_probs(lp);
    const int tok = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    out.push_back(tok);
    if (tok == params.arch.eos_token) break;
    scorer.push(tok);
  }
  return out;
}

// --- autodiff route -------------------------------------------------------

inline std::vector<ad::Var> make_leaves(const PolicyParameters& params) {
  std::vector<ad::Var> leaves;
  leaves.reserve(params.tensors.size());
  for (const auto& t : params.tensors) leaves.push_back(ad::parameter(t));
  return leaves;
}

// Teacher-forced log-probabilities for a set of outputs sharing one context.
// Rows of `log_probs` are stacked output by output; output i owns rows
// [offsets[i], offsets[i+1]).
struct GroupForward {
  ad::Var log_probs;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> tokens;

  std::size_t samples() const { return offsets.size() - 1; }
  std::size_t rows() const { return offsets.back(); }

  // Plain-value distributions for sample i.
  CategoricalSequenceDistribution distribution(std::size_t i) const {
    const auto& lp = log_probs.value();
    CategoricalSequenceDistribution d;
    d.vocab = lp.cols();
    d.length = offsets[i + 1] - offsets[i];
    d.log_probs.assign(lp.data.begin() + static_cast<std::ptrdiff_t>(offsets[i] * d.vocab),
                       lp.data.begin() + static_cast<std::ptrdiff_t>(offsets[i + 1] * d.vocab));
    d.probs.resize(d.log_probs.size());
    for (std::size_t k = 0; k < d.probs.size(); ++k) d.probs[k] = std::exp(d.log_probs[k]);
    return d;
  }
};

inline GroupForward forward_group(const PolicyArch& arch, std::span<const ad::Var> leaves, const Context& ctx,
                                  std::span<const TokenSeq> outputs) {
  detail::check_context(arch, ctx);
  if (leaves.size() != kParamCount) throw ContractError("forward_group: wrong parameter count");
  if (outputs.empty()) throw ContractError("forward_group: no outputs");
  auto leaf = [&](ParamId id) -> const ad::Var& { return leaves[static_cast<std::size_t>(id)]; };

  std::vector<std::size_t> cells;
  cells.reserve(ctx.grid.size());
  for (int cell = 0; cell < arch.grid_cells(); ++cell)
    cells.push_back(detail::cell_index(arch, cell, ctx.grid[static_cast<std::size_t>(cell)]));
  std::vector<std::size_t> question(ctx.question.begin(), ctx.question.end());

  const ad::Var grid_feat = ad::mean_rows(ad::gather_rows(leaf(ParamId::GridEmbedding), std::move(cells)));
  const ad::Var q_feat = ad::mean_rows(ad::gather_rows(leaf(ParamId::TokenEmbedding), std::move(question)));
  const ad::Var hidden = ad::tanh(ad::add(
      ad::matmul(ad::concat_cols(grid_feat, q_feat), leaf(ParamId::HiddenWeight)), leaf(ParamId::HiddenBias)));

  GroupForward f;
  f.offsets.push_back(0);
  for (const auto& o : outputs) {
    if (o.empty()) throw ContractError("forward_group: empty output");
    detail::check_tokens(arch, o);
    f.offsets.push_back(f.offsets.back() + o.size());
    for (int t : o) f.tokens.push_back(static_cast<std::size_t>(t));
  }
  const std::size_t R = f.offsets.back();
  const auto V = static_cast<std::size_t>(arch.vocab_size);
  // Row r counts the tokens preceding position r within its own output.
  ad::Array counts = ad::Array::zeros({R, V});
  for (std::size_t i = 0; i + 1 < f.offsets.size(); ++i)
    for (std::size_t r = f.offsets[i] + 1; r < f.offsets[i + 1]; ++r) {
      for (std::size_t v = 0; v < V; ++v) counts(r, v) = counts(r - 1, v);
      counts(r, f.tokens[r - 1]) += 1.0;
    }
  const ad::Var prefix = ad::matmul(ad::constant(std::move(counts)), leaf(ParamId::AnswerEmbedding));
  const ad::Var z = ad::tanh(ad::add_row(prefix, hidden));
  const ad::Var logits = ad::add_row(ad::matmul(z, leaf(ParamId::OutputWeight)), leaf(ParamId::OutputBias));
  f.log_probs = ad::log_softmax(logits);
  return f;
}

}  // namespace darl
