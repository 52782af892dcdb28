#pragma once

#include <optional>
#include <span>
#include <vector>

namespace darl {

using TokenSeq = std::vector<int>;

// Token layout shared by tasks and rewards: four template tokens followed by
// one token per class label. A well-formed answer is
// `<answer> LABEL </answer> <end>`.
struct AnswerGrammar {
  static constexpr int kPrompt = 0;
  static constexpr int kOpen = 1;
  static constexpr int kClose = 2;
  static constexpr int kEnd = 3;
  static constexpr int kFirstLabel = 4;

  int num_classes = 0;

  int vocab_size() const { return num_classes + kFirstLabel; }
  int label_token(int label) const { return kFirstLabel + label; }
  bool is_label_token(int token) const {
    return token >= kFirstLabel && token < kFirstLabel + num_classes;
  }

  TokenSeq answer(int label) const { return {kOpen, label_token(label), kClose, kEnd}; }

  // Label of a well-formed answer, nullopt otherwise.
  std::optional<int> parse(std::span<const int> tokens) const {
    if (tokens.size() != 4 || tokens[0] != kOpen || !is_label_token(tokens[1]) ||
        tokens[2] != kClose || tokens[3] != kEnd) {
      return std::nullopt;
    }
    return tokens[1] - kFirstLabel;
  }
};

}  // namespace darl
