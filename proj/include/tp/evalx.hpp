// Copyright 2026 The tensorpar Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tp/model.hpp"

namespace tp {

struct EvalSpec {
  /// Input tokens per window.
  Index window = 1024;
  /// Stride between windows; each later window scores only its last
  /// `overlap` targets.
  Index overlap = 32;
  /// Token count of the original (word-level) tokenization; defaults to the
  /// number of scored model tokens.
  std::optional<Index> original_tokens;

  void validate() const {
    if (window < 1) throw ParameterError("eval: window must be positive");
    if (overlap < 1 || overlap > window) {
      throw ParameterError("eval: overlap " + std::to_string(overlap) + " outside [1, window " +
                           std::to_string(window) + "]");
    }
    if (original_tokens && *original_tokens < 1) {
      throw ParameterError("eval: original token count must be positive");
    }
  }
};

/// Next-token log-probabilities: row i of log_probs(x) scores the token that
/// follows x[0..i].
class TokenScorer {
 public:
  virtual ~TokenScorer() = default;
  virtual Mat<double> log_probs(std::span<const TokenId> inputs) = 0;
  virtual Index max_context() const = 0;
};

struct PerplexityReport {
  std::string corpus;
  /// Scored model tokens: every token after the first.
  Index tokens = 0;
  Index original_tokens = 0;
  Index windows = 0;
  Index window = 0;
  Index overlap = 0;
  double total_ce = 0;
  double ppl = 0;

  std::string to_text() const;
};

/// exp(total_ce / T_o). The cross entropy is summed over T model tokens.
double renormalized_ppl(double total_ce, Index tokens, Index original_tokens);

/// Overlapping sliding-window evaluation. The first window scores all of its
/// targets; each later window advances by `overlap` and scores its last
/// `overlap` targets, so every token after the first is scored exactly once.
PerplexityReport perplexity(TokenScorer& scorer, std::span<const TokenId> ids,
                            const EvalSpec& spec, std::string corpus = "");

struct ClozeExample {
  std::vector<TokenId> context;
  std::vector<TokenId> answer;
};

struct ClozeReport {
  Index examples = 0;
  Index correct = 0;
  double accuracy = 0;

  std::string to_text() const;
};

/// Teacher-forced cloze scoring: an example counts only when every answer
/// subword is the argmax (lowest id on ties) at its position.
ClozeReport cloze_accuracy(TokenScorer& scorer, std::span<const ClozeExample> examples);

/// Undoes WikiText tokenization artifacts before model tokenization.
std::string wikitext_detokenize(std::string_view text);

/// Row-wise log-softmax in double precision.
template <class Derived>
Mat<double> log_softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  Mat<double> out = logits.template cast<double>();
  for (Index r = 0; r < out.rows(); ++r) {
    const double mx = out.row(r).maxCoeff();
    double z = 0;
    for (Index j = 0; j < out.cols(); ++j) z += std::exp(out(r, j) - mx);
    const double lz = mx + std::log(z);
    out.row(r).array() -= lz;
  }
  return out;
}

/// Scores with a (possibly sharded) causal model. With MP > 1 every rank of
/// the group must make the same calls.
template <Real S>
class ModelScorer final : public TokenScorer {
 public:
  explicit ModelScorer(Model<S>& model) : model_(model) {
    if (model.config().architecture != Architecture::gpt2) {
      throw UnsupportedError("ModelScorer: only causal (gpt2) models define next-token scores");
    }
    model_.set_training(false);
  }

  Mat<double> log_probs(std::span<const TokenId> inputs) override {
    const auto n = static_cast<Index>(inputs.size());
    return log_softmax_rows(model_.logits(inputs, 1, n).leftCols(model_.config().vocab));
  }

  Index max_context() const override { return model_.config().max_seq; }

 private:
  Model<S>& model_;
};

}  // namespace tp
