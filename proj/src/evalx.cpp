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

#include "tp/evalx.hpp"

#include <cstdio>
#include <sstream>
#include <utility>

namespace tp {
namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

double renormalized_ppl(double total_ce, Index tokens, Index original_tokens) {
  if (tokens < 1 || original_tokens < 1) {
    throw ParameterError("renormalized_ppl: token counts must be positive");
  }
  return std::exp(total_ce / static_cast<double>(original_tokens));
}

PerplexityReport perplexity(TokenScorer& scorer, std::span<const TokenId> ids,
                            const EvalSpec& spec, std::string corpus) {
  spec.validate();
  if (ids.size() < 2) {
    throw ParameterError("perplexity: corpus needs at least 2 tokens, got " +
                         std::to_string(ids.size()));
  }
  if (spec.window > scorer.max_context()) {
    throw ParameterError("perplexity: window " + std::to_string(spec.window) +
                         " exceeds model context " + std::to_string(scorer.max_context()));
  }
  const auto len = static_cast<Index>(ids.size());
  const Index last_target = len - 1;
  PerplexityReport rep;
  rep.corpus = std::move(corpus);
  rep.window = spec.window;
  rep.overlap = spec.overlap;

  // Targets are positions 1..len-1; a window with inputs [start, start + w)
  // predicts targets start+1 .. start+w.
  Index scored_through = 0;
  Index start = 0;
  while (scored_through < last_target) {
    const Index end = std::min(start + spec.window, last_target);  // exclusive input end
    const Index first = std::max<Index>(0, end - spec.window);
    const Mat<double> lp = scorer.log_probs(ids.subspan(static_cast<std::size_t>(first),
                                                        static_cast<std::size_t>(end - first)));
    for (Index t = scored_through + 1; t <= end; ++t) {
      rep.total_ce -= lp(t - 1 - first, ids[static_cast<std::size_t>(t)]);
    }
    rep.tokens += end - scored_through;
    scored_through = end;
    ++rep.windows;
    start += spec.overlap;
  }
  rep.original_tokens = spec.original_tokens.value_or(rep.tokens);
  rep.ppl = renormalized_ppl(rep.total_ce, rep.tokens, rep.original_tokens);
  return rep;
}

std::string PerplexityReport::to_text() const {
  std::ostringstream os;
  os << "corpus " << (corpus.empty() ? "-" : corpus) << "\n"
     << "T " << tokens << "\n"
     << "T_o " << original_tokens << "\n"
     << "windows " << windows << "\n"
     << "window " << window << "\n"
     << "o " << overlap << "\n"
     << "total_ce " << fixed(total_ce, 6) << "\n"
     << "ppl " << fixed(ppl, 6) << "\n"
     << "note first token unscored (no context)\n";
  return os.str();
}

ClozeReport cloze_accuracy(TokenScorer& scorer, std::span<const ClozeExample> examples) {
  if (examples.empty()) throw ParameterError("cloze_accuracy: no examples");
  ClozeReport rep;
  for (const auto& ex : examples) {
    if (ex.context.empty()) throw ParameterError("cloze_accuracy: empty context");
    if (ex.answer.empty()) throw ParameterError("cloze_accuracy: empty answer");
    std::vector<TokenId> inputs = ex.context;
    inputs.insert(inputs.end(), ex.answer.begin(), ex.answer.end() - 1);
    const auto keep = static_cast<std::size_t>(scorer.max_context());
    const std::size_t drop = inputs.size() > keep ? inputs.size() - keep : 0;
    if (drop >= ex.context.size()) {
      throw ParameterError("cloze_accuracy: answer longer than the model context");
    }
    const Mat<double> lp = scorer.log_probs(std::span<const TokenId>(inputs).subspan(drop));
    const auto base = static_cast<Index>(ex.context.size() - drop) - 1;
    bool all = true;
    for (std::size_t j = 0; j < ex.answer.size() && all; ++j) {
      Index arg = 0;
      lp.row(base + static_cast<Index>(j)).maxCoeff(&arg);
      all = arg == ex.answer[j];
    }
    rep.correct += all ? 1 : 0;
    ++rep.examples;
  }
  rep.accuracy = static_cast<double>(rep.correct) / static_cast<double>(rep.examples);
  return rep;
}

std::string ClozeReport::to_text() const {
  std::ostringstream os;
  os << "examples " << examples << "\n"
     << "correct " << correct << "\n"
     << "accuracy " << fixed(accuracy, 6) << "\n";
  return os.str();
}

std::string wikitext_detokenize(std::string_view text) {
  // Applied in order.
  static const std::pair<std::string_view, std::string_view> kRules[] = {
      {" @-@ ", "-"}, {" @,@ ", ","}, {" @.@ ", "."}, {" : ", ": "}, {" ; ", "; "},
      {" . ", ". "},  {" ! ", "! "},  {" ? ", "? "},  {" , ", ", "}, {"( ", "("},
      {" )", ")"},    {"[ ", "["},    {" ]", "]"},    {"{ ", "{"},   {" }", "}"},
      {" 's", "'s"},  {" n't", "n't"}, {"= = = =", "===="}, {"= = =", "==="}, {"= =", "=="},
      {" \n", "\n"},
  };
  std::string s(text);
  for (const auto& [from, to] : kRules) {
    std::string out;
    std::size_t at = 0;
    for (std::size_t hit; (hit = s.find(from, at)) != std::string::npos; at = hit + from.size()) {
      out.append(s, at, hit - at);
      out += to;
    }
    out.append(s, at, std::string::npos);
    s = std::move(out);
  }
  return s;
}

}  // namespace tp
