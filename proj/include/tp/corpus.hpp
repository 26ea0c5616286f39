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

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tp/rng.hpp"
#include "tp/tensor.hpp"

namespace tp {

/// Token strings indexed by id. Every byte is representable: byte tokens
/// "<0xNN>" missing from the source are appended after the listed tokens.
class Vocabulary {
 public:
  /// One token per line, id = line index. Escapes: \n \t \r \s (space) \\.
  static Vocabulary parse(std::string_view text);
  static Vocabulary load(const std::filesystem::path& path);
  /// Vocabulary from an in-memory token list; same rules as parse().
  static Vocabulary from_tokens(std::span<const std::string> tokens);

  Index size() const { return static_cast<Index>(tokens_.size()); }
  /// Number of entries that came from the source list.
  Index listed() const { return listed_; }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view s) const;
  TokenId byte_token(unsigned char b) const { return bytes_[b]; }
  std::size_t max_token_bytes() const { return max_len_; }

  std::string serialize() const;

 private:
  void add(std::string tok);
  void finish();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId bytes_[256] = {};
  Index listed_ = 0;
  std::size_t max_len_ = 0;
};

/// Greedy longest-match subword tokenizer with byte fallback.
class Tokenizer {
 public:
  explicit Tokenizer(Vocabulary vocab) : vocab_(std::move(vocab)) {}

  const Vocabulary& vocab() const { return vocab_; }
  std::vector<TokenId> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> ids) const;
  /// True where a token begins a new whitespace-delimited word.
  std::vector<bool> word_starts(std::span<const TokenId> ids) const;

 private:
  std::string bytes_of(TokenId id) const;
  Vocabulary vocab_;
};

struct Document {
  std::int64_t id = 0;
  std::string text;
};

enum class DocFormat { lines, blank_line };

std::vector<Document> parse_documents(std::string_view text, DocFormat fmt);
std::vector<Document> read_documents(const std::filesystem::path& path, DocFormat fmt);
std::string format_documents(std::span<const Document> docs, DocFormat fmt);
void write_documents(const std::filesystem::path& path, std::span<const Document> docs,
                     DocFormat fmt);

/// Keeps documents with at least min_tokens tokens.
std::vector<Document> filter_short(std::span<const Document> docs, const Tokenizer& tok,
                                   Index min_tokens = 128);

std::vector<std::string> split_words(std::string_view text);

// ---------------------------------------------------------------------------
// Near-duplicate removal

struct DedupConfig {
  double threshold = 0.7;
  int shingle_words = 5;
  int num_hashes = 128;
  int bands = 32;
  std::uint64_t seed = 0x5eed;
};

/// Hashed word n-gram set, sorted and unique. Documents shorter than n words
/// contribute one shingle made of all their words.
std::vector<std::uint64_t> shingle_set(std::string_view text, int n);

/// Jaccard similarity of two sorted unique sets; two empty sets give 1.
double jaccard(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);

std::vector<std::uint64_t> minhash_signature(std::span<const std::uint64_t> shingles,
                                             int num_hashes, std::uint64_t seed);

struct DedupPair {
  std::int64_t a = 0;
  std::int64_t b = 0;
  double jaccard = 0;
};

struct DedupGroup {
  std::int64_t representative = 0;
  std::vector<std::int64_t> members;  // ascending, representative first
};

struct DedupReport {
  Index documents = 0;
  Index candidate_pairs = 0;
  std::vector<DedupPair> confirmed;
  std::vector<DedupGroup> groups;  // only groups with more than one member
  std::vector<std::int64_t> retained;

  std::string to_text() const;
};

/// Documents whose confirmed-duplicate graph (exact Jaccard > threshold over
/// LSH candidates) connects them collapse to the lowest id. Output keeps
/// input order.
std::vector<Document> dedup(std::span<const Document> docs, const DedupConfig& cfg,
                            DedupReport* report = nullptr);

// ---------------------------------------------------------------------------
// Leakage audit

struct OverlapResult {
  double percentage = 0;
  Index test_ngrams = 0;
  Index matched = 0;
  std::string warning;
};

/// Percentage of distinct test word n-grams present in the training set.
/// n-grams never span documents.
OverlapResult ngram_overlap(std::span<const Document> test, std::span<const Document> train,
                            int n = 8);

// ---------------------------------------------------------------------------
// Masked language modelling

struct MaskResult {
  std::vector<TokenId> ids;
  std::vector<TokenId> labels;  // kIgnoreLabel where unmasked
  Index masked = 0;
  std::string warning;
};

/// Whole-word n-gram masking: spans of 1..3 words are drawn until about
/// rate x tokens are covered; each chosen token becomes mask_id (80%), a
/// random id below random_vocab (10%) or stays (10%).
MaskResult mask_for_mlm(std::span<const TokenId> ids, const std::vector<bool>& word_starts,
                        RngStream& rng, TokenId mask_id, TokenId random_vocab,
                        double rate = 0.15);

}  // namespace tp
