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

#include "tp/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

namespace tp {
namespace {

std::string byte_name(unsigned char b) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "<0x%02X>", b);
  return buf;
}

std::optional<unsigned char> parse_byte_name(std::string_view s) {
  if (s.size() != 6 || s.substr(0, 3) != "<0x" || s[5] != '>') return std::nullopt;
  unsigned v = 0;
  for (char c : s.substr(3, 2)) {
    v <<= 4;
    if (c >= '0' && c <= '9') {
      v |= static_cast<unsigned>(c - '0');
    } else if (c >= 'A' && c <= 'F') {
      v |= static_cast<unsigned>(c - 'A' + 10);
    } else {
      return std::nullopt;
    }
  }
  return static_cast<unsigned char>(v);
}

std::string unescape(std::string_view line, std::size_t lineno) {
  std::string out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] != '\\') {
      out += line[i];
      continue;
    }
    if (i + 1 == line.size()) {
      throw FormatError("vocab line " + std::to_string(lineno) + ": dangling backslash");
    }
    switch (line[++i]) {
      case 'n': out += '\n'; break;
      case 't': out += '\t'; break;
      case 'r': out += '\r'; break;
      case 's': out += ' '; break;
      case '\\': out += '\\'; break;
      default:
        throw FormatError("vocab line " + std::to_string(lineno) + ": unknown escape \\" +
                          std::string(1, line[i]));
    }
  }
  return out;
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      case ' ': out += "\\s"; break;
      case '\\': out += "\\\\"; break;
      default: out += c;
    }
  }
  return out;
}

bool is_space(unsigned char c) { return std::isspace(c) != 0; }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------

void Vocabulary::add(std::string tok) {
  if (tok.empty()) throw FormatError("vocab: empty token at id " + std::to_string(tokens_.size()));
  const auto id = static_cast<TokenId>(tokens_.size());
  if (!index_.emplace(tok, id).second) {
    throw FormatError("vocab: duplicate token '" + escape(tok) + "' at id " + std::to_string(id));
  }
  max_len_ = std::max(max_len_, tok.size());
  tokens_.push_back(std::move(tok));
}

void Vocabulary::finish() {
  listed_ = size();
  for (int b = 0; b < 256; ++b) {
    const std::string name = byte_name(static_cast<unsigned char>(b));
    if (!index_.contains(name)) add(name);
    bytes_[b] = index_.at(name);
  }
}

Vocabulary Vocabulary::parse(std::string_view text) {
  Vocabulary v;
  std::size_t lineno = 0;
  std::size_t at = 0;
  while (at < text.size()) {
    const std::size_t nl = text.find('\n', at);
    std::string_view line = text.substr(at, nl == std::string_view::npos ? text.size() - at : nl - at);
    at = nl == std::string_view::npos ? text.size() : nl + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) throw FormatError("vocab line " + std::to_string(lineno) + ": empty token");
    v.add(unescape(line, lineno));
  }
  v.finish();
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) { return parse(read_file(path)); }

Vocabulary Vocabulary::from_tokens(std::span<const std::string> tokens) {
  Vocabulary v;
  for (const auto& t : tokens) v.add(t);
  v.finish();
  return v;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || id >= size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view s) const {
  const auto it = index_.find(std::string(s));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += escape(t);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<TokenId> Tokenizer::tokenize(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t at = 0;
  while (at < text.size()) {
    const std::size_t longest = std::min(vocab_.max_token_bytes(), text.size() - at);
    std::optional<TokenId> hit;
    std::size_t len = longest;
    for (; len > 0; --len) {
      hit = vocab_.find(text.substr(at, len));
      if (hit && !parse_byte_name(vocab_.token(*hit))) break;
      hit.reset();
    }
    if (hit) {
      out.push_back(*hit);
      at += len;
    } else {
      out.push_back(vocab_.byte_token(static_cast<unsigned char>(text[at])));
      ++at;
    }
  }
  return out;
}

std::string Tokenizer::bytes_of(TokenId id) const {
  const std::string& t = vocab_.token(id);
  if (auto b = parse_byte_name(t)) return std::string(1, static_cast<char>(*b));
  return t;
}

std::string Tokenizer::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += bytes_of(id);
  return out;
}

std::vector<bool> Tokenizer::word_starts(std::span<const TokenId> ids) const {
  std::vector<bool> out(ids.size(), false);
  bool prev_space = true;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::string b = bytes_of(ids[i]);
    const auto first_word = std::find_if(b.begin(), b.end(),
                                         [](char c) { return !is_space(static_cast<unsigned char>(c)); });
    if (first_word != b.end()) {
      // A word starts here if whitespace precedes its first visible byte.
      out[i] = first_word != b.begin() || prev_space;
    }
    if (!b.empty()) prev_space = is_space(static_cast<unsigned char>(b.back()));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Document> parse_documents(std::string_view text, DocFormat fmt) {
  std::vector<Document> docs;
  std::int64_t next_id = 0;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) docs.push_back({next_id++, std::move(current)});
    current.clear();
  };
  std::size_t at = 0;
  while (at < text.size()) {
    const std::size_t nl = text.find('\n', at);
    std::string_view line = text.substr(at, nl == std::string_view::npos ? text.size() - at : nl - at);
    at = nl == std::string_view::npos ? text.size() : nl + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (fmt == DocFormat::lines) {
      current = std::string(line);
      flush();
      continue;
    }
    if (line.empty()) {
      flush();
    } else {
      if (!current.empty()) current += '\n';
      current += line;
    }
  }
  flush();
  return docs;
}

std::vector<Document> read_documents(const std::filesystem::path& path, DocFormat fmt) {
  return parse_documents(read_file(path), fmt);
}

std::string format_documents(std::span<const Document> docs, DocFormat fmt) {
  std::string out;
  for (const auto& d : docs) {
    if (fmt == DocFormat::lines && d.text.find('\n') != std::string::npos) {
      throw FormatError("document " + std::to_string(d.id) +
                        " contains a newline and cannot be written one per line");
    }
    out += d.text;
    out += fmt == DocFormat::lines ? "\n" : "\n\n";
  }
  return out;
}

void write_documents(const std::filesystem::path& path, std::span<const Document> docs,
                     DocFormat fmt) {
  write_file(path, format_documents(docs, fmt));
}

std::vector<Document> filter_short(std::span<const Document> docs, const Tokenizer& tok,
                                   Index min_tokens) {
  std::vector<Document> out;
  for (const auto& d : docs) {
    if (static_cast<Index>(tok.tokenize(d.text).size()) >= min_tokens) out.push_back(d);
  }
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t hash_words(const std::vector<std::string>& words, std::size_t first, std::size_t n) {
  std::uint64_t h = 0x84222325cbf29ce4ULL;
  for (std::size_t i = first; i < first + n; ++i) {
    h = hash_combine(h, fnv1a64(words[i]));
  }
  return h;
}

struct UnionFind {
  std::vector<std::size_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

std::vector<std::uint64_t> shingle_set(std::string_view text, int n) {
  if (n < 1) throw ParameterError("shingle_set: n must be positive");
  const auto words = split_words(text);
  std::vector<std::uint64_t> out;
  const auto un = static_cast<std::size_t>(n);
  if (words.size() < un) {
    if (!words.empty()) out.push_back(hash_words(words, 0, words.size()));
  } else {
    for (std::size_t i = 0; i + un <= words.size(); ++i) out.push_back(hash_words(words, i, un));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

double jaccard(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::uint64_t> minhash_signature(std::span<const std::uint64_t> shingles,
                                             int num_hashes, std::uint64_t seed) {
  std::vector<std::uint64_t> sig(static_cast<std::size_t>(num_hashes),
                                 std::numeric_limits<std::uint64_t>::max());
  for (int k = 0; k < num_hashes; ++k) {
    const std::uint64_t salt = mix64(hash_combine(seed, static_cast<std::uint64_t>(k)));
    auto& slot = sig[static_cast<std::size_t>(k)];
    for (std::uint64_t s : shingles) slot = std::min(slot, mix64(s ^ salt));
  }
  return sig;
}

std::vector<Document> dedup(std::span<const Document> docs, const DedupConfig& cfg,
                            DedupReport* report) {
  if (cfg.num_hashes < 1 || cfg.bands < 1 || cfg.num_hashes % cfg.bands != 0) {
    throw ConfigError("dedup: num_hashes " + std::to_string(cfg.num_hashes) +
                      " must be a positive multiple of bands " + std::to_string(cfg.bands));
  }
  const std::size_t n = docs.size();
  const auto rows = static_cast<std::size_t>(cfg.num_hashes / cfg.bands);
  std::vector<std::vector<std::uint64_t>> sets(n);
  std::vector<std::vector<std::uint64_t>> sigs(n);
  for (std::size_t i = 0; i < n; ++i) {
    sets[i] = shingle_set(docs[i].text, cfg.shingle_words);
    sigs[i] = minhash_signature(sets[i], cfg.num_hashes, cfg.seed);
  }

  std::set<std::pair<std::size_t, std::size_t>> candidates;
  for (int band = 0; band < cfg.bands; ++band) {
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> buckets;
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t key = static_cast<std::uint64_t>(band);
      for (std::size_t r = 0; r < rows; ++r) {
        key = hash_combine(key, sigs[i][static_cast<std::size_t>(band) * rows + r]);
      }
      buckets[key].push_back(i);
    }
    for (const auto& [key, members] : buckets) {
      for (std::size_t a = 0; a < members.size(); ++a) {
        for (std::size_t b = a + 1; b < members.size(); ++b) {
          candidates.emplace(members[a], members[b]);
        }
      }
    }
  }

  UnionFind uf(n);
  std::vector<DedupPair> confirmed;
  for (const auto& [a, b] : candidates) {
    const double j = jaccard(sets[a], sets[b]);
    if (j > cfg.threshold) {
      uf.unite(a, b);
      confirmed.push_back({std::min(docs[a].id, docs[b].id), std::max(docs[a].id, docs[b].id), j});
    }
  }

  // Representative: lowest document id in each component.
  std::map<std::size_t, std::vector<std::size_t>> components;
  for (std::size_t i = 0; i < n; ++i) components[uf.find(i)].push_back(i);
  std::vector<bool> keep(n, false);
  std::vector<DedupGroup> groups;
  for (auto& [root, members] : components) {
    std::sort(members.begin(), members.end(),
              [&](std::size_t x, std::size_t y) { return docs[x].id < docs[y].id; });
    keep[members.front()] = true;
    if (members.size() > 1) {
      DedupGroup g;
      g.representative = docs[members.front()].id;
      for (auto m : members) g.members.push_back(docs[m].id);
      groups.push_back(std::move(g));
    }
  }
  std::sort(groups.begin(), groups.end(),
            [](const DedupGroup& a, const DedupGroup& b) { return a.representative < b.representative; });
  std::sort(confirmed.begin(), confirmed.end(), [](const DedupPair& x, const DedupPair& y) {
    return std::pair(x.a, x.b) < std::pair(y.a, y.b);
  });

  std::vector<Document> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (keep[i]) out.push_back(docs[i]);
  }
  if (report) {
    report->documents = static_cast<Index>(n);
    report->candidate_pairs = static_cast<Index>(candidates.size());
    report->confirmed = std::move(confirmed);
    report->groups = std::move(groups);
    report->retained.clear();
    for (const auto& d : out) report->retained.push_back(d.id);
  }
  return out;
}

std::string DedupReport::to_text() const {
  std::ostringstream os;
  os << "documents " << documents << "\n";
  os << "candidate_pairs " << candidate_pairs << "\n";
  os << "confirmed_pairs " << confirmed.size() << "\n";
  os << "groups " << groups.size() << "\n";
  os << "retained " << retained.size() << "\n";
  for (const auto& g : groups) {
    os << "group representative=" << g.representative << " members=";
    for (std::size_t i = 0; i < g.members.size(); ++i) os << (i ? "," : "") << g.members[i];
    os << "\n";
  }
  char buf[64];
  for (const auto& p : confirmed) {
    std::snprintf(buf, sizeof buf, "%.6f", p.jaccard);
    os << "pair " << p.a << " " << p.b << " jaccard=" << buf << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------

OverlapResult ngram_overlap(std::span<const Document> test, std::span<const Document> train,
                            int n) {
  if (n < 1) throw ParameterError("ngram_overlap: n must be positive");
  const auto un = static_cast<std::size_t>(n);
  auto collect = [&](std::span<const Document> docs) {
    std::set<std::vector<std::string>> grams;
    for (const auto& d : docs) {
      const auto w = split_words(d.text);
      for (std::size_t i = 0; i + un <= w.size(); ++i) {
        grams.emplace(w.begin() + static_cast<std::ptrdiff_t>(i),
                      w.begin() + static_cast<std::ptrdiff_t>(i + un));
      }
    }
    return grams;
  };
  OverlapResult r;
  const auto test_grams = collect(test);
  if (test_grams.empty()) {
    r.warning = "test side has no document with at least " + std::to_string(n) + " words";
    std::cerr << "warning: ngram_overlap: " << r.warning << "\n";
    return r;
  }
  const auto train_grams = collect(train);
  r.test_ngrams = static_cast<Index>(test_grams.size());
  for (const auto& g : test_grams) r.matched += train_grams.contains(g) ? 1 : 0;
  r.percentage = 100.0 * static_cast<double>(r.matched) / static_cast<double>(r.test_ngrams);
  return r;
}

// ---------------------------------------------------------------------------

MaskResult mask_for_mlm(std::span<const TokenId> ids, const std::vector<bool>& word_starts,
                        RngStream& rng, TokenId mask_id, TokenId random_vocab, double rate) {
  if (word_starts.size() != ids.size()) {
    throw DimensionError("mask_for_mlm: word_starts has " + std::to_string(word_starts.size()) +
                         " entries for " + std::to_string(ids.size()) + " tokens");
  }
  if (!(rate >= 0.0 && rate <= 1.0)) throw ParameterError("mask_for_mlm: rate outside [0, 1]");
  if (random_vocab < 1) throw ParameterError("mask_for_mlm: random_vocab must be positive");
  MaskResult r;
  r.ids.assign(ids.begin(), ids.end());
  r.labels.assign(ids.size(), kIgnoreLabel);

  // Word w covers tokens [bounds[w], bounds[w + 1]).
  std::vector<std::size_t> bounds;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (word_starts[i] || i == 0) bounds.push_back(i);
  }
  const std::size_t words = bounds.size();
  bounds.push_back(ids.size());
  if (words < 2) {
    r.warning = "fewer than 2 words; sequence left unmasked";
    std::cerr << "warning: mask_for_mlm: " << r.warning << "\n";
    return r;
  }

  const auto target = static_cast<std::size_t>(std::llround(rate * static_cast<double>(ids.size())));
  std::vector<std::size_t> order(words);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = words; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  std::vector<bool> word_taken(words, false);
  std::size_t covered = 0;
  for (std::size_t w : order) {
    if (covered >= target) break;
    std::size_t span = 1 + rng.below(3);
    span = std::min(span, words - w);
    // Shrink the span until it fits the budget and touches no chosen word.
    while (span > 0) {
      bool free = true;
      for (std::size_t k = w; k < w + span; ++k) free = free && !word_taken[k];
      const std::size_t tokens = bounds[w + span] - bounds[w];
      if (free && covered + tokens <= target) break;
      --span;
    }
    if (span == 0) continue;
    for (std::size_t k = w; k < w + span; ++k) word_taken[k] = true;
    for (std::size_t t = bounds[w]; t < bounds[w + span]; ++t) {
      r.labels[t] = ids[t];
      const double u = rng.uniform();
      if (u < 0.8) {
        r.ids[t] = mask_id;
      } else if (u < 0.9) {
        r.ids[t] = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(random_vocab)));
      }
      ++covered;
    }
  }
  r.masked = static_cast<Index>(covered);
  return r;
}

}  // namespace tp
