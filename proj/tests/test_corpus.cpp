#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <set>

#include "tp/corpus.hpp"

namespace tp {
namespace {

Tokenizer small_tokenizer() {
  const std::vector<std::string> toks = {"the", " the", "th", "e", " ", "cat", " cat", "s", ".", " sat"};
  return Tokenizer(Vocabulary::from_tokens(toks));
}

TEST(Vocabulary, ParsesEscapesAndAppendsBytes) {
  const Vocabulary v = Vocabulary::parse("a\n\\sb\nx\\\\y\n\\n\n");
  EXPECT_EQ(v.listed(), 4);
  EXPECT_EQ(v.size(), 4 + 256);
  EXPECT_EQ(v.token(1), " b");
  EXPECT_EQ(v.token(2), "x\\y");
  EXPECT_EQ(v.token(3), "\n");
  EXPECT_EQ(*v.find("<0x41>"), v.byte_token('A'));
  EXPECT_EQ(Vocabulary::parse(v.serialize()).serialize(), v.serialize());
}

TEST(Vocabulary, ListedByteTokensKeepTheirIds) {
  const Vocabulary v = Vocabulary::parse("<0x20>\nab\n");
  EXPECT_EQ(v.byte_token(' '), 0);
  EXPECT_EQ(v.size(), 2 + 255);
}

TEST(Vocabulary, MalformedInputsThrow) {
  EXPECT_THROW(Vocabulary::parse("a\n\nb\n"), FormatError);
  EXPECT_THROW(Vocabulary::parse("a\na\n"), FormatError);
  EXPECT_THROW(Vocabulary::parse("a\\q\n"), FormatError);
  EXPECT_THROW(Vocabulary::parse("a\\"), FormatError);
  EXPECT_THROW(Vocabulary::load("/nonexistent/vocab.txt"), IoError);
  const Vocabulary v = Vocabulary::parse("a\n");
  EXPECT_THROW(v.token(-1), IndexError);
  EXPECT_THROW(v.token(v.size()), IndexError);
}

TEST(Tokenizer, EmptyStringGivesNoTokens) {
  EXPECT_TRUE(small_tokenizer().tokenize("").empty());
}

TEST(Tokenizer, GreedyLongestMatch) {
  const Tokenizer t = small_tokenizer();
  const auto& v = t.vocab();
  // Worked by hand: "the" | " cat" | "s" | " sat" | "."
  const auto ids = t.tokenize("the cats sat.");
  const std::vector<TokenId> want = {*v.find("the"), *v.find(" cat"), *v.find("s"), *v.find(" sat"),
                                     *v.find(".")};
  EXPECT_EQ(ids, want);
  // Byte fallback for anything outside the list.
  const auto z = t.tokenize("thz");
  EXPECT_EQ(z, (std::vector<TokenId>{*v.find("th"), v.byte_token('z')}));
}

TEST(Tokenizer, FixtureTokenCount) {
  const Tokenizer t = small_tokenizer();
  // the| the| cat| sat|.| the| cat|s| sat|.
  EXPECT_EQ(t.tokenize("the the cat sat. the cats sat.").size(), 10u);
}

TEST(Tokenizer, RoundTripIncludingNonAscii) {
  const Tokenizer t = small_tokenizer();
  const std::string text =
      "The cat sat on the mat.\nThe cats, 3 of them, sat\ttogether; caf\xc3\xa9 \xe2\x82\xac!";
  EXPECT_EQ(t.detokenize(t.tokenize(text)), text);
}

TEST(Tokenizer, WordStarts) {
  const Tokenizer t = small_tokenizer();
  const auto ids = t.tokenize("the cats sat.");
  const std::vector<bool> want = {true, true, false, true, false};
  EXPECT_EQ(t.word_starts(ids), want);
}

TEST(Documents, LineAndBlankLineFormats) {
  const auto a = parse_documents("one\ntwo\r\n\nthree\n", DocFormat::lines);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a[1].text, "two");
  EXPECT_EQ(a[2].id, 2);
  const auto b = parse_documents("p1 l1\np1 l2\n\n\np2\n", DocFormat::blank_line);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0].text, "p1 l1\np1 l2");
  EXPECT_EQ(parse_documents(format_documents(b, DocFormat::blank_line), DocFormat::blank_line)[0].text,
            b[0].text);
  EXPECT_THROW(format_documents(b, DocFormat::lines), FormatError);
}

TEST(Documents, FileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "tp_corpus_test";
  std::filesystem::create_directories(dir);
  const std::vector<Document> docs = {{0, "alpha beta"}, {1, "gamma"}};
  write_documents(dir / "d.txt", docs, DocFormat::lines);
  const auto back = read_documents(dir / "d.txt", DocFormat::lines);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].text, "gamma");
  std::filesystem::remove_all(dir);
  EXPECT_THROW(read_documents(dir / "missing.txt", DocFormat::lines), IoError);
}

TEST(Documents, FilterShort) {
  const Tokenizer t = small_tokenizer();
  const std::vector<Document> docs = {{0, "the cat"}, {1, "the cat sat. the cat sat."}};
  const auto kept = filter_short(docs, t, 4);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].id, 1);
}

// ---------------------------------------------------------------------------

/// Documents built from globally unique words so shingle overlap is exact:
/// with 104 words (100 five-word shingles) a shared prefix of s + 4 words
/// gives J = s / (200 - s).
class Planter {
 public:
  std::vector<std::string> fresh(int n) {
    std::vector<std::string> w;
    for (int i = 0; i < n; ++i) w.push_back("w" + std::to_string(next_++));
    return w;
  }
  static std::string join(const std::vector<std::string>& w) {
    std::string s;
    for (const auto& x : w) s += (s.empty() ? "" : " ") + x;
    return s;
  }
  /// A pair with `shared` common shingles.
  std::pair<std::string, std::string> pair(int shared) {
    auto a = fresh(104);
    auto b = std::vector<std::string>(a.begin(), a.begin() + shared + 4);
    for (auto& x : fresh(104 - shared - 4)) b.push_back(x);
    return {join(a), join(b)};
  }

 private:
  long next_ = 0;
};

std::set<std::int64_t> exact_oracle(const std::vector<Document>& docs, double threshold) {
  // All pairs, exact Jaccard, union by lowest id.
  std::vector<std::int64_t> rep(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) rep[i] = static_cast<std::int64_t>(i);
  std::function<std::int64_t(std::int64_t)> find = [&](std::int64_t x) {
    return rep[static_cast<std::size_t>(x)] == x ? x : find(rep[static_cast<std::size_t>(x)]);
  };
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto si = shingle_set(docs[i].text, 5);
    for (std::size_t j = i + 1; j < docs.size(); ++j) {
      if (jaccard(si, shingle_set(docs[j].text, 5)) > threshold) {
        const auto a = find(static_cast<std::int64_t>(i)), b = find(static_cast<std::int64_t>(j));
        rep[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
      }
    }
  }
  std::set<std::int64_t> keep;
  for (std::size_t i = 0; i < docs.size(); ++i) keep.insert(docs[static_cast<std::size_t>(find(static_cast<std::int64_t>(i)))].id);
  return keep;
}

TEST(Jaccard, Basics) {
  const std::vector<std::uint64_t> a = {1, 2, 3, 4}, b = {3, 4, 5, 6}, e;
  EXPECT_DOUBLE_EQ(jaccard(a, b), 2.0 / 6.0);
  EXPECT_DOUBLE_EQ(jaccard(a, a), 1.0);
  EXPECT_DOUBLE_EQ(jaccard(e, e), 1.0);
  EXPECT_DOUBLE_EQ(jaccard(a, e), 0.0);
  EXPECT_EQ(shingle_set("a b c", 5).size(), 1u);
  EXPECT_EQ(shingle_set("a b c d e f", 5).size(), 2u);
  EXPECT_TRUE(shingle_set("   ", 5).empty());
}

TEST(Dedup, IdenticalCollapseDisjointKept) {
  Planter p;
  const std::string a = Planter::join(p.fresh(30));
  const std::string b = Planter::join(p.fresh(30));
  const std::vector<Document> docs = {{4, a}, {2, a}, {7, b}};
  DedupReport rep;
  const auto out = dedup(docs, DedupConfig{}, &rep);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].id, 2);
  EXPECT_EQ(out[1].id, 7);
  ASSERT_EQ(rep.groups.size(), 1u);
  EXPECT_EQ(rep.groups[0].representative, 2);
  EXPECT_EQ(rep.groups[0].members, (std::vector<std::int64_t>{2, 4}));
  ASSERT_EQ(rep.confirmed.size(), 1u);
  EXPECT_DOUBLE_EQ(rep.confirmed[0].jaccard, 1.0);
  EXPECT_NE(rep.to_text().find("group representative=2 members=2,4"), std::string::npos);
}

TEST(Dedup, PlantedPairsMatchExactOracle) {
  Planter p;
  std::vector<Document> docs;
  std::set<std::int64_t> high_dupes;
  std::int64_t id = 0;
  for (int k = 0; k < 20; ++k) {
    auto [a, b] = p.pair(89);  // J = 0.80
    docs.push_back({id++, a});
    high_dupes.insert(id);
    docs.push_back({id++, b});
    auto [c, d] = p.pair(67);  // J = 0.50
    docs.push_back({id++, c});
    docs.push_back({id++, d});
  }
  for (int k = 0; k < 20; ++k) docs.push_back({id++, Planter::join(p.fresh(60))});
  const auto out = dedup(docs, DedupConfig{});
  std::set<std::int64_t> got;
  for (const auto& d : out) got.insert(d.id);
  EXPECT_EQ(got, exact_oracle(docs, 0.7));
  for (auto dropped : high_dupes) EXPECT_FALSE(got.contains(dropped));
  EXPECT_EQ(got.size(), docs.size() - high_dupes.size());
}

TEST(Dedup, BandingRecallNearThreshold) {
  // Pairs just above 0.7 (J = 84/116 = 0.724): every one must be caught.
  Planter p;
  std::vector<Document> docs;
  std::int64_t id = 0;
  const int pairs = 300;
  for (int k = 0; k < pairs; ++k) {
    auto [a, b] = p.pair(84);
    docs.push_back({id++, a});
    docs.push_back({id++, b});
  }
  DedupReport rep;
  dedup(docs, DedupConfig{}, &rep);
  EXPECT_GE(static_cast<double>(rep.confirmed.size()) / pairs, 0.99);
}

TEST(Dedup, OrderIndependent) {
  Planter p;
  std::vector<Document> docs;
  std::int64_t id = 0;
  for (int k = 0; k < 10; ++k) {
    auto [a, b] = p.pair(95);
    docs.push_back({id++, a});
    docs.push_back({id++, b});
    docs.push_back({id++, b + " tail"});
  }
  auto ids = [](const std::vector<Document>& v) {
    std::set<std::int64_t> s;
    for (const auto& d : v) s.insert(d.id);
    return s;
  };
  const auto base = ids(dedup(docs, DedupConfig{}));
  std::vector<Document> shuffled = docs;
  std::reverse(shuffled.begin(), shuffled.end());
  std::rotate(shuffled.begin(), shuffled.begin() + 7, shuffled.end());
  EXPECT_EQ(ids(dedup(shuffled, DedupConfig{})), base);
}

TEST(Dedup, RejectsBadBanding) {
  DedupConfig c;
  c.bands = 7;
  EXPECT_THROW(dedup(std::vector<Document>{}, c), ConfigError);
}

// ---------------------------------------------------------------------------

TEST(Overlap, IdenticalAndDisjoint) {
  const std::vector<Document> a = {{0, "a b c d e f g h i j"}};
  const std::vector<Document> b = {{0, "k l m n o p q r s t"}};
  EXPECT_DOUBLE_EQ(ngram_overlap(a, a).percentage, 100.0);
  EXPECT_DOUBLE_EQ(ngram_overlap(a, b).percentage, 0.0);
}

TEST(Overlap, PlantedThirtyPercent) {
  // 17 words -> 10 distinct 8-grams; train holds words 0..9 -> 3 of them.
  const std::vector<Document> test = {{0, "t0 t1 t2 t3 t4 t5 t6 t7 t8 t9 t10 t11 t12 t13 t14 t15 t16"}};
  const std::vector<Document> train = {{0, "x t0 t1 t2 t3 t4 t5 t6 t7 t8 t9 y"}, {1, "t10 t11 t12"}};
  const auto r = ngram_overlap(test, train);
  EXPECT_EQ(r.test_ngrams, 10);
  EXPECT_EQ(r.matched, 3);
  EXPECT_DOUBLE_EQ(r.percentage, 30.0);
}

TEST(Overlap, NgramsDoNotSpanDocuments) {
  const std::vector<Document> test = {{0, "a b c d e f g h"}};
  const std::vector<Document> train = {{0, "a b c d"}, {1, "e f g h"}};
  EXPECT_DOUBLE_EQ(ngram_overlap(test, train).percentage, 0.0);
}

TEST(Overlap, ShortTestWarns) {
  const std::vector<Document> test = {{0, "too short"}};
  const auto r = ngram_overlap(test, test);
  EXPECT_EQ(r.percentage, 0.0);
  EXPECT_FALSE(r.warning.empty());
}

TEST(Overlap, MonotoneInTrainingSet) {
  const std::vector<Document> test = {{0, "t0 t1 t2 t3 t4 t5 t6 t7 t8 t9 t10 t11"}};
  std::vector<Document> train = {{0, "t0 t1 t2 t3 t4 t5 t6 t7 t8"}};
  double last = ngram_overlap(test, train).percentage;
  for (std::string extra : {"t2 t3 t4 t5 t6 t7 t8 t9 t10", "q r s", "t4 t5 t6 t7 t8 t9 t10 t11"}) {
    train.push_back({static_cast<std::int64_t>(train.size()), extra});
    const double now = ngram_overlap(test, train).percentage;
    EXPECT_GE(now, last);
    last = now;
  }
  EXPECT_DOUBLE_EQ(last, 100.0);
}

// ---------------------------------------------------------------------------

struct Stream {
  std::vector<TokenId> ids;
  std::vector<bool> starts;
};

Stream word_stream(std::size_t tokens, std::uint64_t seed) {
  RngStream rng(seed);
  Stream s;
  while (s.ids.size() < tokens) {
    const auto len = 1 + rng.below(3);
    for (std::size_t k = 0; k < len && s.ids.size() < tokens; ++k) {
      s.ids.push_back(static_cast<TokenId>(10 + rng.below(990)));
      s.starts.push_back(k == 0);
    }
  }
  return s;
}

TEST(Masking, ZeroRateLeavesInput) {
  const Stream s = word_stream(200, 1);
  RngStream rng(2);
  const auto r = mask_for_mlm(s.ids, s.starts, rng, 3, 1000, 0.0);
  EXPECT_EQ(r.ids, s.ids);
  EXPECT_TRUE(std::all_of(r.labels.begin(), r.labels.end(), [](TokenId t) { return t == kIgnoreLabel; }));
}

TEST(Masking, SeededAndWholeWord) {
  const Stream s = word_stream(500, 3);
  RngStream r1(5), r2(5);
  const auto a = mask_for_mlm(s.ids, s.starts, r1, 3, 1000);
  const auto b = mask_for_mlm(s.ids, s.starts, r2, 3, 1000);
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_EQ(a.labels, b.labels);
  for (std::size_t i = 0; i < s.ids.size(); ++i) {
    if (a.labels[i] != kIgnoreLabel) {
      EXPECT_EQ(a.labels[i], s.ids[i]);
    }
    if (a.ids[i] != s.ids[i]) {
      EXPECT_NE(a.labels[i], kIgnoreLabel);
    }
    // A word is either fully masked or untouched.
    if (i > 0 && !s.starts[i]) {
      EXPECT_EQ(a.labels[i] == kIgnoreLabel, a.labels[i - 1] == kIgnoreLabel);
    }
  }
}

TEST(Masking, RateAndReplacementSplitOnLongStream) {
  const Stream s = word_stream(100000, 7);
  RngStream rng(8);
  const auto r = mask_for_mlm(s.ids, s.starts, rng, 3, 1000);
  const double frac = static_cast<double>(r.masked) / static_cast<double>(s.ids.size());
  EXPECT_NEAR(frac, 0.15, 0.02);
  Index mask = 0, same = 0, masked = 0;
  for (std::size_t i = 0; i < s.ids.size(); ++i) {
    if (r.labels[i] == kIgnoreLabel) continue;
    ++masked;
    mask += r.ids[i] == 3;
    same += r.ids[i] == s.ids[i];
  }
  EXPECT_EQ(masked, r.masked);
  EXPECT_NEAR(static_cast<double>(mask) / masked, 0.8, 0.02);
  // Unchanged: the 10% keep share plus random draws that hit the original.
  EXPECT_NEAR(static_cast<double>(same) / masked, 0.1, 0.02);
}

TEST(Masking, TooFewWordsWarns) {
  const std::vector<TokenId> ids = {5, 6, 7};
  const std::vector<bool> starts = {true, false, false};
  RngStream rng(1);
  const auto r = mask_for_mlm(ids, starts, rng, 3, 100);
  EXPECT_EQ(r.ids, ids);
  EXPECT_FALSE(r.warning.empty());
  EXPECT_THROW(mask_for_mlm(ids, std::vector<bool>{true}, rng, 3, 100), DimensionError);
}

}  // namespace
}  // namespace tp
