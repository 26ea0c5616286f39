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

// tpar: command-line entry point for training, evaluation, corpus tools and
// the scaling benchmark.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "tp/bench.hpp"
#include "tp/checkpoint.hpp"
#include "tp/config.hpp"
#include "tp/corpus.hpp"
#include "tp/evalx.hpp"
#include "tp/train.hpp"

namespace fs = std::filesystem;
using namespace tp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct Flags {
  std::string config;
  std::optional<int> world;
  std::optional<int> mp;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  // Command-specific overrides.
  std::optional<long> iters;
  std::optional<std::string> checkpoint;
  std::optional<std::string> train;
  std::optional<std::string> test;
  std::optional<std::string> prompt;
  std::optional<int> max_new;
  std::optional<double> temperature;
  std::optional<std::string> mode;
  std::optional<double> threshold;
};

RunConfig effective_config(const Flags& f) {
  std::optional<fs::path> path;
  if (!f.config.empty()) path = f.config;
  Overrides o{f.world, f.mp, f.seed, f.out};
  RunConfig c = load_run_config(path, o);
  if (f.iters) c.iters = *f.iters;
  if (f.checkpoint) c.data.checkpoint = *f.checkpoint;
  if (f.train) c.data.train = *f.train;
  if (f.test) c.data.test = *f.test;
  if (f.prompt) c.generate.prompt = *f.prompt;
  if (f.max_new) c.generate.max_new = *f.max_new;
  if (f.temperature) c.generate.temperature = *f.temperature;
  if (f.mode) c.bench.mode = *f.mode;
  if (f.threshold) c.dedup.threshold = *f.threshold;
  c.validate();
  return c;
}

void require(const std::string& value, const char* what) {
  if (value.empty()) throw ConfigError(std::string("missing ") + what);
}

fs::path out_dir(const RunConfig& c) {
  fs::path d(c.out);
  fs::create_directories(d);
  return d;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + p.string());
  f << s;
}

/// Text reports end with the effective config for provenance.
std::string with_config(std::string report, const RunConfig& c) {
  return report + "config " + to_json(c).dump() + "\n";
}

std::string join_text(const std::vector<Document>& docs) {
  std::string s;
  for (const auto& d : docs) {
    if (!s.empty()) s += '\n';
    s += d.text;
  }
  return s;
}

Tokenizer load_tokenizer(const RunConfig& c) {
  require(c.data.vocab, "data.vocab");
  return Tokenizer(Vocabulary::load(c.data.vocab));
}

/// Statically masked max_seq windows for encoder training. The mask token is
/// the first id past the tokenizer's vocabulary; windows that drew no target
/// are dropped.
DataLoader masked_data(const RunConfig& c, const Tokenizer& tok, const std::vector<TokenId>& ids) {
  const auto mask_id = static_cast<TokenId>(tok.vocab().size());
  if (c.model.vocab <= mask_id) {
    throw ConfigError("model.vocab " + std::to_string(c.model.vocab) +
                      " leaves no id for the mask token; bert needs at least " +
                      std::to_string(mask_id + 1));
  }
  RngStream rng(hash_combine(c.train.seed, fnv1a64("mlm")));
  std::vector<std::vector<TokenId>> inputs, labels;
  const auto seq = static_cast<std::size_t>(c.model.max_seq);
  for (std::size_t at = 0; at + seq <= ids.size(); at += seq) {
    const std::span<const TokenId> window(ids.data() + at, seq);
    MaskResult m = mask_for_mlm(window, tok.word_starts(window), rng, mask_id, mask_id);
    if (m.masked == 0) continue;
    inputs.push_back(std::move(m.ids));
    labels.push_back(std::move(m.labels));
  }
  return DataLoader::masked(std::move(inputs), std::move(labels), c.train.global_batch,
                            c.train.seed);
}

// ---------------------------------------------------------------------------

template <Real S>
int train_impl(const RunConfig& c) {
  require(c.data.train, "data.train");
  const Tokenizer tok = load_tokenizer(c);
  if (c.model.vocab < tok.vocab().size()) {
    throw ConfigError("model.vocab " + std::to_string(c.model.vocab) +
                      " does not cover the vocabulary of " + std::to_string(tok.vocab().size()));
  }
  const auto ids = tok.tokenize(join_text(read_documents(c.data.train, c.data.format)));
  const DataLoader data = c.model.architecture == Architecture::bert
                              ? masked_data(c, tok, ids)
                              : DataLoader(chunk_stream(ids, c.model.max_seq), c.train.global_batch,
                                           c.train.seed);

  const fs::path dir = out_dir(c);
  write_text(dir / "config.json", to_json(c).dump(2) + "\n");
  std::ofstream log(dir / "metrics.jsonl");
  if (!log) throw IoError("cannot write " + (dir / "metrics.jsonl").string());
  const Json meta_base = {{"config", to_json(c)}};

  TrainHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) {
    log << m.to_json().dump() << "\n";
    log.flush();
  };
  hooks.on_checkpoint = [&](long iter, const auto& full) {
    Json meta = meta_base;
    meta["iteration"] = iter;
    char name[32];
    std::snprintf(name, sizeof name, "ckpt_%06ld.tpck", iter);
    write_checkpoint(dir / name, c.model, full, meta);
    write_checkpoint(dir / "final.tpck", c.model, full, meta);
  };
  comm::World world(c.world);
  const TrainResult r = train<S>(world, c.model, c.train, data, c.run_iters(), hooks);
  if (!r.steps.empty()) {
    std::cout << "trained " << r.steps.size() << " iterations, final loss "
              << r.steps.back().loss << "\n";
  }
  std::cout << world.stats_report();
  return kExitOk;
}

struct Loaded {
  Checkpoint ck;
  comm::WorldSpec spec;
};

Loaded load_for_eval(const RunConfig& c) {
  require(c.data.checkpoint, "data.checkpoint");
  if (!fs::exists(c.data.checkpoint)) {
    throw IoError("checkpoint " + c.data.checkpoint + " does not exist");
  }
  Loaded l{read_checkpoint(c.data.checkpoint), {c.world.model_parallel_size, c.world.model_parallel_size}};
  l.ck.model.validate(l.spec.model_parallel_size);
  return l;
}

/// Runs fn(model) on every MP rank of a single replica; returns rank 0's value.
template <Real S, class Fn>
auto with_model(const Loaded& l, Fn&& fn) {
  comm::World world(l.spec);
  std::invoke_result_t<Fn, Model<S>&> out{};
  world.run([&](int rank) {
    Model<S> model(l.ck.model, ParallelContext::for_rank(world, rank, 0));
    model.load_full_parameters(l.ck.tensors);
    model.set_training(false);
    auto v = fn(model);
    if (rank == 0) out = std::move(v);
  });
  return out;
}

template <Real S>
int eval_ppl_impl(const RunConfig& c) {
  require(c.data.test, "data.test");
  const Loaded l = load_for_eval(c);
  if (c.eval.window > l.ck.model.max_seq) {
    throw ConfigError("eval.window " + std::to_string(c.eval.window) +
                      " exceeds the checkpoint's max_seq " + std::to_string(l.ck.model.max_seq));
  }
  const Tokenizer tok = load_tokenizer(c);
  const auto ids = tok.tokenize(join_text(read_documents(c.data.test, c.data.format)));
  const PerplexityReport rep = with_model<S>(l, [&](Model<S>& m) {
    ModelScorer<S> scorer(m);
    return perplexity(scorer, ids, c.eval, c.data.test);
  });
  const std::string text = with_config(rep.to_text(), c);
  write_text(out_dir(c) / "eval_ppl.txt", text);
  std::cout << text;
  return kExitOk;
}

std::vector<ClozeExample> read_cloze(const RunConfig& c, const Tokenizer& tok) {
  require(c.data.cloze, "data.cloze");
  std::ifstream in(c.data.cloze);
  if (!in) throw IoError("cannot open " + c.data.cloze);
  std::vector<ClozeExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw FormatError(c.data.cloze + ":" + std::to_string(lineno) +
                        ": expected context<TAB>answer");
    }
    out.push_back({tok.tokenize(line.substr(0, tab)), tok.tokenize(line.substr(tab + 1))});
  }
  return out;
}

template <Real S>
int eval_cloze_impl(const RunConfig& c) {
  const Loaded l = load_for_eval(c);
  const Tokenizer tok = load_tokenizer(c);
  const auto examples = read_cloze(c, tok);
  const ClozeReport rep = with_model<S>(l, [&](Model<S>& m) {
    ModelScorer<S> scorer(m);
    return cloze_accuracy(scorer, examples);
  });
  const std::string text = with_config(rep.to_text(), c);
  write_text(out_dir(c) / "eval_cloze.txt", text);
  std::cout << text;
  return kExitOk;
}

template <Real S>
int generate_impl(const RunConfig& c) {
  const Loaded l = load_for_eval(c);
  const Tokenizer tok = load_tokenizer(c);
  const auto prompt = tok.tokenize(c.generate.prompt);
  const auto ids = with_model<S>(l, [&](Model<S>& m) {
    return m.generate(prompt, c.generate.max_new, c.generate.temperature, c.train.seed);
  });
  std::vector<TokenId> shown;
  for (TokenId id : ids) {
    if (id < tok.vocab().size()) shown.push_back(id);
  }
  const std::string text = tok.detokenize(shown);
  write_text(out_dir(c) / "generate.txt", text + "\n");
  std::cout << text << "\n";
  return kExitOk;
}

int dedup_cmd(const RunConfig& c) {
  require(c.data.train, "data.train");
  const auto docs = read_documents(c.data.train, c.data.format);
  DedupReport rep;
  const auto kept = dedup(docs, c.dedup, &rep);
  const fs::path dir = out_dir(c);
  write_documents(dir / "dedup.txt", kept, c.data.format);
  const std::string text = with_config(rep.to_text(), c);
  write_text(dir / "dedup_report.txt", text);
  std::cout << text;
  return kExitOk;
}

int overlap_cmd(const RunConfig& c) {
  require(c.data.train, "data.train");
  require(c.data.test, "data.test");
  const auto r = ngram_overlap(read_documents(c.data.test, c.data.format),
                               read_documents(c.data.train, c.data.format), c.overlap_n);
  char pct[32];
  std::snprintf(pct, sizeof pct, "%.6f", r.percentage);
  std::string text = "n " + std::to_string(c.overlap_n) + "\ntest_ngrams " +
                     std::to_string(r.test_ngrams) + "\nmatched " + std::to_string(r.matched) +
                     "\npercentage " + pct + "\n";
  if (!r.warning.empty()) text += "warning " + r.warning + "\n";
  text = with_config(text, c);
  write_text(out_dir(c) / "overlap.txt", text);
  std::cout << text;
  return kExitOk;
}

int bench_cmd(const RunConfig& c) {
  const BenchReport rep = run_bench(c);
  const fs::path dir = out_dir(c);
  Json j = rep.to_json();
  j["config"] = to_json(c);
  write_text(dir / "bench.json", j.dump(2) + "\n");
  const std::string text = with_config(rep.to_text(), c);
  write_text(dir / "bench.txt", text);
  std::cout << text;
  if (!rep.all_match()) {
    std::cerr << "error: measured communication differs from the analytic count\n";
    return kExitRuntime;
  }
  return kExitOk;
}

template <template <class> class Impl>
int dispatch(const RunConfig& c) {
  return c.precision == Precision::f32 ? Impl<float>::run(c) : Impl<double>::run(c);
}

template <class S> struct Train { static int run(const RunConfig& c) { return train_impl<S>(c); } };
template <class S> struct EvalPpl { static int run(const RunConfig& c) { return eval_ppl_impl<S>(c); } };
template <class S> struct EvalCloze { static int run(const RunConfig& c) { return eval_cloze_impl<S>(c); } };
template <class S> struct Generate { static int run(const RunConfig& c) { return generate_impl<S>(c); } };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tensor model parallel training and evaluation"};
  app.require_subcommand(1);
  Flags f;
  app.add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--world", f.world, "number of simulated workers");
  app.add_option("--mp", f.mp, "model parallel size");
  app.add_option("--seed", f.seed, "global seed");
  app.add_option("--out", f.out, "output directory");

  auto* train = app.add_subcommand("train", "hybrid-parallel training");
  train->add_option("--iters", f.iters, "iterations to run");
  train->add_option("--data", f.train, "training documents");
  auto* ppl = app.add_subcommand("eval-ppl", "sliding-window perplexity");
  auto* cloze = app.add_subcommand("eval-cloze", "teacher-forced cloze accuracy");
  auto* gen = app.add_subcommand("generate", "sample from a checkpoint");
  gen->add_option("--prompt", f.prompt);
  gen->add_option("--max-new", f.max_new);
  gen->add_option("--temperature", f.temperature);
  for (auto* sub : {ppl, cloze, gen}) sub->add_option("--checkpoint", f.checkpoint);
  ppl->add_option("--test", f.test);
  auto* dd = app.add_subcommand("dedup", "MinHash-LSH near-duplicate removal");
  dd->add_option("--data", f.train);
  dd->add_option("--threshold", f.threshold);
  auto* ov = app.add_subcommand("overlap", "test-set n-gram overlap audit");
  ov->add_option("--data", f.train);
  ov->add_option("--test", f.test);
  auto* bench = app.add_subcommand("bench", "model-parallel scaling benchmark");
  bench->add_option("--mode", f.mode)->check(CLI::IsMember({"strong", "heads"}));
  // Global flags are accepted after the subcommand too.
  app.fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  RunConfig cfg;
  try {
    cfg = effective_config(f);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    if (train->parsed()) return dispatch<Train>(cfg);
    if (ppl->parsed()) return dispatch<EvalPpl>(cfg);
    if (cloze->parsed()) return dispatch<EvalCloze>(cfg);
    if (gen->parsed()) return dispatch<Generate>(cfg);
    if (dd->parsed()) return dedup_cmd(cfg);
    if (ov->parsed()) return overlap_cmd(cfg);
    if (bench->parsed()) return bench_cmd(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
