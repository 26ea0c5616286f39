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

#include "tp/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace tp {
namespace {

/// Reads fields from one JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  ~Fields() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.contains(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <class E>
E parse_enum(const std::string& where, const std::string& v,
             std::initializer_list<std::pair<const char*, E>> table) {
  std::string options;
  for (const auto& [name, e] : table) {
    if (v == name) return e;
    options += options.empty() ? name : std::string("|") + name;
  }
  throw ConfigError(where + ": '" + v + "' is not one of " + options);
}

}  // namespace

Json to_json(const ModelConfig& c) {
  return {{"architecture", c.architecture == Architecture::gpt2 ? "gpt2" : "bert"},
          {"layers", c.layers},
          {"hidden", c.hidden},
          {"heads", c.heads},
          {"max_seq", c.max_seq},
          {"vocab", c.vocab},
          {"ln_placement", c.ln_placement == LnPlacement::pre ? "pre" : "post"},
          {"dropout", c.dropout},
          {"init_std", c.init_std},
          {"ln_eps", c.ln_eps},
          {"vocab_pad_multiple", c.vocab_pad_multiple},
          {"vocab_pad_mp", c.vocab_pad_mp}};
}

ModelConfig model_config_from_json(const Json& j, ModelConfig c) {
  Fields f(j, "model");
  std::string arch = c.architecture == Architecture::gpt2 ? "gpt2" : "bert";
  std::string ln = c.ln_placement == LnPlacement::pre ? "pre" : "post";
  f.get("architecture", arch);
  f.get("ln_placement", ln);
  c.architecture = parse_enum<Architecture>(f.path("architecture"), arch,
                                            {{"gpt2", Architecture::gpt2}, {"bert", Architecture::bert}});
  c.ln_placement = parse_enum<LnPlacement>(f.path("ln_placement"), ln,
                                           {{"pre", LnPlacement::pre}, {"post", LnPlacement::post}});
  f.get("layers", c.layers);
  f.get("hidden", c.hidden);
  f.get("heads", c.heads);
  f.get("max_seq", c.max_seq);
  f.get("vocab", c.vocab);
  f.get("dropout", c.dropout);
  f.get("init_std", c.init_std);
  f.get("ln_eps", c.ln_eps);
  f.get("vocab_pad_multiple", c.vocab_pad_multiple);
  f.get("vocab_pad_mp", c.vocab_pad_mp);
  return c;
}

Json to_json(const TrainConfig& c) {
  return {{"global_batch", c.global_batch},
          {"micro_batch", c.micro_batch},
          {"lr", c.lr},
          {"warmup", c.warmup},
          {"total_iters", c.total_iters},
          {"min_lr", c.min_lr},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"seed", c.seed},
          {"checkpoint_interval", c.checkpoint_interval},
          {"activation_checkpointing", c.activation_checkpointing},
          {"mixed_precision", c.mixed_precision},
          {"consistency_check_interval", c.consistency_check_interval}};
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c) {
  Fields f(j, "train");
  f.get("global_batch", c.global_batch);
  f.get("micro_batch", c.micro_batch);
  f.get("lr", c.lr);
  f.get("warmup", c.warmup);
  f.get("total_iters", c.total_iters);
  f.get("min_lr", c.min_lr);
  f.get("weight_decay", c.weight_decay);
  f.get("clip_norm", c.clip_norm);
  f.get("beta1", c.beta1);
  f.get("beta2", c.beta2);
  f.get("adam_eps", c.adam_eps);
  f.get("seed", c.seed);
  f.get("checkpoint_interval", c.checkpoint_interval);
  f.get("activation_checkpointing", c.activation_checkpointing);
  f.get("mixed_precision", c.mixed_precision);
  f.get("consistency_check_interval", c.consistency_check_interval);
  return c;
}

Json to_json(const EvalSpec& c) {
  Json j = {{"window", c.window}, {"overlap", c.overlap}};
  j["original_tokens"] = c.original_tokens ? Json(*c.original_tokens) : Json(nullptr);
  return j;
}

EvalSpec eval_spec_from_json(const Json& j, EvalSpec c) {
  Fields f(j, "eval");
  f.get("window", c.window);
  f.get("overlap", c.overlap);
  if (const Json* t = f.child("original_tokens"); t && !t->is_null()) {
    if (!t->is_number_integer()) throw ConfigError("eval.original_tokens: expected an integer");
    c.original_tokens = t->get<Index>();
  }
  return c;
}

Json to_json(const DedupConfig& c) {
  return {{"threshold", c.threshold},
          {"shingle_words", c.shingle_words},
          {"num_hashes", c.num_hashes},
          {"bands", c.bands},
          {"seed", c.seed}};
}

DedupConfig dedup_config_from_json(const Json& j, DedupConfig c) {
  Fields f(j, "dedup");
  f.get("threshold", c.threshold);
  f.get("shingle_words", c.shingle_words);
  f.get("num_hashes", c.num_hashes);
  f.get("bands", c.bands);
  f.get("seed", c.seed);
  return c;
}

Json to_json(const RunConfig& c) {
  Json points = Json::array();
  for (const auto& p : c.bench.points) {
    points.push_back({{"layers", p.layers}, {"hidden", p.hidden}, {"heads", p.heads},
                      {"world", p.world}, {"mp", p.mp}});
  }
  return {{"world", {{"size", c.world.world_size}, {"mp", c.world.model_parallel_size}}},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"iters", c.iters},
          {"eval", to_json(c.eval)},
          {"dedup", to_json(c.dedup)},
          {"overlap_n", c.overlap_n},
          {"precision", c.precision == Precision::f64 ? "f64" : "f32"},
          {"data",
           {{"train", c.data.train},
            {"test", c.data.test},
            {"vocab", c.data.vocab},
            {"checkpoint", c.data.checkpoint},
            {"cloze", c.data.cloze},
            {"format", c.data.format == DocFormat::lines ? "lines" : "blank_line"}}},
          {"generate",
           {{"prompt", c.generate.prompt},
            {"max_new", c.generate.max_new},
            {"temperature", c.generate.temperature}}},
          {"bench",
           {{"mode", c.bench.mode},
            {"points", points},
            {"batch", c.bench.batch},
            {"seq", c.bench.seq},
            {"iters", c.bench.iters},
            {"vocab", c.bench.vocab}}},
          {"out", c.out}};
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  Fields f(j, "config");
  if (const Json* w = f.child("world")) {
    Fields g(*w, "world");
    g.get("size", c.world.world_size);
    g.get("mp", c.world.model_parallel_size);
  }
  if (const Json* m = f.child("model")) c.model = model_config_from_json(*m, c.model);
  if (const Json* t = f.child("train")) c.train = train_config_from_json(*t, c.train);
  f.get("iters", c.iters);
  if (const Json* e = f.child("eval")) c.eval = eval_spec_from_json(*e, c.eval);
  if (const Json* d = f.child("dedup")) c.dedup = dedup_config_from_json(*d, c.dedup);
  f.get("overlap_n", c.overlap_n);
  std::string precision = "f64";
  f.get("precision", precision);
  c.precision = parse_enum<Precision>("config.precision", precision,
                                      {{"f64", Precision::f64}, {"f32", Precision::f32}});
  if (const Json* d = f.child("data")) {
    Fields g(*d, "data");
    g.get("train", c.data.train);
    g.get("test", c.data.test);
    g.get("vocab", c.data.vocab);
    g.get("checkpoint", c.data.checkpoint);
    g.get("cloze", c.data.cloze);
    std::string fmt = "lines";
    g.get("format", fmt);
    c.data.format = parse_enum<DocFormat>(
        "data.format", fmt, {{"lines", DocFormat::lines}, {"blank_line", DocFormat::blank_line}});
  }
  if (const Json* g = f.child("generate")) {
    Fields h(*g, "generate");
    h.get("prompt", c.generate.prompt);
    h.get("max_new", c.generate.max_new);
    h.get("temperature", c.generate.temperature);
  }
  if (const Json* b = f.child("bench")) {
    Fields h(*b, "bench");
    h.get("mode", c.bench.mode);
    h.get("batch", c.bench.batch);
    h.get("seq", c.bench.seq);
    h.get("iters", c.bench.iters);
    h.get("vocab", c.bench.vocab);
    if (const Json* pts = h.child("points")) {
      if (!pts->is_array()) throw ConfigError("bench.points: expected an array");
      for (const auto& pj : *pts) {
        BenchPoint p;
        Fields k(pj, "bench.points[]");
        k.get("layers", p.layers);
        k.get("hidden", p.hidden);
        k.get("heads", p.heads);
        k.get("world", p.world);
        k.get("mp", p.mp);
        c.bench.points.push_back(p);
      }
    }
  }
  f.get("out", c.out);
  return c;
}

void RunConfig::validate() const {
  world.validate();
  model.validate(world.model_parallel_size);
  train.validate(world.data_parallel_size());
  eval.validate();
  if (iters < 0) throw ConfigError("iters must be non-negative");
  if (overlap_n < 1) throw ConfigError("overlap_n must be positive");
  if (!(dedup.threshold >= 0 && dedup.threshold <= 1)) {
    throw ConfigError("dedup.threshold must lie in [0, 1]");
  }
  if (dedup.shingle_words < 1 || dedup.num_hashes < 1 || dedup.bands < 1 ||
      dedup.num_hashes % dedup.bands != 0) {
    throw ConfigError("dedup: shingle_words, num_hashes and bands must be positive with bands "
                      "dividing num_hashes");
  }
  if (generate.max_new < 0) throw ConfigError("generate.max_new must be non-negative");
  if (!(generate.temperature >= 0)) throw ConfigError("generate.temperature must be >= 0");
  if (bench.mode != "strong" && bench.mode != "heads") {
    throw ConfigError("bench.mode must be strong or heads");
  }
  if (bench.batch < 1 || bench.seq < 1 || bench.iters < 1 || bench.vocab < 1) {
    throw ConfigError("bench batch, seq, iters and vocab must be positive");
  }
  for (const auto& p : bench.points) {
    comm::WorldSpec{p.world, p.mp}.validate();
    ModelConfig m = model;
    m.layers = p.layers;
    m.hidden = p.hidden;
    m.heads = p.heads;
    m.vocab = bench.vocab;
    m.max_seq = std::max(m.max_seq, bench.seq);
    m.validate(p.mp);
    if (bench.batch % (p.world / p.mp) != 0) {
      throw ConfigError("bench.batch " + std::to_string(bench.batch) +
                        " not divisible by data parallel size " + std::to_string(p.world / p.mp));
    }
  }
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path, const Overrides& o) {
  Json j = Json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot open config " + path->string());
    try {
      j = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + path->string() + ": " + e.what());
    }
  }
  RunConfig c = run_config_from_json(j);
  if (o.world) c.world.world_size = *o.world;
  if (o.mp) c.world.model_parallel_size = *o.mp;
  if (o.seed) c.train.seed = *o.seed;
  if (o.out) c.out = *o.out;
  c.validate();
  return c;
}

}  // namespace tp
