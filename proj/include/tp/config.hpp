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

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tp/comm.hpp"
#include "tp/corpus.hpp"
#include "tp/evalx.hpp"
#include "tp/model.hpp"
#include "tp/train.hpp"

namespace tp {

using Json = nlohmann::ordered_json;

Json to_json(const ModelConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const EvalSpec& c);
Json to_json(const DedupConfig& c);

/// Strict readers: unknown keys and wrong types raise ConfigError. Missing
/// keys keep the defaults in `base`.
ModelConfig model_config_from_json(const Json& j, ModelConfig base = {});
TrainConfig train_config_from_json(const Json& j, TrainConfig base = {});
EvalSpec eval_spec_from_json(const Json& j, EvalSpec base = {});
DedupConfig dedup_config_from_json(const Json& j, DedupConfig base = {});

enum class Precision { f32, f64 };

struct BenchPoint {
  int layers = 2;
  int hidden = 32;
  int heads = 4;
  int world = 1;
  int mp = 1;
};

struct RunConfig {
  comm::WorldSpec world{1, 1};
  ModelConfig model;
  TrainConfig train;
  /// Iterations to run; 0 means train.total_iters.
  long iters = 0;
  EvalSpec eval;
  DedupConfig dedup;
  int overlap_n = 8;
  Precision precision = Precision::f64;

  struct Data {
    std::string train;
    std::string test;
    std::string vocab;
    std::string checkpoint;
    std::string cloze;
    DocFormat format = DocFormat::lines;
  } data;

  struct Generate {
    std::string prompt;
    int max_new = 32;
    double temperature = 0.0;
  } generate;

  struct Bench {
    std::string mode = "strong";  // strong | heads
    std::vector<BenchPoint> points;
    int batch = 2;
    int seq = 8;
    int iters = 1;
    int vocab = 100;
  } bench;

  std::string out = ".";

  long run_iters() const { return iters > 0 ? iters : train.total_iters; }
  /// Checks everything that can be checked before any worker starts.
  void validate() const;
};

Json to_json(const RunConfig& c);
RunConfig run_config_from_json(const Json& j);

/// Flag values that override the file.
struct Overrides {
  std::optional<int> world;
  std::optional<int> mp;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

/// File (if given) merged with overrides and validated.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path, const Overrides& o);

}  // namespace tp
