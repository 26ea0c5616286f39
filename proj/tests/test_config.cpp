#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "tp/config.hpp"

namespace tp {
namespace {

TEST(Config, DefaultsCarryPublishedTrainingValues) {
  const TrainConfig t;
  EXPECT_EQ(t.lr, 1.5e-4);
  EXPECT_EQ(t.warmup, 3000);
  EXPECT_EQ(t.total_iters, 300000);
  EXPECT_EQ(t.min_lr, 1e-5);
  EXPECT_EQ(t.weight_decay, 0.01);
  EXPECT_EQ(t.clip_norm, 1.0);
  const EvalSpec e;
  EXPECT_EQ(e.window, 1024);
  EXPECT_EQ(e.overlap, 32);
  EXPECT_EQ(DedupConfig{}.threshold, 0.7);
}

TEST(Config, RunConfigRoundTrips) {
  RunConfig c;
  c.world = {4, 2};
  c.model.architecture = Architecture::bert;
  c.model.ln_placement = LnPlacement::post;
  c.model.layers = 3;
  c.train.global_batch = 6;
  c.train.seed = 99;
  c.eval.original_tokens = 1234;
  c.precision = Precision::f32;
  c.data.format = DocFormat::blank_line;
  c.bench.mode = "heads";
  c.bench.points.push_back({2, 64, 8, 4, 2});
  const Json j = to_json(c);
  const RunConfig back = run_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.world.model_parallel_size, 2);
  EXPECT_EQ(*back.eval.original_tokens, 1234);
}

TEST(Config, UnknownKeysAndBadTypesRejected) {
  EXPECT_THROW(run_config_from_json(Json{{"modle", Json::object()}}), ConfigError);
  EXPECT_THROW(run_config_from_json(Json{{"model", {{"hiden", 4}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(Json{{"model", {{"hidden", "big"}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(Json{{"model", {{"architecture", "t5"}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(Json{{"precision", "f16"}}), ConfigError);
  EXPECT_THROW(run_config_from_json(Json{{"bench", {{"points", 3}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(Json::array()), ConfigError);
}

TEST(Config, ValidationCatchesUnshardableWorlds) {
  RunConfig c;
  c.world = {3, 3};  // heads 4 not divisible by 3
  EXPECT_THROW(c.validate(), ConfigError);
  c.world = {4, 3};
  EXPECT_THROW(c.validate(), ConfigError);
  c.world = {4, 2};
  c.train.global_batch = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c.train.global_batch = 4;
  EXPECT_NO_THROW(c.validate());
  c.train.mixed_precision = true;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, LoadAppliesOverrides) {
  const auto path = std::filesystem::temp_directory_path() / "tp_config_test.json";
  {
    std::ofstream out(path);
    out << R"({"world": {"size": 2, "mp": 2}, "train": {"seed": 5}, "out": "a"})";
  }
  const RunConfig plain = load_run_config(path, {});
  EXPECT_EQ(plain.world.world_size, 2);
  EXPECT_EQ(plain.train.seed, 5u);
  Overrides o;
  o.world = 4;
  o.mp = 4;
  o.seed = 8;
  o.out = "b";
  const RunConfig over = load_run_config(path, o);
  EXPECT_EQ(over.world.world_size, 4);
  EXPECT_EQ(over.world.model_parallel_size, 4);
  EXPECT_EQ(over.train.seed, 8u);
  EXPECT_EQ(over.out, "b");
  {
    std::ofstream out(path);
    out << "{ not json";
  }
  EXPECT_THROW(load_run_config(path, {}), ConfigError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_run_config(path, {}), ConfigError);
  EXPECT_NO_THROW(load_run_config(std::nullopt, {}));
}

}  // namespace
}  // namespace tp
