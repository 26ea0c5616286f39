#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "tp/checkpoint.hpp"

namespace tp {
namespace {

namespace fs = std::filesystem;

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("tp_ckpt_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

ModelConfig toy() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 32;
  c.heads = 4;
  c.max_seq = 16;
  c.vocab = 40;
  c.ln_placement = LnPlacement::post;
  return c;
}

std::vector<std::pair<std::string, Mat<double>>> full_params(const ModelConfig& cfg, std::uint64_t seed) {
  Model<double> m(cfg, ParallelContext::serial());
  m.init_weights(seed);
  return m.gather_full_parameters();
}

TEST_F(CheckpointTest, RoundTripStoresFloat32) {
  const ModelConfig cfg = toy();
  const auto params = full_params(cfg, 3);
  Json meta = {{"iteration", 17}};
  write_checkpoint(dir_ / "a.tpck", cfg, params, meta);
  const Checkpoint ck = read_checkpoint(dir_ / "a.tpck");
  EXPECT_EQ(to_json(ck.model), to_json(cfg));
  EXPECT_EQ(ck.meta["iteration"], 17);
  ASSERT_EQ(ck.order.size(), params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(ck.order[i], params[i].first);
    const Mat<double> want = params[i].second.cast<float>().cast<double>();
    EXPECT_EQ(ck.tensors.at(params[i].first), want) << params[i].first;
  }
}

TEST_F(CheckpointTest, LoadsIntoAnyModelParallelSize) {
  const ModelConfig cfg = toy();
  write_checkpoint(dir_ / "b.tpck", cfg, full_params(cfg, 4));
  const Checkpoint ck = read_checkpoint(dir_ / "b.tpck");
  const std::vector<TokenId> ids = {1, 5, 9, 2, 7};
  std::vector<Mat<double>> logits;
  for (int mp : {1, 2, 4}) {
    comm::World world({mp, mp});
    world.run([&](int r) {
      Model<double> m(ck.model, ParallelContext::for_rank(world, r));
      m.load_full_parameters(ck.tensors);
      m.set_training(false);
      const Mat<double> lg = m.logits(ids, 1, 5);
      if (r == 0) logits.push_back(lg);
    });
  }
  EXPECT_LE(testing::max_rel_diff(logits[1], logits[0]), 1e-12);
  EXPECT_LE(testing::max_rel_diff(logits[2], logits[0]), 1e-12);
}

TEST_F(CheckpointTest, MissingTensorIsReported) {
  const ModelConfig cfg = toy();
  auto params = full_params(cfg, 5);
  params.pop_back();
  write_checkpoint(dir_ / "c.tpck", cfg, params);
  const Checkpoint ck = read_checkpoint(dir_ / "c.tpck");
  Model<double> m(ck.model, ParallelContext::serial());
  EXPECT_THROW(m.load_full_parameters(ck.tensors), FormatError);
}

TEST_F(CheckpointTest, CorruptFilesAreRejected) {
  const ModelConfig cfg = toy();
  write_checkpoint(dir_ / "d.tpck", cfg, full_params(cfg, 6));
  std::string bytes;
  {
    std::ifstream in(dir_ / "d.tpck", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& name, const std::string& data) {
    std::ofstream out(dir_ / name, std::ios::binary);
    out << data;
    return dir_ / name;
  };
  EXPECT_THROW(read_checkpoint(write("trunc.tpck", bytes.substr(0, bytes.size() - 10))), FormatError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(read_checkpoint(write("magic.tpck", magic)), FormatError);
  std::string version = bytes;
  version[4] = 9;
  EXPECT_THROW(read_checkpoint(write("version.tpck", version)), FormatError);
  EXPECT_THROW(read_checkpoint(write("tiny.tpck", "TP")), FormatError);
  EXPECT_THROW(read_checkpoint(dir_ / "absent.tpck"), IoError);
}

}  // namespace
}  // namespace tp
