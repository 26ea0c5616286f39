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

#include <gtest/gtest.h>

#include <cstring>
#include <functional>

#include "test_util.hpp"
#include "tp/shard.hpp"

namespace tp {
namespace {

using testing::max_abs_diff;
using testing::max_rel_diff;
using testing::numeric_grad;
using testing::random_mat;

/// Runs fn(ctx) on every rank of a world with a single MP group.
void run_mp(int mp, const std::function<void(ParallelContext&)>& fn, std::uint64_t seed = 1) {
  comm::World world({mp, mp});
  world.run([&](int r) {
    ParallelContext ctx = ParallelContext::for_rank(world, r, seed);
    fn(ctx);
  });
}

Index count_calls(const comm::World& w, comm::Traffic t) {
  return static_cast<Index>(w.total(comm::GroupKind::model_parallel, comm::Collective::all_reduce, t).calls);
}

TEST(PadVocab, RoundsUpToMultipleTimesMp) {
  EXPECT_EQ(pad_vocab(50257, 8), 51200);
  EXPECT_EQ(pad_vocab(50257, 1), 50304);
  EXPECT_EQ(pad_vocab(100, 1), 128);
  EXPECT_EQ(pad_vocab(1024, 8), 1024);
  EXPECT_EQ(pad_vocab(1025, 8), 2048);
}

TEST(ShardedParam, SliceAndReassembleRoundTrip) {
  const Mat<double> full = random_mat(8, 12, 3);
  for (auto axis : {PartitionAxis::column, PartitionAxis::row, PartitionAxis::vocab}) {
    std::vector<Mat<double>> parts;
    for (int r = 0; r < 4; ++r) {
      ShardedParam<double> p("w", 8, 12, axis, r, 4);
      parts.push_back(p.slice_of(full));
    }
    EXPECT_EQ(reassemble<double>(parts, axis), full);
  }
  EXPECT_THROW(ShardedParam<double>("w", 8, 10, PartitionAxis::column, 0, 4), ConfigError);
  ShardedParam<double> p("w", 8, 12, PartitionAxis::row, 1, 4);
  EXPECT_THROW(p.slice_of(random_mat(8, 11, 1)), DimensionError);
}

TEST(ColumnParallel, ShardOutputsConcatenateToSerialBitwise) {
  const Mat<double> x = random_mat(6, 8, 1);
  const Mat<double> w = random_mat(8, 12, 2);
  const Mat<double> b = random_mat(1, 12, 3);
  Mat<double> want = matmul<double>(x, w);
  want.rowwise() += b.row(0);
  std::vector<Mat<double>> outs(2), gathered(2);
  run_mp(2, [&](ParallelContext& ctx) {
    ColumnParallelLinear<double> lin("fc", 8, 12, ctx);
    lin.weight.value = lin.weight.slice_of(w);
    lin.bias.value = lin.bias.slice_of(b);
    outs[static_cast<std::size_t>(ctx.mp_rank)] = lin.forward(ctx, x);
    ColumnParallelLinear<double> g("fc", 8, 12, ctx, true);
    g.weight.value = lin.weight.value;
    g.bias.value = lin.bias.value;
    gathered[static_cast<std::size_t>(ctx.mp_rank)] = g.forward(ctx, x);
  });
  const Mat<double> cat = reassemble<double>(outs, PartitionAxis::column);
  EXPECT_EQ(std::memcmp(cat.data(), want.data(), sizeof(double) * want.size()), 0);
  EXPECT_EQ(gathered[0], want);
  EXPECT_EQ(gathered[1], want);
}

TEST(RowParallel, ReducedOutputMatchesSerial) {
  const Mat<double> x = random_mat(5, 16, 4);
  const Mat<double> w = random_mat(16, 6, 5);
  const Mat<double> b = random_mat(1, 6, 6);
  Mat<double> want = matmul<double>(x, w);
  want.rowwise() += b.row(0);
  std::vector<Mat<double>> outs(4);
  run_mp(4, [&](ParallelContext& ctx) {
    RowParallelLinear<double> lin("proj", 16, 6, ctx);
    lin.weight.value = lin.weight.slice_of(w);
    lin.bias.value = b;
    const Mat<double> xl = x.middleCols(lin.weight.offset(), lin.weight.local_rows());
    outs[static_cast<std::size_t>(ctx.mp_rank)] = lin.forward(ctx, xl);
  });
  for (const auto& o : outs) EXPECT_LT(max_rel_diff(o, want), 1e-14);
}

// Finite-difference oracle for the MLP block at mp = 1, then mp = 2/4
// against mp = 1.
struct MlpRun {
  Mat<double> y;
  Mat<double> dx;
  std::vector<Mat<double>> grads;  // reassembled, in collect() order
};

MlpRun run_mlp(int mp, const Mat<double>& x, const Mat<double>& dy, std::uint64_t seed) {
  const Index h = x.cols();
  MlpRun out;
  std::vector<std::vector<Mat<double>>> per_rank(static_cast<std::size_t>(mp));
  std::vector<PartitionAxis> axes;
  std::mutex mu;
  run_mp(mp, [&](ParallelContext& ctx) {
    ParallelMLP<double> mlp("mlp", h, ctx, 0.0);
    ParamList<double> ps;
    mlp.collect(ps);
    for (auto* p : ps) {
      p->value = p->slice_of(random_mat(p->full_rows, p->full_cols, hash_combine(seed, fnv1a64(p->name)), 0.3));
    }
    MlpCache<double> cache;
    const Mat<double> y = mlp.forward(ctx, x, &cache);
    const Mat<double> dx = mlp.backward(ctx, cache, dy);
    std::lock_guard lk(mu);
    if (ctx.mp_rank == 0) {
      out.y = y;
      out.dx = dx;
      for (auto* p : ps) axes.push_back(p->axis);
    }
    for (auto* p : ps) per_rank[static_cast<std::size_t>(ctx.mp_rank)].push_back(p->grad);
  });
  for (std::size_t i = 0; i < axes.size(); ++i) {
    std::vector<Mat<double>> shards;
    for (int r = 0; r < mp; ++r) shards.push_back(per_rank[static_cast<std::size_t>(r)][i]);
    out.grads.push_back(reassemble<double>(shards, axes[i]));
  }
  return out;
}

TEST(ParallelMlp, SerialBackwardMatchesFiniteDifferences) {
  const Mat<double> x = random_mat(4, 8, 7);
  const Mat<double> dy = random_mat(4, 8, 8);
  const MlpRun r = run_mlp(1, x, dy, 9);
  auto f = [&](const Mat<double>& z) {
    auto ctx = ParallelContext::serial(1);
    ParallelMLP<double> mlp("mlp", 8, ctx, 0.0);
    ParamList<double> ps;
    mlp.collect(ps);
    for (auto* p : ps) p->value = random_mat(p->full_rows, p->full_cols, hash_combine(9, fnv1a64(p->name)), 0.3);
    return mlp.forward(ctx, z, nullptr).cwiseProduct(dy).sum();
  };
  EXPECT_LT(max_abs_diff(r.dx, numeric_grad(f, x)), 1e-8);
}

TEST(ParallelMlp, ShardedMatchesSerial) {
  const Mat<double> x = random_mat(6, 16, 10);
  const Mat<double> dy = random_mat(6, 16, 11);
  const MlpRun ref = run_mlp(1, x, dy, 12);
  for (int mp : {2, 4}) {
    const MlpRun r = run_mlp(mp, x, dy, 12);
    EXPECT_LT(max_rel_diff(r.y, ref.y), 1e-12) << mp;
    EXPECT_LT(max_rel_diff(r.dx, ref.dx), 1e-12) << mp;
    ASSERT_EQ(r.grads.size(), ref.grads.size());
    for (std::size_t i = 0; i < r.grads.size(); ++i) {
      EXPECT_LT(max_rel_diff(r.grads[i], ref.grads[i]), 1e-12) << mp << " param " << i;
    }
  }
}

struct AttnRun {
  Mat<double> y;
  Mat<double> dx;
  std::vector<Mat<double>> grads;
};

AttnRun run_attention(int mp, const Mat<double>& x, const Mat<double>& dy, Index batch, Index seq,
                      Index heads, bool causal) {
  const Index h = x.cols();
  AttnRun out;
  std::vector<std::vector<Mat<double>>> per_rank(static_cast<std::size_t>(mp));
  std::vector<PartitionAxis> axes;
  std::mutex mu;
  run_mp(mp, [&](ParallelContext& ctx) {
    ParallelSelfAttention<double> attn("attn", h, heads, ctx, 0.0, causal);
    ParamList<double> ps;
    attn.collect(ps);
    for (auto* p : ps) {
      p->value = p->slice_of(random_mat(p->full_rows, p->full_cols, fnv1a64(p->name), 0.4));
    }
    AttentionCache<double> cache;
    const Mat<double> y = attn.forward(ctx, x, batch, seq, &cache);
    const Mat<double> dx = attn.backward(ctx, cache, dy);
    std::lock_guard lk(mu);
    if (ctx.mp_rank == 0) {
      out.y = y;
      out.dx = dx;
      for (auto* p : ps) axes.push_back(p->axis);
    }
    for (auto* p : ps) per_rank[static_cast<std::size_t>(ctx.mp_rank)].push_back(p->grad);
  });
  for (std::size_t i = 0; i < axes.size(); ++i) {
    std::vector<Mat<double>> shards;
    for (int r = 0; r < mp; ++r) shards.push_back(per_rank[static_cast<std::size_t>(r)][i]);
    out.grads.push_back(reassemble<double>(shards, axes[i]));
  }
  return out;
}

TEST(ParallelAttention, SerialBackwardMatchesFiniteDifferences) {
  const Index b = 2, s = 4, h = 8;
  const Mat<double> x = random_mat(b * s, h, 20);
  const Mat<double> dy = random_mat(b * s, h, 21);
  for (bool causal : {true, false}) {
    const AttnRun r = run_attention(1, x, dy, b, s, 2, causal);
    auto f = [&](const Mat<double>& z) {
      auto ctx = ParallelContext::serial(1);
      ParallelSelfAttention<double> attn("attn", h, 2, ctx, 0.0, causal);
      ParamList<double> ps;
      attn.collect(ps);
      for (auto* p : ps) p->value = random_mat(p->full_rows, p->full_cols, fnv1a64(p->name), 0.4);
      return attn.forward(ctx, z, b, s, nullptr).cwiseProduct(dy).sum();
    };
    EXPECT_LT(max_abs_diff(r.dx, numeric_grad(f, x)), 1e-8) << causal;
  }
}

TEST(ParallelAttention, ShardedMatchesSerial) {
  const Index b = 2, s = 5, h = 16;
  const Mat<double> x = random_mat(b * s, h, 30);
  const Mat<double> dy = random_mat(b * s, h, 31);
  const AttnRun ref = run_attention(1, x, dy, b, s, 4, true);
  for (int mp : {2, 4}) {
    const AttnRun r = run_attention(mp, x, dy, b, s, 4, true);
    EXPECT_LT(max_rel_diff(r.y, ref.y), 1e-12);
    EXPECT_LT(max_rel_diff(r.dx, ref.dx), 1e-12);
    for (std::size_t i = 0; i < r.grads.size(); ++i) {
      EXPECT_LT(max_rel_diff(r.grads[i], ref.grads[i]), 1e-12) << mp << " param " << i;
    }
  }
}

TEST(ParallelAttention, CausalMaskHidesTheFuture) {
  const Index s = 6, h = 8;
  Mat<double> x = random_mat(s, h, 40);
  const Mat<double> dy = Mat<double>::Zero(s, h);
  const AttnRun causal = run_attention(1, x, dy, 1, s, 2, true);
  const AttnRun full = run_attention(1, x, dy, 1, s, 2, false);
  x.row(s - 1).array() += 1.0;
  const AttnRun causal2 = run_attention(1, x, dy, 1, s, 2, true);
  const AttnRun full2 = run_attention(1, x, dy, 1, s, 2, false);
  EXPECT_EQ(causal.y.row(0), causal2.y.row(0));
  EXPECT_GT((full.y.row(0) - full2.y.row(0)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(ParallelAttention, HeadsMustDivide) {
  auto ctx = ParallelContext::serial();
  EXPECT_THROW(ParallelSelfAttention<double>("a", 10, 4, ctx, 0.0, true), ConfigError);
  comm::World world({4, 4});
  EXPECT_THROW(world.run([&](int r) {
    auto c = ParallelContext::for_rank(world, r);
    ParallelSelfAttention<double> a("a", 12, 6, c, 0.0, true);
  }),
               ConfigError);
}

TEST(Census, OneLayerIsTwoForwardAndTwoBackwardAllReduces) {
  comm::World world({2, 2});
  Index fwd = 0, total = 0;
  world.run([&](int r) {
    auto ctx = ParallelContext::for_rank(world, r);
    ParallelSelfAttention<double> attn("attn", 8, 2, ctx, 0.0, true);
    ParallelMLP<double> mlp("mlp", 8, ctx, 0.0);
    const Mat<double> x = random_mat(4, 8, 1);
    AttentionCache<double> ac;
    MlpCache<double> mc;
    const Mat<double> y = mlp.forward(ctx, attn.forward(ctx, x, 1, 4, &ac), &mc);
    if (r == 0) fwd = count_calls(world, comm::Traffic::activation);
    attn.backward(ctx, ac, mlp.backward(ctx, mc, y));
  });
  total = count_calls(world, comm::Traffic::activation);
  EXPECT_EQ(fwd, 2);
  EXPECT_EQ(total, 4);
}

TEST(VocabEmbedding, ShardedLookupEqualsSerialTable) {
  const Mat<double> table = random_mat(16, 4, 50);
  const std::vector<TokenId> ids = {0, 3, 15, 8, 7, 3};
  std::vector<Mat<double>> outs(4);
  run_mp(4, [&](ParallelContext& ctx) {
    VocabParallelEmbedding<double> e("emb", 16, 4, ctx);
    e.weight.value = e.weight.slice_of(table);
    outs[static_cast<std::size_t>(ctx.mp_rank)] = e.forward(ctx, ids);
    EXPECT_THROW(e.local_lookup(std::vector<TokenId>{16}), IndexError);
    EXPECT_THROW(e.local_lookup(std::vector<TokenId>{-1}), IndexError);
  });
  for (const auto& o : outs) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      EXPECT_EQ(o.row(static_cast<Index>(i)), table.row(ids[i]));
    }
  }
}

TEST(VocabEmbedding, BackwardScattersRows) {
  auto ctx = ParallelContext::serial();
  VocabParallelEmbedding<double> e("emb", 8, 3, ctx);
  const std::vector<TokenId> ids = {2, 5, 2};
  const Mat<double> dy = random_mat(3, 3, 1);
  e.backward(ctx, ids, dy);
  EXPECT_LT(max_abs_diff(e.weight.grad.row(2), dy.row(0) + dy.row(2)), 1e-15);
  EXPECT_EQ(e.weight.grad.row(5), dy.row(1));
  EXPECT_EQ(e.weight.grad.row(0).cwiseAbs().sum(), 0.0);
}

/// Oracle: softmax cross entropy over the raw-vocabulary columns of the full
/// logits.
double serial_ce(const Mat<double>& hidden, const Mat<double>& table, const std::vector<TokenId>& t,
                 Index raw) {
  const Mat<double> logits = matmul_nt<double>(hidden, table).leftCols(raw);
  return softmax_cross_entropy<double>(logits, t).loss;
}

TEST(VocabParallelCrossEntropy, MatchesSerialLossAndGradients) {
  const Index rows = 6, h = 5, padded = 16, raw = 11;
  const Mat<double> hidden = random_mat(rows, h, 60);
  const Mat<double> table = random_mat(padded, h, 61);
  const std::vector<TokenId> t = {0, 10, 4, 7, 9, 1};
  const double want = serial_ce(hidden, table, t, raw);
  const Mat<double> dh_want = numeric_grad([&](const Mat<double>& z) { return serial_ce(z, table, t, raw); }, hidden);
  const Mat<double> dt_want = numeric_grad([&](const Mat<double>& z) { return serial_ce(hidden, z, t, raw); }, table);
  for (int mp : {1, 2, 4}) {
    std::vector<Mat<double>> tgrads(static_cast<std::size_t>(mp));
    std::vector<double> losses(static_cast<std::size_t>(mp));
    std::vector<Mat<double>> dhs(static_cast<std::size_t>(mp));
    run_mp(mp, [&](ParallelContext& ctx) {
      ShardedParam<double> tab("emb", padded, h, PartitionAxis::vocab, ctx.mp_rank, ctx.mp_size);
      tab.value = tab.slice_of(table);
      auto res = vocab_parallel_cross_entropy<double>(ctx, hidden, tab, t, raw);
      const auto r = static_cast<std::size_t>(ctx.mp_rank);
      losses[r] = res.loss;
      dhs[r] = vocab_parallel_cross_entropy_backward<double>(ctx, res.cache, tab);
      tgrads[r] = tab.grad;
    });
    const Mat<double> tg = reassemble<double>(tgrads, PartitionAxis::vocab);
    for (int r = 0; r < mp; ++r) {
      EXPECT_NEAR(losses[static_cast<std::size_t>(r)], want, 1e-13) << mp;
      EXPECT_LT(max_abs_diff(dhs[static_cast<std::size_t>(r)], dh_want), 1e-8) << mp;
    }
    EXPECT_LT(max_abs_diff(tg, dt_want), 1e-8) << mp;
    EXPECT_EQ(tg.bottomRows(padded - raw).cwiseAbs().sum(), 0.0);
  }
}

TEST(VocabParallelCrossEntropy, RankWithOnlyPaddingStillWorks) {
  // raw = 3 of 8 padded rows at mp = 4: ranks 2 and 3 hold no valid column.
  const Mat<double> hidden = random_mat(3, 4, 70);
  const Mat<double> table = random_mat(8, 4, 71);
  const std::vector<TokenId> t = {0, 2, 1};
  const double want = serial_ce(hidden, table, t, 3);
  run_mp(4, [&](ParallelContext& ctx) {
    ShardedParam<double> tab("emb", 8, 4, PartitionAxis::vocab, ctx.mp_rank, ctx.mp_size);
    tab.value = tab.slice_of(table);
    EXPECT_NEAR(vocab_parallel_cross_entropy<double>(ctx, hidden, tab, t, 3).loss, want, 1e-13);
  });
}

TEST(VocabParallelCrossEntropy, Errors) {
  auto ctx = ParallelContext::serial();
  ShardedParam<double> tab("emb", 8, 4, PartitionAxis::vocab, 0, 1);
  const Mat<double> h = random_mat(2, 4, 1);
  EXPECT_THROW(vocab_parallel_cross_entropy<double>(ctx, h, tab, std::vector<TokenId>{0, 5}, 5), IndexError);
  const Mat<double> none(0, 4);
  EXPECT_THROW(vocab_parallel_cross_entropy<double>(ctx, none, tab, std::vector<TokenId>{}, 5), ParameterError);
}

TEST(RngPolicy, SharedMasksAgreePrivateMasksDiffer) {
  std::vector<Mat<double>> shared(4), priv(4);
  run_mp(4, [&](ParallelContext& ctx) {
    const Mat<double> x = Mat<double>::Ones(16, 16);
    const auto r = static_cast<std::size_t>(ctx.mp_rank);
    shared[r] = dropout<double>(x, 0.5, ctx.shared).mask;
    priv[r] = dropout<double>(x, 0.5, ctx.priv).mask;
  }, 77);
  for (int r = 1; r < 4; ++r) {
    EXPECT_EQ(shared[static_cast<std::size_t>(r)], shared[0]);
    for (int q = 0; q < r; ++q) EXPECT_NE(priv[static_cast<std::size_t>(r)], priv[static_cast<std::size_t>(q)]);
  }
}

}  // namespace
}  // namespace tp
