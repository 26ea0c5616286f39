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

#include <cmath>
#include <cstdint>
#include <memory>
#include <source_location>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tp/comm.hpp"
#include "tp/rng.hpp"
#include "tp/tensor.hpp"

namespace tp {

/// Smallest multiple of (multiple * mp_size) that is >= v.
inline Index pad_vocab(Index v, Index mp_size, Index multiple = 128) {
  if (v <= 0) throw ParameterError("pad_vocab: vocabulary size must be positive");
  if (mp_size <= 0 || multiple <= 0) {
    throw ParameterError("pad_vocab: mp size and multiple must be positive");
  }
  const Index unit = multiple * mp_size;
  return (v + unit - 1) / unit * unit;
}

/// Per-worker view of the model-parallel group plus the two dropout streams.
struct ParallelContext {
  std::shared_ptr<comm::ProcessGroup> mp_group;  // null means a serial worker
  int global_rank = 0;
  int mp_rank = 0;
  int mp_size = 1;
  int dp_rank = 0;
  /// Same seed on every MP rank: dropout outside model-parallel regions.
  RngStream shared;
  /// Seed salted by MP rank: dropout inside model-parallel regions.
  RngStream priv;

  static ParallelContext serial(std::uint64_t seed = 0);
  static ParallelContext for_rank(const comm::World& world, int global_rank,
                                  std::uint64_t seed = 0);

  template <Real S>
  Mat<S> all_reduce(const Mat<S>& x, comm::ReduceOp op, comm::Traffic traffic,
                    std::source_location loc = std::source_location::current()) const {
    if (!mp_group) return x;
    return mp_group->all_reduce(global_rank, x, op, traffic, loc);
  }

  template <Real S>
  Mat<S> all_gather(const Mat<S>& x, int axis, comm::Traffic traffic,
                    std::source_location loc = std::source_location::current()) const {
    if (!mp_group) return x;
    return mp_group->all_gather(global_rank, x, axis, traffic, loc);
  }
};

/// Installs the dropout RNG policy: the shared stream is seeded identically
/// on all MP ranks of a replica, the private stream is salted by MP rank.
inline void seed_all(ParallelContext& ctx, std::uint64_t global_seed) {
  const std::uint64_t replica = hash_combine(global_seed, static_cast<std::uint64_t>(ctx.dp_rank));
  ctx.shared = RngStream(hash_combine(replica, fnv1a64("shared")));
  ctx.priv = RngStream(hash_combine(hash_combine(replica, fnv1a64("private")),
                                    static_cast<std::uint64_t>(ctx.mp_rank)));
}

inline ParallelContext ParallelContext::serial(std::uint64_t seed) {
  ParallelContext ctx;
  seed_all(ctx, seed);
  return ctx;
}

inline ParallelContext ParallelContext::for_rank(const comm::World& world, int global_rank,
                                                 std::uint64_t seed) {
  ParallelContext ctx;
  ctx.global_rank = global_rank;
  ctx.mp_group = world.model_parallel_group(global_rank);
  ctx.mp_rank = world.mp_rank(global_rank);
  ctx.mp_size = world.spec().model_parallel_size;
  ctx.dp_rank = world.dp_rank(global_rank);
  seed_all(ctx, seed);
  return ctx;
}

// ---------------------------------------------------------------------------
// Sharded parameters

enum class PartitionAxis { replicated, column, row, vocab };

/// Matrix axis a partition splits: columns for column-parallel weights, rows
/// for row-parallel weights and vocabulary tables.
constexpr int matrix_axis(PartitionAxis a) { return a == PartitionAxis::column ? 1 : 0; }

template <Real S>
struct ShardedParam {
  std::string name;
  Index full_rows = 0;
  Index full_cols = 0;
  PartitionAxis axis = PartitionAxis::replicated;
  int rank = 0;
  int parts = 1;
  bool decay = true;
  Mat<S> value;
  Mat<S> grad;

  ShardedParam() = default;
  ShardedParam(std::string name_, Index rows, Index cols, PartitionAxis axis_, int rank_,
               int parts_, bool decay_ = true)
      : name(std::move(name_)),
        full_rows(rows),
        full_cols(cols),
        axis(axis_),
        rank(rank_),
        parts(axis_ == PartitionAxis::replicated ? 1 : parts_),
        decay(decay_) {
    const Index split = matrix_axis(axis) == 1 ? cols : rows;
    if (axis != PartitionAxis::replicated && split % parts_ != 0) {
      throw ConfigError(name + ": extent " + std::to_string(split) +
                        " not divisible by model parallel size " + std::to_string(parts_));
    }
    value = Mat<S>::Zero(local_rows(), local_cols());
    grad = Mat<S>::Zero(local_rows(), local_cols());
  }

  bool sharded() const { return axis != PartitionAxis::replicated; }
  Index local_rows() const { return matrix_axis(axis) == 0 ? full_rows / parts : full_rows; }
  Index local_cols() const { return matrix_axis(axis) == 1 ? full_cols / parts : full_cols; }
  /// Offset of this shard along the partition axis.
  Index offset() const {
    return (matrix_axis(axis) == 1 ? local_cols() : local_rows()) * (sharded() ? rank : 0);
  }

  void zero_grad() { grad.setZero(); }

  /// This rank's slice of a full-shape tensor.
  template <class Derived>
  Mat<S> slice_of(const Eigen::MatrixBase<Derived>& full) const {
    if (full.rows() != full_rows || full.cols() != full_cols) {
      throw DimensionError(name + ": expected full shape " + shape_str(full_rows, full_cols) +
                           ", got " + shape_str(full.rows(), full.cols()));
    }
    if (matrix_axis(axis) == 1) {
      return full.middleCols(offset(), local_cols()).template cast<S>();
    }
    return full.middleRows(offset(), local_rows()).template cast<S>();
  }
};

/// Concatenates per-rank shards along the partition axis.
template <Real S>
Mat<S> reassemble(std::span<const Mat<S>> shards, PartitionAxis axis) {
  if (shards.empty()) throw ParameterError("reassemble: no shards");
  if (axis == PartitionAxis::replicated) return shards.front();
  const Index r = shards.front().rows();
  const Index c = shards.front().cols();
  const auto n = static_cast<Index>(shards.size());
  const bool by_cols = matrix_axis(axis) == 1;
  Mat<S> out(by_cols ? r : r * n, by_cols ? c * n : c);
  for (Index p = 0; p < n; ++p) {
    if (by_cols) {
      out.middleCols(p * c, c) = shards[static_cast<std::size_t>(p)];
    } else {
      out.middleRows(p * r, r) = shards[static_cast<std::size_t>(p)];
    }
  }
  return out;
}

template <Real S>
using ParamList = std::vector<ShardedParam<S>*>;

// ---------------------------------------------------------------------------
// Conjugate region operators

/// f: identity in the forward pass, all-reduce in the backward pass. Placed
/// where a replicated activation enters a model-parallel region.
struct CopyToModelParallel {
  template <Real S>
  static Mat<S> forward(const ParallelContext&, const Mat<S>& x) {
    return x;
  }
  template <Real S>
  static Mat<S> backward(const ParallelContext& ctx, const Mat<S>& grad) {
    return ctx.all_reduce(grad, comm::ReduceOp::sum, comm::Traffic::activation);
  }
};

/// g: all-reduce in the forward pass, identity in the backward pass. Placed
/// where partial results leave a model-parallel region.
struct ReduceFromModelParallel {
  template <Real S>
  static Mat<S> forward(const ParallelContext& ctx, const Mat<S>& x) {
    return ctx.all_reduce(x, comm::ReduceOp::sum, comm::Traffic::activation);
  }
  template <Real S>
  static Mat<S> backward(const ParallelContext&, const Mat<S>& grad) {
    return grad;
  }
};

using FOp = CopyToModelParallel;
using GOp = ReduceFromModelParallel;

// ---------------------------------------------------------------------------
// Linear layers. Weights are stored in x out layout: y = x W + b.

template <Real S>
class ColumnParallelLinear {
 public:
  ColumnParallelLinear(const std::string& name, Index in, Index out,
                       const ParallelContext& ctx, bool gather_output = false)
      : weight(name + ".weight", in, out, PartitionAxis::column, ctx.mp_rank, ctx.mp_size),
        bias(name + ".bias", 1, out, PartitionAxis::column, ctx.mp_rank, ctx.mp_size),
        gather_output_(gather_output) {}

  /// x must be replicated across the MP group.
  Mat<S> forward(const ParallelContext& ctx, const Mat<S>& x) const {
    Mat<S> y = matmul<S>(FOp::forward(ctx, x), weight.value);
    y.rowwise() += bias.value.row(0);
    require_finite(y, "column_parallel_linear");
    if (gather_output_) return ctx.all_gather(y, 1, comm::Traffic::activation);
    return y;
  }

  /// Accumulates weight and bias gradients; returns this rank's partial input
  /// gradient without communicating. dy is full width when gathering.
  Mat<S> backward_partial(const ParallelContext& ctx, const Mat<S>& x, const Mat<S>& dy) {
    (void)ctx;
    const Mat<S> dy_local =
        gather_output_ ? Mat<S>(dy.middleCols(weight.offset(), weight.local_cols())) : dy;
    weight.grad += matmul_tn<S>(x, dy_local);
    bias.grad += column_sums<S>(dy_local);
    return matmul_nt<S>(dy_local, weight.value);
  }

  /// Input gradient summed over the MP group.
  Mat<S> backward(const ParallelContext& ctx, const Mat<S>& x, const Mat<S>& dy) {
    return FOp::backward(ctx, backward_partial(ctx, x, dy));
  }

  void collect(ParamList<S>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  ShardedParam<S> weight;
  ShardedParam<S> bias;

 private:
  bool gather_output_;
};

template <Real S>
class RowParallelLinear {
 public:
  RowParallelLinear(const std::string& name, Index in, Index out, const ParallelContext& ctx)
      : weight(name + ".weight", in, out, PartitionAxis::row, ctx.mp_rank, ctx.mp_size),
        bias(name + ".bias", 1, out, PartitionAxis::replicated, ctx.mp_rank, ctx.mp_size) {}

  /// x_local is this rank's feature slice. The bias is replicated and added
  /// once, after the reduction.
  Mat<S> forward(const ParallelContext& ctx, const Mat<S>& x_local) const {
    Mat<S> y = GOp::forward(ctx, matmul<S>(x_local, weight.value));
    y.rowwise() += bias.value.row(0);
    require_finite(y, "row_parallel_linear");
    return y;
  }

  /// Communication-free: returns the gradient of this rank's input slice.
  Mat<S> backward(const ParallelContext& ctx, const Mat<S>& x_local, const Mat<S>& dy) {
    const Mat<S> g = GOp::backward(ctx, dy);
    weight.grad += matmul_tn<S>(x_local, g);
    bias.grad += column_sums<S>(g);
    return matmul_nt<S>(g, weight.value);
  }

  void collect(ParamList<S>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  ShardedParam<S> weight;
  ShardedParam<S> bias;
};

// ---------------------------------------------------------------------------
// MLP block

template <Real S>
struct MlpCache {
  Mat<S> x;
  Mat<S> pre;
  Mat<S> act;
  Mat<S> mask;

  Index stored_elements() const { return x.size() + pre.size() + act.size() + mask.size(); }
};

/// H -> 4H column-parallel, GeLU on the local slice, 4H -> H row-parallel,
/// then dropout from the shared stream. One all-reduce each direction.
template <Real S>
class ParallelMLP {
 public:
  ParallelMLP(const std::string& name, Index hidden, const ParallelContext& ctx,
              double dropout_p)
      : fc(name + ".fc", hidden, 4 * hidden, ctx),
        proj(name + ".proj", 4 * hidden, hidden, ctx),
        dropout_p_(dropout_p) {}

  Mat<S> forward(ParallelContext& ctx, const Mat<S>& x, MlpCache<S>* cache) const {
    Mat<S> pre = fc.forward(ctx, x);
    Mat<S> act = gelu<S>(pre);
    Mat<S> y = proj.forward(ctx, act);
    DropoutResult<S> d = dropout<S>(y, dropout_p_, ctx.shared);
    if (cache) {
      cache->x = x;
      cache->pre = std::move(pre);
      cache->act = std::move(act);
      cache->mask = std::move(d.mask);
    }
    return std::move(d.y);
  }

  Mat<S> backward(ParallelContext& ctx, const MlpCache<S>& cache, const Mat<S>& dy) {
    const Mat<S> dproj = dy.cwiseProduct(cache.mask);
    const Mat<S> dact = proj.backward(ctx, cache.act, dproj);
    const Mat<S> dpre = gelu_backward<S>(cache.pre, dact);
    return fc.backward(ctx, cache.x, dpre);
  }

  void set_dropout(double p) { dropout_p_ = p; }

  void collect(ParamList<S>& out) {
    fc.collect(out);
    proj.collect(out);
  }

  ColumnParallelLinear<S> fc;
  RowParallelLinear<S> proj;

 private:
  double dropout_p_;
};

// ---------------------------------------------------------------------------
// Self-attention block

template <Real S>
struct AttentionCache {
  Index batch = 0;
  Index seq = 0;
  Mat<S> x;
  Mat<S> q;
  Mat<S> k;
  Mat<S> v;
  /// Softmax probabilities per (batch, local head), each seq x seq.
  std::vector<Mat<S>> probs;
  /// Attention-dropout masks drawn from the private stream.
  std::vector<Mat<S>> prob_masks;
  Mat<S> context;
  /// Output dropout mask drawn from the shared stream.
  Mat<S> out_mask;

  Index stored_elements() const {
    Index n = x.size() + q.size() + k.size() + v.size() + context.size() + out_mask.size();
    for (const auto& p : probs) n += p.size();
    for (const auto& m : prob_masks) n += m.size();
    return n;
  }
};

/// Q, K and V are column-parallel so each rank owns whole heads; the output
/// projection is row-parallel. One all-reduce each direction.
template <Real S>
class ParallelSelfAttention {
 public:
  ParallelSelfAttention(const std::string& name, Index hidden, Index heads,
                        const ParallelContext& ctx, double dropout_p, bool causal)
      : query(name + ".query", hidden, hidden, ctx),
        key(name + ".key", hidden, hidden, ctx),
        value(name + ".value", hidden, hidden, ctx),
        dense(name + ".dense", hidden, hidden, ctx),
        dropout_p_(dropout_p),
        causal_(causal) {
    if (heads <= 0 || hidden % heads != 0) {
      throw ConfigError(name + ": hidden " + std::to_string(hidden) +
                        " not divisible by heads " + std::to_string(heads));
    }
    if (heads % ctx.mp_size != 0) {
      throw ConfigError(name + ": heads " + std::to_string(heads) +
                        " not divisible by model parallel size " + std::to_string(ctx.mp_size));
    }
    head_dim_ = hidden / heads;
    local_heads_ = heads / ctx.mp_size;
  }

  Index local_heads() const { return local_heads_; }
  Index head_dim() const { return head_dim_; }

  Mat<S> forward(ParallelContext& ctx, const Mat<S>& x, Index batch, Index seq,
                 AttentionCache<S>* cache) const {
    if (x.rows() != batch * seq) {
      throw DimensionError("attention: rows " + std::to_string(x.rows()) + " != batch*seq");
    }
    const Mat<S> xin = FOp::forward(ctx, x);
    Mat<S> q = query.forward(ctx, xin);
    Mat<S> k = key.forward(ctx, xin);
    Mat<S> v = value.forward(ctx, xin);
    const Index d = head_dim_;
    const S scale = S(1) / std::sqrt(S(d));
    Mat<S> context(batch * seq, local_heads_ * d);
    std::vector<Mat<S>> probs;
    std::vector<Mat<S>> masks;
    if (cache) {
      probs.reserve(static_cast<std::size_t>(batch * local_heads_));
      masks.reserve(static_cast<std::size_t>(batch * local_heads_));
    }
    for (Index b = 0; b < batch; ++b) {
      for (Index h = 0; h < local_heads_; ++h) {
        const Mat<S> qb = q.block(b * seq, h * d, seq, d);
        const Mat<S> kb = k.block(b * seq, h * d, seq, d);
        const Mat<S> vb = v.block(b * seq, h * d, seq, d);
        Mat<S> scores = matmul_nt<S>(qb, kb) * scale;
        if (causal_) {
          for (Index i = 0; i < seq; ++i)
            for (Index j = i + 1; j < seq; ++j) scores(i, j) = std::numeric_limits<S>::lowest();
        }
        softmax_rows_inplace(scores);
        DropoutResult<S> dp = dropout<S>(scores, dropout_p_, ctx.priv);
        context.block(b * seq, h * d, seq, d) = matmul<S>(dp.y, vb);
        if (cache) {
          probs.push_back(std::move(scores));
          masks.push_back(std::move(dp.mask));
        }
      }
    }
    Mat<S> out = dense.forward(ctx, context);
    DropoutResult<S> od = dropout<S>(out, dropout_p_, ctx.shared);
    if (cache) {
      cache->batch = batch;
      cache->seq = seq;
      cache->x = x;
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->v = std::move(v);
      cache->probs = std::move(probs);
      cache->prob_masks = std::move(masks);
      cache->context = std::move(context);
      cache->out_mask = std::move(od.mask);
    }
    return std::move(od.y);
  }

  Mat<S> backward(ParallelContext& ctx, const AttentionCache<S>& c, const Mat<S>& dy) {
    const Mat<S> dout = dy.cwiseProduct(c.out_mask);
    const Mat<S> dcontext = dense.backward(ctx, c.context, dout);
    const Index d = head_dim_;
    const Index seq = c.seq;
    const S scale = S(1) / std::sqrt(S(d));
    Mat<S> dq(c.q.rows(), c.q.cols());
    Mat<S> dk(c.k.rows(), c.k.cols());
    Mat<S> dv(c.v.rows(), c.v.cols());
    for (Index b = 0; b < c.batch; ++b) {
      for (Index h = 0; h < local_heads_; ++h) {
        const auto idx = static_cast<std::size_t>(b * local_heads_ + h);
        const Mat<S>& p = c.probs[idx];
        const Mat<S>& mask = c.prob_masks[idx];
        const Mat<S> qb = c.q.block(b * seq, h * d, seq, d);
        const Mat<S> kb = c.k.block(b * seq, h * d, seq, d);
        const Mat<S> vb = c.v.block(b * seq, h * d, seq, d);
        const Mat<S> dctx = dcontext.block(b * seq, h * d, seq, d);
        const Mat<S> dropped = p.cwiseProduct(mask);
        dv.block(b * seq, h * d, seq, d) = matmul_tn<S>(dropped, dctx);
        const Mat<S> dp = matmul_nt<S>(dctx, vb).cwiseProduct(mask);
        const Mat<S> ds = softmax_rows_backward<S>(p, dp) * scale;
        dq.block(b * seq, h * d, seq, d) = matmul<S>(ds, kb);
        dk.block(b * seq, h * d, seq, d) = matmul_tn<S>(ds, qb);
      }
    }
    Mat<S> dx = query.backward_partial(ctx, c.x, dq);
    dx += key.backward_partial(ctx, c.x, dk);
    dx += value.backward_partial(ctx, c.x, dv);
    return FOp::backward(ctx, dx);
  }

  void set_dropout(double p) { dropout_p_ = p; }

  void collect(ParamList<S>& out) {
    query.collect(out);
    key.collect(out);
    value.collect(out);
    dense.collect(out);
  }

  ColumnParallelLinear<S> query;
  ColumnParallelLinear<S> key;
  ColumnParallelLinear<S> value;
  RowParallelLinear<S> dense;

 private:
  double dropout_p_;
  bool causal_;
  Index head_dim_ = 0;
  Index local_heads_ = 0;
};

// ---------------------------------------------------------------------------
// Vocabulary-parallel embedding and fused cross entropy

/// Token table of padded_vocab x hidden, split along the vocabulary axis.
template <Real S>
class VocabParallelEmbedding {
 public:
  VocabParallelEmbedding(const std::string& name, Index padded_vocab, Index hidden,
                         const ParallelContext& ctx)
      : weight(name, padded_vocab, hidden, PartitionAxis::vocab, ctx.mp_rank, ctx.mp_size) {}

  Index vocab_start() const { return weight.offset(); }
  Index vocab_end() const { return weight.offset() + weight.local_rows(); }

  /// Rows for ids outside this rank's slice are zero before the reduction.
  Mat<S> forward(const ParallelContext& ctx, std::span<const TokenId> ids) const {
    Mat<S> out = local_lookup(ids);
    return GOp::forward(ctx, out);
  }

  Mat<S> local_lookup(std::span<const TokenId> ids) const {
    const Index h = weight.full_cols;
    Mat<S> out = Mat<S>::Zero(static_cast<Index>(ids.size()), h);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const TokenId id = ids[i];
      if (id < 0 || id >= weight.full_rows) {
        throw IndexError("embedding: id " + std::to_string(id) + " outside padded vocabulary " +
                         std::to_string(weight.full_rows));
      }
      if (id >= vocab_start() && id < vocab_end()) {
        out.row(static_cast<Index>(i)) = weight.value.row(id - vocab_start());
      }
    }
    return out;
  }

  void backward(const ParallelContext& ctx, std::span<const TokenId> ids, const Mat<S>& dy) {
    const Mat<S> g = GOp::backward(ctx, dy);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const TokenId id = ids[i];
      if (id >= vocab_start() && id < vocab_end()) {
        weight.grad.row(id - vocab_start()) += g.row(static_cast<Index>(i));
      }
    }
  }

  void collect(ParamList<S>& out) { out.push_back(&weight); }

  ShardedParam<S> weight;
};

template <Real S>
struct ParallelCrossEntropyCache {
  Mat<S> hidden;
  /// d loss / d local logits.
  Mat<S> dlogits;

  Index stored_elements() const { return hidden.size() + dlogits.size(); }
};

template <Real S>
struct ParallelCrossEntropyResult {
  S loss = 0;
  ParallelCrossEntropyCache<S> cache;
};

/// Logits against the local vocabulary slice, fused with the loss. Only
/// three rows x 1 all-reduces (max, sum of exps, target logit) cross the MP
/// group; the logits themselves never do. Columns at or beyond raw_vocab are
/// padding and are excluded from the softmax.
template <Real S>
ParallelCrossEntropyResult<S> vocab_parallel_cross_entropy(const ParallelContext& ctx,
                                                           const Mat<S>& hidden,
                                                           const ShardedParam<S>& table,
                                                           std::span<const TokenId> targets,
                                                           Index raw_vocab) {
  const Index rows = hidden.rows();
  if (static_cast<Index>(targets.size()) != rows) {
    throw DimensionError("vocab_parallel_cross_entropy: targets/rows mismatch");
  }
  if (rows == 0) throw ParameterError("vocab_parallel_cross_entropy: no target positions");
  for (TokenId t : targets) {
    if (t < 0 || t >= raw_vocab) {
      throw IndexError("vocab_parallel_cross_entropy: target " + std::to_string(t) +
                       " outside vocabulary [0, " + std::to_string(raw_vocab) + ")");
    }
  }
  const Index start = table.offset();
  const Index local = table.local_rows();
  const Index valid = std::clamp<Index>(raw_vocab - start, 0, local);

  const Mat<S> logits = matmul_nt<S>(hidden, table.value);
  require_finite(logits, "vocab_parallel_cross_entropy");

  Mat<S> row_max(rows, 1);
  for (Index r = 0; r < rows; ++r) {
    row_max(r, 0) = valid > 0 ? logits.row(r).head(valid).maxCoeff()
                              : std::numeric_limits<S>::lowest();
  }
  const Mat<S> gmax = ctx.all_reduce(row_max, comm::ReduceOp::max, comm::Traffic::loss_scalars);

  Mat<S> sum_exp = Mat<S>::Zero(rows, 1);
  Mat<S> target_logit = Mat<S>::Zero(rows, 1);
  for (Index r = 0; r < rows; ++r) {
    S s = 0;
    for (Index j = 0; j < valid; ++j) s += std::exp(logits(r, j) - gmax(r, 0));
    sum_exp(r, 0) = s;
    const Index t = targets[static_cast<std::size_t>(r)];
    if (t >= start && t < start + local) target_logit(r, 0) = logits(r, t - start);
  }
  const Mat<S> gsum = ctx.all_reduce(sum_exp, comm::ReduceOp::sum, comm::Traffic::loss_scalars);
  const Mat<S> gtarget =
      ctx.all_reduce(target_logit, comm::ReduceOp::sum, comm::Traffic::loss_scalars);

  ParallelCrossEntropyResult<S> out;
  const S inv_rows = S(1) / S(rows);
  S total = 0;
  out.cache.dlogits = Mat<S>::Zero(rows, local);
  for (Index r = 0; r < rows; ++r) {
    total += std::log(gsum(r, 0)) + gmax(r, 0) - gtarget(r, 0);
    for (Index j = 0; j < valid; ++j) {
      out.cache.dlogits(r, j) = std::exp(logits(r, j) - gmax(r, 0)) / gsum(r, 0) * inv_rows;
    }
    const Index t = targets[static_cast<std::size_t>(r)];
    if (t >= start && t < start + local) out.cache.dlogits(r, t - start) -= inv_rows;
  }
  out.loss = total * inv_rows;
  if (!std::isfinite(out.loss)) throw NumericError("vocab_parallel_cross_entropy: loss not finite");
  out.cache.hidden = hidden;
  return out;
}

/// Accumulates the table gradient and returns d loss / d hidden, summed over
/// the MP group (the f-op conjugate of the replicated hidden input).
template <Real S>
Mat<S> vocab_parallel_cross_entropy_backward(const ParallelContext& ctx,
                                             const ParallelCrossEntropyCache<S>& cache,
                                             ShardedParam<S>& table) {
  table.grad += matmul_tn<S>(cache.dlogits, cache.hidden);
  return FOp::backward(ctx, matmul<S>(cache.dlogits, table.value));
}

/// Reference path that all-gathers the full logits before the loss; moves
/// rows x padded_vocab elements. Used to measure what the fusion saves.
template <Real S>
CrossEntropyResult<S> gathered_cross_entropy(const ParallelContext& ctx, const Mat<S>& hidden,
                                             const ShardedParam<S>& table,
                                             std::span<const TokenId> targets,
                                             Index raw_vocab) {
  const Mat<S> local = matmul_nt<S>(hidden, table.value);
  const Mat<S> full = ctx.all_gather(local, 1, comm::Traffic::loss_scalars);
  const Mat<S> raw = full.leftCols(raw_vocab);
  return softmax_cross_entropy<S>(raw, targets);
}

}  // namespace tp
