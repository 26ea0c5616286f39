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

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "tp/model.hpp"

namespace tp {

struct TrainConfig {
  int global_batch = 8;
  /// Rows per DP replica; 0 derives it from global_batch / dp.
  int micro_batch = 0;
  double lr = 1.5e-4;
  int warmup = 3000;
  int total_iters = 300000;
  double min_lr = 1e-5;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1234;
  int checkpoint_interval = 0;
  bool activation_checkpointing = false;
  /// Half-precision training with loss scaling is not implemented; the flag
  /// exists so configs that ask for it fail loudly.
  bool mixed_precision = false;
  int consistency_check_interval = 0;

  int micro_for(int dp) const { return micro_batch > 0 ? micro_batch : global_batch / dp; }

  void validate(int dp) const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (global_batch < 1) fail("global_batch must be positive");
    if (dp < 1) fail("data parallel size must be positive");
    if (micro_for(dp) * dp != global_batch) {
      fail("global_batch " + std::to_string(global_batch) + " != micro_batch " +
           std::to_string(micro_for(dp)) + " x data parallel size " + std::to_string(dp));
    }
    if (!(lr >= 0) || !(min_lr >= 0)) fail("learning rates must be non-negative");
    if (warmup < 0 || total_iters < 0) fail("warmup and total_iters must be non-negative");
    if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
    if (!(clip_norm > 0)) fail("clip_norm must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
    if (!(adam_eps > 0)) fail("adam_eps must be positive");
    if (checkpoint_interval < 0 || consistency_check_interval < 0) fail("intervals must be >= 0");
    if (mixed_precision) fail("mixed_precision is not supported");
  }
};

/// Linear warmup from 0 to the peak, single-cycle cosine down to min_lr, then
/// flat.
inline double lr_at(long iter, const TrainConfig& cfg) {
  if (iter < 0) throw ParameterError("lr_at: negative iteration");
  if (iter < cfg.warmup) return cfg.lr * static_cast<double>(iter) / cfg.warmup;
  if (iter >= cfg.total_iters || cfg.total_iters <= cfg.warmup) return cfg.min_lr;
  const double frac =
      static_cast<double>(iter - cfg.warmup) / static_cast<double>(cfg.total_iters - cfg.warmup);
  return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

template <Real S>
struct OptimizerState {
  std::vector<Mat<S>> m;
  std::vector<Mat<S>> u;
  long step = 0;

  Index stored_elements() const {
    Index n = 0;
    for (const auto& x : m) n += x.size();
    for (const auto& x : u) n += x.size();
    return n;
  }
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay: p <- p (1 - lr lambda), then the bias
/// corrected Adam update. Parameters with decay == false skip the shrink.
template <Real S>
void adamw_step(const ParamList<S>& params, OptimizerState<S>& state, double lr,
                const AdamParams& hp) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      state.u.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (state.m.size() != params.size()) {
    throw DimensionError("adamw_step: optimizer holds " + std::to_string(state.m.size()) +
                         " slots for " + std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const S b1 = static_cast<S>(hp.beta1);
  const S b2 = static_cast<S>(hp.beta2);
  const S c1 = static_cast<S>(1.0 - std::pow(hp.beta1, static_cast<double>(state.step)));
  const S c2 = static_cast<S>(1.0 - std::pow(hp.beta2, static_cast<double>(state.step)));
  const S eps = static_cast<S>(hp.eps);
  const S step = static_cast<S>(lr);
  const S shrink = static_cast<S>(1.0 - lr * hp.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    ShardedParam<S>& p = *params[i];
    Mat<S>& m = state.m[i];
    Mat<S>& u = state.u[i];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols() ||
        m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
      throw DimensionError("adamw_step: " + p.name + " value " +
                           shape_str(p.value.rows(), p.value.cols()) + ", grad " +
                           shape_str(p.grad.rows(), p.grad.cols()) + ", state " +
                           shape_str(m.rows(), m.cols()));
    }
    if (p.decay && hp.weight_decay != 0.0) p.value *= shrink;
    for (Index k = 0; k < p.value.size(); ++k) {
      const S g = p.grad.data()[k];
      S& mk = m.data()[k];
      S& uk = u.data()[k];
      mk = b1 * mk + (S(1) - b1) * g;
      uk = b2 * uk + (S(1) - b2) * g * g;
      const S mhat = mk / c1;
      const S uhat = uk / c2;
      p.value.data()[k] -= step * mhat / (std::sqrt(uhat) + eps);
    }
  }
}

/// Global L2 norm of the model gradient. Sharded parameters contribute their
/// local squares, all-reduced over the MP group; replicated parameters are
/// counted once.
template <Real S>
double global_grad_norm(const ParallelContext& ctx, const ParamList<S>& params) {
  Mat<S> sharded = Mat<S>::Zero(1, 1);
  S replicated = 0;
  for (const auto* p : params) {
    const S sq = p->grad.squaredNorm();
    if (p->sharded()) {
      sharded(0, 0) += sq;
    } else {
      replicated += sq;
    }
  }
  const Mat<S> total = ctx.all_reduce(sharded, comm::ReduceOp::sum, comm::Traffic::norm);
  return std::sqrt(static_cast<double>(total(0, 0) + replicated));
}

/// Scales all gradients by max_norm / norm when the global norm exceeds
/// max_norm. Returns the pre-clip norm.
template <Real S>
double clip_global_norm(const ParallelContext& ctx, const ParamList<S>& params, double max_norm) {
  const double norm = global_grad_norm(ctx, params);
  if (norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (auto* p : params) p->grad *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Data

/// Fixed-length training sequences of seq + 1 tokens, served as global
/// batches in an epoch-wise shuffled order. A masked loader instead serves
/// seq-token inputs with per-token labels (masked-LM targets).
class DataLoader {
 public:
  DataLoader(std::vector<std::vector<TokenId>> sequences, int global_batch, std::uint64_t seed)
      : seqs_(std::move(sequences)), global_batch_(global_batch), seed_(seed) {
    check();
  }

  static DataLoader masked(std::vector<std::vector<TokenId>> inputs,
                           std::vector<std::vector<TokenId>> labels, int global_batch,
                           std::uint64_t seed) {
    if (inputs.size() != labels.size()) {
      throw DimensionError("DataLoader: " + std::to_string(inputs.size()) + " inputs but " +
                           std::to_string(labels.size()) + " label rows");
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i].size() != labels[i].size() || inputs[i].size() != inputs.front().size()) {
        throw DimensionError("DataLoader: masked rows must share one length");
      }
    }
    return DataLoader(std::move(inputs), global_batch, seed, std::move(labels));
  }

  long batches_per_epoch() const {
    return static_cast<long>(seqs_.size()) / global_batch_;
  }

  /// Global batch for a 0-based iteration.
  Batch batch(long iter) const {
    const long epoch = iter / batches_per_epoch();
    const long within = iter % batches_per_epoch();
    const std::vector<std::size_t> order = permutation(epoch);
    std::vector<std::size_t> picked;
    for (int i = 0; i < global_batch_; ++i) {
      picked.push_back(order[static_cast<std::size_t>(within * global_batch_ + i)]);
    }
    if (!labels_.empty()) {
      Batch b;
      b.batch = global_batch_;
      b.seq = static_cast<Index>(seqs_.front().size());
      for (std::size_t k : picked) {
        b.inputs.insert(b.inputs.end(), seqs_[k].begin(), seqs_[k].end());
        b.targets.insert(b.targets.end(), labels_[k].begin(), labels_[k].end());
      }
      return b;
    }
    std::vector<std::vector<TokenId>> rows;
    rows.reserve(picked.size());
    for (std::size_t k : picked) rows.push_back(seqs_[k]);
    return make_lm_batch(rows);
  }

 private:
  DataLoader(std::vector<std::vector<TokenId>> inputs, int global_batch, std::uint64_t seed,
             std::vector<std::vector<TokenId>> labels)
      : seqs_(std::move(inputs)), labels_(std::move(labels)), global_batch_(global_batch), seed_(seed) {
    check();
  }

  void check() const {
    if (seqs_.empty()) throw ParameterError("DataLoader: no sequences");
    if (global_batch_ < 1) throw ParameterError("DataLoader: global_batch must be positive");
    if (static_cast<std::size_t>(global_batch_) > seqs_.size()) {
      throw ParameterError("DataLoader: " + std::to_string(seqs_.size()) +
                           " sequences cannot fill a batch of " + std::to_string(global_batch_));
    }
  }

  std::vector<std::size_t> permutation(long epoch) const {
    std::vector<std::size_t> order(seqs_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngStream rng(hash_combine(seed_, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    return order;
  }

  std::vector<std::vector<TokenId>> seqs_;
  std::vector<std::vector<TokenId>> labels_;
  int global_batch_;
  std::uint64_t seed_;
};

/// Cuts a token stream into non-overlapping sequences of seq + 1 tokens.
inline std::vector<std::vector<TokenId>> chunk_stream(std::span<const TokenId> stream, Index seq) {
  std::vector<std::vector<TokenId>> out;
  const auto len = static_cast<std::size_t>(seq + 1);
  for (std::size_t at = 0; at + len <= stream.size(); at += static_cast<std::size_t>(seq)) {
    out.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(at),
                     stream.begin() + static_cast<std::ptrdiff_t>(at + len));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct StepMetrics {
  long iteration = 0;
  double lr = 0;
  double loss = 0;
  double grad_norm = 0;
  double elapsed_s = 0;
  /// Elements moved in this step by rank 0's MP and DP groups.
  comm::CommStats::Table mp_comm;
  comm::CommStats::Table dp_comm;

  nlohmann::json to_json() const {
    auto table = [](const comm::CommStats::Table& t) {
      nlohmann::json j = nlohmann::json::object();
      for (const auto& [key, c] : t) {
        if (c.calls == 0) continue;
        j[std::string(comm::to_string(key.first)) + "." + std::string(comm::to_string(key.second))] = {
            {"calls", c.calls}, {"elements", c.elements}};
      }
      return j;
    };
    return {{"iteration", iteration}, {"lr", lr},           {"loss", loss},
            {"grad_norm", grad_norm}, {"elapsed_s", elapsed_s}, {"mp_comm", table(mp_comm)},
            {"dp_comm", table(dp_comm)}};
  }
};

/// One global rank's share of hybrid model x data parallel training.
template <Real S>
class Trainer {
 public:
  Trainer(const ModelConfig& mcfg, const TrainConfig& tcfg, const comm::World& world, int rank)
      : tcfg_(tcfg),
        ctx_(ParallelContext::for_rank(world, rank, tcfg.seed)),
        model_(mcfg, ctx_),
        dp_group_(world.data_parallel_group(rank)),
        dp_size_(world.spec().data_parallel_size()) {
    tcfg_.validate(dp_size_);
    model_.init_weights(tcfg_.seed);
    model_.set_activation_checkpointing(tcfg_.activation_checkpointing);
    model_.set_training(true);
  }

  Model<S>& model() { return model_; }
  OptimizerState<S>& optimizer() { return opt_; }
  long iteration() const { return iteration_; }
  const TrainConfig& config() const { return tcfg_; }

  /// Runs one iteration on this replica's slice of a global batch.
  StepMetrics step(const Batch& global) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto mp_before = mp_stats();
    const auto dp_before = dp_group_->stats().snapshot();

    const int micro = tcfg_.micro_for(dp_size_);
    if (global.batch != static_cast<Index>(micro) * dp_size_) {
      throw DimensionError("train step: batch of " + std::to_string(global.batch) +
                           " rows, expected " + std::to_string(micro * dp_size_));
    }
    const Batch local = slice_batch(global, static_cast<Index>(ctx_.dp_rank) * micro, micro);

    model_.zero_grad();
    auto [loss, cache] = model_.forward_loss(local);
    model_.backward(cache);

    ParamList<S> params = model_.parameters();
    reduce_gradients(params);
    Mat<S> l(1, 1);
    l(0, 0) = loss;
    const Mat<S> lsum = dp_reduce(l, comm::Traffic::other);

    ++iteration_;
    StepMetrics out;
    out.iteration = iteration_;
    out.lr = lr_at(iteration_, tcfg_);
    out.loss = static_cast<double>(lsum(0, 0)) / dp_size_;
    out.grad_norm = clip_global_norm(ctx_, params, tcfg_.clip_norm);
    adamw_step(params, opt_, out.lr,
               AdamParams{tcfg_.beta1, tcfg_.beta2, tcfg_.adam_eps, tcfg_.weight_decay});

    if (tcfg_.consistency_check_interval > 0 &&
        iteration_ % tcfg_.consistency_check_interval == 0) {
      check_consistency();
    }
    out.mp_comm = diff(mp_stats(), mp_before);
    out.dp_comm = diff(dp_group_->stats().snapshot(), dp_before);
    out.elapsed_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
  }

  /// Compares a checksum of this rank's parameters with its DP peers.
  void check_consistency() {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* p : model_.parameters()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(p->value.size()) * sizeof(S); ++i) {
        h = (h ^ bytes[i]) * 0x100000001b3ULL;
      }
    }
    // 16-bit chunks survive the trip through any floating scalar exactly.
    Mat<S> mine(1, 4);
    for (int i = 0; i < 4; ++i) mine(0, i) = static_cast<S>((h >> (16 * i)) & 0xffff);
    const Mat<S> all = dp_group_->all_gather(ctx_.global_rank, mine, 1, comm::Traffic::other);
    for (Index c = 0; c < all.cols(); ++c) {
      if (all(0, c) != mine(0, c % 4)) {
        throw ConsistencyError("data parallel replicas diverged at iteration " +
                               std::to_string(iteration_) + " (rank " +
                               std::to_string(ctx_.global_rank) + ", " + dp_group_->name() + ")");
      }
    }
  }

  /// Number of parameter elements held by this rank.
  Index local_parameter_elements() {
    Index n = 0;
    for (const auto* p : model_.parameters()) n += p->value.size();
    return n;
  }

 private:
  comm::CommStats::Table mp_stats() const {
    return ctx_.mp_group ? ctx_.mp_group->stats().snapshot() : comm::CommStats::Table{};
  }

  static comm::CommStats::Table diff(const comm::CommStats::Table& after,
                                     const comm::CommStats::Table& before) {
    comm::CommStats::Table out;
    for (const auto& [k, v] : after) {
      const auto it = before.find(k);
      out[k] = it == before.end() ? v : v - it->second;
    }
    return out;
  }

  Mat<S> dp_reduce(const Mat<S>& x, comm::Traffic t) {
    return dp_group_->all_reduce(ctx_.global_rank, x, comm::ReduceOp::sum, t);
  }

  /// All gradients travel in one flat bucket and are averaged over DP.
  void reduce_gradients(ParamList<S>& params) {
    Index total = 0;
    for (const auto* p : params) total += p->grad.size();
    Mat<S> bucket(1, total);
    Index at = 0;
    for (const auto* p : params) {
      std::copy_n(p->grad.data(), p->grad.size(), bucket.data() + at);
      at += p->grad.size();
    }
    const Mat<S> summed = dp_reduce(bucket, comm::Traffic::gradient);
    const S inv = S(1) / static_cast<S>(dp_size_);
    at = 0;
    for (auto* p : params) {
      for (Index k = 0; k < p->grad.size(); ++k) p->grad.data()[k] = summed(0, at + k) * inv;
      at += p->grad.size();
    }
  }

  TrainConfig tcfg_;
  ParallelContext ctx_;
  Model<S> model_;
  std::shared_ptr<comm::ProcessGroup> dp_group_;
  int dp_size_;
  OptimizerState<S> opt_;
  long iteration_ = 0;
};

struct TrainResult {
  std::vector<StepMetrics> steps;
  /// Full parameters after the last step, in parameter order.
  std::vector<std::pair<std::string, Mat<double>>> parameters;
};

/// Hooks run on global rank 0 only.
struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  /// Called at checkpoint intervals and after the last step with the gathered
  /// full parameters.
  std::function<void(long, const std::vector<std::pair<std::string, Mat<double>>>&)> on_checkpoint;
};

/// Runs `iters` iterations of hybrid-parallel training on a simulated world.
template <Real S>
TrainResult train(comm::World& world, const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const DataLoader& data, long iters, const TrainHooks& hooks = {}) {
  mcfg.validate(world.spec().model_parallel_size);
  tcfg.validate(world.spec().data_parallel_size());
  TrainResult result;
  world.run([&](int rank) {
    Trainer<S> trainer(mcfg, tcfg, world, rank);
    auto gather = [&] {
      std::vector<std::pair<std::string, Mat<double>>> full;
      for (auto& [name, m] : trainer.model().gather_full_parameters()) {
        full.emplace_back(name, m.template cast<double>());
      }
      return full;
    };
    for (long it = 0; it < iters; ++it) {
      StepMetrics m = trainer.step(data.batch(it));
      if (rank == 0) {
        if (hooks.on_step) hooks.on_step(m);
        result.steps.push_back(std::move(m));
      }
      const bool last = it + 1 == iters;
      const bool periodic =
          tcfg.checkpoint_interval > 0 && trainer.iteration() % tcfg.checkpoint_interval == 0;
      if (last || periodic) {
        auto full = gather();  // every MP rank joins the gather
        if (rank == 0) {
          if (hooks.on_checkpoint) hooks.on_checkpoint(trainer.iteration(), full);
          if (last) result.parameters = std::move(full);
        }
      }
    }
    if (iters == 0) {
      auto full = gather();
      if (rank == 0) result.parameters = std::move(full);
    }
  });
  return result;
}

}  // namespace tp
