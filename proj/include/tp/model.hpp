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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tp/shard.hpp"

namespace tp {

enum class Architecture { gpt2, bert };
enum class LnPlacement { post, pre };

struct ModelConfig {
  Architecture architecture = Architecture::gpt2;
  int layers = 2;
  int hidden = 64;
  int heads = 4;
  int max_seq = 32;
  /// Raw vocabulary size; the embedding table is padded beyond it.
  int vocab = 100;
  LnPlacement ln_placement = LnPlacement::pre;
  double dropout = 0.1;
  double init_std = 0.02;
  double ln_eps = 1e-5;
  int vocab_pad_multiple = 128;
  /// The table is padded for this many MP ranks regardless of the runtime
  /// MP size, so one set of full weights serves every sharding.
  int vocab_pad_mp = 8;

  Index padded_vocab() const { return pad_vocab(vocab, vocab_pad_mp, vocab_pad_multiple); }
  bool causal() const { return architecture == Architecture::gpt2; }

  /// Throws ConfigError when the config cannot be sharded mp_size ways.
  void validate(int mp_size) const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (layers < 1 || hidden < 1 || heads < 1 || max_seq < 1 || vocab < 1) {
      fail("layers, hidden, heads, max_seq and vocab must be positive");
    }
    if (mp_size < 1) fail("model parallel size must be positive");
    if (hidden % heads != 0) {
      fail("hidden " + std::to_string(hidden) + " not divisible by heads " +
           std::to_string(heads));
    }
    if (heads % mp_size != 0) {
      fail("heads " + std::to_string(heads) + " not divisible by model parallel size " +
           std::to_string(mp_size));
    }
    if (hidden % mp_size != 0) fail("hidden not divisible by model parallel size");
    if (vocab_pad_multiple < 1 || vocab_pad_mp < 1) fail("vocab padding must be positive");
    if (padded_vocab() % mp_size != 0) {
      fail("padded vocabulary " + std::to_string(padded_vocab()) +
           " not divisible by model parallel size " + std::to_string(mp_size));
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
    if (!(init_std > 0.0)) fail("init_std must be positive");
    if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
  }
};

/// Closed-form parameter count: token and position tables, 12H^2 + 13H per
/// layer, plus the final layer norm of the pre-LN stack.
inline std::uint64_t count_parameters(const ModelConfig& cfg) {
  const auto h = static_cast<std::uint64_t>(cfg.hidden);
  const auto n = static_cast<std::uint64_t>(cfg.layers);
  const auto v = static_cast<std::uint64_t>(cfg.padded_vocab());
  const auto s = static_cast<std::uint64_t>(cfg.max_seq);
  std::uint64_t total = v * h + s * h + n * (12 * h * h + 13 * h);
  if (cfg.ln_placement == LnPlacement::pre) total += 2 * h;
  return total;
}

/// A batch of sequences flattened row-major (batch x seq). Targets equal to
/// kIgnoreLabel carry no loss.
struct Batch {
  Index batch = 0;
  Index seq = 0;
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
};

/// Builds a next-token batch from sequences of seq + 1 tokens each.
inline Batch make_lm_batch(std::span<const std::vector<TokenId>> sequences) {
  Batch b;
  b.batch = static_cast<Index>(sequences.size());
  if (sequences.empty()) return b;
  b.seq = static_cast<Index>(sequences.front().size()) - 1;
  if (b.seq < 1) throw ParameterError("make_lm_batch: sequences need at least 2 tokens");
  for (const auto& s : sequences) {
    if (static_cast<Index>(s.size()) != b.seq + 1) {
      throw DimensionError("make_lm_batch: ragged sequences");
    }
    b.inputs.insert(b.inputs.end(), s.begin(), s.end() - 1);
    b.targets.insert(b.targets.end(), s.begin() + 1, s.end());
  }
  return b;
}

/// Rows [first, first + count) of a batch.
inline Batch slice_batch(const Batch& b, Index first, Index count) {
  if (first < 0 || count < 0 || first + count > b.batch) {
    throw IndexError("slice_batch: range outside batch");
  }
  Batch out;
  out.batch = count;
  out.seq = b.seq;
  const auto lo = static_cast<std::ptrdiff_t>(first * b.seq);
  const auto hi = static_cast<std::ptrdiff_t>((first + count) * b.seq);
  out.inputs.assign(b.inputs.begin() + lo, b.inputs.begin() + hi);
  out.targets.assign(b.targets.begin() + lo, b.targets.begin() + hi);
  return out;
}

// ---------------------------------------------------------------------------

template <Real S>
struct LayerCache {
  /// Layer input: the only activation kept under checkpointing.
  Mat<S> x;
  Index batch = 0;
  Index seq = 0;
  bool has_internals = false;
  RngStream shared_at_entry;
  RngStream priv_at_entry;
  LayerNormCache<S> ln1;
  LayerNormCache<S> ln2;
  AttentionCache<S> attn;
  MlpCache<S> mlp;

  Index internal_elements() const {
    if (!has_internals) return 0;
    return ln1.stored_elements() + ln2.stored_elements() + attn.stored_elements() +
           mlp.stored_elements();
  }
  Index stored_elements() const { return x.size() + internal_elements(); }
};

template <Real S>
class TransformerLayer {
 public:
  TransformerLayer(const std::string& name, const ModelConfig& cfg, const ParallelContext& ctx)
      : ln1_gain(name + ".ln1.gain", 1, cfg.hidden, PartitionAxis::replicated, ctx.mp_rank, 1, false),
        ln1_bias(name + ".ln1.bias", 1, cfg.hidden, PartitionAxis::replicated, ctx.mp_rank, 1, false),
        attention(name + ".attention", cfg.hidden, cfg.heads, ctx, cfg.dropout, cfg.causal()),
        ln2_gain(name + ".ln2.gain", 1, cfg.hidden, PartitionAxis::replicated, ctx.mp_rank, 1, false),
        ln2_bias(name + ".ln2.bias", 1, cfg.hidden, PartitionAxis::replicated, ctx.mp_rank, 1, false),
        mlp(name + ".mlp", cfg.hidden, ctx, cfg.dropout),
        placement_(cfg.ln_placement),
        eps_(static_cast<S>(cfg.ln_eps)) {}

  /// With keep_internals false only the input and the RNG counters are kept;
  /// backward() then recomputes the layer from them.
  Mat<S> forward(ParallelContext& ctx, const Mat<S>& x, Index batch, Index seq,
                 LayerCache<S>& cache, bool keep_internals) const {
    cache.x = x;
    cache.batch = batch;
    cache.seq = seq;
    cache.shared_at_entry = ctx.shared;
    cache.priv_at_entry = ctx.priv;
    cache.has_internals = keep_internals;
    if (keep_internals) return run(ctx, x, batch, seq, &cache);
    return run(ctx, x, batch, seq, nullptr);
  }

  Mat<S> backward(ParallelContext& ctx, const LayerCache<S>& stored, const Mat<S>& dy,
                  Index* peak_internal = nullptr) {
    if (stored.has_internals) {
      if (peak_internal) *peak_internal = stored.internal_elements();
      return backprop(ctx, stored, dy);
    }
    // Replay the forward pass from the boundary with the original counters,
    // then put the streams back where the caller left them.
    const RngStream shared_now = ctx.shared;
    const RngStream priv_now = ctx.priv;
    ctx.shared = stored.shared_at_entry;
    ctx.priv = stored.priv_at_entry;
    LayerCache<S> full;
    forward(ctx, stored.x, stored.batch, stored.seq, full, true);
    ctx.shared = shared_now;
    ctx.priv = priv_now;
    if (peak_internal) *peak_internal = full.internal_elements();
    return backprop(ctx, full, dy);
  }

  void set_dropout(double p) {
    attention.set_dropout(p);
    mlp.set_dropout(p);
  }

  void collect(ParamList<S>& out) {
    out.push_back(&ln1_gain);
    out.push_back(&ln1_bias);
    attention.collect(out);
    out.push_back(&ln2_gain);
    out.push_back(&ln2_bias);
    mlp.collect(out);
  }

  ShardedParam<S> ln1_gain;
  ShardedParam<S> ln1_bias;
  ParallelSelfAttention<S> attention;
  ShardedParam<S> ln2_gain;
  ShardedParam<S> ln2_bias;
  ParallelMLP<S> mlp;

 private:
  Mat<S> run(ParallelContext& ctx, const Mat<S>& x, Index batch, Index seq,
             LayerCache<S>* c) const {
    LayerNormCache<S>* ln1c = c ? &c->ln1 : nullptr;
    LayerNormCache<S>* ln2c = c ? &c->ln2 : nullptr;
    AttentionCache<S>* ac = c ? &c->attn : nullptr;
    MlpCache<S>* mc = c ? &c->mlp : nullptr;
    if (placement_ == LnPlacement::pre) {
      const Mat<S> a_in = layer_norm<S>(x, ln1_gain.value, ln1_bias.value, eps_, ln1c);
      Mat<S> h = x + attention.forward(ctx, a_in, batch, seq, ac);
      const Mat<S> m_in = layer_norm<S>(h, ln2_gain.value, ln2_bias.value, eps_, ln2c);
      h += mlp.forward(ctx, m_in, mc);
      return h;
    }
    const Mat<S> z1 = x + attention.forward(ctx, x, batch, seq, ac);
    const Mat<S> h = layer_norm<S>(z1, ln1_gain.value, ln1_bias.value, eps_, ln1c);
    const Mat<S> z2 = h + mlp.forward(ctx, h, mc);
    return layer_norm<S>(z2, ln2_gain.value, ln2_bias.value, eps_, ln2c);
  }

  Mat<S> backprop(ParallelContext& ctx, const LayerCache<S>& c, const Mat<S>& dy) {
    if (placement_ == LnPlacement::pre) {
      Mat<S> dh = dy;
      const Mat<S> dm_in = mlp.backward(ctx, c.mlp, dy);
      dh += layer_norm_backward<S>(c.ln2, ln2_gain.value, dm_in, ln2_gain.grad, ln2_bias.grad);
      const Mat<S> da_in = attention.backward(ctx, c.attn, dh);
      Mat<S> dx = dh;
      dx += layer_norm_backward<S>(c.ln1, ln1_gain.value, da_in, ln1_gain.grad, ln1_bias.grad);
      return dx;
    }
    const Mat<S> dz2 =
        layer_norm_backward<S>(c.ln2, ln2_gain.value, dy, ln2_gain.grad, ln2_bias.grad);
    Mat<S> dh = dz2;
    dh += mlp.backward(ctx, c.mlp, dz2);
    const Mat<S> dz1 =
        layer_norm_backward<S>(c.ln1, ln1_gain.value, dh, ln1_gain.grad, ln1_bias.grad);
    Mat<S> dx = dz1;
    dx += attention.backward(ctx, c.attn, dz1);
    return dx;
  }

  LnPlacement placement_;
  S eps_;
};

template <Real S>
struct ModelCache {
  Index batch = 0;
  Index seq = 0;
  std::vector<TokenId> inputs;
  Mat<S> embedding_mask;
  std::vector<LayerCache<S>> layers;
  LayerNormCache<S> final_ln;
  std::vector<Index> loss_rows;
  ParallelCrossEntropyCache<S> loss;

  /// Activations retained by the transformer layers between forward and
  /// backward.
  Index layer_stored_elements() const {
    Index n = 0;
    for (const auto& l : layers) n += l.stored_elements();
    return n;
  }
  Index stored_elements() const {
    return layer_stored_elements() + embedding_mask.size() + final_ln.stored_elements() +
           loss.stored_elements();
  }
};

struct BackwardStats {
  /// Largest number of layer activation elements alive at once during
  /// backward (retained boundaries plus one recomputed layer).
  Index peak_layer_elements = 0;
};

/// One MP rank's shard of a GPT-2 style decoder or BERT style encoder with a
/// vocabulary-parallel token table tied to the output projection.
template <Real S>
class Model {
 public:
  Model(const ModelConfig& cfg, ParallelContext ctx)
      : cfg_((cfg.validate(ctx.mp_size), cfg)),
        ctx_(std::move(ctx)),
        embedding_("embedding.word", cfg_.padded_vocab(), cfg_.hidden, ctx_),
        position_("embedding.position", cfg_.max_seq, cfg_.hidden, PartitionAxis::replicated,
                  ctx_.mp_rank, 1),
        final_gain_("final_ln.gain", 1, cfg_.hidden, PartitionAxis::replicated, ctx_.mp_rank, 1,
                    false),
        final_bias_("final_ln.bias", 1, cfg_.hidden, PartitionAxis::replicated, ctx_.mp_rank, 1,
                    false),
        dropout_p_(cfg_.dropout) {
    layers_.reserve(static_cast<std::size_t>(cfg_.layers));
    for (int i = 0; i < cfg_.layers; ++i) {
      layers_.emplace_back("layers." + std::to_string(i), cfg_, ctx_);
    }
    final_gain_.value.setOnes();
    for (auto& l : layers_) {
      l.ln1_gain.value.setOnes();
      l.ln2_gain.value.setOnes();
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParallelContext& context() { return ctx_; }
  const ParallelContext& context() const { return ctx_; }
  bool has_final_ln() const { return cfg_.ln_placement == LnPlacement::pre; }
  const VocabParallelEmbedding<S>& embedding() const { return embedding_; }
  std::vector<TransformerLayer<S>>& layers() { return layers_; }

  void set_activation_checkpointing(bool on) { checkpointing_ = on; }
  bool activation_checkpointing() const { return checkpointing_; }

  /// Training mode applies the configured dropout; eval mode disables it.
  void set_training(bool on) {
    dropout_p_ = on ? cfg_.dropout : 0.0;
    for (auto& l : layers_) l.set_dropout(dropout_p_);
  }

  ParamList<S> parameters() {
    ParamList<S> out;
    out.push_back(&embedding_.weight);
    out.push_back(&position_);
    for (auto& l : layers_) l.collect(out);
    if (has_final_ln()) {
      out.push_back(&final_gain_);
      out.push_back(&final_bias_);
    }
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  /// Weights ~ N(0, init_std^2); the attention output and second MLP
  /// projection of each layer are further scaled by 1/sqrt(2N). Layer-norm
  /// gains are 1 and biases 0. Every tensor is drawn in full from its own
  /// named stream and then sliced, so the full model is identical for any
  /// MP size.
  void init_weights(std::uint64_t seed) {
    const double residual_scale = 1.0 / std::sqrt(2.0 * cfg_.layers);
    for (ShardedParam<S>* p : parameters()) {
      const std::string& n = p->name;
      const bool is_ln = n.find(".ln") != std::string::npos || n.rfind("final_ln", 0) == 0;
      if (is_ln) {
        p->value.setConstant(ends_with(n, ".gain") ? S(1) : S(0));
        continue;
      }
      if (ends_with(n, ".bias")) {
        p->value.setZero();
        continue;
      }
      const bool residual = ends_with(n, ".attention.dense.weight") || ends_with(n, ".mlp.proj.weight");
      const double std_dev = cfg_.init_std * (residual ? residual_scale : 1.0);
      RngStream rng(hash_combine(seed, fnv1a64(n)));
      Mat<double> full(p->full_rows, p->full_cols);
      for (Index i = 0; i < full.size(); ++i) full.data()[i] = rng.normal() * std_dev;
      p->value = p->slice_of(full);
    }
  }

  std::pair<S, ModelCache<S>> forward_loss(const Batch& batch) {
    check_batch(batch);
    ModelCache<S> cache;
    cache.batch = batch.batch;
    cache.seq = batch.seq;
    cache.inputs = batch.inputs;
    Mat<S> x = embed(batch.inputs, batch.batch, batch.seq, &cache.embedding_mask);
    cache.layers.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i].forward(ctx_, x, batch.batch, batch.seq, cache.layers[i], !checkpointing_);
    }
    if (has_final_ln()) {
      x = layer_norm<S>(x, final_gain_.value, final_bias_.value, S(cfg_.ln_eps), &cache.final_ln);
    }
    std::vector<TokenId> targets;
    for (Index r = 0; r < static_cast<Index>(batch.targets.size()); ++r) {
      if (batch.targets[static_cast<std::size_t>(r)] != kIgnoreLabel) {
        cache.loss_rows.push_back(r);
        targets.push_back(batch.targets[static_cast<std::size_t>(r)]);
      }
    }
    Mat<S> selected(static_cast<Index>(cache.loss_rows.size()), cfg_.hidden);
    for (std::size_t i = 0; i < cache.loss_rows.size(); ++i) {
      selected.row(static_cast<Index>(i)) = x.row(cache.loss_rows[i]);
    }
    auto ce = vocab_parallel_cross_entropy<S>(ctx_, selected, embedding_.weight, targets,
                                              cfg_.vocab);
    cache.loss = std::move(ce.cache);
    return {ce.loss, std::move(cache)};
  }

  /// Accumulates gradients of every parameter held by this rank.
  BackwardStats backward(const ModelCache<S>& cache) {
    BackwardStats stats;
    const Mat<S> dsel = vocab_parallel_cross_entropy_backward<S>(ctx_, cache.loss, embedding_.weight);
    Mat<S> dx = Mat<S>::Zero(cache.batch * cache.seq, cfg_.hidden);
    for (std::size_t i = 0; i < cache.loss_rows.size(); ++i) {
      dx.row(cache.loss_rows[i]) = dsel.row(static_cast<Index>(i));
    }
    if (has_final_ln()) {
      dx = layer_norm_backward<S>(cache.final_ln, final_gain_.value, dx, final_gain_.grad,
                                  final_bias_.grad);
    }
    Index boundaries = 0;
    for (const auto& l : cache.layers) boundaries += l.x.size();
    for (std::size_t i = layers_.size(); i-- > 0;) {
      Index internal = 0;
      dx = layers_[i].backward(ctx_, cache.layers[i], dx, &internal);
      const Index alive = checkpointing_ || !cache.layers[i].has_internals
                              ? boundaries + internal
                              : cache.layer_stored_elements();
      stats.peak_layer_elements = std::max(stats.peak_layer_elements, alive);
    }
    dx = dx.cwiseProduct(cache.embedding_mask);
    for (Index r = 0; r < dx.rows(); ++r) position_.grad.row(r % cache.seq) += dx.row(r);
    embedding_.backward(ctx_, cache.inputs, dx);
    return stats;
  }

  /// Final hidden states (after the final layer norm when present).
  Mat<S> hidden_states(std::span<const TokenId> inputs, Index batch, Index seq) {
    check_inputs(inputs, batch, seq);
    Mat<S> x = embed(inputs, batch, seq, nullptr);
    for (auto& l : layers_) {
      LayerCache<S> scratch;
      x = l.forward(ctx_, x, batch, seq, scratch, false);
    }
    if (has_final_ln()) {
      x = layer_norm<S>(x, final_gain_.value, final_bias_.value, S(cfg_.ln_eps));
    }
    return x;
  }

  /// Logits against this rank's vocabulary slice.
  Mat<S> local_logits(std::span<const TokenId> inputs, Index batch, Index seq) {
    return matmul_nt<S>(hidden_states(inputs, batch, seq), embedding_.weight.value);
  }

  /// Logits over the padded vocabulary, gathered across the MP group. Only
  /// the first config().vocab columns are real tokens.
  Mat<S> logits(std::span<const TokenId> inputs, Index batch, Index seq) {
    return ctx_.all_gather(local_logits(inputs, batch, seq), 1, comm::Traffic::other);
  }

  /// Autoregressive sampling; temperature 0 is greedy. Padding ids are never
  /// produced. Every MP rank must call this in lockstep.
  std::vector<TokenId> generate(std::span<const TokenId> prompt, int max_new, double temperature,
                                std::uint64_t seed) {
    if (cfg_.architecture != Architecture::gpt2) {
      throw UnsupportedError("generate: only causal (gpt2) models can sample");
    }
    if (temperature < 0) throw ParameterError("generate: temperature must be >= 0");
    if (prompt.empty()) throw ParameterError("generate: empty prompt");
    std::vector<TokenId> out(prompt.begin(), prompt.end());
    RngStream rng(seed);
    const bool was_training = dropout_p_ > 0.0;
    set_training(false);
    for (int step = 0; step < max_new; ++step) {
      const std::size_t len = std::min<std::size_t>(out.size(), static_cast<std::size_t>(cfg_.max_seq));
      std::span<const TokenId> window(out.data() + out.size() - len, len);
      const Mat<S> lg = logits(window, 1, static_cast<Index>(len));
      const auto last = lg.row(lg.rows() - 1).head(cfg_.vocab);
      TokenId next = 0;
      if (temperature == 0.0) {
        Index arg = 0;
        last.maxCoeff(&arg);
        next = static_cast<TokenId>(arg);
      } else {
        std::vector<double> p(static_cast<std::size_t>(last.size()));
        const double mx = static_cast<double>(last.maxCoeff());
        double z = 0;
        for (Index j = 0; j < last.size(); ++j) {
          p[static_cast<std::size_t>(j)] = std::exp((static_cast<double>(last(j)) - mx) / temperature);
          z += p[static_cast<std::size_t>(j)];
        }
        double u = rng.uniform() * z;
        next = static_cast<TokenId>(last.size() - 1);
        for (Index j = 0; j < last.size(); ++j) {
          u -= p[static_cast<std::size_t>(j)];
          if (u < 0) {
            next = static_cast<TokenId>(j);
            break;
          }
        }
      }
      out.push_back(next);
    }
    if (was_training) set_training(true);
    return out;
  }

  /// Full (unsharded) tensors in parameter order. All MP ranks must call.
  std::vector<std::pair<std::string, Mat<S>>> gather_full_parameters() {
    std::vector<std::pair<std::string, Mat<S>>> out;
    for (ShardedParam<S>* p : parameters()) {
      Mat<S> full = p->sharded()
                        ? ctx_.all_gather(p->value, matrix_axis(p->axis), comm::Traffic::parameter)
                        : p->value;
      out.emplace_back(p->name, std::move(full));
    }
    return out;
  }

  /// Loads full tensors keyed by name and keeps this rank's slices.
  void load_full_parameters(const std::map<std::string, Mat<double>>& full) {
    for (ShardedParam<S>* p : parameters()) {
      const auto it = full.find(p->name);
      if (it == full.end()) throw FormatError("missing parameter " + p->name);
      p->value = p->slice_of(it->second);
    }
  }

 private:
  static bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  }

  void check_inputs(std::span<const TokenId> inputs, Index batch, Index seq) const {
    if (seq < 1 || seq > cfg_.max_seq) {
      throw DimensionError("sequence length " + std::to_string(seq) + " outside [1, " +
                           std::to_string(cfg_.max_seq) + "]");
    }
    if (static_cast<Index>(inputs.size()) != batch * seq) {
      throw DimensionError("inputs hold " + std::to_string(inputs.size()) + " ids, expected " +
                           std::to_string(batch * seq));
    }
    for (TokenId id : inputs) {
      if (id < 0 || id >= cfg_.vocab) {
        throw IndexError("input id " + std::to_string(id) + " outside vocabulary [0, " +
                         std::to_string(cfg_.vocab) + ")");
      }
    }
  }

  void check_batch(const Batch& b) const {
    check_inputs(b.inputs, b.batch, b.seq);
    if (b.targets.size() != b.inputs.size()) throw DimensionError("targets/inputs size mismatch");
  }

  Mat<S> embed(std::span<const TokenId> inputs, Index batch, Index seq, Mat<S>* mask_out) {
    Mat<S> x = embedding_.forward(ctx_, inputs);
    for (Index r = 0; r < batch * seq; ++r) x.row(r) += position_.value.row(r % seq);
    DropoutResult<S> d = dropout<S>(x, dropout_p_, ctx_.shared);
    if (mask_out) *mask_out = std::move(d.mask);
    return std::move(d.y);
  }

  ModelConfig cfg_;
  ParallelContext ctx_;
  VocabParallelEmbedding<S> embedding_;
  ShardedParam<S> position_;
  std::vector<TransformerLayer<S>> layers_;
  ShardedParam<S> final_gain_;
  ShardedParam<S> final_bias_;
  double dropout_p_;
  bool checkpointing_ = false;
};

}  // namespace tp
