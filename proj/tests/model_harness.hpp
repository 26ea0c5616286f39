#pragma once

// Runs one forward/backward pass of a freshly initialized model on an
// mp-way simulated group and returns everything tests compare: the loss,
// full (reassembled) parameters and gradients, and the MP census.

#include <functional>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "tp/model.hpp"

namespace tp::testing {

struct PassResult {
  double loss = 0;
  std::map<std::string, Mat<double>> values;
  std::map<std::string, Mat<double>> grads;
  /// Parameter names in model order.
  std::vector<std::string> order;
  comm::CommCounter activation;
  comm::CommCounter loss_scalars;
  Index peak_layer_elements = 0;
  Index layer_stored_elements = 0;
  /// True when every MP rank saw identical gradients for replicated tensors.
  bool replicated_agree = true;
};

struct PassOptions {
  bool checkpointing = false;
  bool training = false;
  std::uint64_t seed = 7;
  /// Applied to each rank's model before the pass (after init).
  std::function<void(Model<double>&)> tweak_f64;
};

template <Real S>
PassResult run_pass(const ModelConfig& cfg, int mp, const Batch& batch,
                    const PassOptions& opt = {}) {
  comm::World world({mp, mp});
  std::vector<std::vector<Mat<double>>> vals(static_cast<std::size_t>(mp));
  std::vector<std::vector<Mat<double>>> grads(static_cast<std::size_t>(mp));
  std::vector<PartitionAxis> axes;
  PassResult out;
  std::vector<Index> peaks(static_cast<std::size_t>(mp));
  std::vector<Index> stored(static_cast<std::size_t>(mp));
  std::vector<double> losses(static_cast<std::size_t>(mp));
  world.run([&](int r) {
    ParallelContext ctx = ParallelContext::for_rank(world, r, opt.seed);
    Model<S> model(cfg, ctx);
    model.init_weights(opt.seed);
    if constexpr (std::is_same_v<S, double>) {
      if (opt.tweak_f64) opt.tweak_f64(model);
    }
    model.set_training(opt.training);
    model.set_activation_checkpointing(opt.checkpointing);
    auto [loss, cache] = model.forward_loss(batch);
    const BackwardStats st = model.backward(cache);
    const auto i = static_cast<std::size_t>(r);
    losses[i] = static_cast<double>(loss);
    peaks[i] = st.peak_layer_elements;
    stored[i] = cache.layer_stored_elements();
    for (const auto* p : model.parameters()) {
      vals[i].push_back(p->value.template cast<double>());
      grads[i].push_back(p->grad.template cast<double>());
      if (r == 0) {
        out.order.push_back(p->name);
        axes.push_back(p->axis);
      }
    }
  });
  out.loss = losses[0];
  out.peak_layer_elements = peaks[0];
  out.layer_stored_elements = stored[0];
  for (std::size_t k = 0; k < out.order.size(); ++k) {
    std::vector<Mat<double>> v, g;
    for (int r = 0; r < mp; ++r) {
      v.push_back(vals[static_cast<std::size_t>(r)][k]);
      g.push_back(grads[static_cast<std::size_t>(r)][k]);
      if (axes[k] == PartitionAxis::replicated && g.back() != g.front()) {
        out.replicated_agree = false;
      }
    }
    out.values[out.order[k]] = reassemble<double>(v, axes[k]);
    out.grads[out.order[k]] = reassemble<double>(g, axes[k]);
  }
  out.activation = world.total(comm::GroupKind::model_parallel, comm::Collective::all_reduce,
                               comm::Traffic::activation);
  out.loss_scalars = world.total(comm::GroupKind::model_parallel, comm::Collective::all_reduce,
                                 comm::Traffic::loss_scalars);
  return out;
}

/// Batch of random tokens in [0, vocab); BERT-style batches mask about a
/// third of the targets.
inline Batch random_batch(const ModelConfig& cfg, Index batch, Index seq, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<std::vector<TokenId>> rows;
  for (Index b = 0; b < batch; ++b) {
    std::vector<TokenId> r;
    for (Index t = 0; t <= seq; ++t) {
      r.push_back(static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(cfg.vocab))));
    }
    rows.push_back(std::move(r));
  }
  Batch out = make_lm_batch(rows);
  if (cfg.architecture == Architecture::bert) {
    // Targets are the inputs themselves on the scored rows.
    for (std::size_t i = 0; i < out.targets.size(); ++i) {
      out.targets[i] = (rng.below(3) == 0 || i == 0) ? out.inputs[i] : kIgnoreLabel;
    }
  }
  return out;
}

}  // namespace tp::testing
