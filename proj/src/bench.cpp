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

#include "tp/bench.hpp"

#include <chrono>
#include <cstdio>
#include <sstream>

namespace tp {
namespace {

template <Real S>
double timed_steps(comm::World& world, const ModelConfig& mcfg, const TrainConfig& tcfg,
                   const Batch& batch, int iters) {
  double seconds = 0;
  world.run([&](int rank) {
    Trainer<S> trainer(mcfg, tcfg, world, rank);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < iters; ++i) trainer.step(batch);
    if (rank == 0) {
      seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  });
  return seconds / iters;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

std::uint64_t analytic_activation_elements(int layers, int hidden, int micro_batch, int seq,
                                           int mp) {
  if (mp == 1) return 0;
  return static_cast<std::uint64_t>(4 * layers + 2) * static_cast<std::uint64_t>(micro_batch) *
         static_cast<std::uint64_t>(seq) * static_cast<std::uint64_t>(hidden);
}

double training_flops(int layers, int hidden, int batch, int seq, Index padded_vocab) {
  const double t = static_cast<double>(batch) * seq;
  const double h = hidden;
  const double n = layers;
  return 72.0 * t * n * h * h *
         (1.0 + seq / (6.0 * h) + static_cast<double>(padded_vocab) / (12.0 * n * h));
}

BenchRow run_bench_point(const RunConfig& cfg, const BenchPoint& point) {
  ModelConfig m = cfg.model;
  m.architecture = Architecture::gpt2;
  m.layers = point.layers;
  m.hidden = point.hidden;
  m.heads = point.heads;
  m.vocab = cfg.bench.vocab;
  m.max_seq = std::max(m.max_seq, cfg.bench.seq);
  m.dropout = 0.0;
  const comm::WorldSpec spec{point.world, point.mp};
  spec.validate();
  m.validate(point.mp);
  const int dp = spec.data_parallel_size();

  TrainConfig t = cfg.train;
  t.global_batch = cfg.bench.batch;
  t.micro_batch = 0;
  t.activation_checkpointing = false;
  t.consistency_check_interval = 0;
  t.validate(dp);

  RngStream rng(hash_combine(cfg.train.seed, fnv1a64("bench")));
  std::vector<std::vector<TokenId>> rows(static_cast<std::size_t>(cfg.bench.batch));
  for (auto& r : rows) {
    for (int i = 0; i <= cfg.bench.seq; ++i) {
      r.push_back(static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(m.vocab))));
    }
  }
  const Batch batch = make_lm_batch(rows);

  comm::World world(spec);
  BenchRow row;
  row.point = point;
  row.parameters = count_parameters(m);
  row.seconds_per_iter = cfg.precision == Precision::f32
                             ? timed_steps<float>(world, m, t, batch, cfg.bench.iters)
                             : timed_steps<double>(world, m, t, batch, cfg.bench.iters);
  const int micro = cfg.bench.batch / dp;
  row.flops_per_iter = training_flops(m.layers, m.hidden, cfg.bench.batch, cfg.bench.seq,
                                      m.padded_vocab());
  const auto per = static_cast<std::uint64_t>(dp) * static_cast<std::uint64_t>(cfg.bench.iters);
  const auto act = world.total(comm::GroupKind::model_parallel, comm::Collective::all_reduce,
                               comm::Traffic::activation);
  const auto loss = world.total(comm::GroupKind::model_parallel, comm::Collective::all_reduce,
                                comm::Traffic::loss_scalars);
  row.measured_activation_calls = point.mp == 1 ? 0 : act.calls / per;
  row.measured_activation_elements = act.elements / per;
  row.measured_loss_elements = loss.elements / per;
  row.analytic_activation_calls = point.mp == 1 ? 0 : static_cast<std::uint64_t>(4 * m.layers + 2);
  row.analytic_activation_elements =
      analytic_activation_elements(m.layers, m.hidden, micro, cfg.bench.seq, point.mp);
  row.analytic_loss_elements =
      point.mp == 1 ? 0 : 3 * static_cast<std::uint64_t>(micro) * cfg.bench.seq;
  // Totals must be exact multiples, not just right on average.
  row.uniform_totals = act.calls % per == 0 && act.elements % per == 0 && loss.elements % per == 0;
  return row;
}

BenchReport run_bench(const RunConfig& cfg) {
  BenchReport rep;
  rep.mode = cfg.bench.mode;
  rep.batch = cfg.bench.batch;
  rep.seq = cfg.bench.seq;
  rep.iters = cfg.bench.iters;
  std::vector<BenchPoint> points = cfg.bench.points;
  if (points.empty()) {
    if (cfg.bench.mode == "heads") {
      for (int heads : {16, 24, 32}) {
        points.push_back({cfg.model.layers, 192, heads, 1, 1});
        points.push_back({cfg.model.layers, 192, heads, 8, 8});
      }
    } else {
      for (int mp : {1, 2, 4, 8}) {
        points.push_back({cfg.model.layers, cfg.model.hidden, cfg.model.heads, mp, mp});
      }
    }
  }
  for (const auto& p : points) rep.rows.push_back(run_bench_point(cfg, p));
  // Speedup against the single-worker run of the same shape.
  for (auto& r : rep.rows) {
    for (const auto& base : rep.rows) {
      if (base.point.world == 1 && base.point.layers == r.point.layers &&
          base.point.hidden == r.point.hidden && base.point.heads == r.point.heads) {
        r.speedup = base.seconds_per_iter / r.seconds_per_iter;
        r.efficiency = r.speedup / r.point.world;
        break;
      }
    }
  }
  return rep;
}

bool BenchReport::all_match() const {
  for (const auto& r : rows) {
    if (!r.comm_match()) return false;
  }
  return true;
}

std::string BenchReport::to_text() const {
  std::ostringstream os;
  os << "mode " << mode << "  batch " << batch << "  seq " << seq << "  iters " << iters << "\n";
  if (mode == "heads") {
    os << "heads  hidden/head  mp  params      s/iter     efficiency  act_meas    act_pred    "
          "loss_meas  loss_pred  comm\n";
  } else {
    os << "mp  workers  params      s/iter     speedup  efficiency  act_meas    act_pred    "
          "loss_meas  loss_pred  comm\n";
  }
  for (const auto& r : rows) {
    char line[256];
    if (mode == "heads") {
      std::snprintf(line, sizeof line, "%-6d %-12d %-3d ", r.point.heads,
                    r.point.hidden / r.point.heads, r.point.mp);
    } else {
      std::snprintf(line, sizeof line, "%-3d %-8d ", r.point.mp, r.point.world);
    }
    os << line;
    std::snprintf(line, sizeof line, "%-11llu %-10s ",
                  static_cast<unsigned long long>(r.parameters),
                  fmt("%.4f", r.seconds_per_iter).c_str());
    os << line;
    if (mode != "heads") os << fmt("%-8.2f ", r.speedup);
    std::snprintf(line, sizeof line, "%-11s %-11llu %-11llu %-10llu %-10llu %s\n",
                  fmt("%.1f%%", 100.0 * r.efficiency).c_str(),
                  static_cast<unsigned long long>(r.measured_activation_elements),
                  static_cast<unsigned long long>(r.analytic_activation_elements),
                  static_cast<unsigned long long>(r.measured_loss_elements),
                  static_cast<unsigned long long>(r.analytic_loss_elements),
                  r.comm_match() ? "exact" : "MISMATCH");
    os << line;
  }
  os << "communication elements are per model-parallel group per iteration; timings are "
        "host-dependent\n";
  return os.str();
}

Json BenchReport::to_json() const {
  Json rs = Json::array();
  for (const auto& r : rows) {
    rs.push_back({{"layers", r.point.layers},
                  {"hidden", r.point.hidden},
                  {"heads", r.point.heads},
                  {"world", r.point.world},
                  {"mp", r.point.mp},
                  {"parameters", r.parameters},
                  {"seconds_per_iter", r.seconds_per_iter},
                  {"flops_per_iter", r.flops_per_iter},
                  {"speedup", r.speedup},
                  {"efficiency", r.efficiency},
                  {"measured_activation_calls", r.measured_activation_calls},
                  {"analytic_activation_calls", r.analytic_activation_calls},
                  {"measured_activation_elements", r.measured_activation_elements},
                  {"analytic_activation_elements", r.analytic_activation_elements},
                  {"measured_loss_elements", r.measured_loss_elements},
                  {"analytic_loss_elements", r.analytic_loss_elements},
                  {"comm_match", r.comm_match()}});
  }
  return {{"mode", mode}, {"batch", batch}, {"seq", seq}, {"iters", iters}, {"rows", rs}};
}

}  // namespace tp
