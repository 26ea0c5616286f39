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

#include <cstdint>
#include <string>
#include <vector>

#include "tp/config.hpp"

namespace tp {

struct BenchRow {
  BenchPoint point;
  std::uint64_t parameters = 0;
  double seconds_per_iter = 0;
  /// Analytic FLOPs of one training iteration (forward + backward).
  double flops_per_iter = 0;
  /// Per MP group and iteration.
  std::uint64_t measured_activation_calls = 0;
  std::uint64_t analytic_activation_calls = 0;
  std::uint64_t measured_activation_elements = 0;
  std::uint64_t analytic_activation_elements = 0;
  std::uint64_t measured_loss_elements = 0;
  std::uint64_t analytic_loss_elements = 0;
  /// Group totals split evenly over groups and iterations.
  bool uniform_totals = true;
  double speedup = 0;
  double efficiency = 0;

  bool comm_match() const {
    return uniform_totals && measured_activation_calls == analytic_activation_calls &&
           measured_activation_elements == analytic_activation_elements &&
           measured_loss_elements == analytic_loss_elements;
  }
};

struct BenchReport {
  std::string mode;
  int batch = 0;
  int seq = 0;
  int iters = 0;
  std::vector<BenchRow> rows;

  bool all_match() const;
  std::string to_text() const;
  Json to_json() const;
};

/// Per MP group and iteration: 4N + 2 activation all-reduces of b*s*H
/// elements when mp > 1, none otherwise.
std::uint64_t analytic_activation_elements(int layers, int hidden, int micro_batch, int seq,
                                           int mp);
/// 72 T N H^2 (1 + s / 6H + V / 12NH) with T = b*s tokens.
double training_flops(int layers, int hidden, int batch, int seq, Index padded_vocab);

BenchRow run_bench_point(const RunConfig& cfg, const BenchPoint& point);

/// Strong scaling: one model at mp = 1, 2, 4, 8 (world = mp). Heads sweep:
/// 16/24/32 heads at H = 192, each at mp = 1 and mp = 8. Explicit points in
/// the config replace the defaults.
BenchReport run_bench(const RunConfig& cfg);

}  // namespace tp
