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

#include <any>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <source_location>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tp/errors.hpp"
#include "tp/tensor.hpp"

namespace tp::comm {

using namespace std::chrono_literals;

inline constexpr std::chrono::milliseconds kDefaultTimeout = 30s;

struct WorldSpec {
  int world_size = 1;
  int model_parallel_size = 1;

  int data_parallel_size() const { return world_size / model_parallel_size; }
  /// Throws ConfigError unless both sizes are positive and mp divides world.
  void validate() const;
};

enum class GroupKind { model_parallel, data_parallel, world };
enum class Collective { all_reduce, all_gather, broadcast };
enum class ReduceOp { sum, max };

/// What a collective carries; lets the census separate layer activations
/// from loss scalars and gradient traffic.
enum class Traffic { activation, loss_scalars, gradient, norm, parameter, other };

std::string_view to_string(GroupKind k);
std::string_view to_string(Collective c);
std::string_view to_string(Traffic t);

struct GroupLayout {
  std::vector<std::vector<int>> model_parallel;
  std::vector<std::vector<int>> data_parallel;
};

/// Model-parallel groups are consecutive blocks of mp ranks; data-parallel
/// groups collect the ranks holding the same position in every block.
GroupLayout build_groups(const WorldSpec& spec);

struct CommCounter {
  std::uint64_t calls = 0;
  /// Payload elements per member: the input size for all-reduce and
  /// broadcast, the gathered output size for all-gather. Zero for
  /// single-member groups, where nothing moves.
  std::uint64_t elements = 0;
  std::uint64_t bytes = 0;

  CommCounter& operator+=(const CommCounter& o) {
    calls += o.calls;
    elements += o.elements;
    bytes += o.bytes;
    return *this;
  }
  friend CommCounter operator-(CommCounter a, const CommCounter& b) {
    a.calls -= b.calls;
    a.elements -= b.elements;
    a.bytes -= b.bytes;
    return a;
  }
  friend bool operator==(const CommCounter&, const CommCounter&) = default;
};

/// Per-group counters keyed by (collective, traffic). Monotone until reset().
class CommStats {
 public:
  using Key = std::pair<Collective, Traffic>;
  using Table = std::map<Key, CommCounter>;

  void record(Collective c, Traffic t, std::uint64_t elements, std::uint64_t bytes);
  /// Sum over traffic classes unless one is named.
  CommCounter get(Collective c, std::optional<Traffic> t = std::nullopt) const;
  Table snapshot() const;
  void reset();

 private:
  mutable std::mutex mu_;
  Table table_;
};

CommCounter sum_of(const CommStats::Table& table, Collective c,
                   std::optional<Traffic> t = std::nullopt);

/// A set of global ranks that meet at collectives. Every member calls each
/// collective in the same program order; the call blocks until all members
/// have arrived.
class ProcessGroup {
 public:
  ProcessGroup(GroupKind kind, int index, std::vector<int> ranks,
               std::chrono::milliseconds timeout,
               std::shared_ptr<std::atomic<bool>> abort_flag);

  ProcessGroup(const ProcessGroup&) = delete;
  ProcessGroup& operator=(const ProcessGroup&) = delete;

  GroupKind kind() const { return kind_; }
  int index() const { return index_; }
  int size() const { return static_cast<int>(ranks_.size()); }
  const std::vector<int>& ranks() const { return ranks_; }
  bool contains(int global_rank) const;
  /// Position of a global rank inside the group; ParameterError if absent.
  int position_of(int global_rank) const;
  std::string name() const;

  CommStats& stats() { return stats_; }
  const CommStats& stats() const { return stats_; }

  /// Elementwise reduction, applied in ascending member order.
  template <Real S>
  Mat<S> all_reduce(int global_rank, const Mat<S>& x, ReduceOp op = ReduceOp::sum,
                    Traffic traffic = Traffic::activation,
                    std::source_location loc = std::source_location::current());

  /// Concatenation of every member's block along `axis` (0 rows, 1 cols) in
  /// ascending member order.
  template <Real S>
  Mat<S> all_gather(int global_rank, const Mat<S>& x, int axis,
                    Traffic traffic = Traffic::activation,
                    std::source_location loc = std::source_location::current());

  /// Every member receives the tensor held by global rank `root`.
  template <Real S>
  Mat<S> broadcast(int global_rank, const Mat<S>& x, int root,
                   Traffic traffic = Traffic::parameter,
                   std::source_location loc = std::source_location::current());

  /// Clears rendezvous state after an aborted run.
  void reset_rendezvous();
  void wake_all();

 private:
  struct Arrival {
    const void* data = nullptr;
    Index rows = 0;
    Index cols = 0;
  };
  struct CallDesc {
    Collective kind = Collective::all_reduce;
    ReduceOp op = ReduceOp::sum;
    int axis = 0;
    int root = -1;
    std::size_t scalar_size = 0;
    Traffic traffic = Traffic::activation;
    friend bool operator==(const CallDesc&, const CallDesc&) = default;
  };
  using Combine = std::function<std::uint64_t(std::span<const Arrival>, std::any&)>;
  using Read = std::function<void(const std::any&)>;

  void rendezvous(int pos, const CallDesc& desc, Arrival arrival, const Combine& combine,
                  const Read& read, const std::source_location& loc);
  [[noreturn]] void fail_timeout(const CallDesc& desc, const std::source_location& loc);
  void record_single(const CallDesc& desc, std::uint64_t elements);

  GroupKind kind_;
  int index_;
  std::vector<int> ranks_;
  std::chrono::milliseconds timeout_;
  std::shared_ptr<std::atomic<bool>> abort_flag_;
  CommStats stats_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::optional<Arrival>> slots_;
  std::vector<CallDesc> descs_;
  int arrived_ = 0;
  int departed_ = 0;
  bool draining_ = false;
  std::uint64_t generation_ = 0;
  std::string error_;
  std::any result_;
};

/// The simulated job: owns every process group and runs one worker thread
/// per global rank.
class World {
 public:
  explicit World(WorldSpec spec, std::chrono::milliseconds timeout = kDefaultTimeout);

  const WorldSpec& spec() const { return spec_; }
  int size() const { return spec_.world_size; }
  int mp_rank(int global_rank) const { return global_rank % spec_.model_parallel_size; }
  int dp_rank(int global_rank) const { return global_rank / spec_.model_parallel_size; }

  std::shared_ptr<ProcessGroup> model_parallel_group(int global_rank) const;
  std::shared_ptr<ProcessGroup> data_parallel_group(int global_rank) const;
  std::shared_ptr<ProcessGroup> world_group() const { return world_group_; }
  const std::vector<std::shared_ptr<ProcessGroup>>& model_parallel_groups() const {
    return mp_groups_;
  }
  const std::vector<std::shared_ptr<ProcessGroup>>& data_parallel_groups() const {
    return dp_groups_;
  }

  /// Runs fn(rank) for every rank, each on its own thread (inline when the
  /// world has one rank), and rethrows the first worker failure after all
  /// workers have stopped.
  void run(const std::function<void(int)>& fn);

  /// Sum of one counter over all groups of a kind.
  CommCounter total(GroupKind kind, Collective c,
                    std::optional<Traffic> t = std::nullopt) const;
  void reset_stats();
  /// Per-group table: group, collective, traffic, calls, elements, bytes.
  std::string stats_report() const;

 private:
  void abort();

  WorldSpec spec_;
  std::shared_ptr<std::atomic<bool>> abort_flag_;
  std::vector<std::shared_ptr<ProcessGroup>> mp_groups_;
  std::vector<std::shared_ptr<ProcessGroup>> dp_groups_;
  std::shared_ptr<ProcessGroup> world_group_;
};

// ---------------------------------------------------------------------------

template <Real S>
Mat<S> ProcessGroup::all_reduce(int global_rank, const Mat<S>& x, ReduceOp op,
                                Traffic traffic, std::source_location loc) {
  const int pos = position_of(global_rank);
  const CallDesc desc{Collective::all_reduce, op, 0, -1, sizeof(S), traffic};
  if (size() == 1) {
    record_single(desc, 0);
    return x;
  }
  Mat<S> out;
  rendezvous(
      pos, desc, Arrival{x.data(), x.rows(), x.cols()},
      [op](std::span<const Arrival> in, std::any& result) {
        for (const Arrival& a : in) {
          if (a.rows != in[0].rows || a.cols != in[0].cols) {
            throw ProtocolError("all_reduce: member shapes differ " +
                                shape_str(in[0].rows, in[0].cols) + " vs " +
                                shape_str(a.rows, a.cols));
          }
        }
        using CMap = Eigen::Map<const Mat<S>>;
        Mat<S> acc = CMap(static_cast<const S*>(in[0].data), in[0].rows, in[0].cols);
        for (std::size_t p = 1; p < in.size(); ++p) {
          CMap part(static_cast<const S*>(in[p].data), in[p].rows, in[p].cols);
          if (op == ReduceOp::sum) {
            acc += part;
          } else {
            acc = acc.cwiseMax(part);
          }
        }
        const auto n = static_cast<std::uint64_t>(acc.size());
        result = std::move(acc);
        return n;
      },
      [&out](const std::any& result) { out = std::any_cast<const Mat<S>&>(result); },
      loc);
  return out;
}

template <Real S>
Mat<S> ProcessGroup::all_gather(int global_rank, const Mat<S>& x, int axis,
                                Traffic traffic, std::source_location loc) {
  if (axis != 0 && axis != 1) throw ParameterError("all_gather: axis must be 0 or 1");
  const int pos = position_of(global_rank);
  const CallDesc desc{Collective::all_gather, ReduceOp::sum, axis, -1, sizeof(S), traffic};
  if (size() == 1) {
    record_single(desc, 0);
    return x;
  }
  Mat<S> out;
  rendezvous(
      pos, desc, Arrival{x.data(), x.rows(), x.cols()},
      [axis](std::span<const Arrival> in, std::any& result) {
        for (const Arrival& a : in) {
          if (a.rows != in[0].rows || a.cols != in[0].cols) {
            throw ProtocolError("all_gather: member shapes differ " +
                                shape_str(in[0].rows, in[0].cols) + " vs " +
                                shape_str(a.rows, a.cols));
          }
        }
        const Index r = in[0].rows;
        const Index c = in[0].cols;
        const auto n = static_cast<Index>(in.size());
        Mat<S> cat(axis == 0 ? r * n : r, axis == 0 ? c : c * n);
        for (Index p = 0; p < n; ++p) {
          Eigen::Map<const Mat<S>> part(static_cast<const S*>(in[p].data), r, c);
          if (axis == 0) {
            cat.middleRows(p * r, r) = part;
          } else {
            cat.middleCols(p * c, c) = part;
          }
        }
        const auto total = static_cast<std::uint64_t>(cat.size());
        result = std::move(cat);
        return total;
      },
      [&out](const std::any& result) { out = std::any_cast<const Mat<S>&>(result); },
      loc);
  return out;
}

template <Real S>
Mat<S> ProcessGroup::broadcast(int global_rank, const Mat<S>& x, int root, Traffic traffic,
                               std::source_location loc) {
  if (!contains(root)) {
    throw ParameterError("broadcast: root " + std::to_string(root) + " not in " + name());
  }
  const int pos = position_of(global_rank);
  const int root_pos = position_of(root);
  const CallDesc desc{Collective::broadcast, ReduceOp::sum, 0, root, sizeof(S), traffic};
  if (size() == 1) {
    record_single(desc, 0);
    return x;
  }
  Mat<S> out;
  rendezvous(
      pos, desc, Arrival{x.data(), x.rows(), x.cols()},
      [root_pos](std::span<const Arrival> in, std::any& result) {
        const Arrival& a = in[static_cast<std::size_t>(root_pos)];
        Mat<S> copy = Eigen::Map<const Mat<S>>(static_cast<const S*>(a.data), a.rows, a.cols);
        const auto n = static_cast<std::uint64_t>(copy.size());
        result = std::move(copy);
        return n;
      },
      [&out](const std::any& result) { out = std::any_cast<const Mat<S>&>(result); },
      loc);
  return out;
}

}  // namespace tp::comm
