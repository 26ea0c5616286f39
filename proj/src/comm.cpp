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

#include "tp/comm.hpp"

#include <exception>
#include <iomanip>
#include <sstream>
#include <thread>

namespace tp::comm {

void WorldSpec::validate() const {
  if (world_size < 1) {
    throw ConfigError("world size must be positive, got " + std::to_string(world_size));
  }
  if (model_parallel_size < 1) {
    throw ConfigError("model parallel size must be positive, got " +
                      std::to_string(model_parallel_size));
  }
  if (world_size % model_parallel_size != 0) {
    throw ConfigError("model parallel size " + std::to_string(model_parallel_size) +
                      " does not divide world size " + std::to_string(world_size));
  }
}

std::string_view to_string(GroupKind k) {
  switch (k) {
    case GroupKind::model_parallel: return "model_parallel";
    case GroupKind::data_parallel: return "data_parallel";
    case GroupKind::world: return "world";
  }
  return "?";
}

std::string_view to_string(Collective c) {
  switch (c) {
    case Collective::all_reduce: return "all_reduce";
    case Collective::all_gather: return "all_gather";
    case Collective::broadcast: return "broadcast";
  }
  return "?";
}

std::string_view to_string(Traffic t) {
  switch (t) {
    case Traffic::activation: return "activation";
    case Traffic::loss_scalars: return "loss_scalars";
    case Traffic::gradient: return "gradient";
    case Traffic::norm: return "norm";
    case Traffic::parameter: return "parameter";
    case Traffic::other: return "other";
  }
  return "?";
}

GroupLayout build_groups(const WorldSpec& spec) {
  spec.validate();
  const int mp = spec.model_parallel_size;
  const int dp = spec.data_parallel_size();
  GroupLayout layout;
  layout.model_parallel.resize(static_cast<std::size_t>(dp));
  layout.data_parallel.resize(static_cast<std::size_t>(mp));
  for (int rank = 0; rank < spec.world_size; ++rank) {
    layout.model_parallel[static_cast<std::size_t>(rank / mp)].push_back(rank);
    layout.data_parallel[static_cast<std::size_t>(rank % mp)].push_back(rank);
  }
  return layout;
}

// --- CommStats --------------------------------------------------------------

void CommStats::record(Collective c, Traffic t, std::uint64_t elements,
                       std::uint64_t bytes) {
  std::lock_guard lk(mu_);
  CommCounter& ctr = table_[{c, t}];
  ctr.calls += 1;
  ctr.elements += elements;
  ctr.bytes += bytes;
}

CommCounter CommStats::get(Collective c, std::optional<Traffic> t) const {
  std::lock_guard lk(mu_);
  return sum_of(table_, c, t);
}

CommStats::Table CommStats::snapshot() const {
  std::lock_guard lk(mu_);
  return table_;
}

void CommStats::reset() {
  std::lock_guard lk(mu_);
  table_.clear();
}

CommCounter sum_of(const CommStats::Table& table, Collective c, std::optional<Traffic> t) {
  CommCounter out;
  for (const auto& [key, ctr] : table) {
    if (key.first == c && (!t || key.second == *t)) out += ctr;
  }
  return out;
}

// --- ProcessGroup -----------------------------------------------------------

ProcessGroup::ProcessGroup(GroupKind kind, int index, std::vector<int> ranks,
                           std::chrono::milliseconds timeout,
                           std::shared_ptr<std::atomic<bool>> abort_flag)
    : kind_(kind),
      index_(index),
      ranks_(std::move(ranks)),
      timeout_(timeout),
      abort_flag_(abort_flag ? std::move(abort_flag)
                             : std::make_shared<std::atomic<bool>>(false)),
      slots_(ranks_.size()),
      descs_(ranks_.size()) {
  if (ranks_.empty()) throw ConfigError("process group must have at least one member");
}

bool ProcessGroup::contains(int global_rank) const {
  return std::find(ranks_.begin(), ranks_.end(), global_rank) != ranks_.end();
}

int ProcessGroup::position_of(int global_rank) const {
  const auto it = std::find(ranks_.begin(), ranks_.end(), global_rank);
  if (it == ranks_.end()) {
    throw ParameterError("rank " + std::to_string(global_rank) + " is not a member of " +
                         name());
  }
  return static_cast<int>(it - ranks_.begin());
}

std::string ProcessGroup::name() const {
  std::string s = std::string(to_string(kind_)) + "/" + std::to_string(index_) + " {";
  for (std::size_t i = 0; i < ranks_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(ranks_[i]);
  }
  return s + "}";
}

void ProcessGroup::record_single(const CallDesc& desc, std::uint64_t elements) {
  stats_.record(desc.kind, desc.traffic, elements, elements * desc.scalar_size);
}

void ProcessGroup::fail_timeout(const CallDesc& desc, const std::source_location& loc) {
  std::string lagging;
  for (std::size_t p = 0; p < slots_.size(); ++p) {
    if (!slots_[p]) {
      if (!lagging.empty()) lagging += ",";
      lagging += std::to_string(ranks_[p]);
    }
  }
  throw DeadlockError(std::string(to_string(desc.kind)) + " on " + name() +
                      " timed out after " + std::to_string(timeout_.count()) +
                      " ms at " + loc.file_name() + ":" + std::to_string(loc.line()) +
                      " (" + loc.function_name() + "); waiting for rank(s) " +
                      (lagging.empty() ? std::string("<draining>") : lagging));
}

void ProcessGroup::rendezvous(int pos, const CallDesc& desc, Arrival arrival,
                              const Combine& combine, const Read& read,
                              const std::source_location& loc) {
  std::unique_lock lk(mu_);
  const auto deadline = std::chrono::steady_clock::now() + timeout_;
  auto wait_for = [&](auto pred) {
    const bool ok = cv_.wait_until(lk, deadline, [&] { return pred() || abort_flag_->load(); });
    if (abort_flag_->load()) throw AbortedError(name() + ": job aborted by another worker");
    if (!ok) fail_timeout(desc, loc);
  };

  wait_for([&] { return !draining_; });
  if (slots_[static_cast<std::size_t>(pos)]) {
    throw ProtocolError(name() + ": rank " + std::to_string(ranks_[pos]) +
                        " entered a collective twice");
  }
  slots_[static_cast<std::size_t>(pos)] = arrival;
  descs_[static_cast<std::size_t>(pos)] = desc;
  ++arrived_;

  if (arrived_ == size()) {
    error_.clear();
    for (std::size_t p = 1; p < descs_.size(); ++p) {
      if (!(descs_[p] == descs_[0])) {
        error_ = name() + ": members issued mismatched collectives (" +
                 std::string(to_string(descs_[0].kind)) + " vs " +
                 std::string(to_string(descs_[p].kind)) + ")";
        break;
      }
    }
    if (error_.empty()) {
      std::vector<Arrival> in;
      in.reserve(slots_.size());
      for (const auto& s : slots_) in.push_back(*s);
      try {
        const std::uint64_t elements = combine(in, result_);
        stats_.record(desc.kind, desc.traffic, elements, elements * desc.scalar_size);
      } catch (const std::exception& e) {
        error_ = e.what();
      }
    }
    draining_ = true;
    ++generation_;
    cv_.notify_all();
  } else {
    const std::uint64_t gen = generation_;
    wait_for([&] { return generation_ != gen; });
  }

  const std::string err = error_;
  if (err.empty()) read(result_);
  if (++departed_ == size()) {
    for (auto& s : slots_) s.reset();
    arrived_ = 0;
    departed_ = 0;
    draining_ = false;
    result_.reset();
    cv_.notify_all();
  }
  if (!err.empty()) throw ProtocolError(err);
}

void ProcessGroup::reset_rendezvous() {
  std::lock_guard lk(mu_);
  for (auto& s : slots_) s.reset();
  arrived_ = 0;
  departed_ = 0;
  draining_ = false;
  error_.clear();
  result_.reset();
}

void ProcessGroup::wake_all() {
  std::lock_guard lk(mu_);
  cv_.notify_all();
}

// --- World ------------------------------------------------------------------

World::World(WorldSpec spec, std::chrono::milliseconds timeout)
    : spec_(spec), abort_flag_(std::make_shared<std::atomic<bool>>(false)) {
  const GroupLayout layout = build_groups(spec_);
  for (std::size_t i = 0; i < layout.model_parallel.size(); ++i) {
    mp_groups_.push_back(std::make_shared<ProcessGroup>(
        GroupKind::model_parallel, static_cast<int>(i), layout.model_parallel[i], timeout,
        abort_flag_));
  }
  for (std::size_t i = 0; i < layout.data_parallel.size(); ++i) {
    dp_groups_.push_back(std::make_shared<ProcessGroup>(
        GroupKind::data_parallel, static_cast<int>(i), layout.data_parallel[i], timeout,
        abort_flag_));
  }
  std::vector<int> all(static_cast<std::size_t>(spec_.world_size));
  for (int r = 0; r < spec_.world_size; ++r) all[static_cast<std::size_t>(r)] = r;
  world_group_ =
      std::make_shared<ProcessGroup>(GroupKind::world, 0, std::move(all), timeout, abort_flag_);
}

std::shared_ptr<ProcessGroup> World::model_parallel_group(int global_rank) const {
  return mp_groups_.at(static_cast<std::size_t>(dp_rank(global_rank)));
}

std::shared_ptr<ProcessGroup> World::data_parallel_group(int global_rank) const {
  return dp_groups_.at(static_cast<std::size_t>(mp_rank(global_rank)));
}

void World::abort() {
  abort_flag_->store(true);
  for (auto& g : mp_groups_) g->wake_all();
  for (auto& g : dp_groups_) g->wake_all();
  world_group_->wake_all();
}

void World::run(const std::function<void(int)>& fn) {
  abort_flag_->store(false);
  for (auto& g : mp_groups_) g->reset_rendezvous();
  for (auto& g : dp_groups_) g->reset_rendezvous();
  world_group_->reset_rendezvous();

  if (spec_.world_size == 1) {
    fn(0);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(spec_.world_size));
  std::vector<std::thread> workers;
  workers.reserve(errors.size());
  for (int rank = 0; rank < spec_.world_size; ++rank) {
    workers.emplace_back([this, rank, &fn, &errors] {
      try {
        fn(rank);
      } catch (...) {
        errors[static_cast<std::size_t>(rank)] = std::current_exception();
        abort();
      }
    });
  }
  for (auto& t : workers) t.join();

  std::exception_ptr first;
  for (const auto& e : errors) {
    if (!e) continue;
    try {
      std::rethrow_exception(e);
    } catch (const AbortedError&) {
      if (!first) first = e;
    } catch (...) {
      first = e;
      break;
    }
  }
  if (first) std::rethrow_exception(first);
}

CommCounter World::total(GroupKind kind, Collective c, std::optional<Traffic> t) const {
  CommCounter out;
  auto add = [&](const std::vector<std::shared_ptr<ProcessGroup>>& groups) {
    for (const auto& g : groups) out += g->stats().get(c, t);
  };
  switch (kind) {
    case GroupKind::model_parallel: add(mp_groups_); break;
    case GroupKind::data_parallel: add(dp_groups_); break;
    case GroupKind::world: out += world_group_->stats().get(c, t); break;
  }
  return out;
}

void World::reset_stats() {
  for (auto& g : mp_groups_) g->stats().reset();
  for (auto& g : dp_groups_) g->stats().reset();
  world_group_->stats().reset();
}

std::string World::stats_report() const {
  std::ostringstream os;
  os << std::left << std::setw(22) << "group" << std::setw(12) << "collective"
     << std::setw(14) << "traffic" << std::right << std::setw(10) << "calls"
     << std::setw(14) << "elements" << std::setw(16) << "bytes" << "\n";
  auto emit = [&](const ProcessGroup& g) {
    for (const auto& [key, ctr] : g.stats().snapshot()) {
      os << std::left << std::setw(22)
         << (std::string(to_string(g.kind())) + "/" + std::to_string(g.index()))
         << std::setw(12) << to_string(key.first) << std::setw(14) << to_string(key.second)
         << std::right << std::setw(10) << ctr.calls << std::setw(14) << ctr.elements
         << std::setw(16) << ctr.bytes << "\n";
    }
  };
  for (const auto& g : mp_groups_) emit(*g);
  for (const auto& g : dp_groups_) emit(*g);
  emit(*world_group_);
  return os.str();
}

}  // namespace tp::comm
