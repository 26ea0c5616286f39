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

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tp/config.hpp"

namespace tp {

inline constexpr char kCheckpointMagic[4] = {'T', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  /// Free-form provenance (effective run config, iteration).
  Json meta = Json::object();
  std::vector<std::string> order;
  std::map<std::string, Mat<double>> tensors;
};

/// Layout: magic, u32 version, u64 header length, JSON header (model config,
/// tensor manifest with name/shape/offset, meta), then little-endian float32
/// data for each tensor in manifest order.
void write_checkpoint(const std::filesystem::path& path, const ModelConfig& model,
                      const std::vector<std::pair<std::string, Mat<double>>>& tensors,
                      const Json& meta = Json::object());

Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace tp
