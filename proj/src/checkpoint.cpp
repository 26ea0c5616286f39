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

#include "tp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace tp {
namespace {

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out += static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  }
}

template <class T>
T get_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const ModelConfig& model,
                      const std::vector<std::pair<std::string, Mat<double>>>& tensors,
                      const Json& meta) {
  Json manifest = Json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    manifest.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * 4;
  }
  const std::string header =
      Json{{"model", to_json(model)}, {"tensors", manifest}, {"meta", meta}}.dump();

  std::string out(kCheckpointMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, header.size());
  out += header;
  out.reserve(out.size() + offset);
  for (const auto& [name, m] : tensors) {
    for (Index i = 0; i < m.size(); ++i) {
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i])));
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  const std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  auto bad = [&](const std::string& why) {
    return FormatError("checkpoint " + path.string() + ": " + why);
  };
  if (raw.size() < 16 || std::memcmp(p, kCheckpointMagic, 4) != 0) throw bad("bad magic");
  const auto version = get_le<std::uint32_t>(p + 4);
  if (version != kCheckpointVersion) throw bad("unsupported version " + std::to_string(version));
  const auto hlen = get_le<std::uint64_t>(p + 8);
  if (hlen > raw.size() - 16) throw bad("header runs past end of file");
  Json header;
  try {
    header = Json::parse(raw.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw bad(std::string("header: ") + e.what());
  }
  const std::size_t data_at = 16 + hlen;
  Checkpoint ck;
  try {
    ck.model = model_config_from_json(header.at("model"));
    ck.meta = header.value("meta", Json::object());
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto rows = t.at("shape").at(0).get<Index>();
      const auto cols = t.at("shape").at(1).get<Index>();
      const auto off = t.at("offset").get<std::uint64_t>();
      if (rows < 0 || cols < 0) throw bad(name + ": negative shape");
      const auto bytes = static_cast<std::uint64_t>(rows * cols) * 4;
      if (off > raw.size() - data_at || bytes > raw.size() - data_at - off) {
        throw bad(name + ": data runs past end of file");
      }
      Mat<double> m(rows, cols);
      const unsigned char* src = p + data_at + off;
      for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = std::bit_cast<float>(get_le<std::uint32_t>(src + 4 * i));
      }
      if (!ck.tensors.emplace(name, std::move(m)).second) throw bad("duplicate tensor " + name);
      ck.order.push_back(name);
    }
  } catch (const nlohmann::json::exception& e) {
    throw bad(std::string("manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw bad(e.what());
  }
  return ck;
}

}  // namespace tp
