// Copyright 2026 The adhoc-fusion Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "adhoc_fusion/errors.hpp"
#include "adhoc_fusion/matrix.hpp"
#include "adhoc_fusion/model.hpp"

namespace adhoc_fusion {

// Little-endian primitives shared by the checkpoint and dataset formats.
namespace io {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::string& out, std::uint16_t v) { put_le(out, v); }
inline void put_u32(std::string& out, std::uint32_t v) { put_le(out, v); }
inline void put_f32(std::string& out, float v) { put_le(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::string& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

/// Bounds-checked reader over an in-memory file. Every failure reports the
/// byte offset at which the data ran out.
class Reader {
 public:
  Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  std::string_view bytes(std::size_t n) {
    if (n > remaining()) {
      throw FormatError(what_ + ": truncated at offset " + std::to_string(pos_) + " (needed " +
                        std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left)");
    }
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <class U>
  U le() {
    auto s = bytes(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<std::uint8_t>(s[i])) << (8 * i);
    }
    return v;
  }
  std::uint8_t u8() { return le<std::uint8_t>(); }
  std::uint16_t u16() { return le<std::uint16_t>(); }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }

 private:
  std::string_view data_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write to '" + path.string() + "' failed");
}

// magic, u32 version, u32 header length, UTF-8 JSON header.
inline std::string frame(std::string_view magic, std::uint32_t version, const nlohmann::json& header) {
  std::string out(magic);
  put_u32(out, version);
  const std::string text = header.dump();
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  return out;
}

inline nlohmann::json unframe(Reader& r, std::string_view magic, std::uint32_t version,
                              const std::string& what) {
  if (r.remaining() < magic.size() || r.bytes(magic.size()) != magic) {
    throw FormatError(what + ": bad magic bytes (expected '" + std::string(magic) + "')");
  }
  const std::uint32_t v = r.u32();
  if (v != version) {
    throw FormatError(what + ": unsupported format version " + std::to_string(v) +
                      " (expected " + std::to_string(version) + ")");
  }
  const std::uint32_t len = r.u32();
  const auto text = r.bytes(len);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": malformed JSON header: " + e.what());
  }
}

}  // namespace io

inline constexpr std::string_view kCheckpointMagic = "AFCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Adam moments and step counter, stored in the checkpoint so a resumed run
/// continues exactly where it stopped.
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<Matrix> first_moment;   // in visit_parameters order
  std::vector<Matrix> second_moment;  // in visit_parameters order
};

struct Checkpoint {
  FusionModel model;
  int epochs_completed = 0;
  std::optional<OptimizerState> optimizer;
};

/// Layout: "AFCK", u32 version, u32 header length, JSON header
/// {config, epochs_completed, tensors: [{name, rows, cols, offset}]}, then
/// little-endian f64 payloads in manifest order. Offsets are relative to the
/// start of the payload.
inline std::string serialize_checkpoint(const Checkpoint& ck) {
  struct Entry {
    std::string name;
    const Matrix* m;
  };
  std::vector<Entry> entries;
  visit_parameters(ck.model.params,
                   [&](const std::string& name, const Matrix& m) { entries.push_back({name, &m}); });
  const std::size_t n_params = entries.size();
  if (ck.optimizer) {
    if (ck.optimizer->first_moment.size() != n_params ||
        ck.optimizer->second_moment.size() != n_params) {
      throw ContractViolation("checkpoint: optimizer state does not match the parameter list");
    }
    for (std::size_t i = 0; i < n_params; ++i) {
      entries.push_back({"adam.m." + entries[i].name, &ck.optimizer->first_moment[i]});
    }
    for (std::size_t i = 0; i < n_params; ++i) {
      entries.push_back({"adam.v." + entries[i].name, &ck.optimizer->second_moment[i]});
    }
  }

  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    manifest.push_back({{"name", e.name}, {"rows", e.m->rows()}, {"cols", e.m->cols()},
                        {"offset", offset}});
    offset += 8 * e.m->size();
  }
  nlohmann::json header = {{"config", to_json(ck.model.config)},
                           {"epochs_completed", ck.epochs_completed},
                           {"tensors", manifest}};
  if (ck.optimizer) header["optimizer"] = {{"step", ck.optimizer->step}};

  std::string out = io::frame(kCheckpointMagic, kCheckpointVersion, header);
  out.reserve(out.size() + offset);
  for (const auto& e : entries)
    for (double v : e.m->data()) io::put_f64(out, v);
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  const std::string what = "checkpoint";
  io::Reader r(bytes, what);
  const nlohmann::json header = io::unframe(r, kCheckpointMagic, kCheckpointVersion, what);
  Checkpoint ck;
  std::map<std::string, Matrix> tensors;
  try {
    ck.model.config = model_config_from_json(header.at("config"));
    ck.epochs_completed = header.at("epochs_completed").get<int>();
    const std::size_t payload_start = r.offset();
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto rows = t.at("rows").get<std::size_t>();
      const auto cols = t.at("cols").get<std::size_t>();
      const auto offset = t.at("offset").get<std::size_t>();
      if (r.offset() - payload_start != offset) {
        throw FormatError(what + ": tensor '" + name + "' offset " + std::to_string(offset) +
                          " disagrees with manifest order");
      }
      Matrix m(rows, cols);
      for (auto& v : m.data()) v = r.f64();
      if (!tensors.emplace(name, std::move(m)).second) {
        throw FormatError(what + ": duplicate tensor '" + name + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(what + ": invalid config: " + e.what());
  }
  if (r.remaining() != 0) {
    throw FormatError(what + ": " + std::to_string(r.remaining()) + " trailing bytes at offset " +
                      std::to_string(r.offset()));
  }

  auto take = [&](const std::string& name, const Matrix& expect) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError(what + ": missing tensor '" + name + "'");
    if (!it->second.same_shape(expect)) {
      throw FormatError(what + ": tensor '" + name + "' has shape " + it->second.shape_string() +
                        ", config implies " + expect.shape_string());
    }
    Matrix m = std::move(it->second);
    tensors.erase(it);
    return m;
  };

  ck.model.params = zero_params(ck.model.config);
  std::vector<std::string> names;
  visit_parameters(ck.model.params, [&](const std::string& name, Matrix& m) {
    names.push_back(name);
    m = take(name, m);
  });
  if (header.contains("optimizer")) {
    OptimizerState opt;
    opt.step = header["optimizer"].at("step").get<std::uint64_t>();
    std::vector<Matrix> shapes;
    visit_parameters(ck.model.params, [&](const std::string&, const Matrix& m) {
      shapes.emplace_back(m.rows(), m.cols());
    });
    for (std::size_t i = 0; i < names.size(); ++i) opt.first_moment.push_back(take("adam.m." + names[i], shapes[i]));
    for (std::size_t i = 0; i < names.size(); ++i) opt.second_moment.push_back(take("adam.v." + names[i], shapes[i]));
    ck.optimizer = std::move(opt);
  }
  if (!tensors.empty()) {
    throw FormatError(what + ": unexpected tensor '" + tensors.begin()->first + "'");
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path));
}

inline void save(const FusionModel& model, const std::filesystem::path& path) {
  save_checkpoint(Checkpoint{model, 0, std::nullopt}, path);
}

inline FusionModel load(const std::filesystem::path& path) { return load_checkpoint(path).model; }

}  // namespace adhoc_fusion
