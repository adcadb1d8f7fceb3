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

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adhoc_fusion/checkpoint.hpp"
#include "adhoc_fusion/errors.hpp"
#include "adhoc_fusion/matrix.hpp"
#include "adhoc_fusion/rng.hpp"

namespace adhoc_fusion {

/// Anything that can hand out per-channel utterance-level embeddings: the
/// stand-in for a frozen single-channel front-end.
template <class S>
concept EmbeddingSource = requires(const S& s, std::size_t i, std::size_t crop) {
  { s.size() } -> std::convertible_to<std::size_t>;
  { s.speaker_of(i) } -> std::convertible_to<std::uint32_t>;
  { s.crop_count() } -> std::convertible_to<std::size_t>;
  { s.channel_matrix(i, crop) } -> std::convertible_to<Matrix>;
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  friend bool operator==(const Range&, const Range&) = default;
};

/// Simulation knobs. Geometry defaults follow the simulated-room recipe
/// (rooms 5-25 m square footprint, 2.7-4 m high, 0.2 m wall clearance,
/// 0.3 m source-microphone clearance). The degradation magnitudes are
/// calibration knobs of the embedding-space model, not measured values.
struct SimConfig {
  std::size_t d_in = 512;
  std::size_t speakers = 40;
  std::size_t utterances_per_speaker = 10;
  std::size_t channels_min = 20;
  std::size_t channels_max = 20;
  std::size_t crops = 5;
  Range room_side{5.0, 25.0};
  Range room_height{2.7, 4.0};
  double min_source_wall = 0.2;
  double min_source_mic = 0.3;
  Range t60{0.2, 0.4};
  double noise_channel_fraction = 0.0;
  Range noise_channel_snr_db{-20.0, -10.0};
  // Noise RMS norm per metre of source distance.
  double noise_scale = 0.02;
  // Norm of the per-utterance deviation from the speaker prototype.
  double utterance_spread = 1.0;
  // Norm of the per-crop deviation shared by all channels of an utterance.
  double crop_jitter = 0.1;
  // Share of the noise vector along a fixed degradation direction.
  double noise_bias = 0.5;
  std::uint64_t environment_seed = 0x5EED;
  std::size_t max_placement_retries = 10000;
  std::uint64_t seed = 1;

  void validate() const {
    auto bad = [](const std::string& m) { throw ConfigError("simulator: " + m); };
    if (d_in == 0) bad("d_in must be >= 1");
    if (speakers == 0 || utterances_per_speaker == 0) bad("need at least one utterance");
    if (channels_min == 0 || channels_min > channels_max) bad("channel range is empty");
    if (channels_max > 65535) bad("at most 65535 channels per utterance");
    if (crops == 0) bad("crops must be >= 1");
    for (const Range& r : {room_side, room_height, t60, noise_channel_snr_db}) {
      if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi)) bad("range is empty");
    }
    if (room_side.lo <= 0.0 || room_height.lo <= 0.0) bad("room dimensions must be positive");
    if (min_source_wall < 0.0 || min_source_mic < 0.0) bad("clearances must be >= 0");
    if (!(noise_channel_fraction >= 0.0 && noise_channel_fraction <= 1.0)) {
      bad("noise_channel_fraction must lie in [0, 1]");
    }
    if (noise_channel_snr_db.hi > -10.0) bad("noise channels must have SNR <= -10 dB");
    if (noise_scale < 0.0 || utterance_spread < 0.0 || crop_jitter < 0.0 || noise_bias < 0.0) {
      bad("degradation scales must be >= 0");
    }
  }

  friend bool operator==(const SimConfig&, const SimConfig&) = default;
};

inline nlohmann::json to_json(const Range& r) { return nlohmann::json::array({r.lo, r.hi}); }

inline nlohmann::json to_json(const SimConfig& c) {
  return {{"d_in", c.d_in},
          {"speakers", c.speakers},
          {"utterances_per_speaker", c.utterances_per_speaker},
          {"channels_min", c.channels_min},
          {"channels_max", c.channels_max},
          {"crops", c.crops},
          {"room_side", to_json(c.room_side)},
          {"room_height", to_json(c.room_height)},
          {"min_source_wall", c.min_source_wall},
          {"min_source_mic", c.min_source_mic},
          {"t60", to_json(c.t60)},
          {"noise_channel_fraction", c.noise_channel_fraction},
          {"noise_channel_snr_db", to_json(c.noise_channel_snr_db)},
          {"noise_scale", c.noise_scale},
          {"utterance_spread", c.utterance_spread},
          {"crop_jitter", c.crop_jitter},
          {"noise_bias", c.noise_bias},
          {"environment_seed", c.environment_seed},
          {"max_placement_retries", c.max_placement_retries},
          {"seed", c.seed}};
}

inline void update_from_json(SimConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("simulator: expected a JSON object");
  auto range = [](const nlohmann::json& v) {
    if (!v.is_array() || v.size() != 2) throw ConfigError("simulator: ranges are [lo, hi]");
    return Range{v[0].get<double>(), v[1].get<double>()};
  };
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "d_in") c.d_in = v.get<std::size_t>();
      else if (key == "speakers") c.speakers = v.get<std::size_t>();
      else if (key == "utterances_per_speaker") c.utterances_per_speaker = v.get<std::size_t>();
      else if (key == "channels") c.channels_min = c.channels_max = v.get<std::size_t>();
      else if (key == "channels_min") c.channels_min = v.get<std::size_t>();
      else if (key == "channels_max") c.channels_max = v.get<std::size_t>();
      else if (key == "crops") c.crops = v.get<std::size_t>();
      else if (key == "room_side") c.room_side = range(v);
      else if (key == "room_height") c.room_height = range(v);
      else if (key == "min_source_wall") c.min_source_wall = v.get<double>();
      else if (key == "min_source_mic") c.min_source_mic = v.get<double>();
      else if (key == "t60") c.t60 = range(v);
      else if (key == "noise_channel_fraction") c.noise_channel_fraction = v.get<double>();
      else if (key == "noise_channel_snr_db") c.noise_channel_snr_db = range(v);
      else if (key == "noise_scale") c.noise_scale = v.get<double>();
      else if (key == "utterance_spread") c.utterance_spread = v.get<double>();
      else if (key == "crop_jitter") c.crop_jitter = v.get<double>();
      else if (key == "noise_bias") c.noise_bias = v.get<double>();
      else if (key == "environment_seed") c.environment_seed = v.get<std::uint64_t>();
      else if (key == "max_placement_retries") c.max_placement_retries = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ConfigError("simulator: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("simulator: bad value for '" + key + "': " + e.what());
    }
  }
}

inline SimConfig sim_config_from_json(const nlohmann::json& j) {
  SimConfig c;
  update_from_json(c, j);
  c.validate();
  return c;
}

using Point3 = std::array<double, 3>;

struct Geometry {
  Point3 room{};    // length, width, height
  Point3 source{};
  std::vector<Point3> mics;
  std::vector<double> distances;
  double t60 = 0.0;  // metadata only
};

inline double distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// Samples a room, a source at least min_source_wall from every wall, and
/// `channels` microphones anywhere in the room at least min_source_mic from
/// the source.
inline Geometry sample_geometry(const SimConfig& c, std::size_t channels, SplitMix64& rng) {
  Geometry g;
  g.room = {rng.uniform(c.room_side.lo, c.room_side.hi), rng.uniform(c.room_side.lo, c.room_side.hi),
            rng.uniform(c.room_height.lo, c.room_height.hi)};
  g.t60 = rng.uniform(c.t60.lo, c.t60.hi);
  for (std::size_t a = 0; a < 3; ++a) {
    if (g.room[a] < 2.0 * c.min_source_wall) {
      throw GenerationError("simulator: room too small for the source wall clearance");
    }
    g.source[a] = rng.uniform(c.min_source_wall, g.room[a] - c.min_source_wall);
  }
  for (std::size_t m = 0; m < channels; ++m) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < c.max_placement_retries; ++attempt) {
      Point3 p{rng.uniform(0.0, g.room[0]), rng.uniform(0.0, g.room[1]),
               rng.uniform(0.0, g.room[2])};
      const double d = distance(p, g.source);
      if (d >= c.min_source_mic) {
        g.mics.push_back(p);
        g.distances.push_back(d);
        placed = true;
        break;
      }
    }
    if (!placed) {
      throw GenerationError("simulator: could not place microphone " + std::to_string(m) +
                            " after " + std::to_string(c.max_placement_retries) + " retries");
    }
  }
  return g;
}

// Speech attenuation and noise norm as functions of source distance (m).
inline double attenuation(double dist) { return 1.0 / (1.0 + dist); }
inline double noise_level(const SimConfig& c, double dist) { return c.noise_scale * dist; }

struct SyntheticUtterance {
  std::uint32_t speaker = 0;
  std::uint32_t id = 0;
  std::vector<float> distances;  // metres, per channel
  std::vector<float> snr_db;     // per channel
  std::vector<std::uint8_t> noise_mask;
  std::vector<float> embeddings;  // [channel][crop][dim]

  std::size_t channels() const { return distances.size(); }

  friend bool operator==(const SyntheticUtterance&, const SyntheticUtterance&) = default;
};

struct Dataset {
  SimConfig config;
  std::vector<SyntheticUtterance> utterances;

  std::size_t size() const { return utterances.size(); }
  std::size_t dim() const { return config.d_in; }
  std::size_t crop_count() const { return config.crops; }
  std::uint32_t speaker_of(std::size_t i) const { return utterances[i].speaker; }

  // C x d_in matrix of one crop across all channels.
  Matrix channel_matrix(std::size_t i, std::size_t crop) const {
    const auto& u = utterances.at(i);
    if (crop >= config.crops) throw ContractViolation("channel_matrix: crop out of range");
    const std::size_t d = config.d_in;
    Matrix m(u.channels(), d);
    for (std::size_t c = 0; c < u.channels(); ++c) {
      const float* src = u.embeddings.data() + (c * config.crops + crop) * d;
      std::copy(src, src + d, m.row_span(c).begin());
    }
    return m;
  }

  Matrix channel_embedding(std::size_t i, std::size_t channel, std::size_t crop) const {
    const auto& u = utterances.at(i);
    if (channel >= u.channels()) throw ContractViolation("channel_embedding: channel out of range");
    const std::size_t d = config.d_in;
    const float* src = u.embeddings.data() + (channel * config.crops + crop) * d;
    Matrix m(1, d);
    std::copy(src, src + d, m.data().begin());
    return m;
  }

  std::size_t speaker_count() const {
    std::vector<std::uint32_t> ids;
    for (const auto& u : utterances) ids.push_back(u.speaker);
    std::sort(ids.begin(), ids.end());
    return static_cast<std::size_t>(std::unique(ids.begin(), ids.end()) - ids.begin());
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

static_assert(EmbeddingSource<Dataset>);

namespace detail {
inline std::vector<double> gaussian_direction(std::size_t d, SplitMix64& rng, double scale) {
  std::vector<double> v(d);
  const double s = scale / std::sqrt(static_cast<double>(d));
  for (auto& x : v) x = rng.normal() * s;
  return v;
}
inline std::vector<double> unit_vector(std::size_t d, SplitMix64& rng) {
  auto v = gaussian_direction(d, rng, 1.0);
  const double n = norm(v);
  for (auto& x : v) x /= n;
  return v;
}
}  // namespace detail

/// The fixed unit direction that noise leans towards. It depends only on
/// environment_seed so train and test sets generated with different seeds
/// share it.
inline std::vector<double> degradation_direction(const SimConfig& c) {
  SplitMix64 rng(derive_seed(c.environment_seed, 0xE7));
  return detail::unit_vector(c.d_in, rng);
}

/// Generates one utterance for the given speaker prototype.
///
/// Channel crop embedding: a(d) * (u + jitter_k) + sigma * n, where u is the
/// utterance vector, jitter_k a per-crop deviation shared by all channels,
/// a(d) = 1 / (1 + d), sigma = noise_scale * d and n a unit-RMS noise vector
/// biased towards the degradation direction. Noise channels raise sigma until
/// the channel SNR lands in noise_channel_snr_db.
inline SyntheticUtterance generate_utterance(const SimConfig& c, std::span<const double> prototype,
                                             std::span<const double> degradation,
                                             std::uint32_t speaker, std::uint32_t id,
                                             std::uint64_t seed) {
  SplitMix64 rng(seed);
  const std::size_t d = c.d_in;
  const std::size_t channels =
      c.channels_min + static_cast<std::size_t>(rng.below(c.channels_max - c.channels_min + 1));
  const Geometry geo = sample_geometry(c, channels, rng);

  std::vector<double> u(prototype.begin(), prototype.end());
  const auto spread = detail::gaussian_direction(d, rng, c.utterance_spread);
  for (std::size_t j = 0; j < d; ++j) u[j] += spread[j];
  const double signal_norm = norm(u);

  std::vector<std::size_t> order(channels);
  std::iota(order.begin(), order.end(), 0);
  shuffle(order.begin(), order.end(), rng);
  const auto n_noise =
      static_cast<std::size_t>(std::lround(c.noise_channel_fraction * static_cast<double>(channels)));

  SyntheticUtterance out;
  out.speaker = speaker;
  out.id = id;
  out.noise_mask.assign(channels, 0);
  for (std::size_t k = 0; k < n_noise; ++k) out.noise_mask[order[k]] = 1;

  std::vector<double> sigma(channels);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    const double dist = geo.distances[ch];
    const double a = attenuation(dist);
    sigma[ch] = noise_level(c, dist);
    if (out.noise_mask[ch]) {
      const double snr = rng.uniform(c.noise_channel_snr_db.lo, c.noise_channel_snr_db.hi);
      sigma[ch] = std::max(sigma[ch], a * signal_norm / std::sqrt(std::pow(10.0, snr / 10.0)));
    }
    out.distances.push_back(static_cast<float>(dist));
    const double ratio = sigma[ch] > 0.0 ? a * signal_norm / sigma[ch] : 0.0;
    const double snr_db = sigma[ch] > 0.0 ? 20.0 * std::log10(ratio) : 200.0;
    out.snr_db.push_back(static_cast<float>(std::min(snr_db, 200.0)));
  }

  std::vector<std::vector<double>> crop_vectors;
  for (std::size_t k = 0; k < c.crops; ++k) {
    auto jitter = detail::gaussian_direction(d, rng, c.crop_jitter);
    for (std::size_t j = 0; j < d; ++j) jitter[j] += u[j];
    crop_vectors.push_back(std::move(jitter));
  }

  const double bias_norm = std::sqrt(1.0 + c.noise_bias * c.noise_bias);
  out.embeddings.resize(channels * c.crops * d);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    const double a = attenuation(geo.distances[ch]);
    for (std::size_t k = 0; k < c.crops; ++k) {
      float* dst = out.embeddings.data() + (ch * c.crops + k) * d;
      const auto noise = detail::gaussian_direction(d, rng, 1.0);
      for (std::size_t j = 0; j < d; ++j) {
        const double n = (noise[j] + c.noise_bias * degradation[j]) / bias_norm;
        dst[j] = static_cast<float>(a * crop_vectors[k][j] + sigma[ch] * n);
      }
    }
  }
  return out;
}

/// Pure function of the config (seed included).
inline Dataset generate(const SimConfig& c) {
  c.validate();
  Dataset ds{c, {}};
  SplitMix64 speaker_rng(derive_seed(c.seed, 0));
  std::vector<std::vector<double>> prototypes;
  for (std::size_t s = 0; s < c.speakers; ++s) prototypes.push_back(detail::unit_vector(c.d_in, speaker_rng));
  const auto degradation = degradation_direction(c);
  std::uint32_t id = 0;
  for (std::size_t s = 0; s < c.speakers; ++s) {
    for (std::size_t k = 0; k < c.utterances_per_speaker; ++k, ++id) {
      ds.utterances.push_back(generate_utterance(c, prototypes[s], degradation,
                                                 static_cast<std::uint32_t>(s), id,
                                                 derive_seed(c.seed, std::uint64_t{id} + 1)));
    }
  }
  return ds;
}

inline constexpr std::string_view kDatasetMagic = "AFDS";
inline constexpr std::uint32_t kDatasetVersion = 1;

/// Layout: "AFDS", u32 version, u32 header length, JSON header, then per
/// utterance: speaker u32, utterance id u32, C u16, distances C x f32,
/// SNRs C x f32, noise mask C x u8, embeddings C x crops x d_in f32.
inline std::string serialize_dataset(const Dataset& ds) {
  std::size_t cmin = SIZE_MAX, cmax = 0;
  for (const auto& u : ds.utterances) {
    cmin = std::min(cmin, u.channels());
    cmax = std::max(cmax, u.channels());
  }
  if (ds.utterances.empty()) cmin = 0;
  nlohmann::json header = {{"config", to_json(ds.config)},
                           {"speakers", ds.speaker_count()},
                           {"utterances", ds.size()},
                           {"channels", {{"min", cmin}, {"max", cmax}}},
                           {"crops", ds.config.crops},
                           {"d_in", ds.config.d_in}};
  std::string out = io::frame(kDatasetMagic, kDatasetVersion, header);
  for (const auto& u : ds.utterances) {
    if (u.channels() > 65535) throw ContractViolation("dataset: too many channels for u16");
    io::put_u32(out, u.speaker);
    io::put_u32(out, u.id);
    io::put_u16(out, static_cast<std::uint16_t>(u.channels()));
    for (float v : u.distances) io::put_f32(out, v);
    for (float v : u.snr_db) io::put_f32(out, v);
    for (std::uint8_t v : u.noise_mask) io::put_u8(out, v);
    for (float v : u.embeddings) io::put_f32(out, v);
  }
  return out;
}

inline Dataset deserialize_dataset(std::string_view bytes) {
  const std::string what = "dataset";
  io::Reader r(bytes, what);
  const nlohmann::json header = io::unframe(r, kDatasetMagic, kDatasetVersion, what);
  Dataset ds;
  std::size_t count = 0, speakers = 0;
  try {
    ds.config = sim_config_from_json(header.at("config"));
    count = header.at("utterances").get<std::size_t>();
    speakers = header.at("speakers").get<std::size_t>();
    if (header.at("crops").get<std::size_t>() != ds.config.crops ||
        header.at("d_in").get<std::size_t>() != ds.config.d_in) {
      throw FormatError(what + ": header crop/dimension fields disagree with the config echo");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(what + ": invalid config: " + e.what());
  }
  const std::size_t per_channel = ds.config.crops * ds.config.d_in;
  // Smallest record: ids, C and one channel with empty embeddings.
  ds.utterances.reserve(std::min(count, r.remaining() / 19));
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticUtterance u;
    u.speaker = r.u32();
    u.id = r.u32();
    const std::size_t c = r.u16();
    if (c == 0) {
      throw FormatError(what + ": utterance record at offset " + std::to_string(r.offset()) +
                        " has zero channels");
    }
    u.distances.resize(c);
    u.snr_db.resize(c);
    u.noise_mask.resize(c);
    u.embeddings.resize(c * per_channel);
    for (auto& v : u.distances) v = r.f32();
    for (auto& v : u.snr_db) v = r.f32();
    for (auto& v : u.noise_mask) v = r.u8();
    for (auto& v : u.embeddings) v = r.f32();
    ds.utterances.push_back(std::move(u));
  }
  if (r.remaining() != 0) {
    throw FormatError(what + ": " + std::to_string(r.remaining()) + " trailing bytes at offset " +
                      std::to_string(r.offset()));
  }
  if (speakers != ds.speaker_count()) {
    throw FormatError(what + ": speaker count in header disagrees with the records");
  }
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::write_file(path, serialize_dataset(ds));
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  return deserialize_dataset(io::read_file(path));
}

}  // namespace adhoc_fusion
