// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration: one flat JSON object, named presets, key=value
// overrides, validation and a stable content hash.

#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mhmoe/errors.hpp"

namespace mhmoe::harness {

using Json = nlohmann::ordered_json;

struct RunConfig {
  // Model
  std::size_t B = 4, T = 256, d = 512, N_h = 8, d_h = 64, N_e = 64, k = 4, d_e = 64, L = 12;
  std::string backend = "blocksparse";
  bool separate_routing = false;
  // Parallel simulation
  std::size_t P = 4;
  double skew = 0.0;
  double bandwidth = 1.0;  // words per time unit
  double alpha = 0.0;      // fixed cost per round
  std::size_t word_size = 4;
  // Reproducibility and output
  std::uint64_t seed = 0;
  std::string output_dir = "mhmoe-out";
  // Memory model
  std::size_t sram_words = 65536;
  // Sweeps
  std::vector<std::size_t> k_list{1, 2, 4, 8};
  std::vector<double> skew_list{0.0, 1.0, 2.0};
  std::vector<std::size_t> ne_list{256, 512};
  std::vector<std::size_t> de_list{64, 128};
  std::size_t io_T = 2048;
  std::size_t io_d_h = 128;
  std::size_t io_block_n = 1024;
  std::size_t io_block_m = 32;
  std::size_t io_sram_words = 262144;
  // Toy training
  std::size_t steps = 200;
  double lr = 0.5;
  double init_std = 0.02;
  double bias_rate = 1e-3;
  double input_offset = 1.0;
  std::size_t data_batches = 4;
  // Verification suite
  std::size_t verify_instances = 12;
};

inline Json to_json(const RunConfig& c) {
  return Json{{"B", c.B},
              {"T", c.T},
              {"d", c.d},
              {"N_h", c.N_h},
              {"d_h", c.d_h},
              {"N_e", c.N_e},
              {"k", c.k},
              {"d_e", c.d_e},
              {"L", c.L},
              {"backend", c.backend},
              {"separate_routing", c.separate_routing},
              {"P", c.P},
              {"skew", c.skew},
              {"bandwidth", c.bandwidth},
              {"alpha", c.alpha},
              {"word_size", c.word_size},
              {"seed", c.seed},
              {"output_dir", c.output_dir},
              {"sram_words", c.sram_words},
              {"k_list", c.k_list},
              {"skew_list", c.skew_list},
              {"ne_list", c.ne_list},
              {"de_list", c.de_list},
              {"io_T", c.io_T},
              {"io_d_h", c.io_d_h},
              {"io_block_n", c.io_block_n},
              {"io_block_m", c.io_block_m},
              {"io_sram_words", c.io_sram_words},
              {"steps", c.steps},
              {"lr", c.lr},
              {"init_std", c.init_std},
              {"bias_rate", c.bias_rate},
              {"input_offset", c.input_offset},
              {"data_batches", c.data_batches},
              {"verify_instances", c.verify_instances}};
}

namespace detail {

template <typename V>
void read_key(const Json& j, const char* key, V& dst) {
  try {
    dst = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace detail

/// Overlay the keys present in `j` onto `c`. Unknown keys are rejected.
inline void apply_json(RunConfig& c, const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const Json known = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    const Json& expected = known.at(key);
    if (expected.is_number_unsigned() && value.is_number_integer() && value.get<long long>() < 0) {
      throw ConfigError("config key '" + key + "' must be non-negative");
    }
  }
  Json merged = known;
  for (const auto& [key, value] : j.items()) merged[key] = value;
  RunConfig out;
#define MHMOE_READ(name) detail::read_key(merged, #name, out.name)
  MHMOE_READ(B); MHMOE_READ(T); MHMOE_READ(d); MHMOE_READ(N_h); MHMOE_READ(d_h); MHMOE_READ(N_e);
  MHMOE_READ(k); MHMOE_READ(d_e); MHMOE_READ(L); MHMOE_READ(backend); MHMOE_READ(separate_routing);
  MHMOE_READ(P); MHMOE_READ(skew); MHMOE_READ(bandwidth); MHMOE_READ(alpha); MHMOE_READ(word_size);
  MHMOE_READ(seed); MHMOE_READ(output_dir); MHMOE_READ(sram_words); MHMOE_READ(k_list);
  MHMOE_READ(skew_list); MHMOE_READ(ne_list); MHMOE_READ(de_list); MHMOE_READ(io_T); MHMOE_READ(io_d_h);
  MHMOE_READ(io_block_n); MHMOE_READ(io_block_m); MHMOE_READ(io_sram_words); MHMOE_READ(steps);
  MHMOE_READ(lr); MHMOE_READ(init_std); MHMOE_READ(bias_rate); MHMOE_READ(input_offset);
  MHMOE_READ(data_batches); MHMOE_READ(verify_instances);
#undef MHMOE_READ
  c = std::move(out);
}

inline RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "desk" || name.empty()) return c;
  if (name == "toy") {
    c.B = 2; c.T = 32; c.d = 64; c.N_h = 4; c.d_h = 16; c.N_e = 8; c.k = 2; c.d_e = 16; c.P = 2;
    c.init_std = 0.25;
    c.bias_rate = 0.03;
    c.ne_list = {32, 64};
    c.de_list = {16, 32};
    c.io_T = 256; c.io_d_h = 16; c.io_block_n = 256; c.io_block_m = 8;
    return c;
  }
  if (name == "table2-2B" || name == "table2-4B") {
    c.B = 1; c.T = 2048; c.d = 1024; c.N_h = 8; c.d_h = 128; c.k = 4; c.d_e = 256; c.L = 12;
    c.N_e = name == "table2-2B" ? 384 : 768;
    c.ne_list = {384, 768};
    c.de_list = {128, 256};
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected desk, toy, table2-2B or table2-4B)");
}

/// `key=value`; the value is parsed as JSON when possible, else taken as a string.
inline void apply_override(RunConfig& c, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not key=value");
  const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
  Json value = Json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  apply_json(c, Json{{key, value}});
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path + "'");
  const Json j = Json::parse(is, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config '" + path + "' is not valid JSON");
  apply_json(base, j);
  return base;
}

inline void validate(const RunConfig& c) {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(c.B, "B"); positive(c.T, "T"); positive(c.d, "d"); positive(c.N_h, "N_h");
  positive(c.d_h, "d_h"); positive(c.N_e, "N_e"); positive(c.k, "k"); positive(c.d_e, "d_e");
  positive(c.L, "L"); positive(c.P, "P"); positive(c.word_size, "word_size"); positive(c.sram_words, "sram_words");
  positive(c.io_T, "io_T"); positive(c.io_d_h, "io_d_h"); positive(c.io_block_n, "io_block_n");
  positive(c.io_block_m, "io_block_m"); positive(c.io_sram_words, "io_sram_words");
  positive(c.data_batches, "data_batches");
  if (c.k > c.N_e) {
    throw ConfigError("k = " + std::to_string(c.k) + " exceeds N_e = " + std::to_string(c.N_e));
  }
  if (c.N_h * c.d_h != c.d) {
    throw ConfigError("N_h * d_h = " + std::to_string(c.N_h * c.d_h) + " must equal d = " + std::to_string(c.d));
  }
  if (c.backend != "naive" && c.backend != "blocksparse") {
    throw ConfigError("backend must be 'naive' or 'blocksparse', got '" + c.backend + "'");
  }
  if (c.P > c.N_h || c.N_h % c.P != 0) throw ConfigError("P must divide N_h and be at most N_h");
  if ((c.B * c.T) % c.P != 0) throw ConfigError("B * T must be divisible by P");
  if (c.N_e % c.P != 0) throw ConfigError("N_e must be divisible by P");
  if (!(c.skew >= 0.0)) throw ConfigError("skew must be >= 0");
  if (!(c.bandwidth > 0.0)) throw ConfigError("bandwidth must be positive");
  if (!(c.alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (!(c.lr >= 0.0) || !(c.init_std > 0.0) || !(c.bias_rate >= 0.0)) {
    throw ConfigError("lr and bias_rate must be >= 0, init_std > 0");
  }
  for (auto v : c.k_list) {
    if (v == 0 || v > c.N_e) throw ConfigError("k_list entries must lie in [1, N_e]");
  }
  for (auto v : c.skew_list) {
    if (!(v >= 0.0)) throw ConfigError("skew_list entries must be >= 0");
  }
  for (auto v : c.ne_list) {
    if (v < c.k) throw ConfigError("ne_list entries must be >= k");
  }
  for (auto v : c.de_list) positive(v, "de_list entry");
}

/// FNV-1a over the canonical JSON of every key except output_dir.
inline std::string config_hash(const RunConfig& c) {
  Json j = to_json(c);
  j.erase("output_dir");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mhmoe::harness
