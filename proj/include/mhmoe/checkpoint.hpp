// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Parameter checkpoints.
//
// Layout: an 8-byte little-endian header length, a JSON header
//   {"format": "mhmoe-checkpoint", "version": 1, "dtype": "float32",
//    "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
// with tensors sorted by name, then the concatenated little-endian FP32 data.
// Offsets are relative to the start of the data section.

#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mhmoe/errors.hpp"
#include "mhmoe/moe.hpp"
#include "mhmoe/tensor.hpp"

namespace mhmoe {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using NamedTensors = std::map<std::string, Tensor<float>>;

namespace detail {

inline std::string head_prefix(std::size_t h) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "heads.%03zu.", h);
  return buf;
}

}  // namespace detail

/// Flat name -> tensor view of a layer's parameters.
template <typename T>
NamedTensors named_parameters(const MHLatentMoEParams<T>& p) {
  NamedTensors out;
  out["w_in"] = p.w_in.template cast<float>();
  out["w_out"] = p.w_out.template cast<float>();
  for (std::size_t h = 0; h < p.num_heads(); ++h) {
    const std::string pre = detail::head_prefix(h);
    out[pre + "router.w_r"] = p.heads[h].router.w_r.template cast<float>();
    out[pre + "router.bias"] = p.heads[h].router.bias.template cast<float>();
    out[pre + "experts.w_in"] = p.heads[h].bank.w_in.template cast<float>();
    out[pre + "experts.w_out"] = p.heads[h].bank.w_out.template cast<float>();
  }
  return out;
}

/// Copy named tensors back into an already-shaped layer.
template <typename T>
void assign_parameters(MHLatentMoEParams<T>& p, const NamedTensors& named) {
  auto take = [&](const std::string& name, Tensor<T>& dst) {
    auto it = named.find(name);
    if (it == named.end()) throw ConfigError("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != dst.shape()) {
      throw DimensionError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                           ", expected " + shape_str(dst.shape()));
    }
    dst = it->second.template cast<T>();
  };
  take("w_in", p.w_in);
  take("w_out", p.w_out);
  for (std::size_t h = 0; h < p.num_heads(); ++h) {
    const std::string pre = detail::head_prefix(h);
    take(pre + "router.w_r", p.heads[h].router.w_r);
    take(pre + "router.bias", p.heads[h].router.bias);
    take(pre + "experts.w_in", p.heads[h].bank.w_in);
    take(pre + "experts.w_out", p.heads[h].bank.w_out);
  }
}

inline void write_checkpoint(std::ostream& os, const NamedTensors& tensors) {
  nlohmann::ordered_json header;
  header["format"] = "mhmoe-checkpoint";
  header["version"] = 1;
  header["dtype"] = "float32";
  header["tensors"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {  // std::map iterates in name order
    const std::uint64_t nbytes = t.size() * sizeof(float);
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();
  const std::uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : tensors)
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!os) throw Error("failed to write checkpoint");
}

inline NamedTensors read_checkpoint(std::istream& is) {
  std::uint64_t len = 0;
  if (!is.read(reinterpret_cast<char*>(&len), sizeof len)) throw ConfigError("checkpoint: truncated header length");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw ConfigError("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "mhmoe-checkpoint") {
    throw ConfigError("checkpoint: unrecognized header");
  }
  std::vector<char> blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  NamedTensors out;
  for (const auto& entry : header.at("tensors")) {
    const Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != shape_numel(shape) * sizeof(float) || offset + nbytes > blob.size()) {
      throw ConfigError("checkpoint: tensor '" + entry.at("name").get<std::string>() + "' is out of bounds");
    }
    std::vector<float> data(shape_numel(shape));
    std::memcpy(data.data(), blob.data() + offset, nbytes);
    out.emplace(entry.at("name").get<std::string>(), Tensor<float>(shape, std::move(data)));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_checkpoint(os, tensors);
}

inline NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(is);
}

}  // namespace mhmoe
