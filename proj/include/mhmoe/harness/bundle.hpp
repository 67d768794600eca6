// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Report bundles: a directory of CSV/SVG artifacts plus manifest.json.
//
// Several commands may share one bundle as long as their configs hash the
// same; the manifest then lists the union of their files.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "mhmoe/errors.hpp"
#include "mhmoe/harness/config.hpp"

#ifndef MHMOE_GIT_DESCRIBE
#define MHMOE_GIT_DESCRIBE "unknown"
#endif

namespace mhmoe::harness {

namespace fs = std::filesystem;

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kOutputRootEnv = "MHMOE_OUTPUT_ROOT";

inline std::string git_describe() { return MHMOE_GIT_DESCRIBE; }

/// Relative output directories resolve against $MHMOE_OUTPUT_ROOT (or the
/// working directory when unset).
inline fs::path resolve_output_dir(const std::string& dir) {
  const fs::path p(dir);
  if (p.is_absolute()) return p;
  const char* root = std::getenv(kOutputRootEnv);
  return (root && *root) ? fs::path(root) / p : p;
}

inline Json read_manifest(const fs::path& dir) {
  const fs::path path = dir / kManifestName;
  std::ifstream is(path);
  if (!is) throw ConfigError("bundle '" + dir.string() + "' has no " + kManifestName);
  Json j = Json::parse(is, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("config_hash") || !j.contains("files")) {
    throw ConfigError("bundle '" + dir.string() + "': malformed manifest");
  }
  return j;
}

inline void write_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os << content;
  if (!os) throw Error("failed writing '" + path.string() + "'");
}

class Bundle {
 public:
  Bundle(const RunConfig& config, std::string command)
      : config_(config),
        command_(std::move(command)),
        hash_(config_hash(config)),
        dir_(resolve_output_dir(config.output_dir)),
        start_(std::chrono::steady_clock::now()) {
    fs::create_directories(dir_);
    if (fs::exists(dir_ / kManifestName)) {
      const Json prior = read_manifest(dir_);
      if (prior.at("config_hash").get<std::string>() != hash_) {
        throw ConfigError("bundle '" + dir_.string() + "' holds results of config " +
                          prior.at("config_hash").get<std::string>() + ", this run is " + hash_);
      }
      prior_ = prior;
    }
  }

  const std::string& hash() const noexcept { return hash_; }
  const fs::path& dir() const noexcept { return dir_; }
  const RunConfig& config() const noexcept { return config_; }

  void write(const std::string& name, const std::string& content) {
    write_file(dir_ / name, content);
    files_.insert(name);
  }

  fs::path path_for(const std::string& name) {
    files_.insert(name);
    return dir_ / name;
  }

  /// Write manifest.json. Call after every artifact is on disk.
  void finish() {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::set<std::string> files = files_;
    Json runs = Json::array();
    if (!prior_.is_null()) {
      for (const auto& f : prior_.at("files")) files.insert(f.get<std::string>());
      if (prior_.contains("runs")) runs = prior_.at("runs");
    }
    runs.push_back({{"command", command_}, {"wall_time_seconds", wall}, {"files", files_}});
    Json m;
    m["format"] = "mhmoe-bundle";
    m["config_hash"] = hash_;
    m["seed"] = config_.seed;
    m["git_describe"] = git_describe();
    m["wall_time_seconds"] = wall;
    m["files"] = files;
    m["runs"] = std::move(runs);
    m["config"] = to_json(config_);
    write_file(dir_ / kManifestName, m.dump(2) + "\n");
  }

 private:
  RunConfig config_;
  std::string command_;
  std::string hash_;
  fs::path dir_;
  std::chrono::steady_clock::time_point start_;
  std::set<std::string> files_;
  Json prior_;
};

}  // namespace mhmoe::harness
