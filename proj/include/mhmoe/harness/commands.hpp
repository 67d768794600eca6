// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// CLI verbs. Each returns an exit code: 0 pass, 1 assertion failure,
// 2 configuration error.

#pragma once

#include <exception>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "mhmoe/errors.hpp"
#include "mhmoe/harness/bundle.hpp"
#include "mhmoe/harness/config.hpp"
#include "mhmoe/harness/report.hpp"
#include "mhmoe/harness/sweeps.hpp"
#include "mhmoe/harness/train.hpp"
#include "mhmoe/harness/verify.hpp"

namespace mhmoe::harness {

inline constexpr int kExitPass = 0;
inline constexpr int kExitFail = 1;
inline constexpr int kExitConfig = 2;

inline int cmd_verify(const RunConfig& c, const VerifyOptions& opt, std::ostream& log) {
  validate(c);
  Bundle bundle(c, "verify");
  const auto records = run_verify_suite(c, opt);
  const int code = write_verify_bundle(records, bundle);
  bundle.finish();
  std::size_t failed = 0;
  for (const auto& r : records) {
    if (r.passed()) continue;
    ++failed;
    log << "FAIL " << r.module << '/' << r.check << " seed=" << r.seed << " max_error=" << fmt_num(r.max_error)
        << " tolerance=" << fmt_num(r.tolerance) << '\n';
  }
  log << "verify: " << records.size() - failed << '/' << records.size() << " checks passed, bundle "
      << bundle.dir().string() << '\n';
  return code;
}

inline int cmd_sweep_comm(const RunConfig& c, std::ostream& log) {
  validate(c);
  Bundle bundle(c, "sweep-comm");
  write_comm_bundle(run_comm_sweep(c), bundle);
  bundle.finish();
  log << "sweep-comm: " << c.k_list.size() * c.skew_list.size() << " grid points, bundle " << bundle.dir().string()
      << '\n';
  return kExitPass;
}

inline int cmd_sweep_io(const RunConfig& c, std::ostream& log) {
  validate(c);
  Bundle bundle(c, "sweep-io");
  write_io_bundle(run_io_sweep(c), bundle);
  bundle.finish();
  log << "sweep-io: " << c.ne_list.size() << " routing and " << c.de_list.size() << " expert points, bundle "
      << bundle.dir().string() << '\n';
  return kExitPass;
}

inline int cmd_train_toy(const RunConfig& c, std::ostream& log) {
  validate(c);
  Bundle bundle(c, "train-toy");
  const ToyRun run = run_toy_training(c);
  std::string message;
  const int code = write_train_bundle(run, bundle, &message);
  bundle.finish();
  log << "train-toy: " << message << ", bundle " << bundle.dir().string() << '\n';
  return code;
}

inline int cmd_report(const std::vector<fs::path>& bundles, const fs::path& out_dir, std::ostream& log) {
  write_report(bundles, out_dir);
  log << "report: " << bundles.size() << " bundle(s) summarized into " << out_dir.string() << '\n';
  return kExitPass;
}

/// Run a verb, mapping exceptions onto exit codes.
inline int run_guarded(const std::function<int()>& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DimensionError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFail;
  }
}

}  // namespace mhmoe::harness
