// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// mhmoe: verification suite, traffic sweeps, toy training and reports.
//
//   mhmoe [--preset NAME] [--config FILE] [--set key=value]... [--out DIR] <verb>
//
// Relative output directories resolve against $MHMOE_OUTPUT_ROOT.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mhmoe/harness/commands.hpp"

namespace h = mhmoe::harness;

int main(int argc, char** argv) {
  CLI::App app{"Multi-head latent MoE reference kernels and simulators"};
  app.require_subcommand(1);

  std::string preset_name, config_path, out_dir;
  std::vector<std::string> overrides;
  app.add_option("--preset", preset_name, "desk (default), toy, table2-2B or table2-4B");
  app.add_option("--config", config_path, "JSON config overlaid on the preset");
  app.add_option("--set", overrides, "key=value override, repeatable")->take_all();
  app.add_option("--out", out_dir, "output bundle directory (overrides output_dir)");

  bool inject_fault = false;
  auto* verify = app.add_subcommand("verify", "run the equivalence, gradient and property suite");
  verify->add_flag("--inject-fault", inject_fault, "perturb the block-sparse expert output by 1e-3");
  auto* comm = app.add_subcommand("sweep-comm", "EP vs HP traffic over k_list x skew_list");
  auto* io = app.add_subcommand("sweep-io", "simulated HBM traffic over ne_list and de_list");
  auto* train = app.add_subcommand("train-toy", "train three copies of a toy layer side by side");
  std::vector<std::string> bundles;
  std::string report_out = "mhmoe-report";
  auto* report = app.add_subcommand("report", "merge bundles into summary tables and charts");
  report->add_option("bundles", bundles, "bundle directories")->required();
  report->add_option("--report-dir", report_out, "where summary.csv and charts go");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : h::kExitConfig;
  }

  return h::run_guarded(
      [&]() -> int {
        if (report->parsed()) {
          std::vector<h::fs::path> dirs(bundles.begin(), bundles.end());
          return h::cmd_report(dirs, h::resolve_output_dir(report_out), std::cout);
        }
        // train-toy defaults to the toy preset; everything else to desk.
        const std::string name = preset_name.empty() && train->parsed() ? "toy" : preset_name;
        h::RunConfig cfg = h::preset(name);
        if (!config_path.empty()) cfg = h::load_config_file(config_path, cfg);
        for (const auto& kv : overrides) h::apply_override(cfg, kv);
        if (!out_dir.empty()) cfg.output_dir = out_dir;
        h::validate(cfg);

        if (verify->parsed()) return h::cmd_verify(cfg, {inject_fault}, std::cout);
        if (comm->parsed()) return h::cmd_sweep_comm(cfg, std::cout);
        if (io->parsed()) return h::cmd_sweep_io(cfg, std::cout);
        return h::cmd_train_toy(cfg, std::cout);
      },
      std::cerr);
}
