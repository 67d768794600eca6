// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Merge one or more bundles into summary.csv plus one SVG per figure.
//
// summary.csv holds (figure, series, x, y) rows sorted by grid coordinates,
// deduplicated, so equal-config bundles summarize identically.

#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "mhmoe/csv.hpp"
#include "mhmoe/errors.hpp"
#include "mhmoe/harness/bundle.hpp"
#include "mhmoe/harness/svg.hpp"

namespace mhmoe::harness {

struct SummaryRow {
  std::string figure;
  std::string series;
  double x = 0.0;
  double y = 0.0;

  auto key() const { return std::tie(figure, series, x, y); }
  friend bool operator<(const SummaryRow& a, const SummaryRow& b) { return a.key() < b.key(); }
  friend bool operator==(const SummaryRow& a, const SummaryRow& b) { return a.key() == b.key(); }
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ConfigError("CSV is missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline CsvTable read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read '" + path.string() + "'");
  CsvTable t;
  std::string line;
  if (std::getline(is, line)) t.header = split_csv_line(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto row = split_csv_line(line);
    if (row.size() != t.header.size()) throw ConfigError("ragged row in '" + path.string() + "'");
    t.rows.push_back(std::move(row));
  }
  return t;
}

namespace report_detail {

inline double num(const std::string& s) {
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw ConfigError("non-numeric CSV field '" + s + "'");
  }
}

inline void from_comm(const CsvTable& t, std::vector<SummaryRow>& out) {
  const auto sc = t.column("schedule"), k = t.column("k"), sk = t.column("skew");
  const auto lat = t.column("latency_proxy"), peak = t.column("peak_payload_words");
  const auto disp = t.column("dispatch_words");
  for (const auto& r : t.rows) {
    const std::string series = r[sc] + " k=" + r[k];
    out.push_back({"comm_latency_vs_skew", series, num(r[sk]), num(r[lat])});
    out.push_back({"comm_peak_payload_vs_skew", series, num(r[sk]), num(r[peak])});
    out.push_back({"comm_dispatch_words_vs_k", r[sc] + " skew=" + r[sk], num(r[k]), num(r[disp])});
  }
}

inline void from_io(const CsvTable& t, std::vector<SummaryRow>& out) {
  const auto sw = t.column("sweep"), v = t.column("value"), lab = t.column("kernel_label");
  const auto rd = t.column("hbm_words_read"), sr = t.column("scratch_words_read"),
             swr = t.column("scratch_words_written"), peak = t.column("sram_peak_words");
  for (const auto& r : t.rows) {
    if (r[sw] == "routing") {
      out.push_back({"routing_hbm_reads_vs_experts", r[lab], num(r[v]), num(r[rd])});
    } else {
      out.push_back({"expert_activation_words_vs_hidden", r[lab], num(r[v]), num(r[sr]) + num(r[swr])});
      out.push_back({"expert_sram_peak_vs_hidden", r[lab], num(r[v]), num(r[peak])});
    }
  }
}

inline void from_loss(const CsvTable& t, std::vector<SummaryRow>& out) {
  const auto step = t.column("step");
  for (std::size_t c = 0; c < t.header.size(); ++c) {
    const std::string& h = t.header[c];
    const bool loss = h.starts_with("loss_"), imb = h.starts_with("imbalance_");
    if (!loss && !imb) continue;
    for (const auto& r : t.rows) {
      out.push_back({loss ? "training_loss" : "training_load_imbalance", h.substr(h.find('_') + 1), num(r[step]),
                     num(r[c])});
    }
  }
}

inline void from_verify(const CsvTable& t, std::vector<SummaryRow>& out) {
  const auto m = t.column("module"), ch = t.column("check"), sd = t.column("seed"), e = t.column("max_error");
  for (const auto& r : t.rows) out.push_back({"verify_max_error", r[m] + "/" + r[ch], num(r[sd]), num(r[e])});
}

}  // namespace report_detail

/// Summary rows of a set of bundles. Missing manifests and mixed config
/// hashes raise ConfigError.
inline std::vector<SummaryRow> summarize_bundles(const std::vector<fs::path>& bundles, std::string* hash_out = nullptr) {
  if (bundles.empty()) throw ConfigError("report needs at least one bundle directory");
  std::string hash;
  std::vector<SummaryRow> rows;
  for (const auto& dir : bundles) {
    const Json m = read_manifest(dir);
    const std::string h = m.at("config_hash").get<std::string>();
    if (hash.empty()) hash = h;
    if (h != hash) throw ConfigError("bundles mix config hashes " + hash + " and " + h);
    for (const auto& f : m.at("files")) {
      const std::string name = f.get<std::string>();
      if (name == "comm_summary.csv") report_detail::from_comm(read_csv(dir / name), rows);
      else if (name == "io.csv") report_detail::from_io(read_csv(dir / name), rows);
      else if (name == "loss.csv") report_detail::from_loss(read_csv(dir / name), rows);
      else if (name == "verify.csv") report_detail::from_verify(read_csv(dir / name), rows);
    }
  }
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  if (hash_out) *hash_out = hash;
  return rows;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows, const std::string& hash) {
  std::ostringstream os;
  os << "config_hash,figure,series,x,y\n";
  for (const auto& r : rows) os << hash << ',' << r.figure << ',' << r.series << ',' << fmt_num(r.x) << ',' << fmt_num(r.y) << '\n';
  return os.str();
}

inline std::pair<std::string, std::string> figure_axes(const std::string& figure) {
  if (figure.starts_with("comm_dispatch")) return {"k", "dispatch words"};
  if (figure.starts_with("comm_latency")) return {"Zipf skew", "latency proxy"};
  if (figure.starts_with("comm_peak")) return {"Zipf skew", "peak send+recv words"};
  if (figure.starts_with("routing")) return {"N_e", "HBM words read"};
  if (figure.starts_with("expert_activation")) return {"d_e", "HBM activation words"};
  if (figure.starts_with("expert_sram")) return {"d_e", "SRAM peak words"};
  if (figure.starts_with("training_loss")) return {"step", "loss"};
  if (figure.starts_with("training_load")) return {"step", "max/mean expert load"};
  if (figure.starts_with("verify")) return {"seed", "max error"};
  return {"x", "y"};
}

/// Writes summary.csv and <figure>.svg files into `out_dir`.
inline void write_report(const std::vector<fs::path>& bundles, const fs::path& out_dir) {
  std::string hash;
  const auto rows = summarize_bundles(bundles, &hash);
  fs::create_directories(out_dir);
  write_file(out_dir / "summary.csv", summary_csv(rows, hash));
  std::map<std::string, LineChart> charts;
  for (const auto& r : rows) {
    LineChart& c = charts[r.figure];
    if (c.title.empty()) {
      const auto [xl, yl] = figure_axes(r.figure);
      c = {r.figure, xl, yl, {}};
    }
    if (c.series.empty() || c.series.back().name != r.series) c.series.push_back({r.series, {}});
    c.series.back().points.emplace_back(r.x, r.y);
  }
  for (const auto& [name, chart] : charts) write_file(out_dir / (name + ".svg"), render_svg(chart));
}

}  // namespace mhmoe::harness
