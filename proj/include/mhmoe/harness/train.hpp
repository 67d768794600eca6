// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Toy regression training of one multi-head latent MoE layer.
//
// Three copies of the same initial layer are trained side by side on the same
// batches: the block-sparse backend, the grouped-GEMM backend, and the
// per-head reference. Updates are plain SGD plus the aux-free bias rule.

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mhmoe/checkpoint.hpp"
#include "mhmoe/csv.hpp"
#include "mhmoe/harness/bundle.hpp"
#include "mhmoe/harness/config.hpp"
#include "mhmoe/harness/svg.hpp"
#include "mhmoe/moe.hpp"
#include "mhmoe/reference.hpp"
#include "mhmoe/rng.hpp"

namespace mhmoe::harness {

inline constexpr std::size_t kToyModels = 3;
inline constexpr const char* kToyModelNames[kToyModels] = {"blocksparse", "naive", "reference"};

struct ToyData {
  std::vector<Tensor<float>> inputs;   // [B, T, d]
  std::vector<Tensor<float>> targets;  // [B, T, d]
};

/// Inputs share a fixed offset direction, so router scores have a common
/// component and expert load starts out skewed. Targets are tanh(A x).
inline ToyData make_toy_data(const RunConfig& c) {
  Rng rng = Rng(c.seed).fork(0xda7a);
  const Tensor<float> dir = randn<float>({c.d}, rng);
  const Tensor<float> teacher = randn<float>({c.d, c.d}, rng, 1.0 / std::sqrt(static_cast<double>(c.d)));
  ToyData data;
  for (std::size_t b = 0; b < c.data_batches; ++b) {
    Tensor<float> x = randn<float>({c.B * c.T, c.d}, rng);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += static_cast<float>(c.input_offset) * dir[i % c.d];
    Tensor<float> y = matmul_nt(x, teacher);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(y[i]);
    data.inputs.push_back(x.reshaped({c.B, c.T, c.d}));
    data.targets.push_back(y.reshaped({c.B, c.T, c.d}));
  }
  return data;
}

inline MHLatentMoEParams<float> init_toy_layer(const RunConfig& c) {
  Rng rng = Rng(c.seed).fork(0x5eed);
  const LayerDims dims{c.d, c.N_h, c.d_h, c.N_e, c.k, c.d_e, c.separate_routing};
  return init_mh_latentmoe<float>(rng, dims, InitConfig{c.init_std, c.L});
}

template <typename T>
void sgd_update(MHLatentMoEParams<T>& p, const MHGrads<T>& g, double lr) {
  auto step = [lr](Tensor<T>& w, const Tensor<T>& dw) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= static_cast<T>(lr) * dw[i];
  };
  step(p.w_in, g.dw_in);
  step(p.w_out, g.dw_out);
  for (std::size_t h = 0; h < p.num_heads(); ++h) {
    step(p.heads[h].router.w_r, g.heads[h].dw_r);
    step(p.heads[h].bank.w_in, g.heads[h].dw_in);
    step(p.heads[h].bank.w_out, g.heads[h].dw_out);
  }
}

/// Per-head expert load of the reference model, from its own routing.
inline std::vector<LoadBalanceState> reference_loads(const MHLatentMoEParams<float>& p, const Tensor<float>& x,
                                                     double rate) {
  const Tensor<float> rows = mhmoe::detail::token_rows(x, p.model_dim());
  const Tensor<float> latent = mh_project_in(p, rows);
  const std::size_t L = p.latent_dim(), Dh = p.head_dim(), width = latent.dim(1);
  std::vector<LoadBalanceState> out;
  for (std::size_t h = 0; h < p.num_heads(); ++h) {
    const std::size_t E = p.heads[h].experts();
    LoadBalanceState st{Tensor<std::int64_t>({1, E}), rate};
    const std::size_t col = (p.separate_routing ? L : 0) + h * Dh;
    for (std::size_t t = 0; t < rows.dim(0); ++t) {
      const auto r = reference::route_token(p.heads[h], latent.data() + t * width + col);
      for (auto e : r.experts) st.expert_load[e] += 1;
    }
    out.push_back(std::move(st));
  }
  return out;
}

struct ToyStep {
  std::size_t step = 0;
  double loss[kToyModels] = {};
  double imbalance[kToyModels] = {};

  double max_gap() const {
    return std::max({std::abs(loss[0] - loss[1]), std::abs(loss[0] - loss[2]), std::abs(loss[1] - loss[2])});
  }
};

struct ToyRun {
  std::vector<ToyStep> steps;
  std::optional<std::size_t> nan_step;  // first step with a non-finite loss
  std::optional<std::size_t> nan_model;
  MHLatentMoEParams<float> final_blocksparse;
};

inline ToyRun run_toy_training(const RunConfig& c) {
  validate(c);
  const ToyData data = make_toy_data(c);
  std::vector<MHLatentMoEParams<float>> models(kToyModels, init_toy_layer(c));
  const TierConfig tier{c.sram_words, c.word_size};
  MoEOptions opts[2];
  opts[0].backend = ExpertBackend::blocksparse;
  opts[1].backend = ExpertBackend::naive;

  ToyRun run;
  for (std::size_t s = 1; s <= c.steps && !run.nan_step; ++s) {
    const Tensor<float>& x = data.inputs[(s - 1) % data.inputs.size()];
    const Tensor<float>& y = data.targets[(s - 1) % data.targets.size()];
    ToyStep rec;
    rec.step = s;
    for (std::size_t m = 0; m < kToyModels; ++m) {
      auto& p = models[m];
      MHForwardState<float> st;
      LedgerLog log(tier);
      const Tensor<float> out =
          m < 2 ? mh_latentmoe_forward(p, x, log, opts[m], &st) : reference::mh_latentmoe_forward(p, x);
      double loss = 0.0;
      Tensor<float> d_out(out.shape());
      const double scale = 2.0 / static_cast<double>(out.size());
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double diff = static_cast<double>(out[i]) - static_cast<double>(y[i]);
        loss += diff * diff;
        d_out[i] = static_cast<float>(scale * diff);
      }
      loss /= static_cast<double>(out.size());
      rec.loss[m] = loss;
      if (!std::isfinite(loss)) {
        run.nan_step = s;
        run.nan_model = m;
        break;
      }

      std::vector<LoadBalanceState> loads;
      if (m < 2) {
        for (std::size_t h = 0; h < p.num_heads(); ++h)
          loads.push_back(tally_expert_load(st.heads[h].topk, p.heads[h].experts(), c.bias_rate));
      } else {
        loads = reference_loads(p, x, c.bias_rate);
      }
      double worst = 0.0;
      for (const auto& l : loads) worst = std::max(worst, load_imbalance_ratio(l));
      rec.imbalance[m] = worst;

      const MHGrads<float> g =
          m < 2 ? mh_latentmoe_backward(p, st, d_out, log, opts[m]) : reference::mh_latentmoe_backward(p, x, d_out);
      sgd_update(p, g, c.lr);
      for (std::size_t h = 0; h < p.num_heads(); ++h)
        p.heads[h].router = update_balance_bias(loads[h], p.heads[h].router);
    }
    run.steps.push_back(rec);
  }
  run.final_blocksparse = models[0];
  return run;
}

inline constexpr double kToyLossTolerance = 1e-4;

/// Writes loss.csv, loss.svg and checkpoint.bin. Returns the exit code.
inline int write_train_bundle(const ToyRun& run, Bundle& bundle, std::string* message = nullptr) {
  const std::string& hash = bundle.hash();
  std::ostringstream csv;
  csv << "config_hash,step";
  for (auto n : kToyModelNames) csv << ",loss_" << n;
  for (auto n : kToyModelNames) csv << ",imbalance_" << n;
  csv << ",max_loss_gap\n";
  double worst_gap = 0.0;
  for (const auto& s : run.steps) {
    csv << hash << ',' << s.step;
    for (double v : s.loss) csv << ',' << fmt_num(v);
    for (double v : s.imbalance) csv << ',' << fmt_num(v);
    csv << ',' << fmt_num(s.max_gap()) << '\n';
    if (std::isfinite(s.max_gap())) worst_gap = std::max(worst_gap, s.max_gap());
  }
  bundle.write("loss.csv", csv.str());

  LineChart chart{"Toy training loss", "step", "mean squared error", {}};
  for (std::size_t m = 0; m < kToyModels; ++m) {
    Series s{kToyModelNames[m], {}};
    for (const auto& st : run.steps) s.points.emplace_back(static_cast<double>(st.step), st.loss[m]);
    chart.series.push_back(std::move(s));
  }
  bundle.write("loss.svg", render_svg(chart));
  save_checkpoint(bundle.path_for("checkpoint.bin").string(), named_parameters(run.final_blocksparse));

  std::ostringstream msg;
  int code = 0;
  if (run.nan_step) {
    msg << "non-finite loss at step " << *run.nan_step << " (" << kToyModelNames[*run.nan_model] << ")";
    code = 1;
  } else if (worst_gap > kToyLossTolerance) {
    msg << "backend losses diverge: max gap " << fmt_num(worst_gap) << " > " << fmt_num(kToyLossTolerance);
    code = 1;
  } else if (!run.steps.empty()) {
    msg << "steps " << run.steps.size() << ", loss " << fmt_num(run.steps.front().loss[0]) << " -> "
        << fmt_num(run.steps.back().loss[0]) << ", imbalance " << fmt_num(run.steps.front().imbalance[0])
        << " -> " << fmt_num(run.steps.back().imbalance[0]) << ", max backend gap " << fmt_num(worst_gap);
  }
  if (message) *message = msg.str();
  return code;
}

}  // namespace mhmoe::harness
