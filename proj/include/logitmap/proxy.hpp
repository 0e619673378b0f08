/*
 * Copyright 2026 The logitmap Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 *
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "logitmap/core.hpp"
#include "logitmap/error.hpp"
#include "logitmap/gp.hpp"
#include "logitmap/logits.hpp"
#include "logitmap/model.hpp"
#include "logitmap/oracle.hpp"

namespace logitmap {

enum class Objective { kPlainFt, kCpt, kGpGated };

inline std::string_view objective_name(Objective o) {
  switch (o) {
    case Objective::kPlainFt: return "plain_ft";
    case Objective::kCpt: return "cpt";
    case Objective::kGpGated: return "gp_gated";
  }
  return "plain_ft";
}

inline Objective parse_objective(std::string_view s) {
  if (s == "plain_ft") return Objective::kPlainFt;
  if (s == "cpt") return Objective::kCpt;
  if (s == "gp_gated") return Objective::kGpGated;
  throw Error(Errc::kConfigError, fmt::format("unknown objective '{}'", s));
}

/// Weights on the (large - minus) logit difference. Values in [0.6, 1.4]
/// work well; 0.8 for both is the default.
struct EnsembleWeights {
  double alpha_train = 0.8;
  double alpha_test = 0.8;
};

enum class SignalSource { kGp, kOracle };

struct GatedSignal {
  LogitVector logits;
  SignalSource source = SignalSource::kGp;
  double uncertainty = 0.0;
};

struct TrainConfig {
  SgdConfig sgd;
  Objective objective = Objective::kPlainFt;
  EnsembleWeights alpha;
  GateConfig gate;
  // When set, the shift only covers the k largest entries of each signal.
  std::optional<std::size_t> topk_mask;
  Embedder embedder = identity_embedding;
};

/// GP mean when tau^2 <= theta (no oracle call), the oracle otherwise.
inline GatedSignal gated_signal(const Example& x, const GPPosterior& gp, const GateConfig& gate, Oracle& oracle,
                                ApiLedger& ledger, const Embedder& embedder = identity_embedding) {
  const EmbeddingVector v = embedder(x);
  const double tau2 = predict_uncertainty(gp, v).scalar;
  if (tau2 <= gate.threshold) return {predict_mean(gp, v), SignalSource::kGp, tau2};
  return {oracle.query(x, ledger), SignalSource::kOracle, tau2};
}

namespace detail {

inline Eigen::MatrixXd single_column(const Eigen::Ref<const Eigen::VectorXd>& v) { return v; }

inline LogitVector supervision_shift(const LogitVector& signal, const LogitVector& minus_logits, double alpha,
                                     std::optional<std::size_t> topk_mask = std::nullopt) {
  if (signal.size() != minus_logits.size()) {
    throw Error(Errc::kDimensionMismatch, fmt::format("signal has {} dims, proxy has {}", signal.size(), minus_logits.size()));
  }
  LogitVector shift = alpha * (signal - minus_logits);
  if (topk_mask && *topk_mask < static_cast<std::size_t>(signal.size())) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(signal.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return signal[a] > signal[b]; });
    for (std::size_t r = *topk_mask; r < idx.size(); ++r) shift[idx[r]] = 0.0;
  }
  return shift;
}

}  // namespace detail

inline LossAndGrad plain_ft_loss(const ProxyParams& plus, const Example& x, int y) {
  return shifted_cross_entropy(plus, detail::single_column(x.embedding), {y}, {});
}

/// CE(softmax(s_plus + alpha * (signal - s_minus)), y). The shift does not
/// depend on the trainable weights.
inline LossAndGrad gated_loss(const ProxyParams& plus, const ProxyParams& minus, const GatedSignal& signal, double alpha,
                              const Example& x, int y) {
  const LogitVector shift = detail::supervision_shift(signal.logits, proxy_forward(minus, x.embedding), alpha);
  return shifted_cross_entropy(plus, detail::single_column(x.embedding), {y}, detail::single_column(shift));
}

inline LossAndGrad cpt_loss(const ProxyParams& plus, const ProxyParams& minus, Oracle& oracle, ApiLedger& ledger,
                            double alpha, const Example& x, int y) {
  GatedSignal s{oracle.query(x, ledger), SignalSource::kOracle, 0.0};
  return gated_loss(plus, minus, s, alpha, x, y);
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  std::size_t ledger_unique = 0;
};

struct GateStats {
  std::size_t gp_signals = 0;
  std::size_t oracle_signals = 0;
  std::vector<std::string> fallback_ids;
};

struct TrainResult {
  ProxyParams params;
  std::vector<EpochMetrics> metrics;
  LedgerSnapshot ledger;
  GateStats gate;
  std::vector<GatedSignal> signals;  // per example, empty for plain_ft
};

/// Trains a copy of `minus` under the configured objective. Supervision
/// signals are computed once per example before the first epoch and reused.
inline TrainResult train_proxy(const TrainConfig& cfg, const Dataset& data, const ProxyParams& minus,
                               const GPPosterior* gp, Oracle* oracle, ApiLedger* ledger) {
  if (data.empty()) throw Error(Errc::kEmptyInput, "cannot train on an empty dataset");
  if (cfg.objective != Objective::kPlainFt && (!oracle || !ledger)) {
    throw Error(Errc::kConfigError, fmt::format("objective {} needs an oracle and a ledger", objective_name(cfg.objective)));
  }
  if (cfg.objective == Objective::kGpGated && !gp) throw Error(Errc::kConfigError, "gp_gated training needs a fitted GP");

  TrainResult result;
  std::vector<LogitVector> shifts;
  if (cfg.objective != Objective::kPlainFt) {
    const Eigen::MatrixXd minus_logits = proxy_forward_batch(minus, data.feature_matrix().transpose());
    shifts.reserve(data.size());
    result.signals.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      GatedSignal s = cfg.objective == Objective::kCpt
                          ? GatedSignal{oracle->query(data[i], *ledger), SignalSource::kOracle, 0.0}
                          : gated_signal(data[i], *gp, cfg.gate, *oracle, *ledger, cfg.embedder);
      if (s.source == SignalSource::kOracle) {
        ++result.gate.oracle_signals;
        result.gate.fallback_ids.push_back(data[i].id);
      } else {
        ++result.gate.gp_signals;
      }
      shifts.push_back(detail::supervision_shift(s.logits, minus_logits.col(static_cast<Eigen::Index>(i)),
                                                 cfg.alpha.alpha_train, cfg.topk_mask));
      result.signals.push_back(std::move(s));
    }
  }

  std::vector<int> labels;
  labels.reserve(data.size());
  for (const auto& e : data.examples()) labels.push_back(e.label);

  ProxyParams plus = minus.trainable_copy();
  const std::size_t unique = ledger ? ledger->unique_count() : 0;
  fit_softmax_classifier(plus, data, labels, shifts, cfg.sgd, [&](const EpochStats& s) {
    result.metrics.push_back({s.epoch, s.loss, s.train_acc, unique});
  });
  result.params = std::move(plus);
  if (ledger) result.ledger = ledger->snapshot();
  return result;
}

// ---------------------------------------------------------------------------
// Gradient verification

/// Returns the loss at a flat weight vector and its analytic gradient.
using LossEvaluator = std::function<LossAndGrad(const Eigen::VectorXd&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
};

/// Central differences with per-coordinate step h * (1 + |w|) on a random
/// sample of coordinates. Relative error uses max(|analytic|, |numeric|, 1e-6)
/// as denominator so near-zero gradients are judged on absolute error.
inline GradCheckResult grad_check(const LossEvaluator& eval, const Eigen::VectorXd& params, double h = 1e-5,
                                  std::size_t samples = 100, std::uint64_t seed = 0) {
  const LossAndGrad base = eval(params);
  std::vector<Eigen::Index> coords(static_cast<std::size_t>(params.size()));
  std::iota(coords.begin(), coords.end(), 0);
  if (coords.size() > samples) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(samples);
  }
  GradCheckResult r;
  Eigen::VectorXd w = params;
  for (auto c : coords) {
    const double step = h * (1.0 + std::abs(params[c]));
    w[c] = params[c] + step;
    const double up = eval(w).loss;
    w[c] = params[c] - step;
    const double down = eval(w).loss;
    w[c] = params[c];
    const double numeric = (up - down) / (2.0 * step);
    const double analytic = base.grad[c];
    const double abs_err = std::abs(numeric - analytic);
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
    r.max_relative_error = std::max(r.max_relative_error, abs_err / denom);
  }
  r.coordinates = coords.size();
  return r;
}

/// Batch loss as a function of the trainable weights, with a fixed shift
/// (empty for plain fine-tuning).
inline LossEvaluator batch_loss_evaluator(const ProxyParams& shape, Eigen::MatrixXd x, std::vector<int> labels,
                                          Eigen::MatrixXd shift) {
  return [shape, x = std::move(x), labels = std::move(labels), shift = std::move(shift)](const Eigen::VectorXd& w) {
    ProxyParams p = shape.trainable_copy();
    p.set_weights(w);
    return shifted_cross_entropy(p, x, labels, shift);
  };
}

inline void write_metrics_csv(const std::vector<EpochMetrics>& metrics, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIoError, fmt::format("cannot write '{}'", path.string()));
  out << "epoch,loss,train_acc,ledger_unique\n";
  for (const auto& m : metrics) out << fmt::format("{},{},{},{}\n", m.epoch, m.loss, m.train_acc, m.ledger_unique);
}

}  // namespace logitmap
