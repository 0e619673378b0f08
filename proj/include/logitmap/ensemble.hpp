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

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "logitmap/core.hpp"
#include "logitmap/error.hpp"
#include "logitmap/logits.hpp"
#include "logitmap/model.hpp"
#include "logitmap/oracle.hpp"

namespace logitmap {

using Predictor = std::function<int(const Example&)>;

struct PredictionRecord {
  std::string id;
  int true_label = 0;
  int pred_label = 0;
};

struct EvaluationResult {
  double accuracy = 0.0;
  std::vector<PredictionRecord> predictions;
  std::size_t ledger_delta = 0;  // unique oracle queries made while predicting
};

/// Accuracy of `predictor` on `split`. Pass the ledger the predictor queries
/// through to get the queries it spent.
inline EvaluationResult evaluate(const Predictor& predictor, const Dataset& split, const ApiLedger* ledger = nullptr) {
  if (split.empty()) throw Error(Errc::kEmptySplit, "cannot evaluate on an empty split");
  const std::size_t before = ledger ? ledger->unique_count() : 0;
  EvaluationResult r;
  r.predictions.reserve(split.size());
  std::size_t correct = 0;
  for (const auto& e : split.examples()) {
    const int pred = predictor(e);
    correct += pred == e.label;
    r.predictions.push_back({e.id, e.label, pred});
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(split.size());
  r.ledger_delta = ledger ? ledger->unique_count() - before : 0;
  return r;
}

inline Predictor proxy_predictor(const ProxyParams& p) {
  return [&p](const Example& e) { return argmax(proxy_forward(p, e.embedding)); };
}

inline Predictor oracle_predictor(Oracle& oracle, ApiLedger& ledger) {
  return [&](const Example& e) { return argmax(oracle.query(e, ledger)); };
}

/// argmax of s_plus + alpha * (s_large - s_minus); one oracle query per example.
inline Predictor ensemble_predictor(const ProxyParams& plus, const ProxyParams& minus, Oracle& oracle, ApiLedger& ledger,
                                    double alpha) {
  return [&, alpha](const Example& e) {
    return ensemble_predict(proxy_forward(plus, e.embedding), proxy_forward(minus, e.embedding), oracle.query(e, ledger),
                            alpha)
        .predicted_class;
  };
}

inline void write_predictions_header(std::ostream& out) { out << "id,true_label,pred_label,method\n"; }

inline void write_predictions_rows(std::ostream& out, const std::vector<PredictionRecord>& rows, std::string_view method) {
  for (const auto& r : rows) out << fmt::format("{},{},{},{}\n", r.id, r.true_label, r.pred_label, method);
}

}  // namespace logitmap
