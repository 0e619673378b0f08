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

#include <cmath>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "logitmap/core.hpp"
#include "logitmap/error.hpp"

namespace logitmap {

/// s_plus + alpha * (s_large - s_minus). With alpha = 1 this is plain
/// proxy-tuning arithmetic.
inline LogitVector combine_logits(const LogitVector& s_plus, const LogitVector& s_minus, const LogitVector& s_large,
                                  double alpha) {
  if (s_plus.size() != s_minus.size() || s_plus.size() != s_large.size()) {
    throw Error(Errc::kDimensionMismatch, fmt::format("cannot combine logits of sizes {}, {}, {}", s_plus.size(),
                                                      s_minus.size(), s_large.size()));
  }
  return s_plus + alpha * (s_large - s_minus);
}

inline Eigen::VectorXd softmax(const LogitVector& logits) {
  if (logits.size() == 0 || !logits.allFinite()) throw Error(Errc::kNonFiniteInput, "softmax needs finite logits");
  const Eigen::ArrayXd e = (logits.array() - logits.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

inline Eigen::VectorXd log_softmax(const LogitVector& logits) {
  if (logits.size() == 0 || !logits.allFinite()) throw Error(Errc::kNonFiniteInput, "log_softmax needs finite logits");
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return (logits.array() - lse).matrix();
}

/// First index of the maximum.
inline int argmax(const Eigen::Ref<const Eigen::VectorXd>& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

struct EnsemblePrediction {
  LogitVector combined_logits;
  Eigen::VectorXd probabilities;
  int predicted_class = 0;
};

inline EnsemblePrediction ensemble_predict(const LogitVector& s_plus, const LogitVector& s_minus,
                                           const LogitVector& s_large, double alpha) {
  EnsemblePrediction out;
  out.combined_logits = combine_logits(s_plus, s_minus, s_large, alpha);
  out.probabilities = softmax(out.combined_logits);
  out.predicted_class = argmax(out.combined_logits);
  return out;
}

}  // namespace logitmap
