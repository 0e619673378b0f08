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

#include <stdexcept>
#include <string>
#include <string_view>

namespace logitmap {

enum class Errc {
  kZeroDenominator,
  kParseError,
  kDimensionMismatch,
  kLabelOutOfRange,
  kEmptyTrainingSet,
  kIllConditioned,
  kNegativeVariance,
  kEmptyInput,
  kZeroVector,
  kCountOutOfRange,
  kOracleUnavailable,
  kBudgetExceeded,
  kTrainingDiverged,
  kKOutOfRange,
  kTokenIdOutOfRange,
  kNonFiniteInput,
  kEmptySplit,
  kInvalidSpec,
  kMissingArtifacts,
  kConfigError,
  kIoError,
};

constexpr std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::kZeroDenominator: return "ZeroDenominator";
    case Errc::kParseError: return "ParseError";
    case Errc::kDimensionMismatch: return "DimensionMismatch";
    case Errc::kLabelOutOfRange: return "LabelOutOfRange";
    case Errc::kEmptyTrainingSet: return "EmptyTrainingSet";
    case Errc::kIllConditioned: return "IllConditioned";
    case Errc::kNegativeVariance: return "NegativeVariance";
    case Errc::kEmptyInput: return "EmptyInput";
    case Errc::kZeroVector: return "ZeroVector";
    case Errc::kCountOutOfRange: return "CountOutOfRange";
    case Errc::kOracleUnavailable: return "OracleUnavailable";
    case Errc::kBudgetExceeded: return "BudgetExceeded";
    case Errc::kTrainingDiverged: return "TrainingDiverged";
    case Errc::kKOutOfRange: return "KOutOfRange";
    case Errc::kTokenIdOutOfRange: return "TokenIdOutOfRange";
    case Errc::kNonFiniteInput: return "NonFiniteInput";
    case Errc::kEmptySplit: return "EmptySplit";
    case Errc::kInvalidSpec: return "InvalidSpec";
    case Errc::kMissingArtifacts: return "MissingArtifacts";
    case Errc::kConfigError: return "ConfigError";
    case Errc::kIoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace logitmap
