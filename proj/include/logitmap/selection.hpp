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
#include <iostream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "json.hpp"
#include "logitmap/core.hpp"
#include "logitmap/error.hpp"
#include "logitmap/model.hpp"
#include "logitmap/oracle.hpp"

namespace logitmap {

enum class Metric { kEuclidean, kManhattan, kCosine };

inline Metric parse_metric(std::string_view s) {
  if (s == "euclidean") return Metric::kEuclidean;
  if (s == "manhattan") return Metric::kManhattan;
  if (s == "cosine" || s == "cosine_distance") return Metric::kCosine;
  throw Error(Errc::kConfigError, fmt::format("unknown metric '{}'", s));
}

inline std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::kEuclidean: return "euclidean";
    case Metric::kManhattan: return "manhattan";
    case Metric::kCosine: return "cosine_distance";
  }
  return "euclidean";
}

inline double input_distance(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b,
                             Metric metric = Metric::kEuclidean) {
  if (a.size() != b.size()) {
    throw Error(Errc::kDimensionMismatch, fmt::format("distance between sizes {} and {}", a.size(), b.size()));
  }
  double d = 0.0;
  switch (metric) {
    case Metric::kEuclidean:
      d = (a - b).norm();
      break;
    case Metric::kManhattan:
      d = (a - b).lpNorm<1>();
      break;
    case Metric::kCosine: {
      const double na = a.norm();
      const double nb = b.norm();
      if (na == 0.0 || nb == 0.0) throw Error(Errc::kZeroVector, "cosine distance with a zero vector");
      d = std::max(0.0, 1.0 - a.dot(b) / (na * nb));
      break;
    }
  }
  if (!std::isfinite(d)) throw Error(Errc::kNonFiniteInput, "non-finite distance");
  return d;
}

inline double output_distance(const LogitVector& a, const LogitVector& b) {
  return input_distance(a, b, Metric::kEuclidean);
}

struct SelectionThresholds {
  double tau_in = 0.0;
  double tau_out = 0.0;
  Metric metric = Metric::kEuclidean;
};

struct Candidate {
  std::string id;
  std::size_t index = 0;  // position in the source dataset
  EmbeddingVector embedding;
  LogitVector proxy_logits;  // empty when the strategy does not use the proxy
};

struct CandidateSet {
  std::vector<Candidate> candidates;
  bool truncated = false;

  std::size_t size() const noexcept { return candidates.size(); }
};

struct SelectionOptions {
  Embedder embedder = identity_embedding;
  std::size_t max_selected = 3000;
};

enum class CalibrationMode { kPermissiveRun, kFullPairwise };

namespace detail {

struct ProxyView {
  std::vector<EmbeddingVector> inputs;
  std::vector<LogitVector> outputs;
};

inline ProxyView proxy_view(const Dataset& data, const ProxyParams& frozen, const Embedder& embedder) {
  ProxyView v;
  v.inputs.reserve(data.size());
  v.outputs.reserve(data.size());
  const Eigen::MatrixXd logits = proxy_forward_batch(frozen, data.feature_matrix().transpose());
  for (std::size_t i = 0; i < data.size(); ++i) {
    v.inputs.push_back(embedder(data[i]));
    v.outputs.push_back(logits.col(static_cast<Eigen::Index>(i)));
  }
  return v;
}

/// Value at rank ceil(p * N) (1-based) of the ascending order.
inline double lower_quantile(std::vector<double> values, double p) {
  if (values.empty()) throw Error(Errc::kEmptyInput, "no distances collected");
  if (!(p > 0.0 && p < 1.0)) throw Error(Errc::kInvalidSpec, fmt::format("percentile {} not in (0, 1)", p));
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(values.size()) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

}  // namespace detail

inline double percentile_threshold(const std::vector<double>& values, double p) { return detail::lower_quantile(values, p); }

/// Distances a permissive (tau = 0) selection pass evaluates, or every pair.
struct CollectedDistances {
  std::vector<double> input;
  std::vector<double> output;
};

inline CollectedDistances collect_distances(const Dataset& data, const ProxyParams& frozen, Metric metric,
                                            CalibrationMode mode, const Embedder& embedder = identity_embedding) {
  const auto view = detail::proxy_view(data, frozen, embedder);
  CollectedDistances out;
  if (mode == CalibrationMode::kFullPairwise) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        out.input.push_back(input_distance(view.inputs[i], view.inputs[j], metric));
        out.output.push_back(output_distance(view.outputs[i], view.outputs[j]));
      }
    }
    return out;
  }
  std::vector<std::size_t> selected;
  if (!data.empty()) selected.push_back(0);
  for (std::size_t i = 1; i < data.size(); ++i) {
    bool diverse = true;
    for (auto k : selected) {
      const double din = input_distance(view.inputs[i], view.inputs[k], metric);
      const double dout = output_distance(view.outputs[i], view.outputs[k]);
      out.input.push_back(din);
      out.output.push_back(dout);
      if (din <= 0.0 || dout <= 0.0) {
        diverse = false;
        break;
      }
    }
    if (diverse) selected.push_back(i);
  }
  return out;
}

/// Sets tau_in and tau_out to the p-quantile of the distances a permissive
/// selection pass observes.
inline SelectionThresholds calibrate_thresholds(const Dataset& data, const ProxyParams& frozen, double p = 0.01,
                                                Metric metric = Metric::kEuclidean,
                                                CalibrationMode mode = CalibrationMode::kPermissiveRun,
                                                const Embedder& embedder = identity_embedding) {
  if (data.size() < 2) throw Error(Errc::kEmptyInput, "threshold calibration needs at least two examples");
  auto d = collect_distances(data, frozen, metric, mode, embedder);
  return {detail::lower_quantile(std::move(d.input), p), detail::lower_quantile(std::move(d.output), p), metric};
}

/// Greedy diversity filter. An example joins the candidate set only if both
/// its input distance and its frozen-proxy output distance exceed the
/// thresholds against every candidate already chosen. No oracle is touched.
inline CandidateSet filter_select(const Dataset& data, const ProxyParams& frozen, const SelectionThresholds& th,
                                  const SelectionOptions& opt = {}) {
  if (th.tau_in < 0.0 || th.tau_out < 0.0 || !std::isfinite(th.tau_in) || !std::isfinite(th.tau_out)) {
    throw Error(Errc::kInvalidSpec, "selection thresholds must be finite and non-negative");
  }
  CandidateSet out;
  if (data.empty()) return out;
  const auto view = detail::proxy_view(data, frozen, opt.embedder);
  std::vector<std::size_t> selected{0};
  for (std::size_t i = 1; i < data.size(); ++i) {
    bool diverse = true;
    for (auto k : selected) {
      if (input_distance(view.inputs[i], view.inputs[k], th.metric) <= th.tau_in ||
          output_distance(view.outputs[i], view.outputs[k]) <= th.tau_out) {
        diverse = false;
        break;
      }
    }
    if (!diverse) continue;
    if (selected.size() >= opt.max_selected) {
      out.truncated = true;
      std::cerr << fmt::format("warning: selection truncated at {} candidates\n", opt.max_selected);
      break;
    }
    selected.push_back(i);
  }
  for (auto i : selected) out.candidates.push_back({data[i].id, i, view.inputs[i], view.outputs[i]});
  return out;
}

/// Uniform sample without replacement, reproducible from the seed.
inline CandidateSet random_select(const Dataset& data, std::size_t count, std::uint64_t seed,
                                  const Embedder& embedder = identity_embedding) {
  if (count < 1 || count > data.size()) {
    throw Error(Errc::kCountOutOfRange, fmt::format("cannot draw {} of {} examples", count, data.size()));
  }
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  CandidateSet out;
  for (std::size_t i = 0; i < count; ++i) out.candidates.push_back({data[idx[i]].id, idx[i], embedder(data[idx[i]]), {}});
  return out;
}

/// Queries the oracle once per candidate and pairs each embedding with the
/// oracle's logits.
inline LogitMapSet build_logitmap(const CandidateSet& candidates, const Dataset& data, Oracle& oracle, ApiLedger& ledger) {
  LogitMapSet pairs;
  for (const auto& c : candidates.candidates) {
    const auto idx = data.find(c.id);
    if (!idx) throw Error(Errc::kParseError, fmt::format("candidate '{}' is not in the dataset", c.id));
    pairs.add({c.id, c.embedding, oracle.query(data[*idx], ledger)});
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Exports

inline void write_candidates_jsonl(const CandidateSet& set, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIoError, fmt::format("cannot write '{}'", path.string()));
  for (const auto& c : set.candidates) out << Json{{"id", c.id}, {"proxy_logits", to_std(c.proxy_logits)}}.dump() << '\n';
}

inline std::vector<std::string> read_candidate_ids(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIoError, fmt::format("cannot open '{}'", path.string()));
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      ids.push_back(Json::parse(line).at("id").get<std::string>());
    } catch (const Json::exception& e) {
      throw Error(Errc::kParseError, e.what());
    }
  }
  return ids;
}

inline void write_logitmap_jsonl(const LogitMapSet& set, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIoError, fmt::format("cannot write '{}'", path.string()));
  for (const auto& p : set.pairs()) {
    out << Json{{"id", p.example_id}, {"embedding", to_std(p.embedding)}, {"oracle_logits", to_std(p.oracle_logits)}}.dump()
        << '\n';
  }
}

inline LogitMapSet read_logitmap_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIoError, fmt::format("cannot open '{}'", path.string()));
  LogitMapSet set;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const Json j = Json::parse(line);
      set.add({j.at("id").get<std::string>(), to_eigen(j.at("embedding").get<std::vector<double>>()),
               to_eigen(j.at("oracle_logits").get<std::vector<double>>())});
    } catch (const Json::exception& e) {
      throw Error(Errc::kParseError, e.what());
    }
  }
  return set;
}

}  // namespace logitmap
