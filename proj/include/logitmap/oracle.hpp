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
#include <filesystem>
#include <fstream>
#include <future>
#include <limits>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "json.hpp"
#include "logitmap/core.hpp"
#include "logitmap/error.hpp"
#include "logitmap/logits.hpp"
#include "logitmap/model.hpp"

namespace logitmap {

/// The black-box side: turns an example into a logit vector. Implementations
/// never expose their parameters.
class OracleBackend {
 public:
  virtual ~OracleBackend() = default;
  virtual LogitVector evaluate(const Example& x) = 0;
  virtual std::size_t output_dim() const = 0;
  virtual std::string model_id() const { return "oracle"; }
};

/// id -> logits, persisted as JSONL {"id", "logits"}. Thread-safe; the first
/// writer for an id wins.
class OracleCache {
 public:
  std::optional<LogitVector> lookup(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(id);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  bool insert(const std::string& id, const LogitVector& logits) {
    std::lock_guard lock(mu_);
    if (!entries_.emplace(id, logits).second) return false;
    order_.push_back(id);
    return true;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

  void save(const std::filesystem::path& path) const {
    std::lock_guard lock(mu_);
    std::ofstream out(path);
    if (!out) throw Error(Errc::kIoError, fmt::format("cannot write '{}'", path.string()));
    for (const auto& id : order_) out << Json{{"id", id}, {"logits", to_std(entries_.at(id))}}.dump() << '\n';
  }

  static OracleCache load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::kIoError, fmt::format("cannot open '{}'", path.string()));
    OracleCache cache;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const Json j = Json::parse(line);
        cache.insert(j.at("id").get<std::string>(), to_eigen(j.at("logits").get<std::vector<double>>()));
      } catch (const Json::exception& e) {
        throw Error(Errc::kParseError, fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
      }
    }
    return cache;
  }

  OracleCache() = default;
  OracleCache(const OracleCache& o) {
    std::lock_guard lock(o.mu_);
    entries_ = o.entries_;
    order_ = o.order_;
  }
  OracleCache& operator=(const OracleCache&) = delete;

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, LogitVector> entries_;
  std::vector<std::string> order_;
};

/// Query-counted front of a backend. Answers are cached per example id, so
/// the oracle is deterministic per id even when the backend is not.
class Oracle {
 public:
  explicit Oracle(std::shared_ptr<OracleBackend> backend, std::shared_ptr<OracleCache> cache = nullptr)
      : backend_(std::move(backend)), cache_(cache ? std::move(cache) : std::make_shared<OracleCache>()) {
    if (!backend_) throw Error(Errc::kOracleUnavailable, "oracle has no backend");
  }

  /// Cache hits bypass the backend and never add a unique query. Concurrent
  /// misses on the same id share one backend call.
  LogitVector query(const Example& x, ApiLedger& ledger) {
    std::unique_lock lock(mu_);
    if (auto hit = cache_->lookup(x.id)) {
      lock.unlock();
      ledger.record_hit();
      return *hit;
    }
    if (auto it = in_flight_.find(x.id); it != in_flight_.end()) {
      auto fut = it->second;
      lock.unlock();
      ledger.record_hit();
      return fut.get();
    }
    ledger.check_budget(x.id);
    std::promise<LogitVector> promise;
    in_flight_.emplace(x.id, promise.get_future().share());
    lock.unlock();

    LogitVector logits;
    try {
      logits = backend_->evaluate(x);
      if (static_cast<std::size_t>(logits.size()) != backend_->output_dim()) {
        throw Error(Errc::kDimensionMismatch, fmt::format("backend returned {} logits, expected {}", logits.size(),
                                                          backend_->output_dim()));
      }
      if (!logits.allFinite()) throw Error(Errc::kOracleUnavailable, "backend returned non-finite logits");
    } catch (...) {
      lock.lock();
      in_flight_.erase(x.id);
      lock.unlock();
      promise.set_exception(std::current_exception());
      throw;
    }
    lock.lock();
    cache_->insert(x.id, logits);
    ledger.record(x.id);
    in_flight_.erase(x.id);
    lock.unlock();
    promise.set_value(logits);
    return logits;
  }

  std::size_t output_dim() const { return backend_->output_dim(); }
  const std::shared_ptr<OracleBackend>& backend() const noexcept { return backend_; }
  const std::shared_ptr<OracleCache>& cache() const noexcept { return cache_; }

 private:
  std::shared_ptr<OracleBackend> backend_;
  std::shared_ptr<OracleCache> cache_;
  std::mutex mu_;
  std::unordered_map<std::string, std::shared_future<LogitVector>> in_flight_;
};

inline LogitVector query(Oracle& oracle, const Example& x, ApiLedger& ledger) { return oracle.query(x, ledger); }

/// Serves only what a cache file holds; a miss is an unavailable oracle.
class CacheOnlyBackend : public OracleBackend {
 public:
  CacheOnlyBackend(std::shared_ptr<const OracleCache> cache, std::size_t output_dim)
      : cache_(std::move(cache)), output_dim_(output_dim) {}

  LogitVector evaluate(const Example& x) override {
    if (auto hit = cache_->lookup(x.id)) return *hit;
    throw Error(Errc::kOracleUnavailable, fmt::format("id '{}' not in the offline cache", x.id));
  }
  std::size_t output_dim() const override { return output_dim_; }
  std::string model_id() const override { return "offline-cache"; }

 private:
  std::shared_ptr<const OracleCache> cache_;
  std::size_t output_dim_;
};

// ---------------------------------------------------------------------------
// Synthetic teacher

/// A classifier trained inside the harness and then sealed. Only its logits
/// leave through `evaluate`.
class SyntheticTeacher : public OracleBackend {
 public:
  SyntheticTeacher(ProxyParams params, double train_accuracy)
      : params_(std::move(params)), train_accuracy_(train_accuracy) {
    params_.seal();
  }

  LogitVector evaluate(const Example& x) override { return proxy_forward(params_, x.embedding); }
  std::size_t output_dim() const override { return params_.output_dim(); }
  std::string model_id() const override { return "synthetic-teacher"; }

  /// Accuracy against the clean labels of the training data.
  double train_accuracy() const noexcept { return train_accuracy_; }

  /// In-process evaluation for tests; the harness itself only queries.
  const ProxyParams& sealed_params_for_testing() const noexcept { return params_; }

 private:
  ProxyParams params_;
  double train_accuracy_;
};

struct TeacherSpec {
  std::size_t hidden = 64;
  double label_noise = 0.0;
  std::uint64_t seed = 0;
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  double momentum = 0.9;
};

/// Replaces each label, with probability `noise`, by a uniformly drawn
/// different class.
inline std::vector<int> corrupt_labels(const Dataset& data, double noise, std::uint64_t seed) {
  std::vector<int> labels;
  labels.reserve(data.size());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const int classes = static_cast<int>(data.num_classes());
  std::uniform_int_distribution<int> other(1, std::max(1, classes - 1));
  for (const auto& e : data.examples()) {
    int y = e.label;
    if (classes > 1 && coin(rng) < noise) y = (y + other(rng)) % classes;
    labels.push_back(y);
  }
  return labels;
}

inline std::shared_ptr<SyntheticTeacher> make_synthetic_teacher(const Dataset& data, const TeacherSpec& spec) {
  if (data.empty()) throw Error(Errc::kEmptyInput, "teacher needs training data");
  if (!(spec.label_noise >= 0.0 && spec.label_noise < 1.0)) {
    throw Error(Errc::kInvalidSpec, fmt::format("label noise {} not in [0, 1)", spec.label_noise));
  }
  ProxyParams p = init_proxy(Architecture::kMlp, data.dim(), data.num_classes(), spec.hidden, spec.seed);
  const auto labels = corrupt_labels(data, spec.label_noise, spec.seed ^ 0x9e3779b97f4a7c15ULL);
  SgdConfig cfg{spec.epochs, spec.batch_size, spec.learning_rate, spec.momentum, spec.seed + 1};
  fit_softmax_classifier(p, data, labels, {}, cfg);
  const double acc = classifier_accuracy(p, data);
  return std::make_shared<SyntheticTeacher>(std::move(p), acc);
}

// ---------------------------------------------------------------------------
// Top-k logprobs

struct TokenLogprob {
  int token_id = 0;
  double logprob = 0.0;
};

using TopKLogprobs = std::vector<TokenLogprob>;

/// Log-softmax, then the k most likely entries in descending order. Equal
/// logprobs keep ascending token order.
inline TopKLogprobs truncate_topk(const LogitVector& logits, std::size_t k) {
  if (k < 1 || k > static_cast<std::size_t>(logits.size())) {
    throw Error(Errc::kKOutOfRange, fmt::format("k={} with {} logits", k, logits.size()));
  }
  const Eigen::VectorXd lp = log_softmax(logits);
  std::vector<int> idx(static_cast<std::size_t>(lp.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return lp[a] > lp[b]; });
  TopKLogprobs out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back({idx[i], lp[idx[i]]});
  return out;
}

/// Checks the wire invariants: non-empty, distinct ids, non-increasing logprobs.
inline void validate_topk(const TopKLogprobs& entries) {
  if (entries.empty()) throw Error(Errc::kParseError, "top-k response has no entries");
  std::unordered_set<int> seen;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!std::isfinite(entries[i].logprob)) throw Error(Errc::kParseError, "non-finite logprob");
    if (!seen.insert(entries[i].token_id).second) {
      throw Error(Errc::kParseError, fmt::format("duplicate token id {}", entries[i].token_id));
    }
    if (i > 0 && entries[i].logprob > entries[i - 1].logprob) throw Error(Errc::kParseError, "logprobs not descending");
  }
}

/// Default fill for unobserved tokens: ten nats below the smallest observed.
inline double default_floor(const TopKLogprobs& sparse) {
  double lo = std::numeric_limits<double>::infinity();
  for (const auto& e : sparse) lo = std::min(lo, e.logprob);
  return lo - 10.0;
}

inline LogitVector align_topk(const TopKLogprobs& sparse, std::size_t vocab_size, std::optional<double> floor = std::nullopt) {
  const double fill = floor.value_or(default_floor(sparse));
  LogitVector dense = LogitVector::Constant(static_cast<Eigen::Index>(vocab_size), fill);
  for (const auto& e : sparse) {
    if (e.token_id < 0 || static_cast<std::size_t>(e.token_id) >= vocab_size) {
      throw Error(Errc::kTokenIdOutOfRange, fmt::format("token id {} outside vocabulary of {}", e.token_id, vocab_size));
    }
    dense[e.token_id] = e.logprob;
  }
  return dense;
}

/// Mask of observed positions, for training against top-k signals without
/// the floor.
inline std::vector<bool> observed_mask(const TopKLogprobs& sparse, std::size_t vocab_size) {
  std::vector<bool> mask(vocab_size, false);
  for (const auto& e : sparse) mask.at(static_cast<std::size_t>(e.token_id)) = true;
  return mask;
}

/// Wraps a backend so that only its top-k logprobs are visible, densified
/// with the floor rule.
class TopKBackend : public OracleBackend {
 public:
  TopKBackend(std::shared_ptr<OracleBackend> inner, std::size_t k, std::optional<double> floor = std::nullopt)
      : inner_(std::move(inner)), k_(k), floor_(floor) {}

  LogitVector evaluate(const Example& x) override {
    return align_topk(truncate_topk(inner_->evaluate(x), k_), inner_->output_dim(), floor_);
  }
  std::size_t output_dim() const override { return inner_->output_dim(); }
  std::string model_id() const override { return inner_->model_id() + fmt::format("/top{}", k_); }

 private:
  std::shared_ptr<OracleBackend> inner_;
  std::size_t k_;
  std::optional<double> floor_;
};

}  // namespace logitmap
