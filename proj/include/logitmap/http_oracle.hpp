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

#include <chrono>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <Eigen/Dense>
#include <fmt/format.h>

// Eigen must precede httplib: <resolv.h> defines a `_res` macro that
// collides with Eigen parameter names.
#include "httplib.h"
#include "json.hpp"
#include "logitmap/core.hpp"
#include "logitmap/error.hpp"
#include "logitmap/oracle.hpp"

namespace logitmap {

struct HttpOracleConfig {
  std::string base_url = "http://127.0.0.1:8080";
  std::size_t top_k = 5;
  std::size_t vocab_size = 0;
  std::optional<double> floor;
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::seconds timeout{30};
};

inline Json logits_request(const Example& x, std::size_t top_k, const std::optional<std::string>& prompt = std::nullopt) {
  Json req{{"id", x.id}, {"features", to_std(x.embedding)}, {"top_k", top_k}};
  if (prompt) req["prompt"] = *prompt;
  return req;
}

/// Parses a `/v1/logits` response body into its model id and top-k entries.
inline std::pair<std::string, TopKLogprobs> parse_logits_response(const std::string& body) {
  try {
    const Json j = Json::parse(body);
    TopKLogprobs entries;
    for (const auto& e : j.at("entries")) entries.push_back({e.at("token_id").get<int>(), e.at("logprob").get<double>()});
    validate_topk(entries);
    return {j.at("model_id").get<std::string>(), std::move(entries)};
  } catch (const Json::exception& e) {
    throw Error(Errc::kParseError, fmt::format("malformed logits response: {}", e.what()));
  }
}

/// Client for the POST /v1/logits wire protocol. 429 is a spent budget; 5xx
/// and transport failures are retried with exponential backoff.
class HttpOracleBackend : public OracleBackend {
 public:
  explicit HttpOracleBackend(HttpOracleConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.vocab_size == 0) throw Error(Errc::kConfigError, "http oracle needs the vocabulary size");
    if (cfg_.top_k == 0) throw Error(Errc::kConfigError, "top_k must be at least 1");
  }

  LogitVector evaluate(const Example& x) override {
    const std::string body = logits_request(x, cfg_.top_k).dump();
    auto backoff = cfg_.initial_backoff;
    std::string last_error;
    for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
      httplib::Client client(cfg_.base_url);
      client.set_connection_timeout(cfg_.timeout);
      client.set_read_timeout(cfg_.timeout);
      auto res = client.Post("/v1/logits", body, "application/json");
      if (res && res->status == 200) {
        auto [model, entries] = parse_logits_response(res->body);
        {
          std::lock_guard lock(mu_);
          model_id_ = model;
        }
        if (entries.size() != cfg_.top_k) {
          throw Error(Errc::kParseError, fmt::format("expected {} entries, got {}", cfg_.top_k, entries.size()));
        }
        return align_topk(entries, cfg_.vocab_size, cfg_.floor);
      }
      if (res && res->status == 429) {
        throw Error(Errc::kBudgetExceeded, fmt::format("oracle refused '{}' with 429", x.id));
      }
      if (res && res->status < 500) {
        throw Error(Errc::kOracleUnavailable, fmt::format("oracle answered {} for '{}'", res->status, x.id));
      }
      last_error = res ? fmt::format("HTTP {}", res->status) : httplib::to_string(res.error());
      if (attempt < cfg_.max_attempts) {
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
    }
    throw Error(Errc::kOracleUnavailable,
                fmt::format("'{}' failed after {} attempts: {}", x.id, cfg_.max_attempts, last_error));
  }

  std::size_t output_dim() const override { return cfg_.vocab_size; }
  std::string model_id() const override {
    std::lock_guard lock(mu_);
    return model_id_;
  }

 private:
  HttpOracleConfig cfg_;
  mutable std::mutex mu_;
  std::string model_id_ = "remote";
};

}  // namespace logitmap
