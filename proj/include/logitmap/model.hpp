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
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "json.hpp"
#include "logitmap/core.hpp"
#include "logitmap/error.hpp"
#include "logitmap/logits.hpp"

namespace logitmap {

enum class Architecture { kLinear, kMlp };

inline std::string_view architecture_name(Architecture a) { return a == Architecture::kLinear ? "linear" : "mlp"; }

inline Architecture parse_architecture(std::string_view s) {
  if (s == "linear" || s == "linear_softmax") return Architecture::kLinear;
  if (s == "mlp") return Architecture::kMlp;
  throw Error(Errc::kConfigError, fmt::format("unknown architecture '{}'", s));
}

enum class ProxyRole { kFrozenMinus, kTrainablePlus };

/// Softmax classifier d -> V. All weights live in one flat vector:
///   linear: W (V x d, column-major), b (V)
///   mlp:    W1 (H x d), b1 (H), W2 (V x H), b2 (V), tanh hidden layer
class ProxyParams {
 public:
  ProxyParams() = default;

  ProxyParams(Architecture arch, std::size_t input_dim, std::size_t output_dim, std::size_t hidden = 0)
      : arch_(arch), input_dim_(input_dim), output_dim_(output_dim), hidden_(arch == Architecture::kMlp ? hidden : 0) {
    if (input_dim == 0 || output_dim == 0 || (arch == Architecture::kMlp && hidden == 0)) {
      throw Error(Errc::kInvalidSpec, "proxy dimensions must be positive");
    }
    weights_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(parameter_count()));
  }

  Architecture architecture() const noexcept { return arch_; }
  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t output_dim() const noexcept { return output_dim_; }
  std::size_t hidden() const noexcept { return hidden_; }
  ProxyRole role() const noexcept { return role_; }
  bool sealed() const noexcept { return sealed_; }

  std::size_t parameter_count() const noexcept {
    if (arch_ == Architecture::kLinear) return output_dim_ * input_dim_ + output_dim_;
    return hidden_ * input_dim_ + hidden_ + output_dim_ * hidden_ + output_dim_;
  }

  const Eigen::VectorXd& weights() const noexcept { return weights_; }

  Eigen::VectorXd& mutable_weights() {
    if (sealed_) throw Error(Errc::kInvalidSpec, "frozen proxy parameters cannot be modified");
    return weights_;
  }

  void set_weights(const Eigen::VectorXd& w) {
    if (static_cast<std::size_t>(w.size()) != parameter_count()) {
      throw Error(Errc::kDimensionMismatch, fmt::format("{} weights for {} parameters", w.size(), parameter_count()));
    }
    mutable_weights() = w;
  }

  /// Marks these parameters as the frozen reference copy.
  void seal() {
    role_ = ProxyRole::kFrozenMinus;
    sealed_ = true;
  }

  /// Unsealed trainable copy with identical weights.
  ProxyParams trainable_copy() const {
    ProxyParams p = *this;
    p.role_ = ProxyRole::kTrainablePlus;
    p.sealed_ = false;
    return p;
  }

  // Segment views. Offsets follow the layout documented above.
  using ConstMap = Eigen::Map<const Eigen::MatrixXd>;
  using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

  ConstMap w1() const { return ConstMap(weights_.data(), rows1(), static_cast<Eigen::Index>(input_dim_)); }
  ConstVecMap b1() const { return ConstVecMap(weights_.data() + rows1() * input_dim_, rows1()); }
  ConstMap w2() const {
    return ConstMap(weights_.data() + offset_w2(), static_cast<Eigen::Index>(output_dim_), static_cast<Eigen::Index>(hidden_));
  }
  ConstVecMap b2() const {
    return ConstVecMap(weights_.data() + offset_w2() + output_dim_ * hidden_, static_cast<Eigen::Index>(output_dim_));
  }

 private:
  Eigen::Index rows1() const {
    return static_cast<Eigen::Index>(arch_ == Architecture::kLinear ? output_dim_ : hidden_);
  }
  std::size_t offset_w2() const { return hidden_ * input_dim_ + hidden_; }

  Architecture arch_ = Architecture::kLinear;
  std::size_t input_dim_ = 0;
  std::size_t output_dim_ = 0;
  std::size_t hidden_ = 0;
  ProxyRole role_ = ProxyRole::kTrainablePlus;
  bool sealed_ = false;
  Eigen::VectorXd weights_;
};

/// Gaussian init scaled by 1/sqrt(fan_in); biases start at zero.
inline ProxyParams init_proxy(Architecture arch, std::size_t input_dim, std::size_t output_dim, std::size_t hidden,
                              std::uint64_t seed, double scale = 1.0) {
  ProxyParams p(arch, input_dim, output_dim, hidden);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.parameter_count()));
  const std::size_t rows1 = arch == Architecture::kLinear ? output_dim : hidden;
  const double s1 = scale / std::sqrt(static_cast<double>(input_dim));
  for (std::size_t i = 0; i < rows1 * input_dim; ++i) w[static_cast<Eigen::Index>(i)] = s1 * normal(rng);
  if (arch == Architecture::kMlp) {
    const std::size_t off = hidden * input_dim + hidden;
    const double s2 = scale / std::sqrt(static_cast<double>(hidden));
    for (std::size_t i = 0; i < output_dim * hidden; ++i) w[static_cast<Eigen::Index>(off + i)] = s2 * normal(rng);
  }
  p.set_weights(w);
  return p;
}

/// Logits for a batch stored column-wise (d x B) -> (V x B).
inline Eigen::MatrixXd proxy_forward_batch(const ProxyParams& p, const Eigen::MatrixXd& x) {
  if (static_cast<std::size_t>(x.rows()) != p.input_dim()) {
    throw Error(Errc::kDimensionMismatch, fmt::format("proxy expects {} features, got {}", p.input_dim(), x.rows()));
  }
  if (p.architecture() == Architecture::kLinear) return (p.w1() * x).colwise() + p.b1();
  const Eigen::MatrixXd h = ((p.w1() * x).colwise() + p.b1()).array().tanh().matrix();
  return (p.w2() * h).colwise() + p.b2();
}

inline LogitVector proxy_forward(const ProxyParams& p, const Eigen::Ref<const Eigen::VectorXd>& x) {
  return proxy_forward_batch(p, x);
}

/// Gradient of sum_b <dlogits_b, logits_b> w.r.t. the flat weights, given
/// dlogits (V x B) for inputs x (d x B).
inline Eigen::VectorXd proxy_backward_batch(const ProxyParams& p, const Eigen::MatrixXd& x, const Eigen::MatrixXd& dlogits) {
  Eigen::VectorXd g(static_cast<Eigen::Index>(p.parameter_count()));
  const auto d = static_cast<Eigen::Index>(p.input_dim());
  const auto v = static_cast<Eigen::Index>(p.output_dim());
  if (p.architecture() == Architecture::kLinear) {
    Eigen::Map<Eigen::MatrixXd>(g.data(), v, d) = dlogits * x.transpose();
    g.segment(v * d, v) = dlogits.rowwise().sum();
    return g;
  }
  const auto hdim = static_cast<Eigen::Index>(p.hidden());
  const Eigen::MatrixXd h = ((p.w1() * x).colwise() + p.b1()).array().tanh().matrix();
  const Eigen::MatrixXd dh = p.w2().transpose() * dlogits;
  const Eigen::MatrixXd da = (dh.array() * (1.0 - h.array().square())).matrix();
  Eigen::Map<Eigen::MatrixXd>(g.data(), hdim, d) = da * x.transpose();
  g.segment(hdim * d, hdim) = da.rowwise().sum();
  const Eigen::Index off = hdim * d + hdim;
  Eigen::Map<Eigen::MatrixXd>(g.data() + off, v, hdim) = dlogits * h.transpose();
  g.segment(off + v * hdim, v) = dlogits.rowwise().sum();
  return g;
}

struct LossAndGrad {
  double loss = 0.0;
  Eigen::VectorXd grad;
};

/// Mean softmax cross-entropy of (proxy logits + shift) against labels, and
/// its gradient. `shift` may be empty (no shift) or V x B.
inline LossAndGrad shifted_cross_entropy(const ProxyParams& p, const Eigen::MatrixXd& x, const std::vector<int>& labels,
                                         const Eigen::MatrixXd& shift) {
  const auto b = x.cols();
  Eigen::MatrixXd z = proxy_forward_batch(p, x);
  if (shift.size() != 0) z += shift;
  Eigen::MatrixXd dz(z.rows(), b);
  double loss = 0.0;
  for (Eigen::Index c = 0; c < b; ++c) {
    const int y = labels[static_cast<std::size_t>(c)];
    if (y < 0 || y >= z.rows()) throw Error(Errc::kLabelOutOfRange, fmt::format("label {} not in [0, {})", y, z.rows()));
    const double m = z.col(c).maxCoeff();
    const Eigen::ArrayXd e = (z.col(c).array() - m).exp();
    const double sum = e.sum();
    loss += m + std::log(sum) - z(y, c);
    dz.col(c) = (e / sum).matrix();
    dz(y, c) -= 1.0;
  }
  const double inv = 1.0 / static_cast<double>(b);
  return {loss * inv, proxy_backward_batch(p, x, dz * inv)};
}

struct SgdConfig {
  std::size_t epochs = 2;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  double momentum = 0.0;
  std::uint64_t seed = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
};

/// Mini-batch gradient descent on shifted cross-entropy. `shifts` is either
/// empty or holds one V-vector per example; batch order is drawn from the
/// seed. `on_epoch` runs after each epoch.
inline std::vector<EpochStats> fit_softmax_classifier(ProxyParams& p, const Dataset& data, const std::vector<int>& labels,
                                                      const std::vector<LogitVector>& shifts, const SgdConfig& cfg,
                                                      const std::function<void(const EpochStats&)>& on_epoch = {}) {
  if (cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0)) {
    throw Error(Errc::kInvalidSpec, "epochs, batch size and learning rate must be positive");
  }
  if (data.empty()) throw Error(Errc::kEmptyInput, "cannot train on an empty dataset");
  const std::size_t n = data.size();
  const auto v = static_cast<Eigen::Index>(p.output_dim());
  const Eigen::MatrixXd all_x = data.feature_matrix().transpose();
  Eigen::MatrixXd all_shift;
  if (!shifts.empty()) {
    all_shift.resize(v, static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) all_shift.col(static_cast<Eigen::Index>(i)) = shifts[i];
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n);
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.parameter_count()));
  std::vector<EpochStats> history;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      Eigen::MatrixXd xb(all_x.rows(), static_cast<Eigen::Index>(len));
      Eigen::MatrixXd sb;
      if (!shifts.empty()) sb.resize(v, static_cast<Eigen::Index>(len));
      std::vector<int> yb(len);
      for (std::size_t k = 0; k < len; ++k) {
        const auto i = static_cast<Eigen::Index>(order[start + k]);
        xb.col(static_cast<Eigen::Index>(k)) = all_x.col(i);
        if (!shifts.empty()) sb.col(static_cast<Eigen::Index>(k)) = all_shift.col(i);
        yb[k] = labels[order[start + k]];
      }
      const LossAndGrad lg = shifted_cross_entropy(p, xb, yb, sb);
      if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) {
        throw Error(Errc::kTrainingDiverged, fmt::format("non-finite loss in epoch {}", epoch));
      }
      loss_sum += lg.loss * static_cast<double>(len);
      velocity = cfg.momentum * velocity - cfg.learning_rate * lg.grad;
      p.mutable_weights() += velocity;
    }
    Eigen::MatrixXd z = proxy_forward_batch(p, all_x);
    if (!shifts.empty()) z += all_shift;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) correct += argmax(z.col(static_cast<Eigen::Index>(i))) == labels[i];
    EpochStats s{epoch, loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
    history.push_back(s);
    if (on_epoch) on_epoch(s);
  }
  return history;
}

inline double classifier_accuracy(const ProxyParams& p, const Dataset& data) {
  if (data.empty()) throw Error(Errc::kEmptySplit, "accuracy of an empty split");
  const Eigen::MatrixXd z = proxy_forward_batch(p, data.feature_matrix().transpose());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += argmax(z.col(static_cast<Eigen::Index>(i))) == data[i].label;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// FNV-1a over the architecture tag and raw weight bytes.
inline std::uint64_t params_hash(const ProxyParams& p) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  const auto arch = static_cast<int>(p.architecture());
  mix(&arch, sizeof arch);
  mix(p.weights().data(), static_cast<std::size_t>(p.weights().size()) * sizeof(double));
  return h;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline constexpr const char* kCheckpointFormat = "logitmap-proxy/1";

inline Json checkpoint_to_json(const ProxyParams& p, std::uint64_t seed, std::string_view config_hash) {
  return Json{{"format", kCheckpointFormat},
              {"architecture", architecture_name(p.architecture())},
              {"input_dim", p.input_dim()},
              {"output_dim", p.output_dim()},
              {"hidden", p.hidden()},
              {"role", p.role() == ProxyRole::kFrozenMinus ? "frozen_minus" : "trainable_plus"},
              {"weights", to_std(p.weights())},
              {"seed", seed},
              {"config_hash", config_hash}};
}

inline ProxyParams checkpoint_from_json(const Json& j) {
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) {
      throw Error(Errc::kParseError, "unsupported checkpoint format");
    }
    ProxyParams p(parse_architecture(j.at("architecture").get<std::string>()), j.at("input_dim").get<std::size_t>(),
                  j.at("output_dim").get<std::size_t>(), j.at("hidden").get<std::size_t>());
    p.set_weights(to_eigen(j.at("weights").get<std::vector<double>>()));
    if (j.value("role", "trainable_plus") == "frozen_minus") p.seal();
    return p;
  } catch (const Json::exception& e) {
    throw Error(Errc::kParseError, e.what());
  }
}

}  // namespace logitmap
