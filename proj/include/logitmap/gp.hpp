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
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "json.hpp"
#include "logitmap/core.hpp"
#include "logitmap/error.hpp"

namespace logitmap {

/// Squared-exponential kernel hyperparameters.
struct KernelParams {
  double signal_variance = 1.0;
  double lengthscale = 1.0;
};

/// Observation noise. `per_dim` overrides the shared value when non-empty.
struct NoiseParams {
  double noise_variance = 1e-2;
  std::vector<double> per_dim;

  double for_dim(std::size_t v) const { return per_dim.empty() ? noise_variance : per_dim.at(v); }
};

enum class MeanMode { kZero, kEmpirical };
enum class UncertaintyAggregation { kMax, kMean };

struct GPOptions {
  MeanMode mean = MeanMode::kZero;
  UncertaintyAggregation aggregation = UncertaintyAggregation::kMax;
};

struct UncertaintyEstimate {
  Eigen::VectorXd per_dim_variance;
  double scalar = 0.0;  // tau^2
};

struct GateConfig {
  double threshold = 0.0;
  double target_fallback_fraction = 0.01;
};

inline void check_kernel(const KernelParams& k) {
  if (!(k.signal_variance > 0.0) || !(k.lengthscale > 0.0) || !std::isfinite(k.signal_variance) ||
      !std::isfinite(k.lengthscale)) {
    throw Error(Errc::kInvalidSpec,
                fmt::format("kernel needs positive finite parameters (signal_variance={}, lengthscale={})",
                            k.signal_variance, k.lengthscale));
  }
}

inline double rbf_kernel(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b,
                         const KernelParams& k) {
  if (a.size() != b.size()) {
    throw Error(Errc::kDimensionMismatch, fmt::format("kernel inputs of size {} and {}", a.size(), b.size()));
  }
  const double sq = (a - b).squaredNorm();
  return k.signal_variance * std::exp(-sq / (2.0 * k.lengthscale * k.lengthscale));
}

/// Gram matrix over the rows of `x`.
inline Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd& x, const KernelParams& k) {
  const Eigen::Index m = x.rows();
  Eigen::MatrixXd gram(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    gram(i, i) = k.signal_variance;
    for (Eigen::Index j = 0; j < i; ++j) {
      const double v = rbf_kernel(x.row(i).transpose(), x.row(j).transpose(), k);
      gram(i, j) = v;
      gram(j, i) = v;
    }
  }
  return gram;
}

inline Eigen::VectorXd kernel_vector(const Eigen::MatrixXd& x, const Eigen::Ref<const Eigen::VectorXd>& query,
                                     const KernelParams& k) {
  if (query.size() != x.cols()) {
    throw Error(Errc::kDimensionMismatch,
                fmt::format("query has dimension {}, training inputs have {}", query.size(), x.cols()));
  }
  Eigen::VectorXd out(x.rows());
  for (Eigen::Index j = 0; j < x.rows(); ++j) out[j] = rbf_kernel(query, x.row(j).transpose(), k);
  return out;
}

/// One Cholesky factor shared by every output dimension with the same noise.
struct FactorGroup {
  double noise_variance = 0.0;
  double jitter = 0.0;
  Eigen::MatrixXd lower;
  std::vector<Eigen::Index> dims;
};

namespace detail {

/// Factors K + noise*I, escalating diagonal jitter from 1e-8 to 1e-2 of the
/// mean diagonal before giving up.
inline FactorGroup factor_with_jitter(const Eigen::MatrixXd& gram, double noise) {
  const Eigen::Index m = gram.rows();
  const double scale = gram.trace() / static_cast<double>(m);
  std::vector<double> ladder{0.0};
  for (double j = 1e-8; j <= 1e-2 * (1.0 + 1e-9); j *= 10.0) ladder.push_back(j * scale);
  for (double jitter : ladder) {
    Eigen::MatrixXd a = gram;
    a.diagonal().array() += noise + jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success) continue;
    Eigen::MatrixXd lower = llt.matrixL();
    const auto diag = lower.diagonal();
    if (!lower.allFinite() || (diag.array() <= 0.0).any()) continue;
    return {noise, jitter, std::move(lower), {}};
  }
  throw Error(Errc::kIllConditioned,
              fmt::format("covariance of {} points not positive definite after jitter up to {:.3g}", m,
                          1e-2 * scale));
}

inline Eigen::MatrixXd cholesky_solve(const Eigen::MatrixXd& lower, const Eigen::MatrixXd& rhs) {
  const auto l = lower.triangularView<Eigen::Lower>();
  Eigen::MatrixXd y = l.solve(rhs);
  return l.transpose().solve(y);
}

}  // namespace detail

/// Fitted multi-output GP. Immutable once built.
class GPPosterior {
 public:
  GPPosterior(Eigen::MatrixXd inputs, std::vector<FactorGroup> groups, Eigen::MatrixXd dual_weights,
              Eigen::VectorXd mean, KernelParams kernel, NoiseParams noise, GPOptions options)
      : inputs_(std::move(inputs)),
        groups_(std::move(groups)),
        dual_weights_(std::move(dual_weights)),
        mean_(std::move(mean)),
        kernel_(kernel),
        noise_(std::move(noise)),
        options_(options) {
    check_kernel(kernel_);
    const Eigen::Index v = dual_weights_.cols();
    group_of_dim_.assign(static_cast<std::size_t>(v), 0);
    std::vector<int> seen(static_cast<std::size_t>(v), 0);
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      const auto& grp = groups_[g];
      if (grp.lower.rows() != inputs_.rows() || grp.lower.cols() != inputs_.rows() ||
          (grp.lower.diagonal().array() <= 0.0).any()) {
        throw Error(Errc::kIllConditioned, "cholesky factor must be M x M with positive diagonal");
      }
      for (auto d : grp.dims) {
        group_of_dim_.at(static_cast<std::size_t>(d)) = g;
        ++seen.at(static_cast<std::size_t>(d));
      }
    }
    if (std::any_of(seen.begin(), seen.end(), [](int s) { return s != 1; }) ||
        dual_weights_.rows() != inputs_.rows() || mean_.size() != v) {
      throw Error(Errc::kDimensionMismatch, "posterior components have inconsistent shapes");
    }
  }

  const Eigen::MatrixXd& inputs() const noexcept { return inputs_; }
  const std::vector<FactorGroup>& groups() const noexcept { return groups_; }
  const Eigen::MatrixXd& dual_weights() const noexcept { return dual_weights_; }
  const Eigen::VectorXd& mean() const noexcept { return mean_; }
  const KernelParams& kernel() const noexcept { return kernel_; }
  const NoiseParams& noise() const noexcept { return noise_; }
  const GPOptions& options() const noexcept { return options_; }

  std::size_t num_points() const noexcept { return static_cast<std::size_t>(inputs_.rows()); }
  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(inputs_.cols()); }
  std::size_t output_dim() const noexcept { return static_cast<std::size_t>(dual_weights_.cols()); }
  std::size_t group_of_dim(std::size_t v) const { return group_of_dim_.at(v); }

 private:
  Eigen::MatrixXd inputs_;
  std::vector<FactorGroup> groups_;
  Eigen::MatrixXd dual_weights_;
  Eigen::VectorXd mean_;
  KernelParams kernel_;
  NoiseParams noise_;
  GPOptions options_;
  std::vector<std::size_t> group_of_dim_;
};

namespace detail {

inline void unpack_pairs(const LogitMapSet& pairs, Eigen::MatrixXd& x, Eigen::MatrixXd& y) {
  const auto m = static_cast<Eigen::Index>(pairs.size());
  x.resize(m, static_cast<Eigen::Index>(pairs.input_dim()));
  y.resize(m, static_cast<Eigen::Index>(pairs.output_dim()));
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& p = pairs.pairs()[static_cast<std::size_t>(i)];
    if (!all_finite(p.embedding) || !all_finite(p.oracle_logits)) {
      throw Error(Errc::kNonFiniteInput, fmt::format("pair '{}' has non-finite values", p.example_id));
    }
    x.row(i) = p.embedding.transpose();
    y.row(i) = p.oracle_logits.transpose();
  }
}

/// Groups output dimensions that share a noise value.
inline std::vector<FactorGroup> factor_groups(const Eigen::MatrixXd& gram, const NoiseParams& noise,
                                              Eigen::Index outputs) {
  for (double n : noise.per_dim) {
    if (!(n >= 0.0) || !std::isfinite(n)) throw Error(Errc::kInvalidSpec, "noise variance must be >= 0");
  }
  if (!(noise.noise_variance >= 0.0)) throw Error(Errc::kInvalidSpec, "noise variance must be >= 0");
  if (!noise.per_dim.empty() && static_cast<Eigen::Index>(noise.per_dim.size()) != outputs) {
    throw Error(Errc::kDimensionMismatch,
                fmt::format("{} per-dimension noise values for {} outputs", noise.per_dim.size(), outputs));
  }
  std::vector<FactorGroup> groups;
  for (Eigen::Index v = 0; v < outputs; ++v) {
    const double n = noise.for_dim(static_cast<std::size_t>(v));
    auto it = std::find_if(groups.begin(), groups.end(), [&](const FactorGroup& g) { return g.noise_variance == n; });
    if (it == groups.end()) {
      groups.push_back(factor_with_jitter(gram, n));
      it = std::prev(groups.end());
    }
    it->dims.push_back(v);
  }
  return groups;
}

}  // namespace detail

inline GPPosterior fit_gp(const LogitMapSet& pairs, const KernelParams& kernel, const NoiseParams& noise,
                          const GPOptions& options = {}) {
  if (pairs.empty()) throw Error(Errc::kEmptyTrainingSet, "no LogitMap pairs to fit");
  check_kernel(kernel);
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;
  detail::unpack_pairs(pairs, x, y);

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(y.cols());
  if (options.mean == MeanMode::kEmpirical) mean = y.colwise().mean().transpose();
  const Eigen::MatrixXd centered = y.rowwise() - mean.transpose();

  const Eigen::MatrixXd gram = kernel_matrix(x, kernel);
  auto groups = detail::factor_groups(gram, noise, y.cols());

  Eigen::MatrixXd dual(y.rows(), y.cols());
  for (const auto& g : groups) {
    Eigen::MatrixXd rhs(y.rows(), static_cast<Eigen::Index>(g.dims.size()));
    for (std::size_t c = 0; c < g.dims.size(); ++c) rhs.col(static_cast<Eigen::Index>(c)) = centered.col(g.dims[c]);
    const Eigen::MatrixXd sol = detail::cholesky_solve(g.lower, rhs);
    for (std::size_t c = 0; c < g.dims.size(); ++c) dual.col(g.dims[c]) = sol.col(static_cast<Eigen::Index>(c));
  }
  if (!dual.allFinite()) throw Error(Errc::kIllConditioned, "dual weights are not finite");
  return GPPosterior(std::move(x), std::move(groups), std::move(dual), std::move(mean), kernel, noise, options);
}

inline LogitVector predict_mean(const GPPosterior& gp, const Eigen::Ref<const Eigen::VectorXd>& x) {
  const Eigen::VectorXd kx = kernel_vector(gp.inputs(), x, gp.kernel());
  LogitVector out = gp.dual_weights().transpose() * kx + gp.mean();
  if (!out.allFinite()) throw Error(Errc::kIllConditioned, "predictive mean is not finite");
  return out;
}

inline UncertaintyEstimate predict_uncertainty(const GPPosterior& gp, const Eigen::Ref<const Eigen::VectorXd>& x) {
  const Eigen::VectorXd kx = kernel_vector(gp.inputs(), x, gp.kernel());
  const double prior = gp.kernel().signal_variance;
  const double tolerance = 1e-12 * std::max(1.0, prior);
  UncertaintyEstimate est;
  est.per_dim_variance.resize(static_cast<Eigen::Index>(gp.output_dim()));
  for (const auto& g : gp.groups()) {
    const Eigen::VectorXd v = g.lower.triangularView<Eigen::Lower>().solve(kx);
    double var = prior - v.squaredNorm();
    if (!std::isfinite(var)) throw Error(Errc::kIllConditioned, "predictive variance is not finite");
    if (var < 0.0) {
      if (var < -tolerance) {
        throw Error(Errc::kNegativeVariance, fmt::format("predictive variance {:.3e} below zero", var));
      }
      var = 0.0;
    }
    for (auto d : g.dims) est.per_dim_variance[d] = var;
  }
  est.scalar = gp.options().aggregation == UncertaintyAggregation::kMax ? est.per_dim_variance.maxCoeff()
                                                                         : est.per_dim_variance.mean();
  return est;
}

/// Sum over output dimensions of the Gaussian log marginal likelihood.
inline double log_marginal_likelihood(const LogitMapSet& pairs, const KernelParams& kernel, const NoiseParams& noise,
                                      const GPOptions& options = {}) {
  const GPPosterior gp = fit_gp(pairs, kernel, noise, options);
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;
  detail::unpack_pairs(pairs, x, y);
  const Eigen::MatrixXd centered = y.rowwise() - gp.mean().transpose();
  const double m = static_cast<double>(x.rows());
  double total = 0.0;
  for (const auto& g : gp.groups()) {
    const double log_det_half = g.lower.diagonal().array().log().sum();
    for (auto d : g.dims) {
      total += -0.5 * centered.col(d).dot(gp.dual_weights().col(d)) - log_det_half -
               0.5 * m * std::log(2.0 * std::numbers::pi);
    }
  }
  if (!std::isfinite(total)) throw Error(Errc::kIllConditioned, "log marginal likelihood is not finite");
  return total;
}

/// Median pairwise distance for the lengthscale and mean per-dimension target
/// variance for the signal variance. Degenerate sets fall back to 1.
inline KernelParams default_kernel(const LogitMapSet& pairs) {
  KernelParams k;
  if (pairs.size() < 2) return k;
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;
  detail::unpack_pairs(pairs, x, y);
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(x.rows() * (x.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < i; ++j) dists.push_back((x.row(i) - x.row(j)).norm());
  }
  auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
  std::nth_element(dists.begin(), mid, dists.end());
  double median = *mid;
  if (dists.size() % 2 == 0) {
    const double lower = *std::max_element(dists.begin(), mid);
    median = 0.5 * (median + lower);
  }
  if (median > 0.0 && std::isfinite(median)) k.lengthscale = median;
  const Eigen::MatrixXd centered = y.rowwise() - y.colwise().mean();
  const double var = centered.array().square().colwise().sum().mean() / static_cast<double>(y.rows());
  if (var > 0.0 && std::isfinite(var)) k.signal_variance = var;
  return k;
}

/// Grid search over multiples of a base kernel maximizing the LML. Grid
/// points whose fit is ill-conditioned are skipped.
inline KernelParams select_kernel_by_lml(const LogitMapSet& pairs, const KernelParams& base, const NoiseParams& noise,
                                         const std::vector<double>& lengthscale_factors,
                                         const std::vector<double>& variance_factors,
                                         const GPOptions& options = {}) {
  KernelParams best = base;
  double best_lml = -std::numeric_limits<double>::infinity();
  for (double lf : lengthscale_factors) {
    for (double vf : variance_factors) {
      KernelParams k{base.signal_variance * vf, base.lengthscale * lf};
      try {
        const double lml = log_marginal_likelihood(pairs, k, noise, options);
        if (lml > best_lml) {
          best_lml = lml;
          best = k;
        }
      } catch (const Error& e) {
        if (e.code() != Errc::kIllConditioned) throw;
      }
    }
  }
  return best;
}

/// Threshold such that ceil(p * N) of `values` lie strictly above it; ties at
/// the cut shrink the fallback set.
inline double upper_quantile_threshold(std::vector<double> values, double p) {
  if (values.empty()) throw Error(Errc::kEmptyInput, "no values to calibrate against");
  if (!(p > 0.0 && p < 1.0)) throw Error(Errc::kInvalidSpec, fmt::format("fraction {} not in (0, 1)", p));
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  const auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) - 1e-9));
  const std::size_t idx = k + 1 >= n ? 0 : n - k - 1;
  return values[idx];
}

inline GateConfig calibrate_gate_threshold(const GPPosterior& gp, const std::vector<EmbeddingVector>& inputs,
                                           double p = 0.01) {
  if (inputs.empty()) throw Error(Errc::kEmptyInput, "no inputs for gate calibration");
  std::vector<double> tau;
  tau.reserve(inputs.size());
  for (const auto& x : inputs) tau.push_back(predict_uncertainty(gp, x).scalar);
  return {upper_quantile_threshold(std::move(tau), p), p};
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr const char* kPosteriorFormat = "logitmap-gp/1";

namespace detail {

inline Json matrix_to_json(const Eigen::MatrixXd& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(row);
  }
  return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

inline Eigen::MatrixXd matrix_from_json(const Json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  Eigen::MatrixXd m(rows, cols);
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows) throw Error(Errc::kParseError, "matrix row count mismatch");
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto row = data[static_cast<std::size_t>(i)].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != cols) throw Error(Errc::kParseError, "matrix column count mismatch");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)];
  }
  return m;
}

}  // namespace detail

inline Json posterior_to_json(const GPPosterior& gp) {
  Json groups = Json::array();
  for (const auto& g : gp.groups()) {
    groups.push_back({{"noise_variance", g.noise_variance},
                      {"jitter", g.jitter},
                      {"dims", g.dims},
                      {"cholesky", detail::matrix_to_json(g.lower)}});
  }
  return Json{{"format", kPosteriorFormat},
              {"kernel", {{"type", "rbf"}, {"signal_variance", gp.kernel().signal_variance},
                          {"lengthscale", gp.kernel().lengthscale}}},
              {"noise", {{"noise_variance", gp.noise().noise_variance}, {"per_dim", gp.noise().per_dim}}},
              {"mean_mode", gp.options().mean == MeanMode::kZero ? "zero" : "empirical"},
              {"aggregation", gp.options().aggregation == UncertaintyAggregation::kMax ? "max" : "mean"},
              {"mean", to_std(gp.mean())},
              {"inputs", detail::matrix_to_json(gp.inputs())},
              {"dual_weights", detail::matrix_to_json(gp.dual_weights())},
              {"groups", groups}};
}

inline GPPosterior posterior_from_json(const Json& j) {
  try {
    if (j.at("format").get<std::string>() != kPosteriorFormat) {
      throw Error(Errc::kParseError, fmt::format("unsupported posterior format '{}'", j.at("format").get<std::string>()));
    }
    KernelParams k{j.at("kernel").at("signal_variance").get<double>(), j.at("kernel").at("lengthscale").get<double>()};
    NoiseParams n{j.at("noise").at("noise_variance").get<double>(),
                  j.at("noise").at("per_dim").get<std::vector<double>>()};
    GPOptions opt;
    opt.mean = j.at("mean_mode").get<std::string>() == "zero" ? MeanMode::kZero : MeanMode::kEmpirical;
    opt.aggregation = j.at("aggregation").get<std::string>() == "max" ? UncertaintyAggregation::kMax
                                                                      : UncertaintyAggregation::kMean;
    std::vector<FactorGroup> groups;
    for (const auto& g : j.at("groups")) {
      groups.push_back({g.at("noise_variance").get<double>(), g.at("jitter").get<double>(),
                        detail::matrix_from_json(g.at("cholesky")), g.at("dims").get<std::vector<Eigen::Index>>()});
    }
    return GPPosterior(detail::matrix_from_json(j.at("inputs")), std::move(groups),
                       detail::matrix_from_json(j.at("dual_weights")), to_eigen(j.at("mean").get<std::vector<double>>()),
                       k, std::move(n), opt);
  } catch (const Json::exception& e) {
    throw Error(Errc::kParseError, e.what());
  }
}

inline Json gate_to_json(const GateConfig& g) {
  return Json{{"threshold", g.threshold}, {"target_fallback_fraction", g.target_fallback_fraction}};
}

inline GateConfig gate_from_json(const Json& j) {
  try {
    return {j.at("threshold").get<double>(), j.value("target_fallback_fraction", 0.01)};
  } catch (const Json::exception& e) {
    throw Error(Errc::kParseError, e.what());
  }
}

}  // namespace logitmap
