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
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "json.hpp"
#include "logitmap/core.hpp"
#include "logitmap/ensemble.hpp"
#include "logitmap/error.hpp"
#include "logitmap/gp.hpp"
#include "logitmap/http_oracle.hpp"
#include "logitmap/model.hpp"
#include "logitmap/oracle.hpp"
#include "logitmap/proxy.hpp"
#include "logitmap/selection.hpp"

namespace logitmap {

// ---------------------------------------------------------------------------
// Synthetic data

/// Gaussian blobs; blob b belongs to class b % num_classes, so more than one
/// blob per class makes the task non-linear.
struct SyntheticSpec {
  std::size_t blobs_per_class = 2;
  std::size_t dim = 16;
  std::size_t num_classes = 4;
  double separation = 3.0;
  double noise = 1.0;
  std::size_t train_size = 2000;
  std::size_t test_size = 1000;
  std::uint64_t seed = 0;
};

struct Splits {
  Dataset train;
  Dataset test;
};

namespace detail {

inline Dataset sample_blobs(const Eigen::MatrixXd& centers, const SyntheticSpec& spec, std::size_t count,
                            std::string_view prefix, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Example> rows;
  rows.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    // Round-robin over classes keeps the splits balanced.
    const std::size_t cls = i % spec.num_classes;
    std::uniform_int_distribution<std::size_t> pick(0, spec.blobs_per_class - 1);
    const std::size_t blob = pick(rng) * spec.num_classes + cls;
    EmbeddingVector x(static_cast<Eigen::Index>(spec.dim));
    for (Eigen::Index k = 0; k < x.size(); ++k) x[k] = centers(k, static_cast<Eigen::Index>(blob)) + spec.noise * normal(rng);
    rows.push_back({fmt::format("{}{:05d}", prefix, i), std::move(x), static_cast<int>(cls)});
  }
  return Dataset(std::move(rows), spec.num_classes, spec.dim);
}

}  // namespace detail

namespace detail {

inline void check_spec(const SyntheticSpec& spec) {
  if (spec.num_classes < 2 || spec.dim == 0 || spec.blobs_per_class == 0) {
    throw Error(Errc::kInvalidSpec, "need at least 2 classes, 1 dimension and 1 blob per class");
  }
  if (!(spec.noise >= 0.0) || !(spec.separation >= 0.0)) throw Error(Errc::kInvalidSpec, "noise and separation must be >= 0");
}

/// Blob centers depend on the seed alone, so every split drawn from one
/// spec shares them.
inline Eigen::MatrixXd blob_centers(const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto blobs = static_cast<Eigen::Index>(spec.blobs_per_class * spec.num_classes);
  Eigen::MatrixXd centers(static_cast<Eigen::Index>(spec.dim), blobs);
  for (Eigen::Index b = 0; b < blobs; ++b) {
    for (Eigen::Index k = 0; k < centers.rows(); ++k) centers(k, b) = normal(rng);
    centers.col(b) *= spec.separation / std::max(1e-12, centers.col(b).norm());
  }
  return centers;
}

}  // namespace detail

inline Splits generate_synthetic(const SyntheticSpec& spec) {
  detail::check_spec(spec);
  if (spec.train_size < spec.num_classes || spec.test_size < spec.num_classes) {
    throw Error(Errc::kInvalidSpec, "split sizes must be at least the class count");
  }
  const Eigen::MatrixXd centers = detail::blob_centers(spec);
  std::mt19937_64 rng(spec.seed ^ 0x5851f42d4c957f2dULL);
  Splits s;
  s.train = detail::sample_blobs(centers, spec, spec.train_size, "tr", rng);
  s.test = detail::sample_blobs(centers, spec, spec.test_size, "te", rng);
  return s;
}

/// Another sample from the same blobs, independent of the train/test splits.
inline Dataset generate_auxiliary_split(const SyntheticSpec& spec, std::size_t count, std::uint64_t stream,
                                        std::string_view prefix) {
  detail::check_spec(spec);
  if (count < spec.num_classes) throw Error(Errc::kInvalidSpec, "split size must be at least the class count");
  std::mt19937_64 rng(spec.seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
  return detail::sample_blobs(detail::blob_centers(spec), spec, count, prefix, rng);
}

// ---------------------------------------------------------------------------
// Configuration

enum class OracleKind { kSynthetic, kHttp, kCache };

struct OracleSpec {
  OracleKind kind = OracleKind::kSynthetic;
  std::string url = "http://127.0.0.1:8080";
  std::size_t top_k = 0;  // 0: full logits (synthetic only)
  std::string cache_file;
};

struct ProxySpec {
  Architecture architecture = Architecture::kLinear;
  std::size_t hidden = 16;
  // Size of the generic split the frozen proxy is pre-trained on; 0 keeps
  // the random initialization.
  std::size_t pretrain_size = 0;
  std::size_t pretrain_epochs = 5;
  double init_scale = 1.0;
};

struct SelectionSpec {
  Metric metric = Metric::kEuclidean;
  double percentile = 0.01;
  CalibrationMode mode = CalibrationMode::kPermissiveRun;
  std::size_t max_selected = 3000;
  // Caps GP-filter's pair count at this fraction of |D| as well.
  double max_fraction = 0.03;
  double random_fraction = 0.05;
  // Overrides for the calibrated thresholds.
  std::optional<double> tau_in;
  std::optional<double> tau_out;
};

struct GPSpec {
  double noise_variance = 1e-2;
  MeanMode mean = MeanMode::kZero;
  UncertaintyAggregation aggregation = UncertaintyAggregation::kMax;
  std::optional<double> lengthscale;
  std::optional<double> signal_variance;
  bool lml_grid = false;
};

struct ExperimentConfig {
  SyntheticSpec data;
  std::string train_file;
  std::string test_file;
  TeacherSpec teacher;
  // Size of the teacher's own training split, drawn from the generator with
  // another seed; 0 trains the teacher on the task's train split.
  std::size_t teacher_train_size = 0;
  OracleSpec oracle;
  ProxySpec proxy;
  SelectionSpec selection;
  GPSpec gp;
  double gate_percentile = 0.01;
  EnsembleWeights alpha;
  SgdConfig train{2, 32, 0.1, 0.0, 0};
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::optional<std::size_t> budget_cap;
};

inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["data"] = {{"blobs_per_class", c.data.blobs_per_class}, {"dim", c.data.dim}, {"num_classes", c.data.num_classes},
               {"separation", c.data.separation}, {"noise", c.data.noise}, {"train_size", c.data.train_size},
               {"test_size", c.data.test_size}, {"seed", c.data.seed}, {"train_file", c.train_file},
               {"test_file", c.test_file}};
  j["teacher"] = {{"hidden", c.teacher.hidden}, {"label_noise", c.teacher.label_noise}, {"seed", c.teacher.seed},
                  {"epochs", c.teacher.epochs}, {"batch_size", c.teacher.batch_size},
                  {"learning_rate", c.teacher.learning_rate}, {"momentum", c.teacher.momentum},
                  {"train_size", c.teacher_train_size}};
  const char* kinds[] = {"synthetic", "http", "cache"};
  j["oracle"] = {{"kind", kinds[static_cast<int>(c.oracle.kind)]}, {"url", c.oracle.url}, {"top_k", c.oracle.top_k},
                 {"cache_file", c.oracle.cache_file}};
  j["proxy"] = {{"architecture", architecture_name(c.proxy.architecture)}, {"hidden", c.proxy.hidden},
                {"pretrain_size", c.proxy.pretrain_size}, {"pretrain_epochs", c.proxy.pretrain_epochs},
                {"init_scale", c.proxy.init_scale}};
  j["selection"] = {{"metric", metric_name(c.selection.metric)}, {"percentile", c.selection.percentile},
                    {"mode", c.selection.mode == CalibrationMode::kPermissiveRun ? "permissive" : "pairwise"},
                    {"max_selected", c.selection.max_selected}, {"max_fraction", c.selection.max_fraction},
                    {"random_fraction", c.selection.random_fraction}};
  if (c.selection.tau_in) j["selection"]["tau_in"] = *c.selection.tau_in;
  if (c.selection.tau_out) j["selection"]["tau_out"] = *c.selection.tau_out;
  j["gp"] = {{"noise_variance", c.gp.noise_variance}, {"mean", c.gp.mean == MeanMode::kZero ? "zero" : "empirical"},
             {"aggregation", c.gp.aggregation == UncertaintyAggregation::kMax ? "max" : "mean"},
             {"lml_grid", c.gp.lml_grid}};
  if (c.gp.lengthscale) j["gp"]["lengthscale"] = *c.gp.lengthscale;
  if (c.gp.signal_variance) j["gp"]["signal_variance"] = *c.gp.signal_variance;
  j["gate_percentile"] = c.gate_percentile;
  j["alpha"] = {{"train", c.alpha.alpha_train}, {"test", c.alpha.alpha_test}};
  j["train"] = {{"epochs", c.train.epochs}, {"batch_size", c.train.batch_size}, {"learning_rate", c.train.learning_rate},
                {"momentum", c.train.momentum}};
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  if (c.budget_cap) j["budget_cap"] = *c.budget_cap;
  return j;
}

namespace detail {

template <typename T>
void read_opt(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

template <typename T>
void read_opt(const Json& j, const char* key, std::optional<T>& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline void validate_config(const ExperimentConfig& c) {
  auto fail = [](const std::string& what) { throw Error(Errc::kConfigError, what); };
  if (!(c.gate_percentile > 0.0 && c.gate_percentile < 1.0)) fail("gate_percentile must be in (0, 1)");
  if (!(c.selection.percentile > 0.0 && c.selection.percentile < 1.0)) fail("selection.percentile must be in (0, 1)");
  if (!(c.selection.max_fraction > 0.0 && c.selection.max_fraction <= 1.0)) fail("selection.max_fraction must be in (0, 1]");
  if (!(c.selection.random_fraction > 0.0 && c.selection.random_fraction <= 1.0)) fail("selection.random_fraction must be in (0, 1]");
  if (c.train.epochs == 0 || c.train.batch_size == 0 || !(c.train.learning_rate > 0.0)) fail("train settings must be positive");
  if (!(c.gp.noise_variance >= 0.0)) fail("gp.noise_variance must be >= 0");
  if (c.oracle.kind == OracleKind::kCache && c.oracle.cache_file.empty()) fail("oracle.cache_file is required for kind=cache");
}

/// Missing keys keep their defaults; unknown keys are ignored.
inline ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  try {
    using detail::read_opt;
    if (j.contains("data")) {
      const auto& d = j["data"];
      read_opt(d, "blobs_per_class", c.data.blobs_per_class);
      read_opt(d, "dim", c.data.dim);
      read_opt(d, "num_classes", c.data.num_classes);
      read_opt(d, "separation", c.data.separation);
      read_opt(d, "noise", c.data.noise);
      read_opt(d, "train_size", c.data.train_size);
      read_opt(d, "test_size", c.data.test_size);
      read_opt(d, "seed", c.data.seed);
      read_opt(d, "train_file", c.train_file);
      read_opt(d, "test_file", c.test_file);
    }
    if (j.contains("teacher")) {
      const auto& t = j["teacher"];
      read_opt(t, "hidden", c.teacher.hidden);
      read_opt(t, "label_noise", c.teacher.label_noise);
      read_opt(t, "seed", c.teacher.seed);
      read_opt(t, "epochs", c.teacher.epochs);
      read_opt(t, "batch_size", c.teacher.batch_size);
      read_opt(t, "learning_rate", c.teacher.learning_rate);
      read_opt(t, "momentum", c.teacher.momentum);
      read_opt(t, "train_size", c.teacher_train_size);
    }
    if (j.contains("oracle")) {
      const auto& o = j["oracle"];
      const std::string kind = o.value("kind", "synthetic");
      if (kind == "synthetic") c.oracle.kind = OracleKind::kSynthetic;
      else if (kind == "http") c.oracle.kind = OracleKind::kHttp;
      else if (kind == "cache") c.oracle.kind = OracleKind::kCache;
      else throw Error(Errc::kConfigError, fmt::format("unknown oracle kind '{}'", kind));
      read_opt(o, "url", c.oracle.url);
      read_opt(o, "top_k", c.oracle.top_k);
      read_opt(o, "cache_file", c.oracle.cache_file);
    }
    if (j.contains("proxy")) {
      const auto& p = j["proxy"];
      if (p.contains("architecture")) c.proxy.architecture = parse_architecture(p["architecture"].get<std::string>());
      read_opt(p, "hidden", c.proxy.hidden);
      read_opt(p, "pretrain_size", c.proxy.pretrain_size);
      read_opt(p, "pretrain_epochs", c.proxy.pretrain_epochs);
      read_opt(p, "init_scale", c.proxy.init_scale);
    }
    if (j.contains("selection")) {
      const auto& s = j["selection"];
      if (s.contains("metric")) c.selection.metric = parse_metric(s["metric"].get<std::string>());
      read_opt(s, "percentile", c.selection.percentile);
      if (s.contains("mode")) {
        const auto m = s["mode"].get<std::string>();
        if (m == "permissive") c.selection.mode = CalibrationMode::kPermissiveRun;
        else if (m == "pairwise") c.selection.mode = CalibrationMode::kFullPairwise;
        else throw Error(Errc::kConfigError, fmt::format("unknown calibration mode '{}'", m));
      }
      read_opt(s, "max_selected", c.selection.max_selected);
      read_opt(s, "max_fraction", c.selection.max_fraction);
      read_opt(s, "random_fraction", c.selection.random_fraction);
      read_opt(s, "tau_in", c.selection.tau_in);
      read_opt(s, "tau_out", c.selection.tau_out);
    }
    if (j.contains("gp")) {
      const auto& g = j["gp"];
      read_opt(g, "noise_variance", c.gp.noise_variance);
      if (g.contains("mean")) c.gp.mean = g["mean"].get<std::string>() == "empirical" ? MeanMode::kEmpirical : MeanMode::kZero;
      if (g.contains("aggregation")) {
        c.gp.aggregation = g["aggregation"].get<std::string>() == "mean" ? UncertaintyAggregation::kMean
                                                                         : UncertaintyAggregation::kMax;
      }
      read_opt(g, "lengthscale", c.gp.lengthscale);
      read_opt(g, "signal_variance", c.gp.signal_variance);
      read_opt(g, "lml_grid", c.gp.lml_grid);
    }
    read_opt(j, "gate_percentile", c.gate_percentile);
    if (j.contains("alpha")) {
      read_opt(j["alpha"], "train", c.alpha.alpha_train);
      read_opt(j["alpha"], "test", c.alpha.alpha_test);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      read_opt(t, "epochs", c.train.epochs);
      read_opt(t, "batch_size", c.train.batch_size);
      read_opt(t, "learning_rate", c.train.learning_rate);
      read_opt(t, "momentum", c.train.momentum);
    }
    // MLP proxies default to a smaller step than linear ones.
    const bool lr_given = j.contains("train") && j["train"].contains("learning_rate");
    if (!lr_given && c.proxy.architecture == Architecture::kMlp) c.train.learning_rate = 0.05;
    read_opt(j, "seed", c.seed);
    read_opt(j, "out_dir", c.out_dir);
    read_opt(j, "budget_cap", c.budget_cap);
  } catch (const Json::exception& e) {
    throw Error(Errc::kConfigError, e.what());
  }
  validate_config(c);
  return c;
}

inline std::string config_hash(const ExperimentConfig& c) {
  return fmt::format("{:016x}", fnv1a(config_to_json(c).dump()));
}

// ---------------------------------------------------------------------------
// Pipeline pieces

inline Splits load_or_generate(const ExperimentConfig& c) {
  if (!c.train_file.empty()) {
    if (c.test_file.empty()) throw Error(Errc::kConfigError, "test_file is required with train_file");
    return {load_dataset(c.train_file), load_dataset(c.test_file)};
  }
  SyntheticSpec spec = c.data;
  return generate_synthetic(spec);
}

/// Backend the pipeline talks to, built from the config. The synthetic
/// teacher is rebuilt deterministically from the training split.
struct OracleHandle {
  std::shared_ptr<OracleBackend> backend;
  std::optional<double> teacher_train_accuracy;
};

inline OracleHandle make_backend(const ExperimentConfig& c, const Dataset& train) {
  OracleHandle h;
  switch (c.oracle.kind) {
    case OracleKind::kSynthetic: {
      std::optional<Dataset> own;
      if (c.teacher_train_size > 0 && c.train_file.empty()) {
        own = generate_auxiliary_split(c.data, std::max(c.teacher_train_size, c.data.num_classes), 1, "tt");
      }
      auto teacher = make_synthetic_teacher(own ? *own : train, c.teacher);
      h.teacher_train_accuracy = teacher->train_accuracy();
      h.backend = teacher;
      if (c.oracle.top_k > 0) h.backend = std::make_shared<TopKBackend>(h.backend, c.oracle.top_k);
      break;
    }
    case OracleKind::kHttp: {
      HttpOracleConfig hc;
      hc.base_url = c.oracle.url;
      hc.top_k = c.oracle.top_k > 0 ? c.oracle.top_k : 5;
      hc.vocab_size = train.num_classes();
      h.backend = std::make_shared<HttpOracleBackend>(hc);
      break;
    }
    case OracleKind::kCache: {
      auto cache = std::make_shared<const OracleCache>(OracleCache::load(c.oracle.cache_file));
      h.backend = std::make_shared<CacheOnlyBackend>(cache, train.num_classes());
      break;
    }
  }
  return h;
}

/// Frozen proxy: random init, optionally pre-trained on a small generic
/// split drawn from the same blobs.
inline ProxyParams prepare_minus(const ExperimentConfig& c, const Dataset& train) {
  ProxyParams p = init_proxy(c.proxy.architecture, train.dim(), train.num_classes(), c.proxy.hidden, c.seed + 17,
                             c.proxy.init_scale);
  if (c.proxy.pretrain_size > 0 && c.train_file.empty()) {
    const Dataset split =
        generate_auxiliary_split(c.data, std::max(c.proxy.pretrain_size, c.data.num_classes), 2, "pg");
    std::vector<int> labels;
    for (const auto& e : split.examples()) labels.push_back(e.label);
    SgdConfig sgd = c.train;
    sgd.epochs = c.proxy.pretrain_epochs;
    sgd.seed = c.seed + 23;
    fit_softmax_classifier(p, split, labels, {}, sgd);
  }
  p.seal();
  return p;
}

inline SgdConfig train_sgd(const ExperimentConfig& c) {
  SgdConfig s = c.train;
  s.seed = c.seed + 101;
  return s;
}

inline KernelParams resolve_kernel(const ExperimentConfig& c, const LogitMapSet& pairs) {
  KernelParams k = default_kernel(pairs);
  if (c.gp.lengthscale) k.lengthscale = *c.gp.lengthscale;
  if (c.gp.signal_variance) k.signal_variance = *c.gp.signal_variance;
  if (c.gp.lml_grid) {
    k = select_kernel_by_lml(pairs, k, NoiseParams{c.gp.noise_variance, {}}, {0.25, 0.5, 1.0, 2.0, 4.0},
                             {0.25, 0.5, 1.0, 2.0, 4.0}, GPOptions{c.gp.mean, c.gp.aggregation});
  }
  return k;
}

inline GPPosterior fit_from_config(const ExperimentConfig& c, const LogitMapSet& pairs) {
  return fit_gp(pairs, resolve_kernel(c, pairs), NoiseParams{c.gp.noise_variance, {}}, GPOptions{c.gp.mean, c.gp.aggregation});
}

inline std::vector<EmbeddingVector> embeddings_of(const Dataset& d) {
  std::vector<EmbeddingVector> out;
  out.reserve(d.size());
  for (const auto& e : d.examples()) out.push_back(e.embedding);
  return out;
}

inline SelectionThresholds resolve_thresholds(const ExperimentConfig& c, const Dataset& train, const ProxyParams& minus) {
  SelectionThresholds th;
  if (!c.selection.tau_in || !c.selection.tau_out) {
    th = calibrate_thresholds(train, minus, c.selection.percentile, c.selection.metric, c.selection.mode);
  }
  th.metric = c.selection.metric;
  if (c.selection.tau_in) th.tau_in = *c.selection.tau_in;
  if (c.selection.tau_out) th.tau_out = *c.selection.tau_out;
  return th;
}

inline std::size_t fraction_of(double fraction, std::size_t n) {
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  return std::clamp<std::size_t>(count, 1, n);
}

inline std::size_t random_budget(const ExperimentConfig& c, std::size_t n) { return fraction_of(c.selection.random_fraction, n); }

inline std::size_t filter_cap(const ExperimentConfig& c, std::size_t n) {
  return std::min(c.selection.max_selected, fraction_of(c.selection.max_fraction, n));
}

/// Everything a GP-guided method produces before proxy training.
struct SurrogateArtifacts {
  CandidateSet candidates;
  LogitMapSet pairs;
  std::optional<GPPosterior> gp;
  GateConfig gate;
  std::optional<SelectionThresholds> thresholds;
  std::vector<double> train_uncertainty;
};

enum class SelectionStrategy { kFilter, kRandom };

inline SurrogateArtifacts build_surrogate(const ExperimentConfig& c, SelectionStrategy strategy, const Dataset& train,
                                          const ProxyParams& minus, Oracle& oracle, ApiLedger& ledger,
                                          std::optional<std::size_t> pair_limit = std::nullopt) {
  SurrogateArtifacts a;
  ledger.set_phase("select");
  if (strategy == SelectionStrategy::kFilter) {
    a.thresholds = resolve_thresholds(c, train, minus);
    SelectionOptions opt;
    opt.max_selected = pair_limit.value_or(filter_cap(c, train.size()));
    a.candidates = filter_select(train, minus, *a.thresholds, opt);
  } else {
    a.candidates = random_select(train, pair_limit.value_or(random_budget(c, train.size())), c.seed + 7);
  }
  a.pairs = build_logitmap(a.candidates, train, oracle, ledger);
  a.gp.emplace(fit_from_config(c, a.pairs));
  a.train_uncertainty.reserve(train.size());
  for (const auto& e : train.examples()) a.train_uncertainty.push_back(predict_uncertainty(*a.gp, e.embedding).scalar);
  a.gate = {upper_quantile_threshold(a.train_uncertainty, c.gate_percentile), c.gate_percentile};
  ledger.set_phase("gate");
  return a;
}

// ---------------------------------------------------------------------------
// Experiment

inline constexpr const char* kMethodNames[] = {"Pretrain", "Full-FT", "Proxy-Tune", "CPT", "GP-random", "GP-filter"};

struct MethodReport {
  std::string method;
  double accuracy = 0.0;
  double training_fraction = 0.0;
  double inference_fraction = 0.0;
  std::size_t training_unique = 0;
  std::size_t inference_unique = 0;
  double wall_seconds = 0.0;
  bool failed = false;
  std::string error;
};

struct ExperimentResult {
  std::vector<MethodReport> reports;
  std::optional<double> teacher_train_accuracy;
  std::optional<double> teacher_test_accuracy;
  double minus_test_accuracy = 0.0;
  std::optional<SurrogateArtifacts> gp_filter;
  std::optional<ApiLedger> gp_filter_ledger;
  std::optional<GateStats> gp_filter_gate;
};

inline Json report_to_json(const MethodReport& r) {
  Json j{{"method", r.method},
         {"accuracy", r.accuracy},
         {"training_fraction", round4(r.training_fraction)},
         {"inference_fraction", round4(r.inference_fraction)},
         {"training_unique", r.training_unique},
         {"inference_unique", r.inference_unique},
         {"wall_seconds", r.wall_seconds},
         {"failed", r.failed}};
  if (r.failed) j["error"] = r.error;
  return j;
}

inline void write_reports_csv(const std::vector<MethodReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIoError, fmt::format("cannot write '{}'", path.string()));
  out << "method,accuracy,training_fraction,inference_fraction,training_unique,inference_unique,status\n";
  for (const auto& r : reports) {
    out << fmt::format("{},{:.4f},{:.4f},{:.4f},{},{},{}\n", r.method, r.accuracy, r.training_fraction, r.inference_fraction,
                       r.training_unique, r.inference_unique, r.failed ? "failed" : "ok");
  }
}

namespace detail {

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(Errc::kIoError, fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
}

}  // namespace detail

struct RunOptions {
  bool write_artifacts = true;
  // Restrict GP-filter to at most this many pairs (budget sweeps).
  std::optional<std::size_t> gp_filter_pair_limit;
};

/// Runs the six-method comparison in canonical order. A failing method is
/// reported as failed and the others still run.
inline ExperimentResult run_experiment(const ExperimentConfig& c, const RunOptions& ro = {}) {
  namespace fs = std::filesystem;
  const Splits splits = load_or_generate(c);
  const Dataset& train = splits.train;
  const Dataset& test = splits.test;
  const fs::path out = c.out_dir;
  if (ro.write_artifacts) {
    detail::ensure_dir(out);
    std::ofstream(out / "config.json") << config_to_json(c).dump(2) << '\n';
  }

  ExperimentResult res;
  const OracleHandle handle = make_backend(c, train);
  res.teacher_train_accuracy = handle.teacher_train_accuracy;
  const ProxyParams minus = prepare_minus(c, train);
  const std::uint64_t minus_hash = params_hash(minus);
  const SgdConfig sgd = train_sgd(c);

  std::ofstream predictions;
  if (ro.write_artifacts) {
    predictions.open(out / "predictions.csv");
    write_predictions_header(predictions);
  }

  // Proxy-Tune reuses the Full-FT proxy.
  std::optional<ProxyParams> plain_plus;

  auto run_method = [&](const std::string& name, auto&& body) {
    MethodReport r;
    r.method = name;
    const auto t0 = std::chrono::steady_clock::now();
    ApiLedger train_ledger(train.size(), c.budget_cap);
    ApiLedger infer_ledger(test.size());
    Oracle train_oracle(handle.backend);
    Oracle infer_oracle(handle.backend);
    try {
      EvaluationResult ev = body(train_oracle, train_ledger, infer_oracle, infer_ledger);
      r.accuracy = ev.accuracy;
      r.training_unique = train_ledger.unique_count();
      r.inference_unique = infer_ledger.unique_count();
      r.training_fraction = usage_fraction(train_ledger);
      r.inference_fraction = usage_fraction(infer_ledger);
      if (ro.write_artifacts) {
        write_predictions_rows(predictions, ev.predictions, name);
        std::ofstream(out / fmt::format("ledger_{}.json", name)) << ledger_to_json(train_ledger).dump(2) << '\n';
      }
    } catch (const Error& e) {
      r.failed = true;
      r.error = e.what();
    }
    if (params_hash(minus) != minus_hash) throw Error(Errc::kTrainingDiverged, "frozen proxy changed during " + name);
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.reports.push_back(std::move(r));
  };

  auto train_and_eval = [&](Objective objective, const GPPosterior* gp, const GateConfig& gate, Oracle& tor,
                            ApiLedger& tl, Oracle& ior, ApiLedger& il, const std::string& tag) {
    TrainConfig tc;
    tc.sgd = sgd;
    tc.objective = objective;
    tc.alpha = c.alpha;
    tc.gate = gate;
    TrainResult tr = train_proxy(tc, train, minus, gp, &tor, &tl);
    if (ro.write_artifacts) write_metrics_csv(tr.metrics, out / fmt::format("metrics_{}.csv", tag));
    return std::make_pair(std::move(tr), evaluate(ensemble_predictor(tr.params, minus, ior, il, c.alpha.alpha_test), test, &il));
  };

  run_method("Pretrain", [&](Oracle&, ApiLedger&, Oracle&, ApiLedger&) {
    auto ev = evaluate(proxy_predictor(minus), test);
    res.minus_test_accuracy = ev.accuracy;
    return ev;
  });

  run_method("Full-FT", [&](Oracle& tor, ApiLedger& tl, Oracle&, ApiLedger&) {
    TrainConfig tc;
    tc.sgd = sgd;
    tc.objective = Objective::kPlainFt;
    TrainResult tr = train_proxy(tc, train, minus, nullptr, &tor, &tl);
    if (ro.write_artifacts) {
      write_metrics_csv(tr.metrics, out / "metrics_Full-FT.csv");
      std::ofstream(out / "checkpoint_plain.json") << checkpoint_to_json(tr.params, sgd.seed, config_hash(c)).dump() << '\n';
    }
    plain_plus = tr.params;
    return evaluate(proxy_predictor(*plain_plus), test);
  });

  run_method("Proxy-Tune", [&](Oracle&, ApiLedger&, Oracle& ior, ApiLedger& il) {
    if (!plain_plus) throw Error(Errc::kMissingArtifacts, "Full-FT proxy unavailable");
    return evaluate(ensemble_predictor(*plain_plus, minus, ior, il, c.alpha.alpha_test), test, &il);
  });

  run_method("CPT", [&](Oracle& tor, ApiLedger& tl, Oracle& ior, ApiLedger& il) {
    tl.set_phase("train");
    return train_and_eval(Objective::kCpt, nullptr, {}, tor, tl, ior, il, "CPT").second;
  });

  run_method("GP-random", [&](Oracle& tor, ApiLedger& tl, Oracle& ior, ApiLedger& il) {
    auto art = build_surrogate(c, SelectionStrategy::kRandom, train, minus, tor, tl);
    return train_and_eval(Objective::kGpGated, &*art.gp, art.gate, tor, tl, ior, il, "GP-random").second;
  });

  run_method("GP-filter", [&](Oracle& tor, ApiLedger& tl, Oracle& ior, ApiLedger& il) {
    auto art = build_surrogate(c, SelectionStrategy::kFilter, train, minus, tor, tl, ro.gp_filter_pair_limit);
    auto [tr, ev] = train_and_eval(Objective::kGpGated, &*art.gp, art.gate, tor, tl, ior, il, "GP-filter");
    if (ro.write_artifacts) {
      write_candidates_jsonl(art.candidates, out / "candidates.jsonl");
      write_logitmap_jsonl(art.pairs, out / "logitmap.jsonl");
      std::ofstream(out / "gp_posterior.json") << posterior_to_json(*art.gp).dump() << '\n';
      std::ofstream(out / "gate.json") << gate_to_json(art.gate).dump(2) << '\n';
      write_ledger_timeline_csv(tl.timeline(), out / "ledger_timeline_GP-filter.csv");
      std::ofstream(out / "checkpoint_gp_filter.json") << checkpoint_to_json(tr.params, sgd.seed, config_hash(c)).dump()
                                                       << '\n';
    }
    res.gp_filter = std::move(art);
    res.gp_filter_ledger.emplace(tl);
    res.gp_filter_gate = tr.gate;
    return ev;
  });

  if (handle.teacher_train_accuracy) {
    Oracle o(handle.backend);
    ApiLedger l(test.size());
    res.teacher_test_accuracy = evaluate(oracle_predictor(o, l), test).accuracy;
  }

  if (ro.write_artifacts) {
    write_reports_csv(res.reports, out / "report.csv");
    Json summary{{"methods", Json::array()}};
    for (const auto& r : res.reports) summary["methods"].push_back(report_to_json(r));
    if (res.teacher_train_accuracy) summary["teacher_train_accuracy"] = *res.teacher_train_accuracy;
    if (res.teacher_test_accuracy) summary["teacher_test_accuracy"] = *res.teacher_test_accuracy;
    summary["proxy_pretrain_accuracy"] = res.minus_test_accuracy;
    summary["config_hash"] = config_hash(c);
    std::ofstream(out / "report.json") << summary.dump(2) << '\n';
  }
  return res;
}

// ---------------------------------------------------------------------------
// Alpha sweep

struct SweepResult {
  std::vector<double> alpha_train;
  std::vector<double> alpha_test;
  Eigen::MatrixXd accuracy;  // rows: alpha_train, cols: alpha_test
  double full_ft_accuracy = 0.0;
};

/// GP-filter accuracy over a grid of (alpha_train, alpha_test). D' and the GP
/// are built once; only the proxy is retrained per alpha_train.
inline SweepResult sweep_alpha(const ExperimentConfig& c, const std::vector<double>& alpha_train,
                               const std::vector<double>& alpha_test) {
  if (alpha_train.empty() || alpha_test.empty()) throw Error(Errc::kEmptyInput, "alpha grid is empty");
  const Splits splits = load_or_generate(c);
  const OracleHandle handle = make_backend(c, splits.train);
  const ProxyParams minus = prepare_minus(c, splits.train);
  Oracle oracle(handle.backend);
  ApiLedger ledger(splits.train.size(), c.budget_cap);
  const auto art = build_surrogate(c, SelectionStrategy::kFilter, splits.train, minus, oracle, ledger);
  Oracle infer_oracle(handle.backend);
  ApiLedger infer_ledger(splits.test.size());

  SweepResult r;
  r.alpha_train = alpha_train;
  r.alpha_test = alpha_test;
  r.accuracy.resize(static_cast<Eigen::Index>(alpha_train.size()), static_cast<Eigen::Index>(alpha_test.size()));
  {
    TrainConfig tc;
    tc.sgd = train_sgd(c);
    r.full_ft_accuracy = evaluate(proxy_predictor(train_proxy(tc, splits.train, minus, nullptr, nullptr, nullptr).params),
                                  splits.test).accuracy;
  }
  for (std::size_t i = 0; i < alpha_train.size(); ++i) {
    TrainConfig tc;
    tc.sgd = train_sgd(c);
    tc.objective = Objective::kGpGated;
    tc.alpha = {alpha_train[i], alpha_train[i]};
    tc.gate = art.gate;
    const TrainResult tr = train_proxy(tc, splits.train, minus, &*art.gp, &oracle, &ledger);
    for (std::size_t k = 0; k < alpha_test.size(); ++k) {
      r.accuracy(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
          evaluate(ensemble_predictor(tr.params, minus, infer_oracle, infer_ledger, alpha_test[k]), splits.test).accuracy;
    }
  }
  return r;
}

inline void write_sweep_csv(const SweepResult& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIoError, fmt::format("cannot write '{}'", path.string()));
  out << "alpha_train\\alpha_test";
  for (double a : r.alpha_test) out << fmt::format(",{}", a);
  out << '\n';
  for (std::size_t i = 0; i < r.alpha_train.size(); ++i) {
    out << fmt::format("{}", r.alpha_train[i]);
    for (std::size_t k = 0; k < r.alpha_test.size(); ++k) {
      out << fmt::format(",{:.4f}", r.accuracy(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)));
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Budget sweep

/// Mean absolute error between GP mean logits and oracle logits over a split.
inline double gp_oracle_mae(const GPPosterior& gp, const Dataset& split, Oracle& oracle, ApiLedger& ledger) {
  if (split.empty()) throw Error(Errc::kEmptySplit, "no examples to compare");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& e : split.examples()) {
    const LogitVector diff = predict_mean(gp, e.embedding) - oracle.query(e, ledger);
    total += diff.cwiseAbs().sum();
    count += static_cast<std::size_t>(diff.size());
  }
  return total / static_cast<double>(count);
}

struct BudgetPoint {
  std::size_t requested_pairs = 0;
  std::size_t pairs = 0;
  double logits_mae = 0.0;  // GP mean vs oracle on the test split
  double accuracy = 0.0;    // GP-filter end accuracy
  double training_fraction = 0.0;
};

/// GP-filter at several caps on |D'|. Candidates come from one filter pass,
/// so smaller budgets use a prefix of the larger ones.
inline std::vector<BudgetPoint> budget_sweep(const ExperimentConfig& c, const std::vector<std::size_t>& sizes) {
  if (sizes.empty()) throw Error(Errc::kEmptyInput, "no budgets to sweep");
  const Splits splits = load_or_generate(c);
  const OracleHandle handle = make_backend(c, splits.train);
  const ProxyParams minus = prepare_minus(c, splits.train);
  Oracle mae_oracle(handle.backend);
  ApiLedger mae_ledger(splits.test.size());
  std::vector<BudgetPoint> out;
  for (std::size_t size : sizes) {
    Oracle oracle(handle.backend);
    ApiLedger ledger(splits.train.size(), c.budget_cap);
    const auto art = build_surrogate(c, SelectionStrategy::kFilter, splits.train, minus, oracle, ledger, size);
    BudgetPoint bp;
    bp.requested_pairs = size;
    bp.pairs = art.pairs.size();
    bp.logits_mae = gp_oracle_mae(*art.gp, splits.test, mae_oracle, mae_ledger);
    TrainConfig tc;
    tc.sgd = train_sgd(c);
    tc.objective = Objective::kGpGated;
    tc.alpha = c.alpha;
    tc.gate = art.gate;
    const TrainResult tr = train_proxy(tc, splits.train, minus, &*art.gp, &oracle, &ledger);
    Oracle infer_oracle(handle.backend);
    ApiLedger infer_ledger(splits.test.size());
    bp.accuracy =
        evaluate(ensemble_predictor(tr.params, minus, infer_oracle, infer_ledger, c.alpha.alpha_test), splits.test).accuracy;
    bp.training_fraction = usage_fraction(ledger);
    out.push_back(bp);
  }
  return out;
}

inline void write_budget_csv(const std::vector<BudgetPoint>& points, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIoError, fmt::format("cannot write '{}'", path.string()));
  out << "requested_pairs,pairs,logits_mae,accuracy,training_fraction\n";
  for (const auto& p : points) {
    out << fmt::format("{},{},{},{:.4f},{:.4f}\n", p.requested_pairs, p.pairs, p.logits_mae, p.accuracy, p.training_fraction);
  }
}

// ---------------------------------------------------------------------------
// Diagnostics

struct DiagnosticInputs {
  const GPPosterior* gp = nullptr;
  const Dataset* train = nullptr;
  const Dataset* test = nullptr;
  std::optional<GateConfig> gate;
  Oracle* oracle = nullptr;  // answers test-split queries for the logits comparison
  std::optional<std::vector<LedgerEntry>> timeline;
};

struct DiagnosticSummary {
  std::size_t uncertainty_rows = 0;
  std::size_t above_threshold = 0;
  double logits_mae = 0.0;
  std::size_t timeline_rows = 0;
};

/// Writes uncertainty.csv (sorted descending, theta marked), gp_vs_oracle_logits.csv
/// and ledger_timeline.csv into `dir`.
inline DiagnosticSummary export_diagnostics(const DiagnosticInputs& in, const std::filesystem::path& dir) {
  if (!in.gp || !in.train || !in.test || !in.gate || !in.oracle || !in.timeline) {
    throw Error(Errc::kMissingArtifacts, "diagnostics need a fitted GP, both splits, a gate, an oracle and a ledger timeline");
  }
  detail::ensure_dir(dir);
  DiagnosticSummary s;
  {
    std::vector<std::pair<double, std::string>> rows;
    for (const auto& e : in.train->examples()) rows.emplace_back(predict_uncertainty(*in.gp, e.embedding).scalar, e.id);
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::ofstream out(dir / "uncertainty.csv");
    out << "rank,id,uncertainty,theta,above_threshold\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const bool above = rows[i].first > in.gate->threshold;
      s.above_threshold += above;
      out << fmt::format("{},{},{},{},{}\n", i, rows[i].second, rows[i].first, in.gate->threshold, above ? 1 : 0);
    }
    s.uncertainty_rows = rows.size();
  }
  {
    ApiLedger diag_ledger(in.test->size());
    std::ofstream out(dir / "gp_vs_oracle_logits.csv");
    out << "id,dim,gp_logit,oracle_logit\n";
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& e : in.test->examples()) {
      const LogitVector g = predict_mean(*in.gp, e.embedding);
      const LogitVector o = in.oracle->query(e, diag_ledger);
      for (Eigen::Index v = 0; v < g.size(); ++v) {
        out << fmt::format("{},{},{},{}\n", e.id, v, g[v], o[v]);
        total += std::abs(g[v] - o[v]);
        ++count;
      }
    }
    s.logits_mae = total / static_cast<double>(std::max<std::size_t>(count, 1));
  }
  write_ledger_timeline_csv(*in.timeline, dir / "ledger_timeline.csv");
  s.timeline_rows = in.timeline->size();
  return s;
}

}  // namespace logitmap
