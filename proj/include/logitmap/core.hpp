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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "json.hpp"
#include "logitmap/error.hpp"

namespace logitmap {

using Json = nlohmann::json;

using EmbeddingVector = Eigen::VectorXd;
using LogitVector = Eigen::VectorXd;

inline bool all_finite(const Eigen::Ref<const Eigen::VectorXd>& v) {
  return v.allFinite();
}

struct Example {
  std::string id;
  EmbeddingVector embedding;
  int label = 0;
};

/// Ordered, immutable collection of examples sharing one embedding dimension
/// and one class count.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<Example> examples, std::size_t num_classes, std::size_t dim)
      : examples_(std::move(examples)), num_classes_(num_classes), dim_(dim) {
    index_.reserve(examples_.size());
    for (std::size_t i = 0; i < examples_.size(); ++i) {
      const Example& e = examples_[i];
      if (static_cast<std::size_t>(e.embedding.size()) != dim_) {
        throw Error(Errc::kDimensionMismatch,
                    fmt::format("example '{}' has {} features, expected {}", e.id,
                                e.embedding.size(), dim_));
      }
      if (e.label < 0 || static_cast<std::size_t>(e.label) >= num_classes_) {
        throw Error(Errc::kLabelOutOfRange,
                    fmt::format("example '{}' label {} not in [0, {})", e.id, e.label,
                                num_classes_));
      }
      if (!all_finite(e.embedding)) {
        throw Error(Errc::kNonFiniteInput, fmt::format("example '{}' has non-finite features", e.id));
      }
      if (!index_.emplace(e.id, i).second) {
        throw Error(Errc::kParseError, fmt::format("duplicate example id '{}'", e.id));
      }
    }
  }

  const std::vector<Example>& examples() const noexcept { return examples_; }
  const Example& operator[](std::size_t i) const { return examples_[i]; }
  std::size_t size() const noexcept { return examples_.size(); }
  bool empty() const noexcept { return examples_.empty(); }
  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t dim() const noexcept { return dim_; }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  Dataset subset(const std::vector<std::size_t>& indices) const {
    std::vector<Example> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(examples_.at(i));
    return Dataset(std::move(out), num_classes_, dim_);
  }

  /// Rows as an N x d matrix.
  Eigen::MatrixXd feature_matrix() const {
    Eigen::MatrixXd m(examples_.size(), dim_);
    for (std::size_t i = 0; i < examples_.size(); ++i) m.row(i) = examples_[i].embedding.transpose();
    return m;
  }

 private:
  std::vector<Example> examples_;
  std::size_t num_classes_ = 0;
  std::size_t dim_ = 0;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Maps an example to the vector the selection filter and the GP operate on.
/// The default is the identity on the stored features.
using Embedder = std::function<EmbeddingVector(const Example&)>;

inline EmbeddingVector identity_embedding(const Example& e) { return e.embedding; }

struct LogitMapPair {
  std::string example_id;
  EmbeddingVector embedding;
  LogitVector oracle_logits;
};

class LogitMapSet {
 public:
  LogitMapSet() = default;

  void add(LogitMapPair pair) {
    if (!pairs_.empty()) {
      if (pair.embedding.size() != pairs_.front().embedding.size() ||
          pair.oracle_logits.size() != pairs_.front().oracle_logits.size()) {
        throw Error(Errc::kDimensionMismatch,
                    fmt::format("pair '{}' does not match the set's dimensions", pair.example_id));
      }
    }
    if (!ids_.insert(pair.example_id).second) {
      throw Error(Errc::kParseError, fmt::format("duplicate pair id '{}'", pair.example_id));
    }
    pairs_.push_back(std::move(pair));
  }

  const std::vector<LogitMapPair>& pairs() const noexcept { return pairs_; }
  std::size_t size() const noexcept { return pairs_.size(); }
  bool empty() const noexcept { return pairs_.empty(); }
  bool contains(const std::string& id) const { return ids_.count(id) != 0; }

  std::size_t input_dim() const { return pairs_.empty() ? 0 : pairs_.front().embedding.size(); }
  std::size_t output_dim() const { return pairs_.empty() ? 0 : pairs_.front().oracle_logits.size(); }

  /// First `count` pairs in insertion order.
  LogitMapSet prefix(std::size_t count) const {
    LogitMapSet out;
    for (std::size_t i = 0; i < std::min(count, pairs_.size()); ++i) out.add(pairs_[i]);
    return out;
  }

 private:
  std::vector<LogitMapPair> pairs_;
  std::unordered_set<std::string> ids_;
};

struct LedgerEntry {
  std::size_t sequence = 0;  // total_requests at the time of the first query
  std::string id;
  std::string phase;
};

struct LedgerSnapshot {
  std::size_t unique = 0;
  std::size_t total = 0;
  std::size_t denominator = 0;
};

/// Append-only record of unique oracle queries. Internally synchronized.
class ApiLedger {
 public:
  explicit ApiLedger(std::size_t denominator = 0, std::optional<std::size_t> budget_cap = std::nullopt)
      : denominator_(denominator), cap_(budget_cap) {}

  ApiLedger(const ApiLedger& other) {
    std::lock_guard lock(other.mu_);
    unique_ = other.unique_;
    timeline_ = other.timeline_;
    total_ = other.total_;
    denominator_ = other.denominator_;
    cap_ = other.cap_;
    phase_ = other.phase_;
  }
  ApiLedger& operator=(const ApiLedger&) = delete;

  /// Counts one request; returns true when `id` had not been seen before.
  bool record(const std::string& id) {
    std::lock_guard lock(mu_);
    ++total_;
    if (!unique_.insert(id).second) return false;
    timeline_.push_back({total_, id, phase_});
    return true;
  }

  /// Counts a request answered without the backend (a cache hit).
  void record_hit() {
    std::lock_guard lock(mu_);
    ++total_;
  }

  /// Throws BudgetExceeded when admitting `id` would cross the cap.
  void check_budget(const std::string& id) const {
    std::lock_guard lock(mu_);
    if (cap_ && !unique_.count(id) && unique_.size() + 1 > *cap_) {
      throw Error(Errc::kBudgetExceeded,
                  fmt::format("unique query cap {} reached before id '{}'", *cap_, id));
    }
  }

  bool contains(const std::string& id) const {
    std::lock_guard lock(mu_);
    return unique_.count(id) != 0;
  }

  void set_phase(std::string phase) {
    std::lock_guard lock(mu_);
    phase_ = std::move(phase);
  }

  void set_budget_cap(std::optional<std::size_t> cap) {
    std::lock_guard lock(mu_);
    cap_ = cap;
  }

  std::size_t unique_count() const {
    std::lock_guard lock(mu_);
    return unique_.size();
  }
  std::size_t total_requests() const {
    std::lock_guard lock(mu_);
    return total_;
  }
  std::size_t denominator() const noexcept { return denominator_; }
  std::optional<std::size_t> budget_cap() const {
    std::lock_guard lock(mu_);
    return cap_;
  }

  LedgerSnapshot snapshot() const {
    std::lock_guard lock(mu_);
    return {unique_.size(), total_, denominator_};
  }

  std::vector<LedgerEntry> timeline() const {
    std::lock_guard lock(mu_);
    return timeline_;
  }

 private:
  mutable std::mutex mu_;
  std::unordered_set<std::string> unique_;
  std::vector<LedgerEntry> timeline_;
  std::size_t total_ = 0;
  std::size_t denominator_ = 0;
  std::optional<std::size_t> cap_;
  std::string phase_;
};

inline double usage_fraction(const LedgerSnapshot& s) {
  if (s.denominator == 0) throw Error(Errc::kZeroDenominator, "ledger denominator is zero");
  return static_cast<double>(s.unique) / static_cast<double>(s.denominator);
}

inline double usage_fraction(const ApiLedger& ledger) { return usage_fraction(ledger.snapshot()); }

/// Rounds to the four decimal places used in every report.
inline double round4(double x) { return std::round(x * 1e4) / 1e4; }

inline Json ledger_to_json(const ApiLedger& ledger) {
  const auto s = ledger.snapshot();
  return Json{{"unique", s.unique},
              {"total", s.total},
              {"denominator", s.denominator},
              {"fraction", round4(usage_fraction(s))}};
}

/// Unique-query timeline as CSV: order,request,id,phase,unique_after.
inline void write_ledger_timeline_csv(const std::vector<LedgerEntry>& timeline, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIoError, fmt::format("cannot write '{}'", path.string()));
  out << "order,request,id,phase,unique_after\n";
  for (std::size_t i = 0; i < timeline.size(); ++i) {
    out << fmt::format("{},{},{},{},{}\n", i, timeline[i].sequence, timeline[i].id, timeline[i].phase, i + 1);
  }
}

inline std::vector<LedgerEntry> read_ledger_timeline_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIoError, fmt::format("cannot open '{}'", path.string()));
  std::vector<LedgerEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 5) throw Error(Errc::kParseError, fmt::format("{}:{}: expected 5 columns", path.string(), lineno));
    try {
      out.push_back({static_cast<std::size_t>(std::stoull(cells[1])), cells[2], cells[3]});
    } catch (const std::exception&) {
      throw Error(Errc::kParseError, fmt::format("{}:{}: bad request number", path.string(), lineno));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files

enum class DatasetFormat { kJsonl, kCsv };

inline DatasetFormat format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? DatasetFormat::kCsv : DatasetFormat::kJsonl;
}

inline std::vector<double> json_to_doubles(const Json& j) {
  return j.get<std::vector<double>>();
}

inline Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline std::vector<double> to_std(const Eigen::Ref<const Eigen::VectorXd>& v) {
  return {v.data(), v.data() + v.size()};
}

namespace detail {

inline Dataset finish_dataset(std::vector<Example> rows, std::optional<std::size_t> declared_classes,
                              std::optional<std::size_t> declared_dim) {
  std::size_t dim = declared_dim.value_or(rows.empty() ? 0 : rows.front().embedding.size());
  std::size_t classes = 0;
  if (declared_classes) {
    classes = *declared_classes;
  } else {
    for (const auto& r : rows) {
      if (r.label < 0) throw Error(Errc::kLabelOutOfRange, fmt::format("negative label in '{}'", r.id));
      classes = std::max(classes, static_cast<std::size_t>(r.label) + 1);
    }
  }
  return Dataset(std::move(rows), classes, dim);
}

inline double parse_double(const std::string& s, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw Error(Errc::kParseError, fmt::format("line {}: '{}' is not a number", line, s));
  }
  return v;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline Dataset load_jsonl(std::istream& in) {
  std::vector<Example> rows;
  std::optional<std::size_t> classes;
  std::optional<std::size_t> dim;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception& e) {
      throw Error(Errc::kParseError, fmt::format("line {}: {}", lineno, e.what()));
    }
    if (j.contains("header")) {
      const auto& h = j["header"];
      if (h.contains("num_classes")) classes = h["num_classes"].get<std::size_t>();
      if (h.contains("dim")) dim = h["dim"].get<std::size_t>();
      continue;
    }
    try {
      Example e;
      e.id = j.at("id").get<std::string>();
      e.embedding = to_eigen(j.at("features").get<std::vector<double>>());
      e.label = j.at("label").get<int>();
      if (!rows.empty() && e.embedding.size() != rows.front().embedding.size()) {
        throw Error(Errc::kDimensionMismatch,
                    fmt::format("line {}: {} features, expected {}", lineno, e.embedding.size(),
                                rows.front().embedding.size()));
      }
      rows.push_back(std::move(e));
    } catch (const Json::exception& e) {
      throw Error(Errc::kParseError, fmt::format("line {}: {}", lineno, e.what()));
    }
  }
  return finish_dataset(std::move(rows), classes, dim);
}

inline Dataset load_csv(std::istream& in) {
  std::vector<Example> rows;
  std::optional<std::size_t> classes;
  std::string line;
  std::size_t lineno = 0;
  std::size_t width = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind("# num_classes=", 0) == 0) {
      classes = static_cast<std::size_t>(parse_double(line.substr(14), lineno));
      continue;
    }
    if (line.front() == '#') continue;
    auto fields = split_csv(line);
    if (!have_header) {
      if (fields.size() < 2 || fields.front() != "id" || fields.back() != "label") {
        throw Error(Errc::kParseError, "csv header must be id,f0..f{d-1},label");
      }
      width = fields.size();
      have_header = true;
      continue;
    }
    if (fields.size() != width) {
      throw Error(Errc::kDimensionMismatch,
                  fmt::format("line {}: {} fields, header has {}", lineno, fields.size(), width));
    }
    Example e;
    e.id = fields.front();
    e.embedding.resize(static_cast<Eigen::Index>(width - 2));
    for (std::size_t k = 1; k + 1 < width; ++k) e.embedding[k - 1] = parse_double(fields[k], lineno);
    const double label = parse_double(fields.back(), lineno);
    if (label != std::floor(label)) throw Error(Errc::kParseError, fmt::format("line {}: label not an integer", lineno));
    e.label = static_cast<int>(label);
    rows.push_back(std::move(e));
  }
  if (!have_header) throw Error(Errc::kParseError, "csv file has no header");
  return finish_dataset(std::move(rows), classes, width - 2);
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIoError, fmt::format("cannot open '{}'", path.string()));
  return format == DatasetFormat::kCsv ? detail::load_csv(in) : detail::load_jsonl(in);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return load_dataset(path, format_from_path(path));
}

/// Writes floats in shortest round-trip form, so save followed by load is
/// bit-exact.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& path, DatasetFormat format) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIoError, fmt::format("cannot write '{}'", path.string()));
  if (format == DatasetFormat::kCsv) {
    out << "# num_classes=" << ds.num_classes() << '\n';
    out << "id";
    for (std::size_t k = 0; k < ds.dim(); ++k) out << ",f" << k;
    out << ",label\n";
    for (const auto& e : ds.examples()) {
      out << e.id;
      for (Eigen::Index k = 0; k < e.embedding.size(); ++k) out << fmt::format(",{}", e.embedding[k]);
      out << ',' << e.label << '\n';
    }
    return;
  }
  out << Json{{"header", {{"num_classes", ds.num_classes()}, {"dim", ds.dim()}}}}.dump() << '\n';
  for (const auto& e : ds.examples()) {
    out << Json{{"id", e.id}, {"features", to_std(e.embedding)}, {"label", e.label}}.dump() << '\n';
  }
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  save_dataset(ds, path, format_from_path(path));
}

}  // namespace logitmap
