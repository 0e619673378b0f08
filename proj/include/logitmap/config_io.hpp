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
#include <string>

#include <fmt/format.h>

#include "json.hpp"
#include "logitmap/error.hpp"
#include "logitmap/harness.hpp"
#include "toml.hpp"

namespace logitmap {

namespace detail {

inline Json toml_to_json(const toml::node& node) {
  if (auto* t = node.as_table()) {
    Json out = Json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_to_json(v);
    return out;
  }
  if (auto* a = node.as_array()) {
    Json out = Json::array();
    for (const auto& v : *a) out.push_back(toml_to_json(v));
    return out;
  }
  if (auto v = node.value_exact<std::int64_t>()) return *v;
  if (auto v = node.value_exact<double>()) return *v;
  if (auto v = node.value_exact<bool>()) return *v;
  if (auto v = node.value_exact<std::string>()) return *v;
  throw Error(Errc::kConfigError, "unsupported TOML value type");
}

}  // namespace detail

/// Parses a config file; `.toml` files are TOML, everything else JSON.
inline Json read_config_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kConfigError, fmt::format("cannot open config '{}'", path.string()));
  if (path.extension() == ".toml") {
    try {
      return detail::toml_to_json(toml::parse(in, path.string()));
    } catch (const toml::parse_error& e) {
      throw Error(Errc::kConfigError, fmt::format("{}: {}", path.string(), e.description()));
    }
  }
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(Errc::kConfigError, fmt::format("{}: {}", path.string(), e.what()));
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return config_from_json(read_config_document(path));
}

}  // namespace logitmap
