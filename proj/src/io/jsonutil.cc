// Copyright 2026 The svlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "svlab/jsonutil.h"

#include "svlab/errors.h"
#include "svlab/io.h"

namespace svlab {

JsonFields::JsonFields(const nlohmann::json& j, std::string where)
    : j_(j), where_(std::move(where)) {
  if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
}

const nlohmann::json* JsonFields::get(const char* key) {
  seen_.insert(key);
  auto it = j_.find(key);
  return it == j_.end() ? nullptr : &*it;
}

void JsonFields::read(const char* key, std::size_t& out) {
  if (const auto* v = get(key)) {
    if (!v->is_number_integer() || v->get<std::int64_t>() < 0) {
      throw ConfigError(where_ + ": " + key + " must be a non-negative integer");
    }
    out = v->get<std::size_t>();
  }
}

void JsonFields::read(const char* key, double& out) {
  if (const auto* v = get(key)) {
    if (!v->is_number()) throw ConfigError(where_ + ": " + key + " must be a number");
    out = v->get<double>();
  }
}

void JsonFields::read(const char* key, bool& out) {
  if (const auto* v = get(key)) {
    if (!v->is_boolean()) throw ConfigError(where_ + ": " + key + " must be true or false");
    out = v->get<bool>();
  }
}

void JsonFields::read(const char* key, std::string& out) {
  if (const auto* v = get(key)) {
    if (!v->is_string()) throw ConfigError(where_ + ": " + key + " must be a string");
    out = v->get<std::string>();
  }
}

void JsonFields::read(const char* key, std::vector<double>& out) {
  if (const auto* v = get(key)) {
    if (!v->is_array()) throw ConfigError(where_ + ": " + key + " must be an array of numbers");
    out.clear();
    for (const auto& e : *v) {
      if (!e.is_number()) throw ConfigError(where_ + ": " + key + " must be an array of numbers");
      out.push_back(e.get<double>());
    }
  }
}

void JsonFields::finish() const {
  for (const auto& [key, value] : j_.items()) {
    if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key \"" + key + "\"");
  }
}

nlohmann::json parse_json(const std::string& text, const std::string& source) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(source + ": invalid JSON: " + e.what());
  }
}

nlohmann::json load_json(const std::filesystem::path& path) {
  return parse_json(read_file(path), path.string());
}

std::string canonical_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

}  // namespace svlab
