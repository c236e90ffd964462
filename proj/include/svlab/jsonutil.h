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

#ifndef SVLAB_JSONUTIL_H_
#define SVLAB_JSONUTIL_H_

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

namespace svlab {

// Reads a JSON object key by key. finish() rejects every key that was never
// asked for, so typos in configs surface as ConfigError.
class JsonFields {
 public:
  JsonFields(const nlohmann::json& j, std::string where);

  // Each read leaves `out` untouched when the key is absent.
  void read(const char* key, std::size_t& out);
  void read(const char* key, double& out);
  void read(const char* key, bool& out);
  void read(const char* key, std::string& out);
  void read(const char* key, std::vector<double>& out);
  // Marks the key as known; nullptr when absent.
  const nlohmann::json* get(const char* key);
  bool has(const char* key) const { return j_.contains(key); }
  const std::string& where() const { return where_; }
  void finish() const;

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

nlohmann::json parse_json(const std::string& text, const std::string& source);
nlohmann::json load_json(const std::filesystem::path& path);
// Sorted keys, two-space indent, trailing newline.
std::string canonical_json(const nlohmann::json& j);

}  // namespace svlab

#endif  // SVLAB_JSONUTIL_H_
