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

// Little-endian binary records, TSV tables, atomic file output and seed
// derivation shared by every on-disk format.

#ifndef SVLAB_IO_H_
#define SVLAB_IO_H_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace svlab {

using Rng = std::mt19937_64;

// Stable 64-bit seed for (base, tag, index); used so that per-item random
// streams do not depend on processing order.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0);

// Runs fn(i) for i in [0, n) on up to `threads` threads. The first exception
// thrown by any worker is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

class BinaryWriter {
 public:
  void bytes(std::string_view raw) { buf_.append(raw); }
  void u32(std::uint32_t v);
  void f64(double v);
  void str(std::string_view s);  // u32 length + bytes
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class BinaryReader {
 public:
  BinaryReader(std::string data, std::string source);
  void expect_magic(std::string_view magic);
  std::uint32_t u32(const char* field);
  double f64(const char* field);
  std::string str(const char* field);
  bool done() const { return pos_ == data_.size(); }
  std::size_t record() const { return record_; }
  void next_record() { ++record_; }

 private:
  void need(std::size_t n, const char* field);
  std::string data_;
  std::string source_;
  std::size_t pos_ = 0;
  std::size_t record_ = 0;
};

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary and renames over the target so that no
// partial output is ever visible.
void atomic_write(const std::filesystem::path& path, std::string_view contents);

struct TsvRow {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

// Skips blank lines. Rows keep their 1-based line numbers for messages.
std::vector<TsvRow> read_tsv(const std::filesystem::path& path);
std::string join_tsv(const std::vector<std::string>& fields);

// %.17g formatting, the round-trip representation used in score files.
std::string format_double(double v);
double parse_double(const std::string& text, const std::string& where);

}  // namespace svlab

#endif  // SVLAB_IO_H_
