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

#ifndef SVLAB_ERRORS_H_
#define SVLAB_ERRORS_H_

#include <stdexcept>
#include <string>

namespace svlab {

// Every error carries the process exit code the CLI reports for it:
// 1 usage/config, 2 data/format/shape, 3 numeric.
class Error : public std::runtime_error {
 public:
  Error(const std::string& what, int exit_code)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const { return exit_code_; }

 private:
  int exit_code_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(what, 1) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, 1) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(what, 2) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(what, 2) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what, 2) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, 3) {}
};

// log/sqrt of a negative value.
class DomainError : public NumericError {
 public:
  explicit DomainError(const std::string& what) : NumericError(what) {}
};

}  // namespace svlab

#endif  // SVLAB_ERRORS_H_
