// Copyright 2026 The dglab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace dglab {

/// Bad user input: shapes, ranges, config fields, missing files.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Broken internal contract (layout mismatch, missing gradient, ...).
class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Input for which the requested quantity is undefined (e.g. zero-norm cosine).
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}
inline void ensure(bool cond, const std::string& msg) {
  if (!cond) throw InternalError(msg);
}
}  // namespace detail

}  // namespace dglab
