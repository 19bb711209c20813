// Copyright 2026 The StableFlow Authors
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

#ifndef STABLEFLOW_ERRORS_HPP_
#define STABLEFLOW_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace stableflow {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent vector/matrix/parameter dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf intermediates, singular matrices, non-positive-definite gains.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A simulated state left the workspace bound or became non-finite.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Bad or unknown configuration entries.
class ConfigError : public Error {
 public:
  using Error::Error;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace stableflow

#endif  // STABLEFLOW_ERRORS_HPP_
