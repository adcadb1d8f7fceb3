// Copyright 2026 The adhoc-fusion Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace adhoc_fusion {

// Base for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition on shapes or sizes was violated by the caller.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// An API was used in the wrong state (e.g. backward without a tape).
class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or zero norms where a direction is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or mismatched checkpoint/dataset files.
class FormatError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int epoch)
      : Error(what), epoch_(epoch) {}
  // Last epoch whose parameters were finite.
  int last_good_epoch() const { return epoch_; }

 private:
  int epoch_;
};

}  // namespace adhoc_fusion
