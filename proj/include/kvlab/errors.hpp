/*
 * Copyright 2026 The kvlab Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace kvlab {

// Base of every error the library throws. The CLI maps the subclasses to
// process exit codes (config/input -> 2, contract -> 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration: bad dimensions, unknown enum values, budgets that
// cannot be honored by a policy.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Invalid runtime input such as an out-of-vocabulary token id or a prompt that
// does not fit the model's context.
class InputError : public Error {
 public:
  using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

}  // namespace kvlab
