// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace trydit {

// Shape or extent mismatch between operands.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violated precondition that is not a shape mismatch.
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File and serialization failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf reached a computation that requires finite values.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace trydit
