// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace uniwrv {

// Shape or channel arithmetic does not line up.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse, e.g. backward() on a non-scalar loss.
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf showed up in a forward or backward pass.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace uniwrv
