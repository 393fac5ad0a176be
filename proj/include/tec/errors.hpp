// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tec {

/// Shape or index inconsistency between operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Scalar parameter outside its admissible range (tau <= 0, k >= L, ...).
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Inconsistent model / training configuration.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// NaN or Inf produced by a forward op or a loss.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Misuse of the autograd graph (double backward, backward on untracked value).
struct GraphError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Malformed image or checkpoint file.
struct IngestionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace tec
