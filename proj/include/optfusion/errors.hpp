#pragma once

#include <stdexcept>
#include <string>

namespace optfusion {

// Base class for every error thrown by the library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape disagreement (matmul inner dims, elementwise shapes, ...).
struct DimensionError : Error {
  using Error::Error;
};

// Index outside a valid range (embedding lookup, row gather).
struct IndexError : Error {
  using Error::Error;
};

// API misuse: double backward, non-scalar loss, masked-entry access.
struct ContractError : Error {
  using Error::Error;
};

// Invalid argument value (n < 1, bad split ratios, ...).
struct ArgumentError : Error {
  using Error::Error;
};

// Fusion invoked with an empty predecessor slot list.
struct EmptyFusionError : Error {
  using Error::Error;
};

// Softmax where every logit is the -inf mask sentinel.
struct DegenerateMaskError : Error {
  using Error::Error;
};

// Malformed input file (TSV line, JSON document); message carries location.
struct ParseError : Error {
  using Error::Error;
};

// Structured document violates its schema or version contract.
struct SchemaError : Error {
  using Error::Error;
};

// Unreadable or missing input.
struct InputError : Error {
  using Error::Error;
};

// NaN or non-finite value where a finite one is required.
struct NumericError : Error {
  using Error::Error;
};

// Training loss became non-finite; carries a diagnostic snapshot.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace optfusion
