#ifndef NDCRF_ERRORS_HPP
#define NDCRF_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace ndcrf {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible extents, channel counts, or row counts between operands.
struct ShapeError : Error {
  using Error::Error;
};

// File access failures and payload-level file problems.
struct IoError : Error {
  using Error::Error;
};

// The three NPY failure modes are distinct types so callers can tell them apart.
struct NpyHeaderError : IoError {
  using IoError::IoError;
};
struct NpyDtypeError : IoError {
  using IoError::IoError;
};
struct NpyTruncatedError : IoError {
  using IoError::IoError;
};

// Invalid parameter files or parameter values (bad thetas, nonzero mu diagonal, ...).
struct ConfigError : Error {
  using Error::Error;
};

// Vertex hash table cannot accept another key.
struct LatticeCapacityError : Error {
  using Error::Error;
};

// A lattice key coordinate fell outside the supported int16 range.
struct LatticeRangeError : Error {
  using Error::Error;
};

// Training loss became non-finite.
struct DivergenceError : Error {
  DivergenceError(const std::string& msg, int step) : Error(msg), step(step) {}
  int step;
};

}  // namespace ndcrf

#endif
