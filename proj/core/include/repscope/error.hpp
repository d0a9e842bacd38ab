#pragma once

#include <stdexcept>
#include <string>

namespace repscope {

// Caller misuse: bad shapes, out-of-range indices, invalid configs.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad or inconsistent data: corrupt files, dataset mismatches, degenerate
// representations.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace repscope
