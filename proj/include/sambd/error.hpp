#pragma once

#include <stdexcept>
#include <string>

namespace sambd {

// Malformed or inconsistent input data (files, manifests, volumes).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values or other numerical breakdown during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sambd
