#pragma once

#include <stdexcept>
#include <string>

namespace crokit {

/// Malformed or inconsistent input: dimensions, ranges, files. Maps to CLI exit code 2.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values, singular factors, or an inner solve that did not converge. Exit code 1.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An object was used out of order (e.g. backward on an empty tape).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InputError(what);
}

}  // namespace detail
}  // namespace crokit
