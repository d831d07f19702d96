#pragma once

#include <stdexcept>
#include <string>

namespace satmark {

// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A documented precondition was violated by the caller.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced or consumed where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed external data (files, configs, hex strings).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, long long offset = -1)
      : std::runtime_error(offset >= 0 ? what + " (at byte " + std::to_string(offset) + ")" : what),
        offset_(offset) {}
  long long offset() const { return offset_; }

 private:
  long long offset_;
};

}  // namespace satmark
