#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace savae {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const std::vector<std::size_t>& a,
             const std::vector<std::size_t>& b)
      : Error(op + ": incompatible shapes " + shape_to_string(a) + " and " +
              shape_to_string(b)),
        lhs(a),
        rhs(b) {}
  explicit ShapeError(const std::string& what) : Error(what) {}

  std::vector<std::size_t> lhs, rhs;
};

/// A NaN or Inf appeared in a computed value. `node` is the tape node that
/// produced it (or the SVI step index when raised from the refinement loop).
class NonFiniteValue : public Error {
 public:
  NonFiniteValue(const std::string& where, std::size_t node_or_step)
      : Error("non-finite value in " + where + " (index " +
              std::to_string(node_or_step) + ")"),
        index(node_or_step) {}

  std::size_t index;
};

class UsedTape : public Error {
 public:
  UsedTape() : Error("tape already consumed by a backward pass") {}
};

class VocabError : public Error {
 public:
  VocabError(long token, long vocab)
      : Error("token " + std::to_string(token) + " outside vocabulary [0, " +
              std::to_string(vocab) + ")") {}
};

class EmptyInput : public Error {
 public:
  using Error::Error;
  EmptyInput() : Error("empty input sequence") {}
};

class TraceMismatch : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace savae
