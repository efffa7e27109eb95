#pragma once

#include <stdexcept>
#include <string>

namespace trajeglish {

// Error categories map onto distinct CLI exit codes.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised by k-disks when the candidate pool empties before the vocabulary is full.
class InsufficientDiversityError : public DataError {
 public:
  InsufficientDiversityError(std::size_t found, std::size_t requested)
      : DataError("insufficient diversity: k-disks found " + std::to_string(found) +
                  " templates before the pool was exhausted (requested " +
                  std::to_string(requested) + ")"),
        found_(found),
        requested_(requested) {}

  std::size_t found() const { return found_; }
  std::size_t requested() const { return requested_; }

 private:
  std::size_t found_;
  std::size_t requested_;
};

}  // namespace trajeglish
