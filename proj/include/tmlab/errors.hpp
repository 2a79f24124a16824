#pragma once

#include <stdexcept>
#include <string>

namespace tmlab {

// Base of every error the library throws. The CLI maps the subclasses onto
// exit codes (input 2, schema/dimension 3, numeric 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: missing files, invalid configuration values.
class InputError : public Error {
 public:
  using Error::Error;
};

// Malformed dataset or checkpoint content. `line` is 1-based, 0 when the
// failure is not tied to a specific line.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0, std::string sample_id = {})
      : Error(format(what, line, sample_id)), line_(line), sample_id_(std::move(sample_id)) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& sample_id() const noexcept { return sample_id_; }

 private:
  static std::string format(const std::string& what, std::size_t line, const std::string& id) {
    std::string msg = what;
    if (line > 0) msg += " (line " + std::to_string(line) + ")";
    if (!id.empty()) msg += " (sample '" + id + "')";
    return msg;
  }

  std::size_t line_;
  std::string sample_id_;
};

// Shape or class-inventory mismatch between model and data.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A day-of-year shift exceeded the model's declared maximum shift.
class ShiftRangeError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or parameters.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace tmlab
