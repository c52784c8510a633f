#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace neurmatch {

// Process exit codes shared by every CLI subcommand.
enum class ExitCode : int {
  kSuccess = 0,
  kUsage = 2,
  kData = 3,
  kNumeric = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const { return ExitCode::kData; }
};

class ArgumentError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kUsage; }
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class DegenerateConfigurationError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kNumeric; }
};

class OutOfBoundsError : public Error {
 public:
  using Error::Error;
};

class InsufficientMatchesError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const override { return ExitCode::kNumeric; }
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int epoch)
      : Error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }
  ExitCode exit_code() const override { return ExitCode::kNumeric; }

 private:
  int epoch_;
};

// Malformed file contents. `offset` is the byte position where decoding
// failed, or -1 for text formats.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::int64_t offset = -1)
      : Error(offset >= 0 ? what + " (at byte offset " +
                                std::to_string(offset) + ")"
                          : what),
        offset_(offset) {}
  std::int64_t offset() const { return offset_; }

 private:
  std::int64_t offset_;
};

}  // namespace neurmatch
