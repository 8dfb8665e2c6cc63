#pragma once

#include <stdexcept>
#include <string>

namespace grf {

// Exit codes used by the command-line front end.
enum class ExitCode : int { Ok = 0, Usage = 1, Data = 2, Numerical = 3 };

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const { return code_; }

 private:
  ExitCode code_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ExitCode::Usage, what) {}
};

// Malformed input files, unparsable molecules, shape mismatches in user data.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ExitCode::Data, what) {}
};

class ShapeError : public DataError {
 public:
  explicit ShapeError(const std::string& what) : DataError(what) {}
};

// Lipschitz violations, divergent inversions, non-finite losses.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ExitCode::Numerical, what) {}
};

class LipschitzViolation : public NumericalError {
 public:
  explicit LipschitzViolation(const std::string& what) : NumericalError(what) {}
};

}  // namespace grf
