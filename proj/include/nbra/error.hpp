#pragma once

#include <stdexcept>
#include <string>

namespace nbra {

/// Broad failure classes. The CLI maps these onto exit codes.
enum class ErrorKind {
  Usage,        // bad arguments or inconsistent configuration
  Format,       // bad magic, version, or dtype
  Length,       // truncated payload or count mismatch
  Validation,   // non-finite values, duplicate ids, malformed records
  Degenerate,   // zero vectors, singular systems, undefined statistics
  Io,           // filesystem failures
  Convergence,  // solver did not reach tolerance
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace nbra
