#pragma once

#include <stdexcept>
#include <string>

namespace ac {

// Error categories, used by the CLI to pick exit codes and by tests to
// assert that the right failure surfaced.
enum class ErrorKind {
  Dimension,    // shape/size mismatch between tensors
  Numeric,      // NaN/Inf where finite values are required
  Degenerate,   // vector with (near-)zero norm fed to a normalization
  Format,       // malformed file (bad magic, truncation, version)
  Consistency,  // two inputs that must agree do not (counts, labels)
  Config,       // invalid configuration value or unknown key
  Data,         // dataset content violates a precondition
  Storage,      // I/O failure
  Training,     // divergence or non-finite gradients during optimization
  Usage,        // bad command line
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Degenerate: return "degenerate";
    case ErrorKind::Format: return "format";
    case ErrorKind::Consistency: return "consistency";
    case ErrorKind::Config: return "config";
    case ErrorKind::Data: return "data";
    case ErrorKind::Storage: return "storage";
    case ErrorKind::Training: return "training";
    case ErrorKind::Usage: return "usage";
  }
  return "unknown";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

}  // namespace ac
