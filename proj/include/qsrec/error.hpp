#pragma once

#include <stdexcept>
#include <string>

namespace qsrec {

enum class ErrorKind {
    kShape,
    kIndex,
    kNumeric,
    kInput,
    kIo,
    kFormat,
    kProtocol,
    kConsistency,
    kTraining,
    kInternal,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::kShape: return "shape-error";
        case ErrorKind::kIndex: return "index-error";
        case ErrorKind::kNumeric: return "numeric-error";
        case ErrorKind::kInput: return "input-error";
        case ErrorKind::kIo: return "io-error";
        case ErrorKind::kFormat: return "format-error";
        case ErrorKind::kProtocol: return "protocol-error";
        case ErrorKind::kConsistency: return "consistency-error";
        case ErrorKind::kTraining: return "training-error";
        case ErrorKind::kInternal: return "internal-error";
    }
    return "error";
}

/// Single exception type for the library; `kind()` tells callers which
/// contract was violated.
class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

   private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool ok, ErrorKind kind, const std::string& what) {
    if (!ok) {
        fail(kind, what);
    }
}

}  // namespace qsrec
