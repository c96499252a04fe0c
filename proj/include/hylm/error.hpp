#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace hylm {

// Error taxonomy. The CLI maps these onto exit codes:
//   ValidationError -> 2, NumericError -> 3, IoError -> 4.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension mismatch between tensors.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Violated API precondition (out-of-order append, non-scalar backward seed, ...).
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Cache/sequence bookkeeping inconsistency.
struct CacheError : Error {
    explicit CacheError(const std::string& msg) : Error(msg) {}
};

// Runtime numeric failure (NaN loss, degenerate softmax row).
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// A softmax row with every entry masked. Surfaced loudly: a silently uniform
// (or NaN) fallback would hide sliding-window masking bugs.
struct DegenerateRowError : NumericError {
    explicit DegenerateRowError(const std::string& msg) : NumericError(msg) {}
};

// Config validation failure; carries every violation, not just the first.
struct ValidationError : Error {
    explicit ValidationError(std::vector<std::string> problems)
        : Error(join(problems)), violations(std::move(problems)) {}

    std::vector<std::string> violations;

  private:
    static std::string join(const std::vector<std::string>& v) {
        std::string s = "config validation failed:";
        for (const auto& p : v) {
            s += "\n  - " + p;
        }
        return s;
    }
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

} // namespace hylm
