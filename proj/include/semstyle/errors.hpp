#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace semstyle {

enum class ErrorKind {
    InvalidCode,
    InvalidParameter,
    InvalidImage,
    Load,
    Config,
    NumericAbort,
    NotFound,
    Conflict,
};

std::string_view to_string(ErrorKind kind);

/// Base exception for every failure raised by the library. The kind decides
/// the CLI exit code and the HTTP status returned by the studio service.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

// 0 success, 2 config / input errors, 3 numeric abort
int exit_code_for(ErrorKind kind);

}  // namespace semstyle
