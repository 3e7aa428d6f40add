#include "semstyle/errors.hpp"

namespace semstyle {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidCode: return "invalid-code";
        case ErrorKind::InvalidParameter: return "invalid-parameter";
        case ErrorKind::InvalidImage: return "invalid-image";
        case ErrorKind::Load: return "load-error";
        case ErrorKind::Config: return "config-error";
        case ErrorKind::NumericAbort: return "numeric-abort";
        case ErrorKind::NotFound: return "not-found";
        case ErrorKind::Conflict: return "conflict";
    }
    return "unknown";
}

int exit_code_for(ErrorKind kind) { return kind == ErrorKind::NumericAbort ? 3 : 2; }

}  // namespace semstyle
