#include "fvlab/common/error.hpp"

namespace fvlab {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::format: return "format";
    case ErrorKind::integrity: return "integrity";
    case ErrorKind::capability: return "capability";
    case ErrorKind::length: return "length";
    case ErrorKind::range: return "range";
    case ErrorKind::truncation: return "truncation";
    case ErrorKind::insufficient_data: return "insufficient-data";
    case ErrorKind::parameter: return "parameter";
    case ErrorKind::battery_integrity: return "battery-integrity";
    case ErrorKind::ingestion: return "ingestion";
    case ErrorKind::degenerate_input: return "degenerate-input";
    case ErrorKind::store: return "store";
    case ErrorKind::dependency: return "dependency";
    case ErrorKind::comparison: return "comparison";
    case ErrorKind::io: return "io";
    }
    return "unknown";
}

int exit_code(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::parameter: return 1;
    case ErrorKind::capability: return 3;
    case ErrorKind::dependency: return 4;
    default: return 2;
    }
}

}  // namespace fvlab
