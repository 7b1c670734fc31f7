#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fvlab {

enum class ErrorKind {
    format,
    integrity,
    capability,
    length,
    range,
    truncation,
    insufficient_data,
    parameter,
    battery_integrity,
    ingestion,
    degenerate_input,
    store,
    dependency,
    comparison,
    io,
};

std::string_view to_string(ErrorKind kind) noexcept;

// CLI exit code for an error kind: 1 usage, 2 data/integrity, 3 capability,
// 4 partial-stage failure.
int exit_code(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

// Generation ran out of context; carries the continuation produced so far.
class TruncationError : public Error {
public:
    TruncationError(const std::string& message, std::string partial)
        : Error(ErrorKind::truncation, message), partial_(std::move(partial)) {}

    const std::string& partial_output() const noexcept { return partial_; }

private:
    std::string partial_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) throw Error(kind, message);
}

}  // namespace fvlab
