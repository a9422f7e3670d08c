// SPDX-License-Identifier: Apache-2.0
//
// Shared error type and small numeric helpers used across the lab.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dclab {

enum class ErrorKind : std::uint8_t {
    InsufficientSource,
    EmptyPool,
    BadToken,
    BadConfig,
    NonFinite,
    MissingMember,
    ShapeMismatch,
    DegenerateInput,
    UnreachableTarget,
    SynthExhausted,
    Precondition,
    Io,
    Format,
};

std::string_view to_string(ErrorKind kind) noexcept;

class LabError : public std::runtime_error {
public:
    LabError(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), detail_(what) {}

    ErrorKind kind() const noexcept { return kind_; }
    /// The message without the kind prefix.
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorKind kind_;
    std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw LabError(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

}  // namespace dclab
