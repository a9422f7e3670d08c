// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

namespace dclab {

/// Lowercase hex SHA-256 of a byte range.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);

/// Shortened digest used for ledger keys (first 16 hex chars of SHA-256).
std::string short_digest(std::string_view text);

}  // namespace dclab
