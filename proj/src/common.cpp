// SPDX-License-Identifier: Apache-2.0
#include "dclab/common.hpp"
#include "dclab/digest.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdint>

namespace dclab {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::InsufficientSource: return "InsufficientSource";
        case ErrorKind::EmptyPool: return "EmptyPool";
        case ErrorKind::BadToken: return "BadToken";
        case ErrorKind::BadConfig: return "BadConfig";
        case ErrorKind::NonFinite: return "NonFinite";
        case ErrorKind::MissingMember: return "MissingMember";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::DegenerateInput: return "DegenerateInput";
        case ErrorKind::UnreachableTarget: return "UnreachableTarget";
        case ErrorKind::SynthExhausted: return "SynthExhausted";
        case ErrorKind::Precondition: return "Precondition";
        case ErrorKind::Io: return "Io";
        case ErrorKind::Format: return "Format";
    }
    return "Unknown";
}

std::string sha256_hex(std::span<const std::byte> bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> buf{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), buf.data(), &len, EVP_sha256(), nullptr) != 1) {
        fail(ErrorKind::Io, "sha256 digest failed");
    }
    const std::span<const unsigned char> md(buf.data(), len);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(md.size() * 2);
    for (unsigned char c : md) {
        out.push_back(hex[c >> 4]);
        out.push_back(hex[c & 0xF]);
    }
    return out;
}

std::string sha256_hex(std::string_view text) {
    return sha256_hex(std::as_bytes(std::span(text.data(), text.size())));
}

std::string short_digest(std::string_view text) { return sha256_hex(text).substr(0, 16); }

}  // namespace dclab
