// SPDX-License-Identifier: Apache-2.0
//
// Append-only JSON-lines run ledger. Every line is one record keyed by
// `ledger_key`; records are never rewritten. Appends from concurrent runs are
// serialized through one mutex.

#pragma once

#include <json.hpp>

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace dclab {

using ojson = nlohmann::ordered_json;

class Ledger {
public:
    Ledger() = default;  // in-memory only
    explicit Ledger(std::filesystem::path path);

    Ledger(const Ledger&) = delete;
    Ledger& operator=(const Ledger&) = delete;

    /// Appends unless the key is already present; returns false on a duplicate.
    bool append(const ojson& record);
    std::optional<ojson> find(const std::string& key) const;
    bool contains(const std::string& key) const;
    std::vector<ojson> records() const;
    std::size_t size() const;
    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
    mutable std::mutex mutex_;
    std::vector<ojson> records_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace dclab
