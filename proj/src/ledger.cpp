// SPDX-License-Identifier: Apache-2.0
#include "dclab/ledger.hpp"

#include "dclab/common.hpp"

#include <fstream>

namespace dclab {

Ledger::Ledger(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream is(path_);
    if (!is) return;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        ojson rec;
        try {
            rec = ojson::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            fail(ErrorKind::Format, path_.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        const std::string key = rec.at("ledger_key").get<std::string>();
        if (index_.count(key)) continue;
        index_[key] = records_.size();
        records_.push_back(std::move(rec));
    }
}

bool Ledger::append(const ojson& record) {
    const std::string key = record.at("ledger_key").get<std::string>();
    std::lock_guard lock(mutex_);
    if (index_.count(key)) return false;
    if (!path_.empty()) {
        std::ofstream os(path_, std::ios::app);
        if (!os) fail(ErrorKind::Io, "cannot append to " + path_.string());
        os << record.dump() << '\n';
        os.flush();
        if (!os) fail(ErrorKind::Io, "append failed for " + path_.string());
    }
    index_[key] = records_.size();
    records_.push_back(record);
    return true;
}

std::optional<ojson> Ledger::find(const std::string& key) const {
    std::lock_guard lock(mutex_);
    const auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return records_[it->second];
}

bool Ledger::contains(const std::string& key) const {
    std::lock_guard lock(mutex_);
    return index_.count(key) > 0;
}

std::vector<ojson> Ledger::records() const {
    std::lock_guard lock(mutex_);
    return records_;
}

std::size_t Ledger::size() const {
    std::lock_guard lock(mutex_);
    return records_.size();
}

}  // namespace dclab
