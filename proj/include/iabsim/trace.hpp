#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

namespace iabsim::trace {

/// One structured trace record; serialized as a single JSONL line.
struct Record {
    std::int64_t slot = 0;
    int phase = 0;
    std::uint64_t seq = 0;
    std::string type;
    nlohmann::json fields;
};

class Trace {
public:
    explicit Trace(bool enabled = false) : enabled_(enabled) {}

    bool enabled() const { return enabled_; }

    void add(std::int64_t slot, int phase, const std::string& type,
             nlohmann::json fields = nlohmann::json::object()) {
        if (!enabled_) return;
        records_.push_back({slot, phase, seq_++, type, std::move(fields)});
    }

    const std::vector<Record>& records() const { return records_; }

    std::vector<Record> of_type(const std::string& type) const {
        std::vector<Record> out;
        for (const auto& r : records_) {
            if (r.type == type) out.push_back(r);
        }
        return out;
    }

    void write_jsonl(std::ostream& os) const {
        for (const auto& r : records_) {
            nlohmann::json line = r.fields;
            line["slot"] = r.slot;
            line["phase"] = r.phase;
            line["seq"] = r.seq;
            line["type"] = r.type;
            os << line.dump() << "\n";
        }
    }

private:
    bool enabled_ = false;
    std::uint64_t seq_ = 0;
    std::vector<Record> records_;
};

}  // namespace iabsim::trace
