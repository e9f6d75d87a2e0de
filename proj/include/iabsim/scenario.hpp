#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "iabsim/bap.hpp"
#include "iabsim/core.hpp"
#include "iabsim/phy.hpp"
#include "iabsim/rlc.hpp"
#include "iabsim/topology.hpp"

namespace iabsim::scenario {

inline constexpr int kSchemaVersion = 1;

struct NodeDecl {
    std::string name;
    topo::NodeRole role = topo::NodeRole::IabNode;
    phy::NodeCaps caps;
    std::int64_t join_at_slot = 0;      // IAB nodes: when integration starts
    std::string attach_to;              // UEs: serving DU by name
    bool gps_synced = false;            // reference-synced instead of OTA
};

struct LinkDecl {
    std::string a;
    std::string b;
    double delay_us = 5.0;
    int capacity = 10;
    double loss = 0.0;
};

struct PatternDecl {
    // either auto-generated semi-static separation ...
    std::optional<int> auto_semi_static_period;
    // ... or explicit per-node patterns (by node name)
    std::map<std::string, phy::ResourcePattern> per_node;
};

struct RachDecl {
    std::string node;
    phy::RachConfig config;
};

struct SsbDecl {
    std::string node;
    phy::SsbConfig config;
};

struct BearerDecl {
    bap::BearerId id = 0;
    std::string ue;
    bap::QosProfile qos;
    bap::MappingPolicy mapping = bap::MappingPolicy::ManyToOne;
    Direction direction = Direction::Dl;
};

struct TrafficDecl {
    enum class Kind : std::uint8_t { VoipCbr, StreamingCbr, WebOnOff };
    Kind kind = Kind::VoipCbr;
    bap::BearerId bearer = 0;
    int interval_slots = 4;   // CBR packet spacing / on-phase spacing
    int size_bytes = 120;
    std::int64_t start_slot = 0;
    int on_slots = 40;        // WebOnOff only
    int off_slots = 80;       // WebOnOff only
};

struct EventDecl {
    enum class Kind : std::uint8_t { Blockage, NodeJoin, NodeLeave, SoftRelease };
    Kind kind = Kind::Blockage;
    std::string link_a, link_b;        // Blockage
    std::int64_t from_slot = 0;
    std::int64_t to_slot = 0;
    std::string node;                  // NodeJoin / NodeLeave
    std::int64_t at_slot = 0;
    std::string parent, child;         // SoftRelease
    std::vector<std::int64_t> slots;   // SoftRelease
};

struct Scenario {
    std::string name;
    std::string description;
    double slot_duration_us = 125.0;
    rlc::ArqMode arq_mode = rlc::ArqMode::HopByHop;
    int report_period_slots = 50;
    int reconfig_delay_slots = 1;
    int overload_threshold_slots = 100;
    double overload_utilization = 0.9;
    bool auto_soft_release = false;
    bool strict = true;
    rlc::RlcConfig rlc;
    std::vector<NodeDecl> nodes;
    std::vector<LinkDecl> links;
    PatternDecl patterns;
    std::vector<RachDecl> rach;
    std::vector<SsbDecl> ssb;
    std::vector<BearerDecl> bearers;
    std::vector<TrafficDecl> traffic;
    std::vector<EventDecl> events;

    std::optional<std::size_t> node_index(const std::string& n) const {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (nodes[i].name == n) return i;
        }
        return std::nullopt;
    }
};

namespace detail {

[[noreturn]] inline void fail(const std::string& path, const std::string& what) {
    throw ConfigError(path + ": " + what);
}

inline const nlohmann::json& need(const nlohmann::json& j, const std::string& key,
                                  const std::string& path) {
    auto it = j.find(key);
    if (it == j.end()) fail(path + "." + key, "missing required field");
    return *it;
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
    auto it = j.find(key);
    if (it == j.end()) return fallback;
    return it->get<T>();
}

inline topo::NodeRole parse_role(const std::string& s, const std::string& path) {
    if (s == "donor_cu") return topo::NodeRole::DonorCu;
    if (s == "donor_du") return topo::NodeRole::DonorDu;
    if (s == "iab_node") return topo::NodeRole::IabNode;
    if (s == "ue") return topo::NodeRole::Ue;
    fail(path, "unknown role '" + s + "'");
}

inline phy::SlotDirection parse_dir(const std::string& s, const std::string& path) {
    if (s == "downlink") return phy::SlotDirection::Downlink;
    if (s == "uplink") return phy::SlotDirection::Uplink;
    if (s == "flexible") return phy::SlotDirection::Flexible;
    fail(path, "unknown slot direction '" + s + "'");
}

inline phy::DuAttribute parse_attr(const std::string& s, const std::string& path) {
    if (s == "hard") return phy::DuAttribute::Hard;
    if (s == "soft") return phy::DuAttribute::Soft;
    if (s == "not_available") return phy::DuAttribute::NotAvailable;
    fail(path, "unknown du attribute '" + s + "'");
}

}  // namespace detail

inline Scenario parse(const nlohmann::json& j) {
    using detail::fail;
    using detail::get_or;
    using detail::need;

    Scenario s;
    const int version = detail::need(j, "$schema_version", "$").get<int>();
    if (version != kSchemaVersion) {
        fail("$.$schema_version", "unsupported version " + std::to_string(version));
    }
    s.name = get_or<std::string>(j, "name", "unnamed");
    s.description = get_or<std::string>(j, "description", "");
    if (j.contains("constants")) {
        s.slot_duration_us = get_or<double>(j["constants"], "slot_duration_us", 125.0);
        if (s.slot_duration_us <= 0) fail("$.constants.slot_duration_us", "must be > 0");
    }
    const std::string arq = get_or<std::string>(j, "arq_mode", "hop_by_hop");
    if (arq == "hop_by_hop") {
        s.arq_mode = rlc::ArqMode::HopByHop;
    } else if (arq == "end_to_end_reference") {
        s.arq_mode = rlc::ArqMode::EndToEndReference;
    } else {
        fail("$.arq_mode", "unknown mode '" + arq + "'");
    }
    s.report_period_slots = get_or<int>(j, "report_period_slots", 50);
    s.reconfig_delay_slots = get_or<int>(j, "reconfig_delay_slots", 1);
    s.overload_threshold_slots = get_or<int>(j, "overload_threshold_slots", 100);
    s.overload_utilization = get_or<double>(j, "overload_utilization", 0.9);
    s.auto_soft_release = get_or<bool>(j, "auto_soft_release", false);
    s.strict = get_or<bool>(j, "strict", true);
    if (s.reconfig_delay_slots < 1) fail("$.reconfig_delay_slots", "must be >= 1");

    if (j.contains("rlc")) {
        const auto& r = j["rlc"];
        s.rlc.max_retx = get_or<int>(r, "max_retx", s.rlc.max_retx);
        s.rlc.poll_sdu_interval = get_or<int>(r, "poll_sdu_interval", s.rlc.poll_sdu_interval);
        s.rlc.poll_slot_interval = get_or<int>(r, "poll_slot_interval", s.rlc.poll_slot_interval);
        s.rlc.retx_timeout_slots = get_or<int>(r, "retx_timeout_slots", s.rlc.retx_timeout_slots);
        s.rlc.reassembly_timeout_slots =
            get_or<int>(r, "reassembly_timeout_slots", s.rlc.reassembly_timeout_slots);
        s.rlc.window_size = get_or<std::uint32_t>(r, "window_size", s.rlc.window_size);
        s.rlc.validate();
    }

    const auto& nodes = need(j, "nodes", "$");
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const auto& n = nodes[i];
        const std::string path = "$.nodes[" + std::to_string(i) + "]";
        NodeDecl d;
        d.name = need(n, "name", path).get<std::string>();
        d.role = detail::parse_role(need(n, "role", path).get<std::string>(), path + ".role");
        if (n.contains("caps")) {
            const auto& c = n["caps"];
            d.caps.simultaneous_tx_rx = get_or<bool>(c, "simultaneous_tx_rx", false);
            d.caps.full_duplex = get_or<bool>(c, "full_duplex", false);
            d.caps.out_of_band = get_or<bool>(c, "out_of_band", false);
            try {
                d.caps.validate();
            } catch (const ConfigError& e) {
                fail(path + ".caps", e.what());
            }
        }
        d.join_at_slot = get_or<std::int64_t>(n, "join_at_slot", 0);
        d.attach_to = get_or<std::string>(n, "attach_to", "");
        d.gps_synced = get_or<bool>(n, "gps_synced", false);
        if (d.role == topo::NodeRole::Ue && d.attach_to.empty()) {
            fail(path + ".attach_to", "UE must name its serving node");
        }
        for (const auto& prev : s.nodes) {
            if (prev.name == d.name) fail(path + ".name", "duplicate node name");
        }
        s.nodes.push_back(std::move(d));
    }

    const auto& links = need(j, "links", "$");
    for (std::size_t i = 0; i < links.size(); ++i) {
        const auto& l = links[i];
        const std::string path = "$.links[" + std::to_string(i) + "]";
        LinkDecl d;
        d.a = need(l, "a", path).get<std::string>();
        d.b = need(l, "b", path).get<std::string>();
        d.delay_us = get_or<double>(l, "delay_us", 5.0);
        d.capacity = get_or<int>(l, "capacity", 10);
        d.loss = get_or<double>(l, "loss", 0.0);
        if (!s.node_index(d.a)) fail(path + ".a", "unknown node '" + d.a + "'");
        if (!s.node_index(d.b)) fail(path + ".b", "unknown node '" + d.b + "'");
        s.links.push_back(std::move(d));
    }

    if (j.contains("resource_patterns")) {
        const auto& p = j["resource_patterns"];
        if (p.contains("auto_semi_static_period")) {
            s.patterns.auto_semi_static_period = p["auto_semi_static_period"].get<int>();
            if (*s.patterns.auto_semi_static_period % 2 != 0 ||
                *s.patterns.auto_semi_static_period < 2) {
                fail("$.resource_patterns.auto_semi_static_period", "must be even and >= 2");
            }
        }
        if (p.contains("per_node")) {
            for (const auto& [name, spec] : p["per_node"].items()) {
                const std::string path = "$.resource_patterns.per_node." + name;
                if (!s.node_index(name)) fail(path, "unknown node");
                phy::ResourcePattern pattern;
                for (std::size_t k = 0; k < spec["slots"].size(); ++k) {
                    const auto& slot = spec["slots"][k];
                    const std::string spath = path + ".slots[" + std::to_string(k) + "]";
                    phy::SlotConfig cfg;
                    cfg.mt_dir = detail::parse_dir(get_or<std::string>(slot, "mt", "flexible"), spath);
                    cfg.du_dir = detail::parse_dir(get_or<std::string>(slot, "du", "flexible"), spath);
                    cfg.du_attr = detail::parse_attr(get_or<std::string>(slot, "attr", "hard"), spath);
                    pattern.slots.push_back(cfg);
                }
                if (pattern.slots.empty()) fail(path + ".slots", "pattern must not be empty");
                s.patterns.per_node[name] = std::move(pattern);
            }
        }
    }

    if (j.contains("rach")) {
        for (std::size_t i = 0; i < j["rach"].size(); ++i) {
            const auto& r = j["rach"][i];
            const std::string path = "$.rach[" + std::to_string(i) + "]";
            RachDecl d;
            d.node = need(r, "node", path).get<std::string>();
            if (!s.node_index(d.node)) fail(path + ".node", "unknown node '" + d.node + "'");
            const std::string side = get_or<std::string>(r, "side", "du");
            d.config.owner_side = side == "mt" ? phy::OccasionSide::MtOccasions
                                               : phy::OccasionSide::DuOccasions;
            d.config.period = get_or<int>(r, "period", 8);
            d.config.time_offset = get_or<int>(r, "offset", 0);
            d.config.occasions_per_period = get_or<int>(r, "occasions", 1);
            const std::string pre = get_or<std::string>(r, "preamble", "long_range");
            d.config.preamble_format = pre == "short_range" ? phy::PreambleFormat::ShortRange
                                                            : phy::PreambleFormat::LongRange;
            try {
                d.config.validate();
            } catch (const ConfigError& e) {
                fail(path, e.what());
            }
            s.rach.push_back(std::move(d));
        }
    }

    if (j.contains("ssb")) {
        for (std::size_t i = 0; i < j["ssb"].size(); ++i) {
            const auto& r = j["ssb"][i];
            const std::string path = "$.ssb[" + std::to_string(i) + "]";
            SsbDecl d;
            d.node = need(r, "node", path).get<std::string>();
            if (!s.node_index(d.node)) fail(path + ".node", "unknown node '" + d.node + "'");
            d.config.period = get_or<int>(r, "period", 20);
            d.config.time_offset = get_or<int>(r, "offset", 0);
            d.config.for_ue_cell_search = get_or<bool>(r, "for_ue_cell_search", true);
            try {
                d.config.validate();
            } catch (const ConfigError& e) {
                fail(path, e.what());
            }
            s.ssb.push_back(std::move(d));
        }
    }

    std::set<bap::BearerId> bearer_ids;
    if (j.contains("bearers")) {
        for (std::size_t i = 0; i < j["bearers"].size(); ++i) {
            const auto& b = j["bearers"][i];
            const std::string path = "$.bearers[" + std::to_string(i) + "]";
            BearerDecl d;
            d.id = need(b, "id", path).get<bap::BearerId>();
            d.ue = need(b, "ue", path).get<std::string>();
            auto idx = s.node_index(d.ue);
            if (!idx) fail(path + ".ue", "unknown UE '" + d.ue + "'");
            if (s.nodes[*idx].role != topo::NodeRole::Ue) {
                fail(path + ".ue", "'" + d.ue + "' is not a UE");
            }
            d.qos.qos_class = get_or<std::uint8_t>(b, "qos_class", 0);
            d.qos.priority = get_or<int>(b, "priority", d.qos.qos_class);
            d.qos.packet_delay_budget_ms = get_or<double>(b, "delay_budget_ms", 100.0);
            const std::string m = get_or<std::string>(b, "mapping", "many_to_one");
            if (m == "one_to_one") {
                d.mapping = bap::MappingPolicy::OneToOne;
            } else if (m == "many_to_one") {
                d.mapping = bap::MappingPolicy::ManyToOne;
            } else {
                fail(path + ".mapping", "unknown mapping '" + m + "'");
            }
            const std::string dir = get_or<std::string>(b, "direction", "dl");
            if (dir == "dl") {
                d.direction = Direction::Dl;
            } else if (dir == "ul") {
                d.direction = Direction::Ul;
            } else {
                fail(path + ".direction", "unknown direction '" + dir + "'");
            }
            if (!bearer_ids.insert(d.id).second) fail(path + ".id", "duplicate bearer id");
            s.bearers.push_back(std::move(d));
        }
    }

    if (j.contains("traffic")) {
        for (std::size_t i = 0; i < j["traffic"].size(); ++i) {
            const auto& t = j["traffic"][i];
            const std::string path = "$.traffic[" + std::to_string(i) + "]";
            TrafficDecl d;
            d.bearer = need(t, "bearer", path).get<bap::BearerId>();
            if (!bearer_ids.count(d.bearer)) {
                fail(path + ".bearer", "unknown bearer " + std::to_string(d.bearer));
            }
            const std::string kind = need(t, "kind", path).get<std::string>();
            if (kind == "voip_cbr") {
                d.kind = TrafficDecl::Kind::VoipCbr;
            } else if (kind == "streaming_cbr") {
                d.kind = TrafficDecl::Kind::StreamingCbr;
            } else if (kind == "web_onoff") {
                d.kind = TrafficDecl::Kind::WebOnOff;
            } else {
                fail(path + ".kind", "unknown traffic kind '" + kind + "'");
            }
            d.interval_slots = get_or<int>(t, "interval_slots", 4);
            d.size_bytes = get_or<int>(t, "size_bytes", 120);
            d.start_slot = get_or<std::int64_t>(t, "start_slot", 0);
            d.on_slots = get_or<int>(t, "on_slots", 40);
            d.off_slots = get_or<int>(t, "off_slots", 80);
            if (d.interval_slots < 1) fail(path + ".interval_slots", "must be >= 1");
            s.traffic.push_back(std::move(d));
        }
    }

    if (j.contains("events")) {
        for (std::size_t i = 0; i < j["events"].size(); ++i) {
            const auto& e = j["events"][i];
            const std::string path = "$.events[" + std::to_string(i) + "]";
            EventDecl d;
            const std::string type = need(e, "type", path).get<std::string>();
            if (type == "blockage") {
                d.kind = EventDecl::Kind::Blockage;
                const auto& link = need(e, "link", path);
                if (!link.is_array() || link.size() != 2) {
                    fail(path + ".link", "expected [a, b]");
                }
                d.link_a = link[0].get<std::string>();
                d.link_b = link[1].get<std::string>();
                if (!s.node_index(d.link_a)) fail(path + ".link[0]", "unknown node");
                if (!s.node_index(d.link_b)) fail(path + ".link[1]", "unknown node");
                d.from_slot = need(e, "from_slot", path).get<std::int64_t>();
                d.to_slot = need(e, "to_slot", path).get<std::int64_t>();
                if (d.from_slot >= d.to_slot) fail(path, "blockage needs from_slot < to_slot");
            } else if (type == "node_join" || type == "node_leave") {
                d.kind = type == "node_join" ? EventDecl::Kind::NodeJoin
                                             : EventDecl::Kind::NodeLeave;
                d.node = need(e, "node", path).get<std::string>();
                if (!s.node_index(d.node)) fail(path + ".node", "unknown node");
                d.at_slot = need(e, "at_slot", path).get<std::int64_t>();
            } else if (type == "soft_release") {
                d.kind = EventDecl::Kind::SoftRelease;
                d.parent = need(e, "parent", path).get<std::string>();
                d.child = need(e, "child", path).get<std::string>();
                if (!s.node_index(d.parent)) fail(path + ".parent", "unknown node");
                if (!s.node_index(d.child)) fail(path + ".child", "unknown node");
                for (const auto& sl : need(e, "slots", path)) {
                    d.slots.push_back(sl.get<std::int64_t>());
                }
            } else {
                fail(path + ".type", "unknown event type '" + type + "'");
            }
            s.events.push_back(std::move(d));
        }
    }

    return s;
}

inline Scenario load_file(const std::string& filename) {
    std::ifstream in(filename);
    if (!in) throw ConfigError("cannot open scenario file '" + filename + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("scenario parse error in '" + filename + "': " + e.what());
    }
    return parse(j);
}

/// Builds the topology described by the scenario and reports structural
/// problems the field-level parser cannot see.
struct BuildResult {
    topo::Topology topology;
    std::map<std::string, NodeId> ids;
    std::vector<std::string> errors;
};

inline BuildResult build_topology(const Scenario& s) {
    BuildResult out;
    for (const auto& n : s.nodes) {
        NodeId id = out.topology.add_node(n.role, n.caps);
        out.ids.emplace(n.name, id);
    }
    for (const auto& l : s.links) {
        out.topology.add_link(out.ids.at(l.a), out.ids.at(l.b), l.delay_us,
                              l.capacity, l.loss);
    }
    for (const auto& n : s.nodes) {
        if (n.role == topo::NodeRole::Ue) {
            auto it = out.ids.find(n.attach_to);
            if (it == out.ids.end()) {
                out.errors.push_back("UE '" + n.name + "' attaches to unknown node '" +
                                     n.attach_to + "'");
                continue;
            }
            const auto& serving = out.topology.node(it->second);
            if (serving.role != topo::NodeRole::IabNode &&
                serving.role != topo::NodeRole::DonorDu) {
                out.errors.push_back("UE '" + n.name + "' must attach to a DU-capable node");
                continue;
            }
            out.topology.node(out.ids.at(n.name)).parents = {it->second};
            if (!out.topology.find_link(out.ids.at(n.name), it->second)) {
                out.errors.push_back("UE '" + n.name + "' has no link to '" +
                                     n.attach_to + "'");
            }
        }
    }
    if (out.topology.donor_dus().empty()) {
        out.errors.push_back("scenario declares no donor DU");
    }
    bool has_cu = out.topology.donor_cu().has_value();
    if (!has_cu) out.errors.push_back("scenario declares no donor CU");
    auto report = out.topology.validate();
    for (const auto& v : report.violations) {
        if (v.kind == topo::Violation::Kind::NoDonorDu) continue;  // already reported
        out.errors.push_back(v.detail);
    }
    return out;
}

}  // namespace iabsim::scenario
