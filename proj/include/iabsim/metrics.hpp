#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

namespace iabsim::metrics {

struct BearerMetrics {
    std::uint32_t id = 0;
    int qos_class = 0;
    std::uint64_t generated = 0;
    std::uint64_t delivered = 0;
    std::uint64_t lost = 0;
    std::uint64_t in_flight = 0;
    std::uint64_t out_of_order = 0;
    double mean_latency_slots = 0.0;
    double p95_latency_slots = 0.0;
    std::map<std::string, std::uint64_t> loss_causes;
    std::vector<std::int64_t> latencies;  // raw samples; not serialized

    void finalize() {
        in_flight = generated - delivered - lost;
        if (latencies.empty()) return;
        double sum = 0.0;
        for (auto l : latencies) sum += static_cast<double>(l);
        mean_latency_slots = sum / static_cast<double>(latencies.size());
        std::vector<std::int64_t> sorted = latencies;
        std::sort(sorted.begin(), sorted.end());
        // nearest-rank p95
        std::size_t rank = (sorted.size() * 95 + 99) / 100;
        if (rank == 0) rank = 1;
        p95_latency_slots = static_cast<double>(sorted[rank - 1]);
    }
};

struct LinkMetrics {
    std::string a;
    std::string b;
    std::uint64_t transmitted_pdus = 0;
    std::uint64_t retransmissions = 0;
    std::uint64_t lost_pdus = 0;  // on-air losses (blockage or channel loss)
    std::uint64_t blocked_slots = 0;
    double utilization = 0.0;  // transmitted / (horizon * capacity)
};

struct NodeMetrics {
    std::string name;
    std::uint64_t no_route_drops = 0;
    std::uint64_t fallback_hits = 0;
    std::uint64_t hd_forced_idle_slots = 0;
    std::uint64_t hd_violations = 0;
    std::uint64_t grant_conflicts = 0;  // grant rejected by an explicit release
};

struct AdaptationEntry {
    std::int64_t slot = 0;
    std::string trigger;
    std::string subject;  // link or node name(s)
    std::string action;   // plan summary or "no_action"
    std::uint64_t in_flight_on_link = 0;
    std::uint64_t purged = 0;
    std::uint64_t rerouted = 0;
};

struct IntegrationEntry {
    std::int64_t slot = 0;
    std::string node;
    std::string state;
};

struct Metrics {
    std::string scenario;
    std::uint64_t seed = 0;
    std::int64_t horizon = 0;
    std::map<std::uint32_t, BearerMetrics> bearers;
    std::vector<LinkMetrics> links;
    std::vector<NodeMetrics> nodes;
    std::vector<AdaptationEntry> adaptation;
    std::vector<IntegrationEntry> integration;
    std::uint64_t generated = 0;
    std::uint64_t delivered = 0;
    std::uint64_t lost = 0;
    std::uint64_t in_flight = 0;
    std::uint64_t bh_channels_total = 0;    // every backhaul data channel established
    std::uint64_t bh_channels_mapped = 0;   // distinct channels referenced by bearer maps
    std::uint64_t timing_sync_events = 0;

    void finalize() {
        generated = delivered = lost = 0;
        for (auto& [id, b] : bearers) {
            b.finalize();
            generated += b.generated;
            delivered += b.delivered;
            lost += b.lost;
        }
        in_flight = generated - delivered - lost;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["$schema_version"] = 1;
        j["scenario"] = scenario;
        j["seed"] = seed;
        j["horizon"] = horizon;
        j["global"] = {
            {"generated", generated},       {"delivered", delivered},
            {"lost", lost},                 {"in_flight", in_flight},
            {"bh_channels_total", bh_channels_total},
            {"bh_channels_mapped", bh_channels_mapped},
        };
        j["bearers"] = nlohmann::json::array();
        for (const auto& [id, b] : bearers) {
            nlohmann::json e = {
                {"id", b.id},
                {"qos_class", b.qos_class},
                {"generated", b.generated},
                {"delivered", b.delivered},
                {"lost", b.lost},
                {"in_flight", b.in_flight},
                {"out_of_order", b.out_of_order},
                {"mean_latency_slots", b.mean_latency_slots},
                {"p95_latency_slots", b.p95_latency_slots},
            };
            if (!b.loss_causes.empty()) e["loss_causes"] = b.loss_causes;
            j["bearers"].push_back(std::move(e));
        }
        j["links"] = nlohmann::json::array();
        for (const auto& l : links) {
            j["links"].push_back({
                {"a", l.a},
                {"b", l.b},
                {"transmitted_pdus", l.transmitted_pdus},
                {"retransmissions", l.retransmissions},
                {"lost_pdus", l.lost_pdus},
                {"blocked_slots", l.blocked_slots},
                {"utilization", l.utilization},
            });
        }
        j["nodes"] = nlohmann::json::array();
        for (const auto& n : nodes) {
            j["nodes"].push_back({
                {"name", n.name},
                {"no_route_drops", n.no_route_drops},
                {"fallback_hits", n.fallback_hits},
                {"hd_forced_idle_slots", n.hd_forced_idle_slots},
                {"hd_violations", n.hd_violations},
                {"grant_conflicts", n.grant_conflicts},
            });
        }
        j["adaptation"] = nlohmann::json::array();
        for (const auto& a : adaptation) {
            j["adaptation"].push_back({
                {"slot", a.slot},
                {"trigger", a.trigger},
                {"subject", a.subject},
                {"action", a.action},
                {"in_flight_on_link", a.in_flight_on_link},
                {"purged", a.purged},
                {"rerouted", a.rerouted},
            });
        }
        j["integration"] = nlohmann::json::array();
        for (const auto& e : integration) {
            j["integration"].push_back(
                {{"slot", e.slot}, {"node", e.node}, {"state", e.state}});
        }
        return j;
    }

    /// Flat per-bearer and per-link rows; the column set is fixed.
    void write_csv(std::ostream& os) const {
        os << "kind,id,a,b,qos_class,generated,delivered,lost,in_flight,"
              "mean_latency_slots,p95_latency_slots,transmitted,retransmissions,"
              "utilization,blocked_slots\n";
        for (const auto& [id, b] : bearers) {
            os << "bearer," << b.id << ",,," << b.qos_class << "," << b.generated
               << "," << b.delivered << "," << b.lost << "," << b.in_flight << ","
               << b.mean_latency_slots << "," << b.p95_latency_slots << ",,,,\n";
        }
        for (const auto& l : links) {
            os << "link,," << l.a << "," << l.b << ",,,,,,,," << l.transmitted_pdus
               << "," << l.retransmissions << "," << l.utilization << ","
               << l.blocked_slots << "\n";
        }
    }
};

}  // namespace iabsim::metrics
