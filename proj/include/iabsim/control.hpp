#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "iabsim/bap.hpp"
#include "iabsim/core.hpp"
#include "iabsim/topology.hpp"

namespace iabsim::control {

/// Lifecycle of an IAB node: three integration steps, then service.
enum class IntegrationState : std::uint8_t {
    Detached,
    MtAccess,
    BhSetup,
    F1Setup,
    Operational,
};

inline const char* to_string(IntegrationState s) {
    switch (s) {
        case IntegrationState::Detached: return "detached";
        case IntegrationState::MtAccess: return "mt_access";
        case IntegrationState::BhSetup: return "bh_setup";
        case IntegrationState::F1Setup: return "f1_setup";
        default: return "operational";
    }
}

/// Transitions run strictly forward through the integration steps; any
/// state may fall back to Detached on release or failure.
inline bool legal_transition(IntegrationState from, IntegrationState to) {
    if (to == IntegrationState::Detached) return true;
    switch (from) {
        case IntegrationState::Detached: return to == IntegrationState::MtAccess;
        case IntegrationState::MtAccess: return to == IntegrationState::BhSetup;
        case IntegrationState::BhSetup: return to == IntegrationState::F1Setup;
        case IntegrationState::F1Setup: return to == IntegrationState::Operational;
        case IntegrationState::Operational: return false;
    }
    return false;
}

struct AdaptationTrigger {
    enum class Kind : std::uint8_t {
        NewNodeIntegration,
        NodeDetachment,
        LinkOverload,
        LinkQualityDegraded,
        LinkFailure,
    };
    Kind kind = Kind::LinkFailure;
    std::int64_t slot = 0;
    std::optional<LinkRef> link;
    std::optional<NodeId> node;
    double metric = 0.0;  // utilization or quality metric where applicable
};

inline const char* to_string(AdaptationTrigger::Kind k) {
    switch (k) {
        case AdaptationTrigger::Kind::NewNodeIntegration: return "new_node_integration";
        case AdaptationTrigger::Kind::NodeDetachment: return "node_detachment";
        case AdaptationTrigger::Kind::LinkOverload: return "link_overload";
        case AdaptationTrigger::Kind::LinkQualityDegraded: return "link_quality_degraded";
        default: return "link_failure";
    }
}

enum class CuMessageKind : std::uint8_t {
    AssignBapAddress,
    InstallRoutingTable,
    EstablishBhChannel,
    ReleaseBhChannel,
    InstallBearerMap,
    SetResourcePattern,
    ExplicitSoftRelease,
    F1SetupRequest,
    F1SetupResponse,
    ConfigAck,
};

inline const char* to_string(CuMessageKind k) {
    switch (k) {
        case CuMessageKind::AssignBapAddress: return "assign_bap_address";
        case CuMessageKind::InstallRoutingTable: return "install_routing_table";
        case CuMessageKind::EstablishBhChannel: return "establish_bh_channel";
        case CuMessageKind::ReleaseBhChannel: return "release_bh_channel";
        case CuMessageKind::InstallBearerMap: return "install_bearer_map";
        case CuMessageKind::SetResourcePattern: return "set_resource_pattern";
        case CuMessageKind::ExplicitSoftRelease: return "explicit_soft_release";
        case CuMessageKind::F1SetupRequest: return "f1_setup_request";
        case CuMessageKind::F1SetupResponse: return "f1_setup_response";
        default: return "config_ack";
    }
}

/// One CU-computed path: the node sequence from the donor DU to the
/// destination node (inclusive).
struct RegisteredPath {
    BapAddress destination;
    PathId path_id;
    std::vector<NodeId> nodes;  // donor DU first
};

/// Result of a full route computation.
struct RouteComputation {
    std::map<NodeId, bap::RoutingTable> dl_tables;
    std::map<NodeId, bap::RoutingTable> ul_tables;
    // DL paths keyed by (destination address, path id)
    std::map<std::pair<std::uint16_t, std::uint16_t>, RegisteredPath> dl_paths;
    // serving donor DU per backhaul node
    std::map<NodeId, NodeId> serving_donor;
    // nodes that should be operational but have no route
    std::vector<NodeId> unreachable;
};

namespace detail {

struct PathCandidate {
    std::vector<NodeId> nodes;
    std::vector<std::uint16_t> addrs;

    bool better_than(const PathCandidate& other) const {
        if (nodes.size() != other.nodes.size()) return nodes.size() < other.nodes.size();
        return addrs < other.addrs;
    }
};

/// Shortest path by hop count, ties broken by the lexicographically
/// smallest BAP-address sequence. Small graphs only.
inline std::optional<PathCandidate> shortest_path(
    const topo::Topology& topo, NodeId from, NodeId to,
    const std::set<LinkRef>& excluded_links, const std::set<NodeId>& excluded_nodes,
    const std::set<NodeId>& allowed) {
    std::map<NodeId, PathCandidate> best;
    auto addr_of = [&](NodeId n) -> std::uint16_t {
        const auto& node = topo.node(n);
        return node.bap_address ? node.bap_address->value() : 0xFFFF;
    };
    best[from] = {{from}, {addr_of(from)}};
    // Bellman-Ford style relaxation keeps the comparison rule simple
    bool changed = true;
    while (changed) {
        changed = false;
        for (const topo::Link& l : topo.links()) {
            if (excluded_links.count(l.ref)) continue;
            if (!allowed.count(l.endpoint_a) || !allowed.count(l.endpoint_b)) continue;
            for (auto [src, dst] : {std::pair{l.endpoint_a, l.endpoint_b},
                                    std::pair{l.endpoint_b, l.endpoint_a}}) {
                if (excluded_nodes.count(dst) && dst != to) continue;
                auto it = best.find(src);
                if (it == best.end()) continue;
                if (std::find(it->second.nodes.begin(), it->second.nodes.end(), dst) !=
                    it->second.nodes.end()) {
                    continue;  // never extend a path through itself
                }
                PathCandidate cand = it->second;
                cand.nodes.push_back(dst);
                cand.addrs.push_back(addr_of(dst));
                auto cur = best.find(dst);
                if (cur == best.end() || cand.better_than(cur->second)) {
                    best[dst] = std::move(cand);
                    changed = true;
                }
            }
        }
    }
    auto it = best.find(to);
    if (it == best.end()) return std::nullopt;
    return it->second;
}

}  // namespace detail

/// Computes per-node DL and UL routing tables plus the path registry.
///
/// Destinations are all addressed IAB nodes; transit is restricted to
/// operational nodes. Path 0 is the hop-count shortest path from the
/// serving donor DU (tie-break: lowest BAP-address sequence); path 1, when
/// it exists, is the shortest alternative that is node-disjoint from path 0
/// after the donor DU. A destination listed in `pinned_parent` keeps its
/// radio attachment: its path is the parent's path 0 plus the final hop,
/// and it gets no alternative. UL entries mirror each path toward the
/// donor, keyed by the donor DU's address; when two paths would disagree at
/// a shared node the first installed entry wins and the later path follows
/// it from that point on.
inline RouteComputation compute_routing_tables(
    const topo::Topology& topo, const std::set<LinkRef>& failed_links,
    const std::map<NodeId, NodeId>& pinned_parent = {}) {
    RouteComputation out;

    std::set<NodeId> transit;
    std::vector<NodeId> donors;
    for (const auto& [id, n] : topo.nodes()) {
        if (n.role == topo::NodeRole::DonorDu && n.bap_address) {
            transit.insert(id);
            donors.push_back(id);
        }
        if (n.role == topo::NodeRole::IabNode && n.operational && n.bap_address) {
            transit.insert(id);
        }
    }
    std::sort(donors.begin(), donors.end());

    auto table_of = [&](std::map<NodeId, bap::RoutingTable>& tables, NodeId owner,
                        Direction dir) -> bap::RoutingTable& {
        auto it = tables.find(owner);
        if (it == tables.end()) {
            bap::RoutingTable t;
            t.owner = owner;
            t.direction = dir;
            it = tables.emplace(owner, std::move(t)).first;
        }
        return it->second;
    };

    auto install_paths = [&](NodeId dest,
                             const std::vector<std::pair<PathId, std::vector<NodeId>>>& paths) {
        const BapAddress dest_addr = *topo.node(dest).bap_address;
        for (const auto& [pid, nodes] : paths) {
            out.dl_paths[{dest_addr.value(), pid.value()}] = {dest_addr, pid, nodes};
            const BapAddress donor_addr = *topo.node(nodes.front()).bap_address;
            for (std::size_t i = 0; i + 1 < nodes.size(); ++i) {
                // DL: entry at every node before the destination
                auto& dl = table_of(out.dl_tables, nodes[i], Direction::Dl);
                dl.entries.emplace(bap::BapRoutingId{dest_addr, pid}, nodes[i + 1]);
                // UL: mirrored entry at every node after the donor; first
                // writer wins at shared nodes
                auto& ul = table_of(out.ul_tables, nodes[i + 1], Direction::Ul);
                ul.entries.emplace(bap::BapRoutingId{donor_addr, pid}, nodes[i]);
            }
        }
    };

    // destinations in ascending address order keeps conflicts deterministic
    std::vector<std::pair<std::uint16_t, NodeId>> dests;
    for (const auto& [id, n] : topo.nodes()) {
        if (n.role == topo::NodeRole::IabNode && n.bap_address) {
            dests.emplace_back(n.bap_address->value(), id);
        }
    }
    std::sort(dests.begin(), dests.end());

    std::map<NodeId, std::vector<NodeId>> path0_of;

    // pass 1: free destinations
    for (auto [addr_value, dest] : dests) {
        if (pinned_parent.count(dest)) continue;
        std::set<NodeId> allowed = transit;
        allowed.insert(dest);
        std::optional<detail::PathCandidate> path0;
        NodeId serving{};
        for (NodeId donor : donors) {
            auto cand = detail::shortest_path(topo, donor, dest, failed_links, {}, allowed);
            if (!cand) continue;
            if (!path0 || cand->better_than(*path0)) {
                path0 = cand;
                serving = donor;
            }
        }
        if (!path0) {
            out.unreachable.push_back(dest);
            continue;
        }
        out.serving_donor[dest] = serving;
        path0_of[dest] = path0->nodes;

        std::vector<std::pair<PathId, std::vector<NodeId>>> paths;
        paths.emplace_back(PathId(0), path0->nodes);

        // path 1: node-disjoint after the donor DU
        std::set<NodeId> forbidden(path0->nodes.begin() + 1, path0->nodes.end());
        forbidden.erase(dest);
        std::set<LinkRef> excluded = failed_links;
        if (forbidden.empty()) {
            // direct path: the alternative must avoid the direct link
            if (auto direct = topo.find_link(serving, dest)) excluded.insert(*direct);
        }
        auto alt = detail::shortest_path(topo, serving, dest, excluded, forbidden, allowed);
        if (alt && alt->nodes != path0->nodes) {
            paths.emplace_back(PathId(1), alt->nodes);
        }
        install_paths(dest, paths);
    }

    // pass 2: destinations pinned to their radio parent
    for (auto [addr_value, dest] : dests) {
        auto pin = pinned_parent.find(dest);
        if (pin == pinned_parent.end()) continue;
        const NodeId parent = pin->second;
        auto link = topo.find_link(parent, dest);
        const bool link_ok = link && !failed_links.count(*link);
        std::vector<NodeId> path;
        if (link_ok) {
            if (topo.node(parent).role == topo::NodeRole::DonorDu) {
                path = {parent, dest};
                out.serving_donor[dest] = parent;
            } else if (path0_of.count(parent)) {
                path = path0_of.at(parent);
                path.push_back(dest);
                out.serving_donor[dest] = path.front();
            }
        }
        if (path.empty()) {
            out.unreachable.push_back(dest);
            continue;
        }
        path0_of[dest] = path;
        install_paths(dest, {{PathId(0), path}});
    }
    return out;
}

/// Walks installed tables from an origin, reproducing exactly what the
/// forwarding plane will do (including the path-id fallback). Returns the
/// node sequence, or nullopt on a loop / missing route.
inline std::optional<std::vector<NodeId>> walk_route(
    const topo::Topology& topo, const std::map<NodeId, bap::RoutingTable>& tables,
    NodeId origin, const bap::BapRoutingId& id) {
    std::vector<NodeId> path{origin};
    std::set<NodeId> visited{origin};
    NodeId cur = origin;
    while (true) {
        const auto& node = topo.node(cur);
        if (node.bap_address && *node.bap_address == id.destination) return path;
        auto it = tables.find(cur);
        if (it == tables.end()) return std::nullopt;
        auto decision = bap::route_next_hop(it->second, id, node.bap_address);
        if (decision.kind != bap::RoutingDecision::Kind::NextHop) return std::nullopt;
        cur = decision.next_hop;
        if (!visited.insert(cur).second) return std::nullopt;  // loop
        path.push_back(cur);
    }
}

/// Allocates the lowest BAP address that is neither currently held nor
/// still referenced by any routing-table entry (a released address stays
/// quarantined until the tables that mention it are purged).
class BapAddressAllocator {
public:
    std::optional<BapAddress> allocate(const topo::Topology& topo,
                                       const std::map<NodeId, bap::RoutingTable>& dl,
                                       const std::map<NodeId, bap::RoutingTable>& ul) {
        std::set<std::uint16_t> taken;
        for (const auto& [id, n] : topo.nodes()) {
            if (n.bap_address) taken.insert(n.bap_address->value());
        }
        for (const auto* tables : {&dl, &ul}) {
            for (const auto& [owner, table] : *tables) {
                for (const auto& [rid, hop] : table.entries) {
                    taken.insert(rid.destination.value());
                }
            }
        }
        for (std::uint32_t v = 0; v <= kBapAddressMax; ++v) {
            if (!taken.count(static_cast<std::uint16_t>(v))) {
                return BapAddress(static_cast<std::uint16_t>(v));
            }
        }
        return std::nullopt;
    }
};

/// Per-slot explicit-release ledger with the grant/release consistency
/// guard: a slot that was released to the child's DU can no longer carry a
/// grant for the child's MT, and vice versa.
class SoftReleaseBook {
public:
    bool issue_release(NodeId parent, NodeId child, std::int64_t slot) {
        if (granted_.count({parent, child, slot})) return false;  // already granted
        released_.insert({parent, child, slot});
        return true;
    }

    bool note_grant(NodeId parent, NodeId child, std::int64_t slot) {
        if (released_.count({parent, child, slot})) return false;  // release wins
        granted_.insert({parent, child, slot});
        return true;
    }

    bool released(NodeId parent, NodeId child, std::int64_t slot) const {
        return released_.count({parent, child, slot}) != 0;
    }

    void forget_before(std::int64_t slot) {
        std::erase_if(released_, [&](const Key& k) { return std::get<2>(k) < slot; });
        std::erase_if(granted_, [&](const Key& k) { return std::get<2>(k) < slot; });
    }

private:
    using Key = std::tuple<NodeId, NodeId, std::int64_t>;
    std::set<Key> released_;
    std::set<Key> granted_;
};

}  // namespace iabsim::control
