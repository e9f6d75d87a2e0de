#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "iabsim/core.hpp"
#include "iabsim/phy.hpp"

namespace iabsim::topo {

using phy::NodeCaps;

enum class NodeRole : std::uint8_t { DonorCu, DonorDu, IabNode, Ue };

inline const char* to_string(NodeRole r) {
    switch (r) {
        case NodeRole::DonorCu: return "donor_cu";
        case NodeRole::DonorDu: return "donor_du";
        case NodeRole::IabNode: return "iab_node";
        default: return "ue";
    }
}

struct Node {
    NodeId id;
    NodeRole role = NodeRole::IabNode;
    NodeCaps caps;
    std::optional<BapAddress> bap_address;  // IAB nodes and donor DUs only
    std::vector<NodeId> parents;            // MT attachment(s); UEs exactly one
    bool operational = false;               // maintained by the control plane

    bool has_mt() const { return role == NodeRole::IabNode || role == NodeRole::Ue; }
    bool has_du() const { return role == NodeRole::IabNode || role == NodeRole::DonorDu; }
};

/// Radio link between two adjacent nodes. Bidirectional with symmetric
/// delay; `blocked` is the dynamic blockage state.
struct Link {
    LinkRef ref;
    NodeId endpoint_a;
    NodeId endpoint_b;
    double propagation_delay_us = 0.0;
    int per_slot_capacity = 1;
    double loss_probability = 0.0;
    bool blocked = false;

    NodeId other(NodeId n) const { return n == endpoint_a ? endpoint_b : endpoint_a; }
    bool connects(NodeId x, NodeId y) const {
        return (endpoint_a == x && endpoint_b == y) || (endpoint_a == y && endpoint_b == x);
    }
};

struct Violation {
    enum class Kind : std::uint8_t { CycleDetected, Unreachable, UeMultihomed, NoDonorDu };
    Kind kind;
    std::vector<NodeId> nodes;
    std::string detail;
};

struct ValidationReport {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
};

/// The network graph plus the identity space. Mutated only by the control
/// plane between slots; read-only during slot processing.
class Topology {
public:
    NodeId add_node(NodeRole role, NodeCaps caps = {}) {
        caps.validate();
        if (role == NodeRole::DonorCu && donor_cu_) {
            throw ConfigError("duplicate DonorCu: a scenario has exactly one");
        }
        Node n;
        n.id = NodeId{next_node_id_++};
        n.role = role;
        n.caps = caps;
        // donor infrastructure is operational from the start
        n.operational = (role == NodeRole::DonorCu || role == NodeRole::DonorDu);
        if (role == NodeRole::DonorCu) donor_cu_ = n.id;
        nodes_.emplace(n.id, n);
        return n.id;
    }

    LinkRef add_link(NodeId a, NodeId b, double delay_us, int capacity,
                     double loss_probability) {
        if (a == b) throw ConfigError("self-link rejected");
        require(a);
        require(b);
        if (find_link(a, b)) throw ConfigError("duplicate link rejected");
        if (delay_us < 0.0) throw ConfigError("link delay must be >= 0");
        if (capacity < 1) throw ConfigError("link capacity must be >= 1 packet/slot");
        if (loss_probability < 0.0 || loss_probability > 1.0) {
            throw ConfigError("link loss probability must be in [0,1]");
        }
        Link l;
        l.ref = LinkRef{static_cast<std::uint32_t>(links_.size())};
        l.endpoint_a = a;
        l.endpoint_b = b;
        l.propagation_delay_us = delay_us;
        l.per_slot_capacity = capacity;
        l.loss_probability = loss_probability;
        links_.push_back(l);
        return l.ref;
    }

    Node& node(NodeId id) { return require(id); }
    const Node& node(NodeId id) const {
        auto it = nodes_.find(id);
        if (it == nodes_.end()) throw ConfigError("unknown node id");
        return it->second;
    }
    bool has_node(NodeId id) const { return nodes_.count(id) != 0; }

    const std::map<NodeId, Node>& nodes() const { return nodes_; }
    const std::vector<Link>& links() const { return links_; }

    Link& link(LinkRef ref) {
        if (ref.value >= links_.size()) throw ConfigError("unknown link ref");
        return links_[ref.value];
    }
    const Link& link(LinkRef ref) const {
        if (ref.value >= links_.size()) throw ConfigError("unknown link ref");
        return links_[ref.value];
    }

    std::optional<LinkRef> find_link(NodeId a, NodeId b) const {
        for (const Link& l : links_) {
            if (l.connects(a, b)) return l.ref;
        }
        return std::nullopt;
    }

    /// Adjacent nodes over existing links, ordered by node id.
    std::vector<NodeId> neighbors(NodeId n) const {
        std::vector<NodeId> out;
        for (const Link& l : links_) {
            if (l.endpoint_a == n) out.push_back(l.endpoint_b);
            else if (l.endpoint_b == n) out.push_back(l.endpoint_a);
        }
        std::sort(out.begin(), out.end());
        return out;
    }

    std::optional<NodeId> donor_cu() const { return donor_cu_; }

    std::vector<NodeId> donor_dus() const {
        std::vector<NodeId> out;
        for (const auto& [id, n] : nodes_) {
            if (n.role == NodeRole::DonorDu) out.push_back(id);
        }
        return out;
    }

    /// Assigns a BAP address, enforcing injectivity over current holders.
    void assign_bap_address(NodeId id, BapAddress addr) {
        Node& n = require(id);
        if (!n.has_du()) {
            throw ConfigError("only IAB nodes and donor DUs hold BAP addresses");
        }
        for (const auto& [other_id, other] : nodes_) {
            if (other_id != id && other.bap_address == addr) {
                throw ConfigError("BAP address " + std::to_string(addr.value()) +
                                  " already held by node " + std::to_string(other_id.value));
            }
        }
        n.bap_address = addr;
    }

    void release_bap_address(NodeId id) { require(id).bap_address.reset(); }

    std::optional<NodeId> node_by_address(BapAddress addr) const {
        for (const auto& [id, n] : nodes_) {
            if (n.bap_address == addr) return id;
        }
        return std::nullopt;
    }

    /// Structural well-formedness report: parent-relation cycles,
    /// operational nodes cut off from every donor DU (over unblocked
    /// links), and multihomed UEs.
    ValidationReport validate() const {
        ValidationReport report;

        if (donor_dus().empty()) {
            report.violations.push_back({Violation::Kind::NoDonorDu, {}, "no donor DU"});
        }

        // cycle detection over the parent relation
        for (const auto& [id, n] : nodes_) {
            if (n.parents.empty()) continue;
            std::set<NodeId> seen{id};
            std::vector<NodeId> frontier{id};
            std::vector<NodeId> chain{id};
            bool cycle = false;
            // follow every parent edge breadth-first; an ancestor equal to
            // the start node is a cycle
            std::deque<NodeId> queue{id};
            while (!queue.empty() && !cycle) {
                NodeId cur = queue.front();
                queue.pop_front();
                for (NodeId p : node(cur).parents) {
                    if (p == id) {
                        cycle = true;
                        chain.push_back(cur);
                        break;
                    }
                    if (seen.insert(p).second) queue.push_back(p);
                }
            }
            if (cycle) {
                report.violations.push_back(
                    {Violation::Kind::CycleDetected, chain,
                     "node " + std::to_string(id.value) + " is its own ancestor"});
            }
        }

        // reachability of operational backhaul nodes from any donor DU,
        // pruning blocked links
        std::set<NodeId> reachable;
        std::deque<NodeId> queue;
        for (NodeId du : donor_dus()) {
            reachable.insert(du);
            queue.push_back(du);
        }
        while (!queue.empty()) {
            NodeId cur = queue.front();
            queue.pop_front();
            for (const Link& l : links_) {
                if (l.blocked) continue;
                if (l.endpoint_a != cur && l.endpoint_b != cur) continue;
                NodeId nxt = l.other(cur);
                const Node& nn = node(nxt);
                if (nn.role != NodeRole::IabNode && nn.role != NodeRole::DonorDu) continue;
                if (reachable.insert(nxt).second) queue.push_back(nxt);
            }
        }
        for (const auto& [id, n] : nodes_) {
            if (n.role == NodeRole::IabNode && n.operational && !reachable.count(id)) {
                report.violations.push_back(
                    {Violation::Kind::Unreachable, {id},
                     "operational node " + std::to_string(id.value) +
                         " cannot reach any donor DU"});
            }
        }

        for (const auto& [id, n] : nodes_) {
            if (n.role == NodeRole::Ue && n.parents.size() > 1) {
                report.violations.push_back(
                    {Violation::Kind::UeMultihomed, {id},
                     "UE " + std::to_string(id.value) + " attached to " +
                         std::to_string(n.parents.size()) + " DUs"});
            }
        }
        return report;
    }

private:
    Node& require(NodeId id) {
        auto it = nodes_.find(id);
        if (it == nodes_.end()) throw ConfigError("unknown node id");
        return it->second;
    }

    std::map<NodeId, Node> nodes_;
    std::vector<Link> links_;
    std::optional<NodeId> donor_cu_;
    std::uint32_t next_node_id_ = 0;  // monotonic; ids are never reused
};

}  // namespace iabsim::topo
