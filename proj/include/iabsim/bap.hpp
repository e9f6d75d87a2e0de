#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "iabsim/core.hpp"

namespace iabsim::bap {

/// The L2 routing label carried by every backhauled packet.
struct BapRoutingId {
    BapAddress destination;
    PathId path_id;

    friend auto operator<=>(const BapRoutingId&, const BapRoutingId&) = default;
};

/// Decoded BAP header. On the wire it is exactly 3 octets:
///
///   octet 0: [ D/C | reserved(3) | destination bits 9..6 ]
///   octet 1: [ destination bits 5..0 | path_id bits 9..8 ]
///   octet 2: [ path_id bits 7..0 ]
///
/// with the most significant bit first within each octet.
struct BapHeader {
    bool data_control_flag = true;  // true = data PDU
    std::uint8_t reserved = 0;      // 3 bits, zero on encode
    BapAddress destination;
    PathId path_id;

    BapRoutingId routing_id() const { return {destination, path_id}; }

    friend bool operator==(const BapHeader&, const BapHeader&) = default;
};

inline constexpr std::size_t kBapHeaderSize = 3;

using EncodedHeader = std::array<std::uint8_t, kBapHeaderSize>;

inline EncodedHeader encode_header(const BapHeader& h) {
    if (h.reserved != 0) {
        throw ConfigError("BAP header reserved bits must be zero on encode");
    }
    const std::uint16_t dest = h.destination.value();
    const std::uint16_t path = h.path_id.value();
    EncodedHeader out{};
    out[0] = static_cast<std::uint8_t>((h.data_control_flag ? 0x80 : 0x00) |
                                       ((dest >> 6) & 0x0F));
    out[1] = static_cast<std::uint8_t>(((dest & 0x3F) << 2) | ((path >> 8) & 0x03));
    out[2] = static_cast<std::uint8_t>(path & 0xFF);
    return out;
}

struct DecodedHeader {
    BapHeader header;
    bool reserved_nonzero = false;  // accepted, surfaced as a warning
};

inline DecodedHeader decode_header(std::span<const std::uint8_t> bytes) {
    if (bytes.size() != kBapHeaderSize) {
        throw MalformedHeader("BAP header must be exactly 3 octets, got " +
                              std::to_string(bytes.size()));
    }
    DecodedHeader out;
    out.header.data_control_flag = (bytes[0] & 0x80) != 0;
    const std::uint8_t reserved = (bytes[0] >> 4) & 0x07;
    out.reserved_nonzero = reserved != 0;
    out.header.reserved = 0;  // normalized; flag carries the observation
    const std::uint16_t dest = static_cast<std::uint16_t>(((bytes[0] & 0x0F) << 6) |
                                                          ((bytes[1] >> 2) & 0x3F));
    const std::uint16_t path =
        static_cast<std::uint16_t>(((bytes[1] & 0x03) << 8) | bytes[2]);
    out.header.destination = BapAddress(dest);
    out.header.path_id = PathId(path);
    return out;
}

/// Per-node, per-direction map from routing ID to next hop. Written only by
/// the donor CU; the DL table is consulted by the DU half, the UL table by
/// the MT half.
struct RoutingTable {
    Direction direction = Direction::Dl;
    NodeId owner;
    std::map<BapRoutingId, NodeId> entries;
};

struct RoutingDecision {
    enum class Kind : std::uint8_t { DeliverLocally, NextHop, NoRoute };
    Kind kind = Kind::NoRoute;
    NodeId next_hop;
    bool used_fallback = false;  // destination-only match on unknown path_id
};

/// Next-hop selection: self-delivery first, then an exact (destination,
/// path) match, then a destination-only fallback picking the lowest path_id
/// so traffic keeps flowing across reconfiguration races.
inline RoutingDecision route_next_hop(const RoutingTable& table,
                                      const BapRoutingId& id,
                                      std::optional<BapAddress> self_address) {
    RoutingDecision decision;
    if (self_address && id.destination == *self_address) {
        decision.kind = RoutingDecision::Kind::DeliverLocally;
        return decision;
    }
    if (auto it = table.entries.find(id); it != table.entries.end()) {
        decision.kind = RoutingDecision::Kind::NextHop;
        decision.next_hop = it->second;
        return decision;
    }
    // entries are ordered by (destination, path_id); lower_bound lands on the
    // lowest path_id for this destination if any entry exists
    auto it = table.entries.lower_bound({id.destination, PathId(0)});
    if (it != table.entries.end() && it->first.destination == id.destination) {
        decision.kind = RoutingDecision::Kind::NextHop;
        decision.next_hop = it->second;
        decision.used_fallback = true;
        return decision;
    }
    decision.kind = RoutingDecision::Kind::NoRoute;
    return decision;
}

/// QoS profile of a UE radio bearer; priority is the total order used by
/// the slot scheduler (lower value = more urgent).
struct QosProfile {
    std::uint8_t qos_class = 0;
    int priority = 0;
    double packet_delay_budget_ms = 0.0;
};

enum class MappingPolicy : std::uint8_t { OneToOne, ManyToOne };

inline const char* to_string(MappingPolicy p) {
    return p == MappingPolicy::OneToOne ? "one_to_one" : "many_to_one";
}

using BearerId = std::uint32_t;
using ChannelId = std::uint32_t;

/// Hop-by-hop ARQ channel between adjacent nodes. Carries either exactly
/// one UE bearer (1:1) or all bearers of one QoS class (N:1).
struct BhRlcChannel {
    ChannelId id = 0;
    LinkRef link;
    int priority = 0;
    MappingPolicy mapping_kind = MappingPolicy::ManyToOne;
    // OneToOne: the dedicated bearer; ManyToOne: the multiplexed qos_class.
    std::uint32_t mapping_key = 0;
    bool is_control = false;  // dedicated F1-AP channel
};

/// Channel store kept by the donor CU (and mirrored at the nodes).
class ChannelRegistry {
public:
    ChannelId establish(LinkRef link, int priority, MappingPolicy kind,
                        std::uint32_t key, bool is_control = false) {
        BhRlcChannel ch;
        ch.id = next_id_++;
        ch.link = link;
        ch.priority = priority;
        ch.mapping_kind = kind;
        ch.mapping_key = key;
        ch.is_control = is_control;
        channels_.emplace(ch.id, ch);
        if (kind == MappingPolicy::ManyToOne && !is_control) {
            class_index_[{link, key}] = ch.id;
        }
        return ch.id;
    }

    void release(ChannelId id) {
        auto it = channels_.find(id);
        if (it == channels_.end()) return;
        if (it->second.mapping_kind == MappingPolicy::ManyToOne && !it->second.is_control) {
            class_index_.erase({it->second.link, it->second.mapping_key});
        }
        channels_.erase(it);
    }

    const BhRlcChannel* find(ChannelId id) const {
        auto it = channels_.find(id);
        return it == channels_.end() ? nullptr : &it->second;
    }

    std::optional<ChannelId> find_class_channel(LinkRef link, std::uint8_t qos_class) const {
        auto it = class_index_.find({link, qos_class});
        if (it == class_index_.end()) return std::nullopt;
        return it->second;
    }

    const std::map<ChannelId, BhRlcChannel>& all() const { return channels_; }

private:
    std::map<ChannelId, BhRlcChannel> channels_;
    std::map<std::pair<LinkRef, std::uint32_t>, ChannelId> class_index_;
    ChannelId next_id_ = 1;
};

/// Channel assignment of one bearer: one channel per hop along its path.
struct BearerMapping {
    BearerId bearer = 0;
    std::vector<LinkRef> hops;          // ordered donor -> access node
    std::vector<ChannelId> channels;    // parallel to hops
    BapRoutingId dl_routing_id;         // used when originating DL PDUs
    BapRoutingId ul_routing_id;         // used when originating UL PDUs
};

/// Maps one ingress bearer onto per-hop BH RLC channels. OneToOne creates a
/// fresh dedicated channel per hop; ManyToOne reuses the per-class channel
/// of each hop, creating it on first use.
inline std::vector<ChannelId> map_ingress_bearer(BearerId bearer,
                                                 const QosProfile& qos,
                                                 MappingPolicy policy,
                                                 std::span<const LinkRef> path,
                                                 ChannelRegistry& registry) {
    if (path.empty()) {
        throw MappingIncomplete("bearer " + std::to_string(bearer) +
                                " has an empty hop list");
    }
    std::vector<ChannelId> out;
    out.reserve(path.size());
    for (LinkRef hop : path) {
        if (policy == MappingPolicy::OneToOne) {
            out.push_back(registry.establish(hop, qos.priority,
                                             MappingPolicy::OneToOne, bearer));
        } else {
            auto existing = registry.find_class_channel(hop, qos.qos_class);
            if (existing) {
                out.push_back(*existing);
            } else {
                out.push_back(registry.establish(hop, qos.priority,
                                                 MappingPolicy::ManyToOne,
                                                 qos.qos_class));
            }
        }
    }
    return out;
}

}  // namespace iabsim::bap
