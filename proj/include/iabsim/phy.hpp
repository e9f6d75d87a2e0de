#pragma once

#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "iabsim/core.hpp"

namespace iabsim::phy {

/// Configured transmission direction of a time-domain resource.
enum class SlotDirection : std::uint8_t { Downlink, Uplink, Flexible };

/// DU resource attribute governing when the DU half may use a slot.
enum class DuAttribute : std::uint8_t { Hard, Soft, NotAvailable };

inline const char* to_string(SlotDirection d) {
    switch (d) {
        case SlotDirection::Downlink: return "downlink";
        case SlotDirection::Uplink: return "uplink";
        default: return "flexible";
    }
}

inline const char* to_string(DuAttribute a) {
    switch (a) {
        case DuAttribute::Hard: return "hard";
        case DuAttribute::Soft: return "soft";
        default: return "not_available";
    }
}

/// Capabilities that relax the half-duplex constraint.
struct NodeCaps {
    bool simultaneous_tx_rx = false;  // FDM/SDM between MT and DU
    bool full_duplex = false;         // implies simultaneous_tx_rx
    bool out_of_band = false;         // MT and DU on different carriers

    bool exempt_from_half_duplex() const { return out_of_band || full_duplex; }

    void validate() const {
        if (full_duplex && !simultaneous_tx_rx) {
            throw ConfigError("full_duplex requires simultaneous_tx_rx capability");
        }
    }
};

/// One slot of a node's periodic resource configuration.
struct SlotConfig {
    SlotDirection mt_dir = SlotDirection::Flexible;
    SlotDirection du_dir = SlotDirection::Flexible;
    DuAttribute du_attr = DuAttribute::Hard;

    friend bool operator==(const SlotConfig&, const SlotConfig&) = default;
};

/// Periodic per-slot MT/DU configuration, set only by the donor CU.
struct ResourcePattern {
    std::vector<SlotConfig> slots;

    int period() const { return static_cast<int>(slots.size()); }

    const SlotConfig& at(std::uint64_t slot) const {
        if (slots.empty()) throw ConfigError("empty resource pattern");
        return slots[slot % slots.size()];
    }

    friend bool operator==(const ResourcePattern&, const ResourcePattern&) = default;
};

/// What the MT half is doing (or may be asked to do) in one slot.
struct MtActivity {
    bool has_ul_grant = false;
    bool has_ul_data = false;
    bool expecting_dl = false;
    bool explicit_release = false;  // parent indicated this MT resource unused
};

/// Resolved usability of the two halves for one slot.
struct SlotAvailability {
    bool mt_usable = false;
    std::optional<SlotDirection> mt_dir;
    bool du_usable = false;
    std::optional<SlotDirection> du_dir;
};

namespace detail {

// MT transmits in Uplink slots and receives in Downlink slots. A Flexible
// config can be resolved either way by the parent scheduler, so it never
// rules out concurrent operation on its own.
inline bool directions_compatible(SlotDirection mt, SlotDirection du) {
    if (mt == SlotDirection::Flexible || du == SlotDirection::Flexible) return true;
    const bool mt_tx = (mt == SlotDirection::Uplink);
    const bool du_tx = (du == SlotDirection::Downlink);
    return mt_tx == du_tx;  // both transmit or both receive
}

}  // namespace detail

/// Resolves the half-duplex decision table for one node and slot.
///
/// Out-of-band and full-duplex nodes escape the constraint entirely. For
/// in-band nodes a Hard DU slot preempts the MT, a NotAvailable DU slot
/// yields to the MT, and a Soft DU slot is usable only when the MT is
/// provably unaffected (explicit release, implicit idleness, or a
/// simultaneity capability with compatible directions).
inline SlotAvailability resolve_slot_availability(SlotDirection mt_cfg,
                                                  SlotDirection du_cfg,
                                                  DuAttribute du_attr,
                                                  const MtActivity& activity,
                                                  const NodeCaps& caps) {
    SlotAvailability out;
    out.mt_dir = mt_cfg;
    out.du_dir = du_cfg;

    if (caps.exempt_from_half_duplex()) {
        out.du_usable = (du_attr != DuAttribute::NotAvailable);
        out.mt_usable = true;
        if (!out.du_usable) out.du_dir.reset();
        return out;
    }

    switch (du_attr) {
        case DuAttribute::Hard:
            out.du_usable = true;
            out.mt_usable = false;
            out.mt_dir.reset();
            return out;
        case DuAttribute::NotAvailable:
            out.du_usable = false;
            out.du_dir.reset();
            out.mt_usable = true;
            return out;
        case DuAttribute::Soft:
            break;
    }

    const bool implicit_idle =
        (!activity.has_ul_grant || !activity.has_ul_data) && !activity.expecting_dl;
    const bool simultaneous_ok =
        caps.simultaneous_tx_rx && detail::directions_compatible(mt_cfg, du_cfg);

    out.du_usable = activity.explicit_release || implicit_idle || simultaneous_ok;
    out.mt_usable = !out.du_usable || caps.simultaneous_tx_rx;
    if (!out.du_usable) out.du_dir.reset();
    if (!out.mt_usable) out.mt_dir.reset();
    return out;
}

/// Availability for a node with no MT half (the donor DU).
inline SlotAvailability resolve_du_only(SlotDirection du_cfg, DuAttribute du_attr) {
    SlotAvailability out;
    out.du_usable = (du_attr != DuAttribute::NotAvailable);
    if (out.du_usable) out.du_dir = du_cfg;
    return out;
}

/// Semi-static resource separation for a chain of IAB nodes: the period is
/// split into group A (first half) and group B (second half); even depths
/// get Hard DU slots in A and NotAvailable in B, odd depths the reverse.
/// Element 0 of the result is the donor DU (depth 0), element i the IAB
/// node at depth i. Every parent's Hard slots line up with its child's
/// MT-usable slots by construction.
inline std::vector<ResourcePattern> generate_semi_static_pattern(int chain_depth,
                                                                 int period) {
    if (period < 2 || period % 2 != 0) {
        throw ConfigError("semi-static pattern period must be even and >= 2");
    }
    if (chain_depth < 1) {
        throw ConfigError("chain depth must be >= 1");
    }
    std::vector<ResourcePattern> patterns;
    patterns.reserve(static_cast<std::size_t>(chain_depth) + 1);
    const int half = period / 2;
    for (int depth = 0; depth <= chain_depth; ++depth) {
        ResourcePattern p;
        p.slots.resize(static_cast<std::size_t>(period));
        for (int s = 0; s < period; ++s) {
            const bool group_a = s < half;
            const bool hard_in_a = (depth % 2 == 0);
            SlotConfig& cfg = p.slots[static_cast<std::size_t>(s)];
            cfg.mt_dir = SlotDirection::Flexible;
            cfg.du_dir = SlotDirection::Flexible;
            cfg.du_attr = (group_a == hard_in_a) ? DuAttribute::Hard
                                                 : DuAttribute::NotAvailable;
        }
        patterns.push_back(std::move(p));
    }
    return patterns;
}

/// Which side of the node owns a set of random-access occasions.
enum class OccasionSide : std::uint8_t { DuOccasions, MtOccasions };

enum class PreambleFormat : std::uint8_t { ShortRange, LongRange };

/// Periodic random-access occasion configuration.
struct RachConfig {
    OccasionSide owner_side = OccasionSide::DuOccasions;
    int period = 1;           // slots
    int time_offset = 0;      // slots, 0 <= offset < period
    PreambleFormat preamble_format = PreambleFormat::ShortRange;
    int occasions_per_period = 1;

    void validate() const {
        if (period < 1) throw ConfigError("RACH period must be >= 1");
        if (time_offset < 0 || time_offset >= period) {
            throw ConfigError("RACH time_offset must satisfy 0 <= offset < period");
        }
        if (occasions_per_period < 1 || occasions_per_period > period) {
            throw ConfigError("RACH occasions_per_period must be in [1, period]");
        }
    }
};

/// Periodic SSB transmission configuration. Offset SSBs serve inter-node
/// discovery only and must not be advertised for UE cell search.
struct SsbConfig {
    int period = 1;       // slots
    int time_offset = 0;  // slots
    bool for_ue_cell_search = true;

    void validate() const {
        if (period < 1) throw ConfigError("SSB period must be >= 1");
        if (time_offset < 0 || time_offset >= period) {
            throw ConfigError("SSB time_offset must satisfy 0 <= offset < period");
        }
        if (time_offset != 0 && for_ue_cell_search) {
            throw ConfigError("time-offset SSB cannot be used for UE cell search");
        }
    }
};

/// Occasion view shared by RACH and SSB configs for collision checking.
struct OccasionPattern {
    int period = 1;
    int time_offset = 0;
    int occasions_per_period = 1;

    OccasionPattern() = default;
    OccasionPattern(int p, int off, int n)
        : period(p), time_offset(off), occasions_per_period(n) {}
    OccasionPattern(const RachConfig& c)  // NOLINT: intentional implicit view
        : period(c.period), time_offset(c.time_offset),
          occasions_per_period(c.occasions_per_period) {}
    OccasionPattern(const SsbConfig& c)  // NOLINT
        : period(c.period), time_offset(c.time_offset), occasions_per_period(1) {}

    bool occupies(std::uint64_t slot) const {
        const int phase = static_cast<int>(slot % static_cast<std::uint64_t>(period));
        // occasions occupy offset, offset+1, ... (mod period)
        int rel = phase - time_offset;
        if (rel < 0) rel += period;
        return rel < occasions_per_period;
    }
};

struct CollisionCheck {
    bool disjoint = true;
    std::optional<std::uint64_t> first_collision_slot;
};

/// Enumerates occasion slots of both configurations over one full common
/// period (lcm of the two periods) and reports the first shared slot.
inline CollisionCheck check_occasion_collision(const OccasionPattern& a,
                                               const OccasionPattern& b) {
    if (a.period < 1 || b.period < 1) {
        throw ConfigError("occasion periods must be >= 1");
    }
    const std::uint64_t span =
        std::lcm(static_cast<std::uint64_t>(a.period), static_cast<std::uint64_t>(b.period));
    CollisionCheck result;
    for (std::uint64_t s = 0; s < span; ++s) {
        if (a.occupies(s) && b.occupies(s)) {
            result.disjoint = false;
            result.first_collision_slot = s;
            break;
        }
    }
    return result;
}

/// Over-the-air timing state of one node.
struct TimingState {
    double dl_tx_time_us = 0.0;
    // UL tx time minus DL rx time at this node (inherently known locally).
    double offset_node_us = 0.0;
    // UL rx time minus DL tx time at the parent (signaled by the parent).
    double offset_parent_us = 0.0;
    double estimated_prop_delay_us = 0.0;
    bool reference_synced = false;  // true when timing comes from GPS, not OTA
};

/// Propagation-delay estimate from the two signaled timing offsets.
///
/// With propagation delay p: DL rx = parent DL tx + p and parent UL rx =
/// node UL tx + p, hence offset_parent = offset_node + 2p.
inline double estimate_propagation_delay(double offset_node_us,
                                         double offset_parent_us) {
    return (offset_parent_us - offset_node_us) / 2.0;
}

/// A node aligns its own DL transmissions to the instant its parent
/// transmitted, reconstructed from local rx time and the delay estimate.
inline double derive_dl_tx_timing(double dl_rx_time_us,
                                  double estimated_prop_delay_us) {
    return dl_rx_time_us - estimated_prop_delay_us;
}

}  // namespace iabsim::phy
