#include <catch2/catch_amalgamated.hpp>

#include "iabsim/phy.hpp"

#include <set>
#include <random>

using namespace iabsim;
using namespace iabsim::phy;

namespace {

// Independent transcription of the availability rules, kept deliberately
// flat so it can be eyeballed against the documented decision table.
struct Expected {
    bool mt;
    bool du;
};

Expected oracle_availability(SlotDirection mt_dir, SlotDirection du_dir,
                             DuAttribute attr, const MtActivity& act,
                             const NodeCaps& caps) {
    if (caps.out_of_band || caps.full_duplex) {
        return {true, attr != DuAttribute::NotAvailable};
    }
    if (attr == DuAttribute::Hard) return {false, true};
    if (attr == DuAttribute::NotAvailable) return {true, false};
    // Soft
    bool mt_idle = (!act.has_ul_grant || !act.has_ul_data) && !act.expecting_dl;
    bool compatible = true;
    if (mt_dir != SlotDirection::Flexible && du_dir != SlotDirection::Flexible) {
        bool mt_tx = mt_dir == SlotDirection::Uplink;
        bool du_tx = du_dir == SlotDirection::Downlink;
        compatible = (mt_tx == du_tx);
    }
    bool du = act.explicit_release || mt_idle || (caps.simultaneous_tx_rx && compatible);
    bool mt = !du || caps.simultaneous_tx_rx;
    return {mt, du};
}

const SlotDirection kDirs[] = {SlotDirection::Downlink, SlotDirection::Uplink,
                               SlotDirection::Flexible};
const DuAttribute kAttrs[] = {DuAttribute::Hard, DuAttribute::Soft,
                              DuAttribute::NotAvailable};

}  // namespace

TEST_CASE("hard DU slot preempts the MT", "[phy]") {
    // mt=Uplink, du=(Downlink, Hard), no capabilities
    auto avail = resolve_slot_availability(SlotDirection::Uplink,
                                           SlotDirection::Downlink,
                                           DuAttribute::Hard, {}, {});
    CHECK(avail.du_usable);
    CHECK(avail.du_dir == SlotDirection::Downlink);
    CHECK_FALSE(avail.mt_usable);
    CHECK_FALSE(avail.mt_dir.has_value());
}

TEST_CASE("soft DU slot usable when the MT has no grant", "[phy]") {
    MtActivity act;
    act.has_ul_grant = false;
    act.has_ul_data = true;
    auto avail = resolve_slot_availability(SlotDirection::Uplink,
                                           SlotDirection::Uplink,
                                           DuAttribute::Soft, act, {});
    CHECK(avail.du_usable);
    CHECK_FALSE(avail.mt_usable);
}

TEST_CASE("not-available DU slot yields to the MT", "[phy]") {
    for (SlotDirection mt : kDirs) {
        for (SlotDirection du : kDirs) {
            auto avail = resolve_slot_availability(mt, du, DuAttribute::NotAvailable,
                                                   {}, {});
            CHECK_FALSE(avail.du_usable);
            CHECK(avail.mt_usable);
            CHECK(avail.mt_dir == mt);
        }
    }
}

TEST_CASE("full duplex node always gets its soft resource", "[phy]") {
    NodeCaps caps;
    caps.simultaneous_tx_rx = true;
    caps.full_duplex = true;
    MtActivity busy;
    busy.has_ul_grant = true;
    busy.has_ul_data = true;
    busy.expecting_dl = true;
    auto avail = resolve_slot_availability(SlotDirection::Uplink,
                                           SlotDirection::Downlink,
                                           DuAttribute::Soft, busy, caps);
    CHECK(avail.du_usable);
    CHECK(avail.mt_usable);
}

TEST_CASE("out-of-band node is exempt from half-duplex entirely", "[phy]") {
    NodeCaps caps;
    caps.out_of_band = true;
    MtActivity busy;
    busy.has_ul_grant = true;
    busy.has_ul_data = true;
    for (DuAttribute attr : kAttrs) {
        auto avail = resolve_slot_availability(SlotDirection::Uplink,
                                               SlotDirection::Uplink, attr, busy, caps);
        CHECK(avail.mt_usable);
        CHECK(avail.du_usable == (attr != DuAttribute::NotAvailable));
    }
}

TEST_CASE("availability matches the decision table over the full domain", "[phy]") {
    const NodeCaps caps_cases[] = {
        {},                          // plain in-band
        {true, false, false},        // FDM/SDM capable
        {true, true, false},         // full duplex
        {false, false, true},        // out of band
    };
    int checked = 0;
    for (SlotDirection mt : kDirs) {
        for (SlotDirection du : kDirs) {
            for (DuAttribute attr : kAttrs) {
                for (int flags = 0; flags < 16; ++flags) {
                    MtActivity act;
                    act.has_ul_grant = flags & 1;
                    act.has_ul_data = flags & 2;
                    act.expecting_dl = flags & 4;
                    act.explicit_release = flags & 8;
                    for (const NodeCaps& caps : caps_cases) {
                        auto got = resolve_slot_availability(mt, du, attr, act, caps);
                        auto want = oracle_availability(mt, du, attr, act, caps);
                        REQUIRE(got.mt_usable == want.mt);
                        REQUIRE(got.du_usable == want.du);
                        // in-band non-capable nodes never get both halves
                        if (!caps.simultaneous_tx_rx && !caps.out_of_band) {
                            REQUIRE_FALSE((got.mt_usable && got.du_usable));
                        }
                        ++checked;
                    }
                }
            }
        }
    }
    CHECK(checked == 3 * 3 * 3 * 16 * 4);
}

TEST_CASE("explicit release only ever adds DU availability", "[phy]") {
    for (SlotDirection mt : kDirs) {
        for (SlotDirection du : kDirs) {
            for (DuAttribute attr : kAttrs) {
                for (int flags = 0; flags < 8; ++flags) {
                    MtActivity act;
                    act.has_ul_grant = flags & 1;
                    act.has_ul_data = flags & 2;
                    act.expecting_dl = flags & 4;
                    act.explicit_release = false;
                    auto before = resolve_slot_availability(mt, du, attr, act, {});
                    act.explicit_release = true;
                    auto after = resolve_slot_availability(mt, du, attr, act, {});
                    if (before.du_usable) CHECK(after.du_usable);
                }
            }
        }
    }
}

TEST_CASE("semi-static pattern alternates hard groups by depth", "[phy]") {
    auto patterns = generate_semi_static_pattern(3, 2);
    REQUIRE(patterns.size() == 4);  // donor DU + 3 IAB nodes
    // depth 0 (donor DU) and depth 2: hard in group A (slot 0)
    CHECK(patterns[0].at(0).du_attr == DuAttribute::Hard);
    CHECK(patterns[0].at(1).du_attr == DuAttribute::NotAvailable);
    CHECK(patterns[2].at(0).du_attr == DuAttribute::Hard);
    // depth 1 and 3: hard in group B (slot 1)
    CHECK(patterns[1].at(0).du_attr == DuAttribute::NotAvailable);
    CHECK(patterns[1].at(1).du_attr == DuAttribute::Hard);
    CHECK(patterns[3].at(1).du_attr == DuAttribute::Hard);
}

TEST_CASE("semi-static pattern gives every hop a usable slot each period", "[phy]") {
    for (int depth = 1; depth <= 6; ++depth) {
        for (int period : {2, 4, 8}) {
            auto patterns = generate_semi_static_pattern(depth, period);
            for (int child = 1; child <= depth; ++child) {
                int parent = child - 1;
                int aligned = 0;
                for (int s = 0; s < period; ++s) {
                    const auto& pc = patterns[child].at(s);
                    const auto& pp = patterns[parent].at(s);
                    // parent transmits on the hop only in its Hard slots;
                    // the child's MT must be usable then
                    if (pp.du_attr == DuAttribute::Hard) {
                        auto child_avail = resolve_slot_availability(
                            pc.mt_dir, pc.du_dir, pc.du_attr, {}, {});
                        if (child_avail.mt_usable) ++aligned;
                        // never hard-on-hard between parent and child
                        REQUIRE(pc.du_attr != DuAttribute::Hard);
                    }
                }
                REQUIRE(aligned >= 1);
            }
        }
    }
}

TEST_CASE("odd semi-static period is rejected", "[phy]") {
    CHECK_THROWS_AS(generate_semi_static_pattern(2, 3), ConfigError);
    CHECK_THROWS_AS(generate_semi_static_pattern(2, 0), ConfigError);
}

TEST_CASE("occasion collision anchored examples", "[phy]") {
    // DU RACH period 20 offset 0 vs MT RACH period 20 offset 10: disjoint
    auto r1 = check_occasion_collision({20, 0, 1}, {20, 10, 1});
    CHECK(r1.disjoint);
    CHECK_FALSE(r1.first_collision_slot.has_value());

    // identical configs collide at the offset
    auto r2 = check_occasion_collision({20, 10, 1}, {20, 10, 1});
    CHECK_FALSE(r2.disjoint);
    CHECK(r2.first_collision_slot == 10);

    // periods 6 and 4, offsets 0 and 2: occasions {0,6} vs {2,6} over lcm 12
    auto r3 = check_occasion_collision({6, 0, 1}, {4, 2, 1});
    CHECK_FALSE(r3.disjoint);
    CHECK(r3.first_collision_slot == 6);
}

TEST_CASE("occasion collision agrees with brute force and is symmetric", "[phy]") {
    std::mt19937_64 rng(0xc011151);
    std::uniform_int_distribution<int> period_dist(1, 24);
    for (int i = 0; i < 300; ++i) {
        int pa = period_dist(rng);
        int pb = period_dist(rng);
        std::uniform_int_distribution<int> offa(0, pa - 1);
        std::uniform_int_distribution<int> offb(0, pb - 1);
        std::uniform_int_distribution<int> cnta(1, pa);
        std::uniform_int_distribution<int> cntb(1, pb);
        OccasionPattern a{pa, offa(rng), cnta(rng)};
        OccasionPattern b{pb, offb(rng), cntb(rng)};

        auto fast = check_occasion_collision(a, b);
        auto sym = check_occasion_collision(b, a);
        CHECK(fast.disjoint == sym.disjoint);

        // brute force: walk slots one by one over the common period
        std::uint64_t span = std::lcm<std::uint64_t>(pa, pb);
        std::optional<std::uint64_t> first;
        for (std::uint64_t s = 0; s < span; ++s) {
            if (a.occupies(s) && b.occupies(s)) {
                first = s;
                break;
            }
        }
        REQUIRE(fast.disjoint == !first.has_value());
        REQUIRE(fast.first_collision_slot == first);
    }
}

TEST_CASE("ssb config rules", "[phy]") {
    SsbConfig ok;
    ok.period = 20;
    ok.time_offset = 4;
    ok.for_ue_cell_search = false;
    CHECK_NOTHROW(ok.validate());

    SsbConfig bad = ok;
    bad.for_ue_cell_search = true;  // offset SSB cannot serve UE cell search
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("propagation delay estimate from timing offsets", "[phy]") {
    CHECK(estimate_propagation_delay(0.0, 0.0) == 0.0);
    // node advances UL by 10 us relative to DL rx; parent sees UL aligned
    // with its DL tx
    CHECK(estimate_propagation_delay(-10.0, 0.0) == Catch::Approx(5.0));
    CHECK(estimate_propagation_delay(-10.0, 2.0) == Catch::Approx(6.0));
}

TEST_CASE("timing offsets from an explicit two-way timeline", "[phy]") {
    // independent timeline: pick a true delay p and an applied advance adv,
    // derive both offsets from event times, then check the estimator
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> delay(0.0, 50.0);
    std::uniform_real_distribution<double> adv_extra(-5.0, 5.0);
    for (int i = 0; i < 200; ++i) {
        double p = delay(rng);
        double adv = 2 * p + adv_extra(rng);
        double parent_dl_tx = 100.0;
        double node_dl_rx = parent_dl_tx + p;
        double node_ul_tx = node_dl_rx - adv;
        double parent_ul_rx = node_ul_tx + p;
        double offset_node = node_ul_tx - node_dl_rx;
        double offset_parent = parent_ul_rx - parent_dl_tx;
        REQUIRE(estimate_propagation_delay(offset_node, offset_parent) ==
                Catch::Approx(p).margin(1e-12));
    }
}

TEST_CASE("dl transmit timing alignment down a chain", "[phy]") {
    // four hops with distinct delays; every node ends up transmitting in
    // lockstep with the donor
    const double delays[] = {5.0, 3.0, 7.0, 2.0};
    double parent_dl_tx = 0.0;
    for (double p : delays) {
        double dl_rx = parent_dl_tx + p;
        double est = estimate_propagation_delay(-2.0 * p, 0.0);
        REQUIRE(est == Catch::Approx(p));
        double dl_tx = derive_dl_tx_timing(dl_rx, est);
        REQUIRE(dl_tx == Catch::Approx(0.0).margin(1e-9));
        parent_dl_tx = dl_tx;
    }
}
