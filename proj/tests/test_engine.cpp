#include <catch2/catch_amalgamated.hpp>

#include "iabsim/engine.hpp"

#include <sstream>

using namespace iabsim;

namespace {

/// donor CU + donor DU + a chain of `depth` IAB nodes + one UE at the end.
scenario::Scenario chain_scenario(int depth, double middle_loss = 0.0) {
    scenario::Scenario s;
    s.name = "chain";
    s.patterns.auto_semi_static_period = 2;

    s.nodes.push_back({"cu", topo::NodeRole::DonorCu, {}, 0, "", false});
    s.nodes.push_back({"du0", topo::NodeRole::DonorDu, {}, 0, "", false});
    std::string prev = "du0";
    for (int i = 1; i <= depth; ++i) {
        std::string nm = "iab" + std::to_string(i);
        s.nodes.push_back({nm, topo::NodeRole::IabNode, {}, 0, "", false});
        scenario::LinkDecl l;
        l.a = prev;
        l.b = nm;
        l.delay_us = 5.0;
        l.capacity = 10;
        l.loss = (i == 2) ? middle_loss : 0.0;
        s.links.push_back(l);
        prev = nm;
    }
    s.nodes.push_back({"ue1", topo::NodeRole::Ue, {}, 0, prev, false});
    scenario::LinkDecl al;
    al.a = prev;
    al.b = "ue1";
    al.delay_us = 1.0;
    al.capacity = 10;
    s.links.push_back(al);

    scenario::BearerDecl b;
    b.id = 1;
    b.ue = "ue1";
    b.qos = {0, 1, 10.0};
    b.mapping = bap::MappingPolicy::OneToOne;
    b.direction = Direction::Dl;
    s.bearers.push_back(b);

    scenario::TrafficDecl t;
    t.kind = scenario::TrafficDecl::Kind::VoipCbr;
    t.bearer = 1;
    t.interval_slots = 8;
    t.start_slot = 200;
    s.traffic.push_back(t);
    return s;
}

}  // namespace

TEST_CASE("two-hop chain integrates and delivers traffic", "[engine]") {
    engine::Simulation sim(chain_scenario(2), 1);
    auto result = sim.run(2000);

    // both IAB nodes reach Operational
    for (const auto& [id, st] : result.final_states) {
        CHECK(st == control::IntegrationState::Operational);
    }
    const auto& b = result.metrics.bearers.at(1);
    CHECK(b.generated > 0);
    CHECK(b.delivered > 0);
    CHECK(b.lost == 0);
    CHECK(result.hd_violations == 0);
}

TEST_CASE("deterministic runs produce identical metrics", "[engine]") {
    auto run_once = [](std::uint64_t seed) {
        engine::Simulation sim(chain_scenario(2, 0.05), seed);
        auto r = sim.run(1500, /*trace=*/true);
        std::ostringstream os;
        r.trace.write_jsonl(os);
        return std::make_pair(r.metrics.to_json().dump(), os.str());
    };
    auto [m1, t1] = run_once(7);
    auto [m2, t2] = run_once(7);
    CHECK(m1 == m2);
    CHECK(t1 == t2);
}
