#include <catch2/catch_amalgamated.hpp>

#include "iabsim/topology.hpp"

using namespace iabsim;
using namespace iabsim::topo;

TEST_CASE("node ids allocate sequentially and the donor CU is unique", "[topology]") {
    Topology t;
    NodeId cu = t.add_node(NodeRole::DonorCu);
    CHECK(cu.value == 0);
    CHECK_THROWS_AS(t.add_node(NodeRole::DonorCu), ConfigError);
    NodeId du = t.add_node(NodeRole::DonorDu);
    CHECK(du.value == 1);
    CHECK_FALSE(t.node(du).bap_address.has_value());
}

TEST_CASE("link construction rules", "[topology]") {
    Topology t;
    t.add_node(NodeRole::DonorCu);
    NodeId du = t.add_node(NodeRole::DonorDu);
    NodeId iab = t.add_node(NodeRole::IabNode);

    CHECK_NOTHROW(t.add_link(du, iab, 5.0, 10, 0.0));
    CHECK_THROWS_AS(t.add_link(iab, iab, 1.0, 1, 0.0), ConfigError);
    CHECK_THROWS_AS(t.add_link(du, iab, 1.0, 1, 0.0), ConfigError);   // duplicate
    CHECK_THROWS_AS(t.add_link(iab, du, 1.0, 1, 0.0), ConfigError);   // reversed duplicate
    CHECK_THROWS_AS(t.add_link(du, NodeId{99}, 1.0, 1, 0.0), ConfigError);
    CHECK_THROWS_AS(t.add_link(du, iab, -1.0, 1, 0.0), ConfigError);
    CHECK_THROWS_AS(t.add_link(du, iab, 1.0, 0, 0.0), ConfigError);
    CHECK_THROWS_AS(t.add_link(du, iab, 1.0, 1, 1.5), ConfigError);
}

TEST_CASE("clean chain validates empty", "[topology]") {
    Topology t;
    t.add_node(NodeRole::DonorCu);
    NodeId du = t.add_node(NodeRole::DonorDu);
    NodeId a = t.add_node(NodeRole::IabNode);
    NodeId b = t.add_node(NodeRole::IabNode);
    t.add_link(du, a, 5.0, 10, 0.0);
    t.add_link(a, b, 5.0, 10, 0.0);
    t.node(a).parents = {du};
    t.node(b).parents = {a};
    t.node(a).operational = true;
    t.node(b).operational = true;

    CHECK(t.validate().ok());
}

TEST_CASE("parent cycle is reported", "[topology]") {
    Topology t;
    t.add_node(NodeRole::DonorCu);
    NodeId du = t.add_node(NodeRole::DonorDu);
    NodeId a = t.add_node(NodeRole::IabNode);
    NodeId b = t.add_node(NodeRole::IabNode);
    t.add_link(du, a, 5.0, 10, 0.0);
    t.add_link(a, b, 5.0, 10, 0.0);
    t.node(a).parents = {b};
    t.node(b).parents = {a};

    auto report = t.validate();
    REQUIRE_FALSE(report.ok());
    bool cycle = false;
    for (const auto& v : report.violations) {
        if (v.kind == Violation::Kind::CycleDetected) cycle = true;
    }
    CHECK(cycle);
}

TEST_CASE("operational node behind a blocked link is unreachable", "[topology]") {
    Topology t;
    t.add_node(NodeRole::DonorCu);
    NodeId du = t.add_node(NodeRole::DonorDu);
    NodeId b = t.add_node(NodeRole::IabNode);
    LinkRef l = t.add_link(du, b, 5.0, 10, 0.0);
    t.node(b).parents = {du};
    t.node(b).operational = true;

    CHECK(t.validate().ok());
    t.link(l).blocked = true;
    auto report = t.validate();
    REQUIRE(report.violations.size() == 1);
    CHECK(report.violations[0].kind == Violation::Kind::Unreachable);
    CHECK(report.violations[0].nodes == std::vector<NodeId>{b});
}

TEST_CASE("multihomed UE is reported", "[topology]") {
    Topology t;
    t.add_node(NodeRole::DonorCu);
    NodeId du = t.add_node(NodeRole::DonorDu);
    NodeId a = t.add_node(NodeRole::IabNode);
    NodeId ue = t.add_node(NodeRole::Ue);
    t.add_link(du, a, 5.0, 10, 0.0);
    t.add_link(a, ue, 5.0, 10, 0.0);
    t.add_link(du, ue, 5.0, 10, 0.0);
    t.node(a).parents = {du};
    t.node(ue).parents = {a, du};

    auto report = t.validate();
    bool multihomed = false;
    for (const auto& v : report.violations) {
        if (v.kind == Violation::Kind::UeMultihomed) multihomed = true;
    }
    CHECK(multihomed);
}

TEST_CASE("bap addresses stay injective", "[topology]") {
    Topology t;
    t.add_node(NodeRole::DonorCu);
    NodeId du = t.add_node(NodeRole::DonorDu);
    NodeId a = t.add_node(NodeRole::IabNode);
    t.add_link(du, a, 5.0, 10, 0.0);

    t.assign_bap_address(du, BapAddress(0));
    t.assign_bap_address(a, BapAddress(1));
    CHECK_THROWS_AS(t.assign_bap_address(a, BapAddress(0)), ConfigError);
    CHECK(t.node_by_address(BapAddress(1)) == a);

    t.release_bap_address(a);
    CHECK_FALSE(t.node_by_address(BapAddress(1)).has_value());
    // a released address may be assigned again
    CHECK_NOTHROW(t.assign_bap_address(a, BapAddress(1)));
}

TEST_CASE("ue cannot hold a bap address", "[topology]") {
    Topology t;
    t.add_node(NodeRole::DonorCu);
    NodeId ue = t.add_node(NodeRole::Ue);
    CHECK_THROWS_AS(t.assign_bap_address(ue, BapAddress(3)), ConfigError);
}
