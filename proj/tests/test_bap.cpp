#include <catch2/catch_amalgamated.hpp>

#include "iabsim/bap.hpp"

using namespace iabsim;
using namespace iabsim::bap;

TEST_CASE("header encodes to the documented 3-octet layout", "[bap]") {
    BapHeader h;
    h.data_control_flag = true;
    h.destination = BapAddress(0);
    h.path_id = PathId(0);
    CHECK(encode_header(h) == EncodedHeader{0x80, 0x00, 0x00});

    h.destination = BapAddress(1023);
    h.path_id = PathId(1023);
    CHECK(encode_header(h) == EncodedHeader{0x8F, 0xFF, 0xFF});

    h.data_control_flag = false;
    h.destination = BapAddress(5);
    h.path_id = PathId(2);
    CHECK(encode_header(h) == EncodedHeader{0x00, 0x14, 0x02});
}

TEST_CASE("decode inverts encode", "[bap]") {
    auto d = decode_header(EncodedHeader{0x80, 0x00, 0x00});
    CHECK(d.header.data_control_flag);
    CHECK(d.header.destination.value() == 0);
    CHECK(d.header.path_id.value() == 0);
    CHECK_FALSE(d.reserved_nonzero);

    // strided sample across the space; the exhaustive sweep lives in the
    // acceptance suite
    for (unsigned dc = 0; dc < 2; ++dc) {
        for (unsigned dest = 0; dest <= kBapAddressMax; dest += 7) {
            for (unsigned path = 0; path <= kPathIdMax; path += 11) {
                BapHeader h;
                h.data_control_flag = dc != 0;
                h.destination = BapAddress(static_cast<std::uint16_t>(dest));
                h.path_id = PathId(static_cast<std::uint16_t>(path));
                auto rt = decode_header(encode_header(h));
                REQUIRE(rt.header == h);
                REQUIRE_FALSE(rt.reserved_nonzero);
            }
        }
    }
}

TEST_CASE("nonzero reserved bits decode with a warning", "[bap]") {
    auto d = decode_header(EncodedHeader{0xF0, 0x00, 0x00});
    CHECK(d.header.data_control_flag);
    CHECK(d.reserved_nonzero);
    CHECK(d.header.destination.value() == 0);
}

TEST_CASE("wrong-length input is malformed", "[bap]") {
    std::vector<std::uint8_t> two{0x80, 0x00};
    CHECK_THROWS_AS(decode_header(two), MalformedHeader);
    std::vector<std::uint8_t> four{0x80, 0x00, 0x00, 0x00};
    CHECK_THROWS_AS(decode_header(four), MalformedHeader);
}

TEST_CASE("routing: self delivery, exact match, fallback, no route", "[bap]") {
    // chain donorDU -> A -> B, table at A
    const NodeId a{1}, b{2};
    const BapAddress addr_a(10), addr_b(20);
    RoutingTable at_a;
    at_a.direction = Direction::Dl;
    at_a.owner = a;
    at_a.entries[{addr_b, PathId(0)}] = b;

    auto hop = route_next_hop(at_a, {addr_b, PathId(0)}, addr_a);
    CHECK(hop.kind == RoutingDecision::Kind::NextHop);
    CHECK(hop.next_hop == b);
    CHECK_FALSE(hop.used_fallback);

    auto self = route_next_hop(at_a, {addr_a, PathId(0)}, addr_a);
    CHECK(self.kind == RoutingDecision::Kind::DeliverLocally);

    // unknown path id falls back to the destination's lowest path id
    auto fb = route_next_hop(at_a, {addr_b, PathId(7)}, addr_a);
    CHECK(fb.kind == RoutingDecision::Kind::NextHop);
    CHECK(fb.next_hop == b);
    CHECK(fb.used_fallback);

    auto none = route_next_hop(at_a, {BapAddress(999), PathId(0)}, addr_a);
    CHECK(none.kind == RoutingDecision::Kind::NoRoute);
}

TEST_CASE("fallback picks the lowest path id for the destination", "[bap]") {
    const NodeId via_x{5}, via_y{6};
    const BapAddress dest(100);
    RoutingTable t;
    t.direction = Direction::Dl;
    t.entries[{dest, PathId(3)}] = via_y;
    t.entries[{dest, PathId(1)}] = via_x;
    auto d = route_next_hop(t, {dest, PathId(9)}, std::nullopt);
    CHECK(d.used_fallback);
    CHECK(d.next_hop == via_x);
}

TEST_CASE("one-to-one mapping dedicates a fresh channel per hop", "[bap]") {
    ChannelRegistry reg;
    QosProfile voip{0, 1, 100.0};
    std::vector<LinkRef> path{LinkRef{0}, LinkRef{1}};
    auto channels = map_ingress_bearer(7, voip, MappingPolicy::OneToOne, path, reg);
    REQUIRE(channels.size() == 2);
    CHECK(channels[0] != channels[1]);
    for (auto id : channels) {
        const BhRlcChannel* ch = reg.find(id);
        REQUIRE(ch != nullptr);
        CHECK(ch->mapping_kind == MappingPolicy::OneToOne);
        CHECK(ch->mapping_key == 7);
    }
}

TEST_CASE("many-to-one mapping shares the per-class channel", "[bap]") {
    ChannelRegistry reg;
    QosProfile web{3, 4, 300.0};
    std::vector<LinkRef> path{LinkRef{0}, LinkRef{1}, LinkRef{2}};
    auto first = map_ingress_bearer(1, web, MappingPolicy::ManyToOne, path, reg);
    auto second = map_ingress_bearer(2, web, MappingPolicy::ManyToOne, path, reg);
    REQUIRE(first.size() == 3);
    CHECK(first == second);  // identical channel ids on every hop
    CHECK(reg.all().size() == 3);
}

TEST_CASE("channel-count law: C*H for N:1 versus B*H for 1:1", "[bap]") {
    const int bearers = 12, classes = 4, hops = 3;
    std::vector<LinkRef> path;
    for (int h = 0; h < hops; ++h) path.push_back(LinkRef{static_cast<std::uint32_t>(h)});

    ChannelRegistry many;
    for (int b = 0; b < bearers; ++b) {
        QosProfile q{static_cast<std::uint8_t>(b % classes), b % classes, 100.0};
        map_ingress_bearer(static_cast<BearerId>(b), q, MappingPolicy::ManyToOne,
                           path, many);
    }
    CHECK(many.all().size() == static_cast<std::size_t>(classes * hops));

    ChannelRegistry one;
    for (int b = 0; b < bearers; ++b) {
        QosProfile q{static_cast<std::uint8_t>(b % classes), b % classes, 100.0};
        map_ingress_bearer(static_cast<BearerId>(b), q, MappingPolicy::OneToOne,
                           path, one);
    }
    CHECK(one.all().size() == static_cast<std::size_t>(bearers * hops));
}

TEST_CASE("empty path cannot be mapped", "[bap]") {
    ChannelRegistry reg;
    QosProfile q{0, 0, 0.0};
    CHECK_THROWS_AS(
        map_ingress_bearer(1, q, MappingPolicy::OneToOne, std::span<const LinkRef>{}, reg),
        MappingIncomplete);
}
