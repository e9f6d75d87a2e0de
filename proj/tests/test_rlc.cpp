#include <catch2/catch_amalgamated.hpp>

#include "iabsim/arq_chain.hpp"
#include "iabsim/rlc.hpp"

using namespace iabsim;
using namespace iabsim::rlc;

namespace {

RlcConfig harness_config(int max_retx = 8) {
    RlcConfig cfg;
    cfg.max_retx = max_retx;
    cfg.poll_sdu_interval = 1;
    return cfg;
}

// expected mean latency of the chain harness, from the geometric
// retransmission model: one attempt cycle costs delay+feedback, and the
// expected number of extra attempts on a hop with loss p is p/(1-p)
double analytic_hbh(const std::vector<HopSpec>& hops) {
    double mean = 0.0;
    for (const auto& h : hops) {
        double extra = h.loss / (1.0 - h.loss);
        mean += h.delay_slots + extra * (h.delay_slots + h.feedback_slots);
    }
    return mean;
}

double analytic_e2e(const std::vector<HopSpec>& hops) {
    double fwd = 0.0, rtt = 0.0, q = 1.0;
    for (const auto& h : hops) {
        fwd += h.delay_slots;
        rtt += h.delay_slots + h.feedback_slots;
        q *= 1.0 - h.loss;
    }
    return fwd + (1.0 / q - 1.0) * rtt;
}

}  // namespace

TEST_CASE("transmitter assigns sequence numbers from zero", "[rlc]") {
    RlcTransmitter tx(1, harness_config());
    REQUIRE(tx.enqueue(100));
    auto pdu = tx.next_pdu(0);
    REQUIRE(pdu.has_value());
    CHECK(pdu->seq == 0);
    CHECK(pdu->sdu == 100);
    CHECK_FALSE(pdu->is_retx);
}

TEST_CASE("receiver delivers in order and nacks gaps", "[rlc]") {
    RlcConfig cfg = harness_config();
    RlcReceiver rx(1, cfg);

    RlcDataPdu p0{1, 0, false, false, 10};
    RlcDataPdu p1{1, 1, false, false, 11};
    RlcDataPdu p2{1, 2, true, false, 12};

    auto r0 = rx.rx_pdu(p0, 0);
    CHECK(r0.delivered == std::vector<std::uint64_t>{10});
    auto r1 = rx.rx_pdu(p1, 1);
    CHECK(r1.delivered == std::vector<std::uint64_t>{11});
    auto r2 = rx.rx_pdu(p2, 2);
    CHECK(r2.delivered == std::vector<std::uint64_t>{12});
    REQUIRE(r2.status.has_value());
    CHECK(r2.status->ack_sn == 3);
    CHECK(r2.status->nacks.empty());
}

TEST_CASE("receive 0,2 delivers 0 and nacks 1", "[rlc]") {
    RlcReceiver rx(1, harness_config());
    auto r0 = rx.rx_pdu({1, 0, false, false, 10}, 0);
    CHECK(r0.delivered == std::vector<std::uint64_t>{10});
    auto r2 = rx.rx_pdu({1, 2, false, false, 12}, 1);
    CHECK(r2.delivered.empty());
    REQUIRE(r2.status.has_value());  // gap triggers an unsolicited status
    CHECK(r2.status->ack_sn == 3);
    CHECK(r2.status->nacks == std::vector<SeqNum>{1});
}

TEST_CASE("receive 0,1,1 counts one duplicate", "[rlc]") {
    RlcReceiver rx(1, harness_config());
    rx.rx_pdu({1, 0, false, false, 10}, 0);
    auto a = rx.rx_pdu({1, 1, false, false, 11}, 1);
    CHECK(a.delivered == std::vector<std::uint64_t>{11});
    auto b = rx.rx_pdu({1, 1, false, false, 11}, 2);
    CHECK(b.delivered.empty());
    CHECK(rx.duplicates() == 1);
}

TEST_CASE("window backpressure", "[rlc]") {
    RlcConfig cfg = harness_config();
    cfg.window_size = 4;
    RlcTransmitter tx(1, cfg);
    for (int i = 0; i < 4; ++i) REQUIRE(tx.enqueue(static_cast<std::uint64_t>(i)));
    CHECK_FALSE(tx.can_accept());
    CHECK_FALSE(tx.enqueue(99));

    // acknowledge the first two; the window opens again
    while (auto p = tx.next_pdu(0)) (void)p;
    RlcStatusPdu status;
    status.channel = 1;
    status.ack_sn = 2;
    tx.on_status(status, 1);
    CHECK(tx.can_accept());
}

TEST_CASE("lossless 3-hop chain delivers in order with zero retransmissions",
          "[rlc][chain]") {
    std::vector<HopSpec> hops{{2, 1, 0.0}, {3, 1, 0.0}, {1, 1, 0.0}};
    ArqChainSim sim(hops, ArqMode::HopByHop, harness_config(), 42);
    auto stats = sim.run(200);
    REQUIRE(stats.delivered == 200);
    CHECK(stats.exhausted == 0);
    for (auto r : stats.retx_per_hop) CHECK(r == 0);
    // per-SDU latency is exactly the sum of hop delays
    for (auto l : stats.latencies) REQUIRE(l == 2 + 3 + 1);
}

TEST_CASE("single forced loss on hop 2 retransmits on hop 2 only", "[rlc][chain]") {
    std::vector<HopSpec> hops{{1, 1, 0.0}, {1, 1, 0.0}, {1, 1, 0.0}};
    ArqChainSim sim(hops, ArqMode::HopByHop, harness_config(), 1);
    // drop the very first transmission on the middle hop, nothing else
    sim.set_loss_hook([](std::size_t hop, std::uint64_t attempt) {
        return hop == 1 && attempt == 0;
    });
    auto stats = sim.run(50);
    REQUIRE(stats.delivered == 50);
    CHECK(stats.retx_per_hop == std::vector<std::uint64_t>{0, 1, 0});
    // SDU 0 pays one retransmission cycle (delay+feedback) on hop 2
    CHECK(stats.latencies[0] == 3 + (1 + 1));
    for (std::size_t i = 1; i < stats.latencies.size(); ++i) {
        CHECK(stats.latencies[i] == 3);
    }
}

TEST_CASE("blocked hop exhausts after exactly max_retx retransmissions",
          "[rlc][chain]") {
    std::vector<HopSpec> hops{{1, 1, 0.0}, {1, 1, 1.0}};  // hop 2 drops everything
    ArqChainSim sim(hops, ArqMode::HopByHop, harness_config(4), 3);
    auto stats = sim.run(1);
    CHECK(stats.delivered == 0);
    CHECK(stats.exhausted == 1);
    CHECK(stats.retx_per_hop == std::vector<std::uint64_t>{0, 4});
}

TEST_CASE("lossless link never signals failure", "[rlc][chain]") {
    std::vector<HopSpec> hops{{1, 1, 0.0}};
    ArqChainSim sim(hops, ArqMode::HopByHop, harness_config(4), 9);
    auto stats = sim.run(5000);
    CHECK(stats.exhausted == 0);
    CHECK(stats.delivered == 5000);
}

TEST_CASE("p=0.5 with max_retx=16 never exhausts at desk scale", "[rlc][chain]") {
    // per-SDU failure probability is 0.5^17 ~ 7.6e-6; with this seed zero
    // failures occur over 10^4 SDUs
    std::vector<HopSpec> hops{{1, 1, 0.5}};
    ArqChainSim sim(hops, ArqMode::HopByHop, harness_config(16), 1234);
    auto stats = sim.run(10000);
    CHECK(stats.exhausted == 0);
    CHECK(stats.delivered == 10000);
}

TEST_CASE("hop-by-hop beats end-to-end on a lossy middle hop", "[rlc][chain]") {
    std::vector<HopSpec> hops{{2, 1, 0.0}, {2, 1, 0.1}, {2, 1, 0.0}};
    RlcConfig cfg = harness_config(32);

    ArqChainSim hbh(hops, ArqMode::HopByHop, cfg, 77);
    auto s_hbh = hbh.run(20000);
    ArqChainSim e2e(hops, ArqMode::EndToEndReference, cfg, 77);
    auto s_e2e = e2e.run(20000);

    REQUIRE(s_hbh.delivered == 20000);
    REQUIRE(s_e2e.delivered == 20000);
    CHECK(s_hbh.mean_latency() < s_e2e.mean_latency());

    CHECK(s_hbh.mean_latency() ==
          Catch::Approx(analytic_hbh(hops)).epsilon(0.05));
    CHECK(s_e2e.mean_latency() ==
          Catch::Approx(analytic_e2e(hops)).epsilon(0.05));

    // end-to-end retransmissions burden every hop, not just the lossy one
    CHECK(s_hbh.retx_per_hop[0] == 0);
    CHECK(s_hbh.retx_per_hop[2] == 0);
    CHECK(s_hbh.retx_per_hop[1] > 0);
    CHECK(s_e2e.retx_per_hop[0] == s_e2e.retx_per_hop[1]);
}

TEST_CASE("sequence arithmetic wraps", "[rlc]") {
    CHECK(seq_distance(0, 65535) == 1);
    CHECK(seq_distance(65535, 0) == 65535);
    CHECK(seq_in_window(5, 65530, 12));
    CHECK_FALSE(seq_in_window(5, 65530, 11));
}
