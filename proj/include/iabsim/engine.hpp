#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "iabsim/bap.hpp"
#include "iabsim/control.hpp"
#include "iabsim/core.hpp"
#include "iabsim/metrics.hpp"
#include "iabsim/phy.hpp"
#include "iabsim/rlc.hpp"
#include "iabsim/scenario.hpp"
#include "iabsim/topology.hpp"
#include "iabsim/trace.hpp"

namespace iabsim::engine {

/// Intra-slot phases; events execute in (slot, phase, sequence) order.
enum class Phase : int {
    ControlApply = 0,
    MtActivityFix = 1,
    Schedule = 2,
    Transmit = 3,
    Deliver = 4,
    Report = 5,
};

struct PacketRecord {
    std::uint64_t id = 0;
    bap::BearerId bearer = 0;
    Direction dir = Direction::Dl;
    std::uint64_t bearer_seq = 0;  // generation order within the bearer
    std::int64_t gen_slot = 0;
    std::int64_t deliver_slot = -1;
    enum class State : std::uint8_t { Buffered, InFlight, Delivered, Lost } state =
        State::Buffered;
    std::string loss_cause;
    std::vector<NodeId> visited;  // BAP-layer traversal of the delivering instance
    bap::BapRoutingId routing_id; // as originated
    std::uint32_t path_epoch = 0; // route-plan generation at origination
};

/// One BAP PDU instance moving through the network. Hop-by-hop forwarding
/// reuses a single instance end to end; an end-to-end retransmission is a
/// fresh instance.
struct PduInstance {
    bap::EncodedHeader header{};
    bool has_header = false;
    std::uint64_t packet = 0;
    Direction dir = Direction::Dl;
    bap::BearerId bearer = 0;
    bool is_control = false;
    std::uint32_t ctrl = 0;        // index into the CU message store
    NodeId f1_owner{};             // whose F1 channel chain carries it
    bool is_e2e = false;
    rlc::SeqNum e2e_seq = 0;
    bool e2e_poll = false;
    std::vector<NodeId> visited;
};

struct RunResult {
    metrics::Metrics metrics;
    trace::Trace trace;
    std::vector<PacketRecord> packets;
    std::map<NodeId, bap::RoutingTable> dl_tables;
    std::map<NodeId, bap::RoutingTable> ul_tables;
    // route-plan history; index = path epoch
    std::vector<std::map<std::pair<std::uint16_t, std::uint16_t>, control::RegisteredPath>>
        path_registry_history;
    std::map<bap::BearerId, bap::BearerMapping> bearer_maps;
    std::map<std::string, NodeId> ids;
    std::map<NodeId, std::string> names;
    std::map<NodeId, phy::TimingState> timing;
    std::map<NodeId, double> active_parent_delay_us;
    std::map<NodeId, control::IntegrationState> final_states;
    std::uint64_t hd_violations = 0;
};

class Simulation {
public:
    Simulation(scenario::Scenario scn, std::uint64_t seed)
        : scn_(std::move(scn)), seed_(seed), trace_(false) {
        init();
    }

    /// Runs to the horizon. Identical (scenario, seed, horizon) inputs give
    /// identical outputs.
    RunResult run(std::int64_t horizon, bool enable_trace = false) {
        horizon_ = horizon;
        trace_ = trace::Trace(enable_trace);
        for (slot_ = 0; slot_ < horizon_; ++slot_) {
            control_apply();
            mt_activity_fix();
            schedule();
            transmit();
            deliver();
            report();
        }
        return finish();
    }

    /// Injects a trigger as if the control plane had observed it; used by
    /// tests to exercise adaptation paths that the physics cannot produce.
    void inject_trigger(const control::AdaptationTrigger& t) { trigger_q_.push_back(t); }

private:
    // ------------------------------------------------------------------
    // identity & small helpers

    struct TxKey {
        std::uint32_t ch;
        std::uint32_t sender;
        auto operator<=>(const TxKey&) const = default;
    };

    struct TxRt {
        std::deque<std::uint64_t> upstream;
        rlc::RlcTransmitter ent;
        bool raw = false;  // end-to-end mode: no per-hop ARQ
        int priority = 0;
        LinkRef link;
        NodeId to{};
        bool is_access = false;

        std::size_t pending() const {
            return upstream.size() + (raw ? 0 : ent.pending_count());
        }
    };

    struct RxRt {
        rlc::RlcReceiver ent;
    };

    struct NodeRt {
        phy::ResourcePattern pattern;
        bool has_pattern = false;
        phy::MtActivity activity;
        phy::SlotAvailability avail;
        std::optional<phy::SlotDirection> du_dir_fixed;
        std::uint32_t du_alternation = 0;
        NodeId active_parent{};
        bool attached = false;
        phy::TimingState timing;
        phy::RachConfig du_rach;
        bool has_du_rach = false;
        bool mt_active = false;
        bool du_active = false;
        std::uint64_t no_route = 0;
        std::uint64_t fallback = 0;
        std::uint64_t hd_idle = 0;
        std::uint64_t hd_viol = 0;
        std::uint64_t grant_conflicts = 0;
    };

    struct LinkRt {
        std::uint64_t transmitted = 0;
        std::uint64_t retx = 0;
        std::uint64_t lost = 0;
        std::uint64_t blocked_slots = 0;
        int budget_used = 0;
        int overload_streak = 0;
    };

    enum class ArrKind : std::uint8_t {
        RlcData,
        RlcStatus,
        Raw,
        SrbRelay,
        RachPreamble,
        E2eStatus,
    };

    struct Arrival {
        ArrKind kind = ArrKind::Raw;
        LinkRef link;
        NodeId to{};
        bap::ChannelId channel = 0;
        rlc::RlcDataPdu data;
        rlc::RlcStatusPdu status;
        std::uint64_t payload = 0;  // pdu instance or control index
        bap::BearerId bearer = 0;
        NodeId from{};
    };

    struct Transmission {
        ArrKind kind = ArrKind::Raw;
        LinkRef link;
        NodeId from{}, to{};
        bap::ChannelId channel = 0;
        rlc::RlcDataPdu data;
        std::uint64_t payload = 0;
        bap::BearerId bearer = 0;
        bool counts_capacity = true;
    };

    struct CuMsg {
        control::CuMessageKind kind = control::CuMessageKind::ConfigAck;
        NodeId target{};
        NodeId about{};
        std::uint32_t id = 0;
        std::optional<BapAddress> addr;
        std::optional<bap::RoutingTable> dl, ul;
        std::vector<bap::BhRlcChannel> add_channels;
        std::optional<phy::ResourcePattern> pattern;
        std::optional<phy::RachConfig> rach;
        std::uint32_t ack_of = 0;
    };

    struct IntegrationRt {
        control::IntegrationState state = control::IntegrationState::Detached;
        bool wants = false;
        std::int64_t join_at = 0;
        std::int64_t retry_at = 0;
        NodeId parent{};
        bool rach_pending = false;
        std::int64_t next_occasion = -1;
        bool rach_delivered = false;
        std::set<std::uint32_t> awaiting_acks;
        bool node_config_sent = false;
        std::int64_t step_deadline = -1;
    };

    struct SrbMsg {
        std::uint32_t ctrl = 0;
        std::int64_t last_tx = -1;
    };

    struct TrafficRt {
        scenario::TrafficDecl decl;
    };

    // ------------------------------------------------------------------
    // configuration-derived state

    scenario::Scenario scn_;
    std::uint64_t seed_ = 0;
    std::int64_t horizon_ = 0;
    std::int64_t slot_ = 0;
    trace::Trace trace_;
    metrics::Metrics mx_;

    topo::Topology topo_;
    std::map<std::string, NodeId> ids_;
    std::map<NodeId, std::string> names_;
    std::vector<NodeId> donor_dus_;
    NodeId donor_cu_{};

    std::map<NodeId, NodeRt> rt_;
    std::vector<LinkRt> lrt_;
    std::map<NodeId, IntegrationRt> integ_;

    // control plane
    control::BapAddressAllocator alloc_;
    std::map<NodeId, bap::RoutingTable> dl_tables_, ul_tables_;
    std::map<std::pair<std::uint16_t, std::uint16_t>, control::RegisteredPath> dl_paths_;
    std::vector<std::map<std::pair<std::uint16_t, std::uint16_t>, control::RegisteredPath>>
        path_history_;
    std::map<NodeId, NodeId> serving_donor_;
    std::set<std::uint32_t> failed_links_;
    std::deque<control::AdaptationTrigger> trigger_q_;
    control::SoftReleaseBook releases_;
    std::vector<CuMsg> cu_msgs_;
    std::map<NodeId, std::vector<std::uint32_t>> pending_apply_;
    std::vector<std::uint32_t> cu_inbox_;
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::deque<SrbMsg>> srb_;

    // data plane
    bap::ChannelRegistry registry_;
    std::map<bap::BearerId, bap::BearerMapping> bearer_maps_;
    std::map<bap::BearerId, bap::ChannelId> access_channels_;
    std::map<std::pair<std::uint32_t, std::uint32_t>, bap::ChannelId> bearer_hop_channel_;
    std::map<std::pair<std::uint32_t, std::uint32_t>, bap::ChannelId> f1_channels_;
    std::map<bap::BearerId, PathId> bearer_path_choice_;
    std::map<bap::BearerId, bool> bearer_mapped_, bearer_was_mapped_;

    std::map<TxKey, TxRt> tx_;
    std::map<TxKey, RxRt> rx_;
    std::map<bap::BearerId, rlc::RlcTransmitter> e2e_tx_;
    std::map<bap::BearerId, rlc::RlcReceiver> e2e_rx_;
    std::map<bap::BearerId, std::size_t> e2e_tx_pending_;

    std::vector<PacketRecord> packets_;
    std::vector<PduInstance> pdus_;
    std::map<bap::BearerId, std::deque<std::uint64_t>> pre_map_buffer_;  // packet ids
    std::map<bap::BearerId, std::uint64_t> bearer_gen_count_;
    std::map<bap::BearerId, std::int64_t> bearer_last_delivered_seq_;

    std::map<std::int64_t, std::vector<Arrival>> arrivals_;
    std::vector<Transmission> txs_;

    std::vector<TrafficRt> traffic_;
    std::multimap<std::int64_t, scenario::EventDecl> event_schedule_;

    std::map<std::uint64_t, std::mt19937_64> rng_;
    std::uint32_t next_msg_id_ = 1;
    std::uint32_t path_epoch_ = 0;

    // ------------------------------------------------------------------

    std::mt19937_64& stream(std::uint64_t kind, std::uint64_t id) {
        const std::uint64_t key = kind * 0x100000000ULL + id;
        auto it = rng_.find(key);
        if (it == rng_.end()) {
            it = rng_.emplace(key, std::mt19937_64(derive_stream_seed(seed_, kind, id)))
                     .first;
        }
        return it->second;
    }

    int wire_slots(const topo::Link& l) const {
        const double frac = l.propagation_delay_us / scn_.slot_duration_us;
        return static_cast<int>(std::max(0.0, std::ceil(frac - 1e-9)));
    }

    const std::string& name(NodeId n) const { return names_.at(n); }

    bool is_backhaul_node(NodeId n) const {
        auto role = topo_.node(n).role;
        return role == topo::NodeRole::IabNode || role == topo::NodeRole::DonorDu;
    }

    bool operational(NodeId n) const {
        const auto& node = topo_.node(n);
        if (node.role == topo::NodeRole::DonorDu) return true;
        if (node.role != topo::NodeRole::IabNode) return false;
        auto it = integ_.find(n);
        return it != integ_.end() &&
               it->second.state == control::IntegrationState::Operational;
    }

    std::vector<NodeId> attached_children(NodeId parent) const {
        std::vector<NodeId> out;
        for (const auto& [id, r] : rt_) {
            if (r.attached && r.active_parent == parent) out.push_back(id);
        }
        return out;
    }

    // ------------------------------------------------------------------
    // initialization

    void init() {
        auto build = scenario::build_topology(scn_);
        if (!build.errors.empty()) {
            std::string what = "scenario is not runnable:";
            for (const auto& e : build.errors) what += "\n  " + e;
            throw ConfigError(what);
        }
        topo_ = std::move(build.topology);
        ids_ = std::move(build.ids);
        for (const auto& [n, id] : ids_) names_[id] = n;
        donor_dus_ = topo_.donor_dus();
        donor_cu_ = *topo_.donor_cu();
        lrt_.resize(topo_.links().size());

        for (const auto& [id, node] : topo_.nodes()) rt_[id];

        // donor DUs get addresses up front; their F1 to the CU is internal
        for (NodeId du : donor_dus_) {
            auto addr = alloc_.allocate(topo_, dl_tables_, ul_tables_);
            topo_.assign_bap_address(du, *addr);
        }

        // resource patterns: explicit declarations now, auto ones at
        // integration time (they depend on the node's depth)
        for (const auto& [nm, pattern] : scn_.patterns.per_node) {
            NodeId id = ids_.at(nm);
            rt_[id].pattern = pattern;
            rt_[id].has_pattern = true;
        }
        if (scn_.patterns.auto_semi_static_period) {
            for (NodeId du : donor_dus_) {
                if (!rt_[du].has_pattern) {
                    rt_[du].pattern = phy::generate_semi_static_pattern(
                        1, *scn_.patterns.auto_semi_static_period)[0];
                    rt_[du].has_pattern = true;
                }
            }
        }
        // a donor DU with no pattern at all serves every slot
        for (NodeId du : donor_dus_) {
            if (!rt_[du].has_pattern) {
                rt_[du].pattern.slots = {phy::SlotConfig{}};
                rt_[du].has_pattern = true;
            }
        }

        for (const auto& r : scn_.rach) {
            if (r.config.owner_side == phy::OccasionSide::DuOccasions) {
                NodeId id = ids_.at(r.node);
                rt_[id].du_rach = r.config;
                rt_[id].has_du_rach = true;
            }
        }
        for (const auto& [id, node] : topo_.nodes()) {
            if (node.has_du() && !rt_[id].has_du_rach) {
                // two occasions per period so one always lands in a usable slot
                rt_[id].du_rach = phy::RachConfig{phy::OccasionSide::DuOccasions, 8, 0,
                                                  phy::PreambleFormat::LongRange, 2};
                rt_[id].has_du_rach = true;
            }
        }

        // integration bookkeeping: donor DUs are operational by
        // construction, IAB nodes start detached
        std::set<std::string> join_event_nodes;
        for (const auto& e : scn_.events) {
            if (e.kind == scenario::EventDecl::Kind::NodeJoin) {
                join_event_nodes.insert(e.node);
            }
        }
        for (const auto& [id, node] : topo_.nodes()) {
            if (node.role != topo::NodeRole::IabNode) continue;
            IntegrationRt ir;
            const auto& decl = scn_.nodes[id.value];
            if (join_event_nodes.count(decl.name)) {
                ir.wants = false;  // the join event arms it
            } else {
                ir.wants = true;
                ir.join_at = decl.join_at_slot;
            }
            integ_[id] = ir;
        }

        for (const auto& t : scn_.traffic) traffic_.push_back({t});
        for (const auto& b : scn_.bearers) {
            bearer_mapped_[b.id] = false;
            bearer_was_mapped_[b.id] = false;
            bearer_path_choice_[b.id] = PathId(0);
            auto& bm = mx_.bearers[b.id];
            bm.id = b.id;
            bm.qos_class = b.qos.qos_class;
        }

        for (const auto& e : scn_.events) {
            switch (e.kind) {
                case scenario::EventDecl::Kind::Blockage:
                    event_schedule_.emplace(e.from_slot, e);
                    break;
                case scenario::EventDecl::Kind::NodeJoin:
                case scenario::EventDecl::Kind::NodeLeave:
                    event_schedule_.emplace(e.at_slot, e);
                    break;
                case scenario::EventDecl::Kind::SoftRelease:
                    for (std::int64_t s : e.slots) {
                        releases_.issue_release(ids_.at(e.parent), ids_.at(e.child), s);
                    }
                    break;
            }
        }

        // donor DU timing is the global reference
        for (NodeId du : donor_dus_) rt_[du].timing.dl_tx_time_us = 0.0;
    }

    // ==================================================================
    // Phase 1: ControlApply
    // ==================================================================

    void control_apply() {
        apply_scenario_events();
        apply_delivered_configs();
        process_cu_inbox();
        process_triggers();
        advance_integration();
        map_ready_bearers();
        generate_traffic();
    }

    void apply_scenario_events() {
        auto range = event_schedule_.equal_range(slot_);
        for (auto it = range.first; it != range.second; ++it) {
            const auto& e = it->second;
            switch (e.kind) {
                case scenario::EventDecl::Kind::Blockage: {
                    auto link = topo_.find_link(ids_.at(e.link_a), ids_.at(e.link_b));
                    topo_.link(*link).blocked = true;
                    trace_.add(slot_, 0, "blockage_start",
                               {{"a", e.link_a}, {"b", e.link_b}});
                    // schedule the end
                    scenario::EventDecl end = e;
                    end.from_slot = e.to_slot;
                    if (e.to_slot > slot_) blockage_ends_.emplace(e.to_slot, *link);
                    break;
                }
                case scenario::EventDecl::Kind::NodeJoin: {
                    auto& ir = integ_.at(ids_.at(e.node));
                    ir.wants = true;
                    ir.join_at = e.at_slot;
                    trace_.add(slot_, 0, "node_join", {{"node", e.node}});
                    break;
                }
                case scenario::EventDecl::Kind::NodeLeave: {
                    control::AdaptationTrigger t;
                    t.kind = control::AdaptationTrigger::Kind::NodeDetachment;
                    t.slot = slot_;
                    t.node = ids_.at(e.node);
                    trigger_q_.push_back(t);
                    break;
                }
                case scenario::EventDecl::Kind::SoftRelease:
                    break;  // pre-registered in init
            }
        }
        auto ends = blockage_ends_.equal_range(slot_);
        for (auto it = ends.first; it != ends.second; ++it) {
            topo_.link(it->second).blocked = false;
            trace_.add(slot_, 0, "blockage_end",
                       {{"a", name(topo_.link(it->second).endpoint_a)},
                        {"b", name(topo_.link(it->second).endpoint_b)}});
        }
    }

    std::multimap<std::int64_t, LinkRef> blockage_ends_;

    void apply_delivered_configs() {
        // table/channel/pattern installs delivered last slot take effect
        // now, between slots
        std::vector<std::pair<NodeId, std::uint32_t>> batch;
        for (auto& [node, list] : pending_apply_) {
            for (std::uint32_t idx : list) batch.emplace_back(node, idx);
        }
        pending_apply_.clear();
        for (auto [node, idx] : batch) apply_config_at(node, idx);
    }

    void apply_config_at(NodeId node, std::uint32_t idx) {
        CuMsg& m = cu_msgs_[idx];
        trace_.add(slot_, 0, "cu_msg_apply",
                   {{"node", name(node)},
                    {"kind", control::to_string(m.kind)},
                    {"about", m.about == NodeId{} ? "" : name(m.about)},
                    {"msg_id", m.id}});
        switch (m.kind) {
            case control::CuMessageKind::InstallRoutingTable: {
                if (m.dl) install_table(node, *m.dl, Direction::Dl);
                if (m.ul) install_table(node, *m.ul, Direction::Ul);
                send_ack(node, m);
                break;
            }
            case control::CuMessageKind::EstablishBhChannel: {
                // channels were registered CU-side when the message was
                // issued; the node-side apply is the ack hook
                send_ack(node, m);
                break;
            }
            case control::CuMessageKind::AssignBapAddress: {
                // bundled node config: address, tables, pattern, rach
                topo_.assign_bap_address(node, *m.addr);
                if (m.dl) install_table(node, *m.dl, Direction::Dl);
                if (m.ul) install_table(node, *m.ul, Direction::Ul);
                if (m.pattern) {
                    rt_[node].pattern = *m.pattern;
                    rt_[node].has_pattern = true;
                }
                if (m.rach) {
                    rt_[node].du_rach = *m.rach;
                    rt_[node].has_du_rach = true;
                }
                auto& ir = integ_.at(node);
                set_state(node, control::IntegrationState::BhSetup);
                // the node now has everything it needs for step 3
                send_f1_setup_request(node);
                set_state(node, control::IntegrationState::F1Setup);
                ir.step_deadline = slot_ + 400;
                break;
            }
            case control::CuMessageKind::F1SetupResponse: {
                if (integ_.at(node).state == control::IntegrationState::F1Setup) {
                    complete_integration(node);
                }
                break;
            }
            default:
                break;
        }
    }

    void install_table(NodeId node, const bap::RoutingTable& t, Direction dir) {
        auto& tables = dir == Direction::Dl ? dl_tables_ : ul_tables_;
        if (trace_.enabled()) {
            const auto* old = tables.count(node) ? &tables.at(node) : nullptr;
            for (const auto& [rid, hop] : t.entries) {
                if (!old || !old->entries.count(rid)) {
                    trace_.add(slot_, 0, "table_install",
                               {{"node", name(node)},
                                {"direction", to_string(dir)},
                                {"dest", rid.destination.value()},
                                {"path", rid.path_id.value()},
                                {"next_hop", name(hop)}});
                }
            }
        }
        tables[node] = t;
    }

    void send_ack(NodeId node, const CuMsg& m) {
        CuMsg ack;
        ack.kind = control::CuMessageKind::ConfigAck;
        ack.target = serving_donor_du_for(node);
        ack.about = node;
        ack.ack_of = m.id;
        ack.id = next_msg_id_++;
        const std::uint32_t idx = store_msg(ack);
        if (node == ack.target) {
            cu_inbox_.push_back(idx);
            return;
        }
        send_control_pdu(node, ack.target, idx, Direction::Ul, node);
    }

    NodeId serving_donor_du_for(NodeId node) const {
        auto it = serving_donor_.find(node);
        if (it != serving_donor_.end()) return it->second;
        return donor_dus_.front();
    }

    std::uint32_t store_msg(CuMsg m) {
        cu_msgs_.push_back(std::move(m));
        return static_cast<std::uint32_t>(cu_msgs_.size() - 1);
    }

    /// Wraps a CU message into a BAP PDU and queues it on the F1-AP
    /// channel chain of `chain_owner` at `from`.
    void send_control_pdu(NodeId from, NodeId to, std::uint32_t msg_idx, Direction dir,
                          NodeId chain_owner) {
        const auto& target = topo_.node(to);
        if (!target.bap_address) {
            throw InvariantViolation("control PDU to unaddressed node");
        }
        PduInstance inst;
        bap::BapHeader h;
        h.data_control_flag = true;
        h.destination = *target.bap_address;
        h.path_id = PathId(0);
        inst.header = bap::encode_header(h);
        inst.has_header = true;
        inst.dir = dir;
        inst.is_control = true;
        inst.ctrl = msg_idx;
        inst.f1_owner = chain_owner == NodeId{} ? cu_msgs_[msg_idx].about : chain_owner;
        inst.visited = {from};
        const std::uint64_t handle = store_pdu(std::move(inst));
        route_and_enqueue(from, handle);
        if (trace_.enabled()) {
            trace_.add(slot_, 0, "cu_msg_tx",
                       {{"from", name(from)},
                        {"to", name(to)},
                        {"kind", control::to_string(cu_msgs_[msg_idx].kind)},
                        {"msg_id", cu_msgs_[msg_idx].id}});
        }
    }

    std::uint64_t store_pdu(PduInstance inst) {
        pdus_.push_back(std::move(inst));
        return pdus_.size() - 1;
    }

    void process_cu_inbox() {
        std::vector<std::uint32_t> inbox;
        inbox.swap(cu_inbox_);
        for (std::uint32_t idx : inbox) {
            const CuMsg& m = cu_msgs_[idx];
            switch (m.kind) {
                case control::CuMessageKind::ConfigAck: {
                    auto& ir = integ_.at(m.about);
                    ir.awaiting_acks.erase(m.ack_of);
                    if (ir.awaiting_acks.empty() && !ir.node_config_sent &&
                        ir.state == control::IntegrationState::MtAccess) {
                        send_node_config(m.about);
                    }
                    break;
                }
                case control::CuMessageKind::F1SetupRequest: {
                    // respond over the new path
                    CuMsg resp;
                    resp.kind = control::CuMessageKind::F1SetupResponse;
                    resp.target = m.about;
                    resp.about = m.about;
                    resp.id = next_msg_id_++;
                    const std::uint32_t ridx = store_msg(resp);
                    send_control_pdu(serving_donor_du_for(m.about), m.about, ridx,
                                     Direction::Dl, m.about);
                    break;
                }
                default:
                    break;
            }
        }
    }

    // ------------------------------------------------------------------
    // triggers and adaptation plans

    void process_triggers() {
        if (trigger_q_.empty()) return;
        std::deque<control::AdaptationTrigger> batch;
        batch.swap(trigger_q_);

        bool recompute = false;
        std::vector<NodeId> detach_nodes;
        std::vector<std::pair<control::AdaptationTrigger, std::string>> log;

        for (const auto& t : batch) {
            using K = control::AdaptationTrigger::Kind;
            switch (t.kind) {
                case K::LinkFailure:
                case K::LinkQualityDegraded: {
                    if (failed_links_.count(t.link->value)) {
                        log.emplace_back(t, "no_action_already_failed");
                        break;
                    }
                    failed_links_.insert(t.link->value);
                    recompute = true;
                    log.emplace_back(t, "reroute");
                    break;
                }
                case K::NodeDetachment: {
                    detach_nodes.push_back(*t.node);
                    recompute = true;
                    log.emplace_back(t, "detach");
                    break;
                }
                case K::NewNodeIntegration: {
                    recompute = true;
                    log.emplace_back(t, "recompute");
                    break;
                }
                case K::LinkOverload: {
                    const bool acted = promote_overloaded_bearers(*t.link);
                    log.emplace_back(t, acted ? "promote_path_1" : "no_action_no_alternative");
                    break;
                }
            }
        }

        // measure in-flight occupancy of newly failed links before anything
        // is purged, so the loss bound is checkable afterwards
        std::map<std::uint32_t, std::uint64_t> in_flight_on;
        for (const auto& [t, action] : log) {
            if (t.link && action == "reroute") {
                in_flight_on[t.link->value] = count_in_flight_on_link(*t.link);
            }
        }

        for (NodeId n : detach_nodes) {
            release_node_address(n);
            detach_node(n);
        }

        std::uint64_t purged = 0, rerouted = 0;
        if (recompute) {
            auto outcome = apply_route_plan();
            purged = outcome.first;
            rerouted = outcome.second;
        }

        for (const auto& [t, action] : log) {
            metrics::AdaptationEntry e;
            e.slot = slot_;
            e.trigger = control::to_string(t.kind);
            if (t.link) {
                const auto& l = topo_.link(*t.link);
                e.subject = name(l.endpoint_a) + "-" + name(l.endpoint_b);
                auto it = in_flight_on.find(t.link->value);
                if (it != in_flight_on.end()) e.in_flight_on_link = it->second;
            } else if (t.node) {
                e.subject = name(*t.node);
            }
            e.action = action;
            e.purged = purged;
            e.rerouted = rerouted;
            mx_.adaptation.push_back(e);
            trace_.add(slot_, 0, "trigger",
                       {{"trigger", e.trigger}, {"subject", e.subject}, {"action", e.action}});
        }
    }

    std::uint64_t count_in_flight_on_link(LinkRef link) {
        std::set<std::uint64_t> pkts;
        for (const auto& [key, t] : tx_) {
            if (t.link != link) continue;
            for (std::uint64_t h : t.upstream) note_packet(pkts, h);
            if (!t.raw) {
                for (std::uint64_t h : t.ent.held()) note_packet(pkts, h);
            }
        }
        for (const auto& [when, list] : arrivals_) {
            for (const auto& a : list) {
                if (a.link != link) continue;
                if (a.kind == ArrKind::RlcData) note_packet(pkts, a.data.sdu);
                if (a.kind == ArrKind::Raw) note_packet(pkts, a.payload);
            }
        }
        return pkts.size();
    }

    void note_packet(std::set<std::uint64_t>& out, std::uint64_t pdu_handle) {
        const PduInstance& inst = pdus_[pdu_handle];
        if (!inst.is_control) out.insert(inst.packet);
    }

    bool promote_overloaded_bearers(LinkRef link) {
        bool acted = false;
        for (auto& [bearer, map] : bearer_maps_) {
            if (std::find(map.hops.begin(), map.hops.end(), link) == map.hops.end()) {
                continue;
            }
            const auto key = std::make_pair(map.dl_routing_id.destination.value(),
                                            std::uint16_t{1});
            auto alt = dl_paths_.find(key);
            if (alt == dl_paths_.end()) continue;
            // the alternative must actually avoid the overloaded link
            bool avoids = true;
            for (std::size_t i = 0; i + 1 < alt->second.nodes.size(); ++i) {
                auto l = topo_.find_link(alt->second.nodes[i], alt->second.nodes[i + 1]);
                if (l && *l == link) avoids = false;
            }
            if (!avoids) continue;
            bearer_path_choice_[bearer] = PathId(1);
            acted = true;
        }
        if (acted) remap_bearers();
        return acted;
    }

    void detach_node(NodeId node) {
        auto& ir = integ_.at(node);
        set_state(node, control::IntegrationState::Detached);
        ir.wants = false;
        ir.node_config_sent = false;
        ir.awaiting_acks.clear();
        rt_[node].attached = false;
        rt_[node].has_pattern = false;
        topo_.node(node).operational = false;
        topo_.node(node).parents.clear();
    }

    // Recomputes routes over the current topology and swaps every table
    // atomically. Returns (purged, rerouted) SDU counts.
    std::pair<std::uint64_t, std::uint64_t> apply_route_plan() {
        std::set<LinkRef> excluded;
        for (std::uint32_t v : failed_links_) excluded.insert(LinkRef{v});
        // nodes mid-integration keep their radio attachment
        std::map<NodeId, NodeId> pinned;
        for (const auto& [n, ir] : integ_) {
            if (ir.state == control::IntegrationState::MtAccess ||
                ir.state == control::IntegrationState::BhSetup ||
                ir.state == control::IntegrationState::F1Setup) {
                pinned[n] = ir.parent;
            }
        }
        auto plan = control::compute_routing_tables(topo_, excluded, pinned);

        // nodes that lost every route: their subtrees detach
        for (NodeId n : plan.unreachable) {
            if (integ_.at(n).state != control::IntegrationState::Detached) {
                release_node_address(n);
                detach_node(n);
                metrics::AdaptationEntry e;
                e.slot = slot_;
                e.trigger = "unreachable";
                e.subject = name(n);
                e.action = "detach_subtree";
                mx_.adaptation.push_back(e);
            }
        }

        dl_paths_ = plan.dl_paths;
        serving_donor_ = plan.serving_donor;
        ++path_epoch_;
        path_history_.push_back(dl_paths_);

        for (auto& [node, table] : plan.dl_tables) install_table(node, table, Direction::Dl);
        for (auto& [node, table] : plan.ul_tables) install_table(node, table, Direction::Ul);
        // nodes absent from the plan lose their entries
        for (auto& [node, table] : dl_tables_) {
            if (!plan.dl_tables.count(node)) table.entries.clear();
        }
        for (auto& [node, table] : ul_tables_) {
            if (!plan.ul_tables.count(node)) table.entries.clear();
        }

        reparent_from_paths();
        remap_bearers();
        resync_timing();
        return purge_and_reroute();
    }

    void reparent_from_paths() {
        for (const auto& [key, path] : dl_paths_) {
            if (path.nodes.size() < 2) continue;
            NodeId dest = path.nodes.back();
            NodeId pred = path.nodes[path.nodes.size() - 2];
            auto& r = rt_[dest];
            if (key.second == 0) {
                r.active_parent = pred;
                r.attached = true;
                auto& node = topo_.node(dest);
                node.parents.clear();
                node.parents.push_back(pred);
            } else if (key.second == 1) {
                auto& node = topo_.node(dest);
                if (std::find(node.parents.begin(), node.parents.end(), pred) ==
                    node.parents.end()) {
                    node.parents.push_back(pred);
                }
            }
        }
    }

    void release_node_address(NodeId node) {
        // purge every table entry naming the node, then free the address
        auto addr = topo_.node(node).bap_address;
        if (!addr) return;
        for (auto* tables : {&dl_tables_, &ul_tables_}) {
            for (auto& [owner, table] : *tables) {
                std::erase_if(table.entries, [&](const auto& kv) {
                    return kv.first.destination == *addr;
                });
            }
        }
        std::erase_if(dl_paths_, [&](const auto& kv) {
            return kv.first.first == addr->value();
        });
        topo_.release_bap_address(node);
        // bearers whose access node vanished lose service
        for (auto& [bearer, mapped] : bearer_mapped_) {
            if (!mapped) continue;
            if (access_node_of(bearer) == node) unmap_bearer(bearer);
        }
    }

    NodeId access_node_of(bap::BearerId bearer) const {
        const auto& decl = bearer_decl(bearer);
        const NodeId ue = ids_.at(decl.ue);
        return topo_.node(ue).parents.front();
    }

    const scenario::BearerDecl& bearer_decl(bap::BearerId bearer) const {
        for (const auto& b : scn_.bearers) {
            if (b.id == bearer) return b;
        }
        throw InvariantViolation("unknown bearer");
    }

    void unmap_bearer(bap::BearerId bearer) {
        bearer_mapped_[bearer] = false;
        if (auto it = e2e_tx_.find(bearer); it != e2e_tx_.end()) {
            for (std::uint64_t packet : it->second.drain()) {
                packet_lost(packet, "detached");
            }
            e2e_tx_.erase(it);
        }
        if (auto it = e2e_rx_.find(bearer); it != e2e_rx_.end()) {
            for (std::uint64_t packet : it->second.buffered()) {
                packet_lost(packet, "detached");
            }
            e2e_rx_.erase(it);
        }
        // dedicated channels are released with the mapping
        auto it = bearer_maps_.find(bearer);
        if (it != bearer_maps_.end()) {
            const auto& decl = bearer_decl(bearer);
            if (decl.mapping == bap::MappingPolicy::OneToOne) {
                for (bap::ChannelId ch : it->second.channels) release_channel(ch);
            }
            bearer_maps_.erase(it);
        }
        std::erase_if(bearer_hop_channel_,
                      [&](const auto& kv) { return kv.first.first == bearer; });
    }

    void release_channel(bap::ChannelId ch) {
        // drain both directions; contents are rerouted by the caller's
        // purge pass (they sit in purge_pool_ until then)
        for (auto it = tx_.begin(); it != tx_.end();) {
            if (it->first.ch == ch) {
                auto& t = it->second;
                for (std::uint64_t h : t.upstream) purge_pool_.emplace_back(it->first.sender, h);
                if (!t.raw) {
                    for (std::uint64_t h : t.ent.drain()) {
                        purge_pool_.emplace_back(it->first.sender, h);
                    }
                }
                it = tx_.erase(it);
            } else {
                ++it;
            }
        }
        for (auto it = rx_.begin(); it != rx_.end();) {
            if (it->first.ch == ch) {
                // anything stuck in the reorder buffer is delivered upward
                // now; order is already lost on a released channel
                for (std::uint64_t h : it->second.ent.buffered()) {
                    purge_pool_.emplace_back(NodeId{it->first.sender}, h);
                }
                it = rx_.erase(it);
            } else {
                ++it;
            }
        }
        registry_.release(ch);
    }

    std::vector<std::pair<NodeId, std::uint64_t>> purge_pool_;

    /// After a table swap: drop or re-route everything that was committed
    /// to a link that no longer carries it.
    std::pair<std::uint64_t, std::uint64_t> purge_and_reroute() {
        std::uint64_t purged = 0, rerouted = 0;

        // channels living on failed links are torn down outright
        std::vector<bap::ChannelId> dead;
        for (const auto& [id, ch] : registry_.all()) {
            if (failed_links_.count(ch.link.value)) dead.push_back(id);
        }
        for (bap::ChannelId ch : dead) release_channel(ch);

        // re-validate queued SDUs on live channels: the new table must
        // still send them over this link
        for (auto& [key, t] : tx_) {
            if (t.raw && t.is_access) continue;
            std::deque<std::uint64_t> keep;
            for (std::uint64_t h : t.upstream) {
                const NodeId here{key.sender};
                auto next = next_hop_for(here, h);
                if (next && *next == t.to) {
                    keep.push_back(h);
                } else {
                    purge_pool_.emplace_back(here, h);
                }
            }
            t.upstream = std::move(keep);
        }

        auto pool = std::move(purge_pool_);
        purge_pool_.clear();
        for (auto& [node, handle] : pool) {
            if (reroute_pdu(node, handle)) {
                ++rerouted;
            } else {
                ++purged;
                drop_pdu(handle, "purged");
            }
        }
        return {purged, rerouted};
    }

    std::optional<NodeId> next_hop_for(NodeId at, std::uint64_t handle) {
        const PduInstance& inst = pdus_[handle];
        if (!inst.has_header) return std::nullopt;
        auto decoded = bap::decode_header(inst.header);
        const auto& tables = inst.dir == Direction::Dl ? dl_tables_ : ul_tables_;
        auto it = tables.find(at);
        if (it == tables.end()) return std::nullopt;
        auto d = bap::route_next_hop(it->second, decoded.header.routing_id(),
                                     topo_.node(at).bap_address);
        if (d.kind != bap::RoutingDecision::Kind::NextHop) return std::nullopt;
        return d.next_hop;
    }

    bool reroute_pdu(NodeId at, std::uint64_t handle) {
        PduInstance& inst = pdus_[handle];
        if (!inst.has_header) return false;
        auto decoded = bap::decode_header(inst.header);
        const auto& tables = inst.dir == Direction::Dl ? dl_tables_ : ul_tables_;
        auto it = tables.find(at);
        if (it == tables.end()) return false;
        auto d = bap::route_next_hop(it->second, decoded.header.routing_id(),
                                     topo_.node(at).bap_address);
        if (d.kind == bap::RoutingDecision::Kind::DeliverLocally) {
            deliver_locally(at, handle);
            return true;
        }
        if (d.kind != bap::RoutingDecision::Kind::NextHop) return false;
        auto link = topo_.find_link(at, d.next_hop);
        if (!link) return false;
        auto ch = channel_for(inst, at, *link);
        if (!ch) return false;
        enqueue_pdu(*ch, at, d.next_hop, *link, handle);
        return true;
    }

    void drop_pdu(std::uint64_t handle, const std::string& cause) {
        const PduInstance& inst = pdus_[handle];
        if (inst.is_control) return;  // control plane re-issues on timeout
        packet_lost(inst.packet, cause);
    }

    void packet_lost(std::uint64_t packet, const std::string& cause) {
        PacketRecord& p = packets_[packet];
        if (p.state == PacketRecord::State::Delivered ||
            p.state == PacketRecord::State::Lost) {
            return;  // a stale copy died after the packet already resolved
        }
        p.state = PacketRecord::State::Lost;
        p.loss_cause = cause;
        auto& bm = mx_.bearers[p.bearer];
        ++bm.lost;
        ++bm.loss_causes[cause];
        trace_.add(slot_, static_cast<int>(Phase::Deliver), "pdu_drop",
                   {{"packet", packet}, {"cause", cause}});
    }

    // ------------------------------------------------------------------
    // integration

    void set_state(NodeId node, control::IntegrationState to) {
        auto& ir = integ_.at(node);
        if (!control::legal_transition(ir.state, to)) {
            throw InvariantViolation("illegal integration transition at node " +
                                     name(node) + ": " +
                                     std::string(control::to_string(ir.state)) + " -> " +
                                     control::to_string(to));
        }
        ir.state = to;
        mx_.integration.push_back({slot_, name(node), control::to_string(to)});
        trace_.add(slot_, 0, "integration_state",
                   {{"node", name(node)}, {"state", control::to_string(to)}});
    }

    void advance_integration() {
        for (auto& [node, ir] : integ_) {
            switch (ir.state) {
                case control::IntegrationState::Detached: {
                    if (!ir.wants || slot_ < ir.join_at || slot_ < ir.retry_at) break;
                    start_attach(node, ir);
                    break;
                }
                case control::IntegrationState::MtAccess:
                case control::IntegrationState::BhSetup:
                case control::IntegrationState::F1Setup: {
                    if (ir.step_deadline >= 0 && slot_ > ir.step_deadline) {
                        // roll back and retry later
                        release_node_address(node);
                        detach_node(node);
                        ir.wants = true;
                        ir.retry_at = slot_ + 50;
                    }
                    break;
                }
                case control::IntegrationState::Operational:
                    break;
            }
            if (ir.rach_delivered) {
                ir.rach_delivered = false;
                ir.rach_pending = false;
                on_mt_access(node, ir);
            }
        }
    }

    void start_attach(NodeId node, IntegrationRt& ir) {
        // best adjacent parent: operational, lowest hop depth, then lowest
        // address
        std::optional<NodeId> best;
        int best_depth = 0;
        std::uint16_t best_addr = 0;
        for (NodeId nb : topo_.neighbors(node)) {
            if (!is_backhaul_node(nb) || !operational(nb)) continue;
            auto link = topo_.find_link(node, nb);
            if (topo_.link(*link).blocked || failed_links_.count(link->value)) continue;
            const int d = depth_of(nb);
            const std::uint16_t a =
                topo_.node(nb).bap_address ? topo_.node(nb).bap_address->value() : 0xFFFF;
            if (!best || d < best_depth || (d == best_depth && a < best_addr)) {
                best = nb;
                best_depth = d;
                best_addr = a;
            }
        }
        if (!best) {
            ir.retry_at = slot_ + 20;
            return;
        }
        ir.parent = *best;
        ir.rach_pending = true;
        ir.next_occasion = next_rach_occasion(*best, slot_);
        ir.step_deadline = slot_ + 400;
    }

    std::int64_t next_rach_occasion(NodeId parent, std::int64_t from) const {
        const auto& cfg = rt_.at(parent).du_rach;
        phy::OccasionPattern pat(cfg);
        for (std::int64_t s = from + 1; s <= from + 2 * cfg.period + 2; ++s) {
            if (pat.occupies(static_cast<std::uint64_t>(s))) return s;
        }
        return from + 1;
    }

    int depth_of(NodeId n) const {
        int depth = 0;
        NodeId cur = n;
        std::set<NodeId> seen;
        while (topo_.node(cur).role == topo::NodeRole::IabNode ||
               topo_.node(cur).role == topo::NodeRole::Ue) {
            if (!rt_.at(cur).attached || !seen.insert(cur).second) break;
            cur = rt_.at(cur).active_parent;
            ++depth;
        }
        return depth;
    }

    /// Step 2: address assignment, default channels, table updates at the
    /// intermediate hops. The new node's route is its parent's registered
    /// path plus the access hop; the rest of the network is untouched.
    void on_mt_access(NodeId node, IntegrationRt& ir) {
        if (!operational(ir.parent)) {
            // parent vanished between RACH and now
            detach_node(node);
            integ_.at(node).wants = true;
            integ_.at(node).retry_at = slot_ + 20;
            return;
        }
        set_state(node, control::IntegrationState::MtAccess);
        rt_[node].active_parent = ir.parent;
        rt_[node].attached = true;
        auto& tnode = topo_.node(node);
        tnode.parents = {ir.parent};

        auto addr = alloc_.allocate(topo_, dl_tables_, ul_tables_);
        if (!addr) throw InvariantViolation("BAP address space exhausted");
        topo_.assign_bap_address(node, *addr);

        std::vector<NodeId> path;
        if (topo_.node(ir.parent).role == topo::NodeRole::DonorDu) {
            path = {ir.parent, node};
            serving_donor_[node] = ir.parent;
        } else {
            const auto paddr = topo_.node(ir.parent).bap_address;
            auto pit = dl_paths_.find({paddr->value(), 0});
            if (pit == dl_paths_.end()) {
                topo_.release_bap_address(node);
                detach_node(node);
                integ_.at(node).wants = true;
                integ_.at(node).retry_at = slot_ + 20;
                return;
            }
            path = pit->second.nodes;
            path.push_back(node);
            serving_donor_[node] = path.front();
        }
        dl_paths_[{addr->value(), 0}] = {*addr, PathId(0), path};
        ++path_epoch_;
        path_history_.push_back(dl_paths_);

        // default channels: one per QoS class per hop, plus a dedicated
        // F1-AP channel per hop
        std::set<std::uint8_t> classes;
        for (const auto& b : scn_.bearers) classes.insert(b.qos.qos_class);
        if (classes.empty()) classes.insert(0);
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            auto link = topo_.find_link(path[i], path[i + 1]);
            for (std::uint8_t c : classes) {
                if (!registry_.find_class_channel(*link, c)) {
                    registry_.establish(*link, c, bap::MappingPolicy::ManyToOne, c);
                }
            }
            if (!f1_channels_.count({node.value, link->value})) {
                f1_channels_[{node.value, link->value}] =
                    registry_.establish(*link, -1, bap::MappingPolicy::OneToOne,
                                        node.value, /*is_control=*/true);
            }
        }

        // extend the tables of every node along the path: instantly at the
        // donor DU, via F1-AP config PDUs at the operational intermediates
        const BapAddress donor_addr = *topo_.node(path.front()).bap_address;
        ir.awaiting_acks.clear();
        ir.node_config_sent = false;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            NodeId hop = path[i];
            CuMsg m;
            m.kind = control::CuMessageKind::InstallRoutingTable;
            m.target = hop;
            m.about = node;
            m.id = next_msg_id_++;
            bap::RoutingTable dl = dl_tables_.count(hop) ? dl_tables_.at(hop)
                                                         : bap::RoutingTable{};
            dl.direction = Direction::Dl;
            dl.owner = hop;
            dl.entries[{*addr, PathId(0)}] = path[i + 1];
            m.dl = std::move(dl);
            if (i > 0) {
                bap::RoutingTable ul = ul_tables_.count(hop) ? ul_tables_.at(hop)
                                                             : bap::RoutingTable{};
                ul.direction = Direction::Ul;
                ul.owner = hop;
                ul.entries.emplace(bap::BapRoutingId{donor_addr, PathId(0)}, path[i - 1]);
                m.ul = std::move(ul);
            }
            const std::uint32_t idx = store_msg(m);
            if (topo_.node(hop).role == topo::NodeRole::DonorDu) {
                apply_config_at(hop, idx);  // F1 to the donor DU is internal
            } else {
                ir.awaiting_acks.insert(m.id);
                send_control_pdu(serving_donor_du_for(node), hop, idx, Direction::Dl, hop);
            }
        }
        ir.step_deadline = slot_ + 400;
        if (ir.awaiting_acks.empty()) send_node_config(node);
    }

    /// Step 2 completion toward the joining node itself: the bundled
    /// address + table + pattern config rides an SRB relay over the parent.
    void send_node_config(NodeId node) {
        auto& ir = integ_.at(node);
        ir.node_config_sent = true;
        CuMsg m;
        m.kind = control::CuMessageKind::AssignBapAddress;
        m.target = node;
        m.about = node;
        m.id = next_msg_id_++;
        m.addr = topo_.node(node).bap_address;
        // the node's own tables: UL toward the donor via its parent
        bap::RoutingTable ul;
        ul.direction = Direction::Ul;
        ul.owner = node;
        const NodeId donor = serving_donor_du_for(node);
        ul.entries[{*topo_.node(donor).bap_address, PathId(0)}] = ir.parent;
        m.ul = std::move(ul);
        m.pattern = pattern_for(node);
        m.rach = rach_for(node);
        const std::uint32_t idx = store_msg(m);

        NodeId parent = ir.parent;
        if (topo_.node(parent).role == topo::NodeRole::DonorDu) {
            srb_[{parent.value, node.value}].push_back({idx, -1});
        } else {
            // carry it to the parent over F1-AP; the parent relays on SRB
            CuMsg carry;
            carry.kind = control::CuMessageKind::EstablishBhChannel;
            carry.target = parent;
            carry.about = node;
            carry.id = next_msg_id_++;
            carry.ack_of = idx;  // payload to relay
            const std::uint32_t cidx = store_msg(carry);
            relay_payload_[cidx] = idx;
            send_control_pdu(serving_donor_du_for(node), parent, cidx, Direction::Dl,
                             parent);
        }
    }

    std::map<std::uint32_t, std::uint32_t> relay_payload_;

    phy::ResourcePattern pattern_for(NodeId node) {
        const auto& decl = scn_.nodes[node.value];
        auto it = scn_.patterns.per_node.find(decl.name);
        if (it != scn_.patterns.per_node.end()) return it->second;
        int period = scn_.patterns.auto_semi_static_period.value_or(2);
        const int depth = depth_of(node);
        auto patterns = phy::generate_semi_static_pattern(std::max(depth, 1), period);
        return patterns[static_cast<std::size_t>(std::min<int>(depth, static_cast<int>(patterns.size()) - 1))];
    }

    phy::RachConfig rach_for(NodeId node) {
        for (const auto& r : scn_.rach) {
            if (ids_.at(r.node) == node &&
                r.config.owner_side == phy::OccasionSide::DuOccasions) {
                return r.config;
            }
        }
        phy::RachConfig cfg{phy::OccasionSide::DuOccasions, 8, 0,
                            phy::PreambleFormat::LongRange, 2};
        return cfg;
    }

    void send_f1_setup_request(NodeId node) {
        CuMsg m;
        m.kind = control::CuMessageKind::F1SetupRequest;
        m.target = serving_donor_du_for(node);
        m.about = node;
        m.id = next_msg_id_++;
        const std::uint32_t idx = store_msg(m);
        send_control_pdu(node, m.target, idx, Direction::Ul, node);
        trace_.add(slot_, 0, "f1_setup_request_tx", {{"node", name(node)}});
    }

    void complete_integration(NodeId node) {
        set_state(node, control::IntegrationState::Operational);
        topo_.node(node).operational = true;
        integ_.at(node).step_deadline = -1;
        control::AdaptationTrigger t;
        t.kind = control::AdaptationTrigger::Kind::NewNodeIntegration;
        t.slot = slot_;
        t.node = node;
        trigger_q_.push_back(t);
    }

    // ------------------------------------------------------------------
    // bearers and traffic

    void map_ready_bearers() {
        for (const auto& b : scn_.bearers) {
            if (bearer_mapped_[b.id]) continue;
            if (bearer_was_mapped_[b.id]) continue;  // lost service; stays down
            const NodeId ue = ids_.at(b.ue);
            const NodeId access = topo_.node(ue).parents.front();
            if (!operational(access)) continue;
            map_bearer(b, access);
        }
    }

    void map_bearer(const scenario::BearerDecl& b, NodeId access) {
        const NodeId ue = ids_.at(b.ue);
        bap::BearerMapping map;
        map.bearer = b.id;

        if (topo_.node(access).role == topo::NodeRole::DonorDu) {
            // UE directly on the donor DU: no backhaul hops at all
            map.dl_routing_id = {*topo_.node(access).bap_address, PathId(0)};
            map.ul_routing_id = map.dl_routing_id;
        } else {
            const auto addr = topo_.node(access).bap_address;
            PathId choice = bearer_path_choice_[b.id];
            auto key = std::make_pair(addr->value(), choice.value());
            if (!dl_paths_.count(key)) {
                choice = PathId(0);
                key = {addr->value(), 0};
            }
            const auto& path = dl_paths_.at(key).nodes;
            for (std::size_t i = 0; i + 1 < path.size(); ++i) {
                map.hops.push_back(*topo_.find_link(path[i], path[i + 1]));
            }
            map.channels = bap::map_ingress_bearer(b.id, b.qos, b.mapping, map.hops,
                                                   registry_);
            map.dl_routing_id = {*addr, choice};
            const NodeId donor = serving_donor_du_for(access);
            map.ul_routing_id = {*topo_.node(donor).bap_address, choice};
        }

        // access-link channel (the UE radio bearer itself)
        auto access_link = topo_.find_link(access, ue);
        if (!access_channels_.count(b.id)) {
            access_channels_[b.id] = registry_.establish(
                *access_link, b.qos.priority, bap::MappingPolicy::OneToOne, b.id);
        }

        for (std::size_t i = 0; i < map.hops.size(); ++i) {
            bearer_hop_channel_[{b.id, map.hops[i].value}] = map.channels[i];
        }
        bearer_maps_[b.id] = map;
        bearer_mapped_[b.id] = true;
        bearer_was_mapped_[b.id] = true;
        rt_[ue].attached = true;
        rt_[ue].active_parent = access;
        trace_.add(slot_, 0, "bearer_mapped",
                   {{"bearer", b.id}, {"policy", bap::to_string(b.mapping)}});

        // anything buffered while the path was being built flows now
        auto& buf = pre_map_buffer_[b.id];
        while (!buf.empty()) {
            std::uint64_t packet = buf.front();
            buf.pop_front();
            originate_packet(packet);
        }
    }

    void remap_bearers() {
        for (const auto& b : scn_.bearers) {
            if (!bearer_mapped_[b.id]) continue;
            const NodeId access = access_node_of(b.id);
            if (!operational(access)) {
                unmap_bearer(b.id);
                continue;
            }
            // rebuild against the current registry state; ManyToOne hops
            // reuse per-class channels, OneToOne re-dedicates
            auto old = bearer_maps_.find(b.id);
            std::vector<bap::ChannelId> old_channels;
            std::vector<LinkRef> old_hops;
            if (old != bearer_maps_.end()) {
                old_channels = old->second.channels;
                old_hops = old->second.hops;
            }
            bearer_mapped_[b.id] = false;
            std::erase_if(bearer_hop_channel_,
                          [&](const auto& kv) { return kv.first.first == b.id; });
            map_bearer(b, access);
            if (b.mapping == bap::MappingPolicy::OneToOne) {
                const auto& now = bearer_maps_.at(b.id);
                if (old != bearer_maps_.end() && old_hops == now.hops) {
                    // path unchanged: keep the old dedicated channels
                    bearer_maps_.at(b.id).channels = old_channels;
                    for (std::size_t i = 0; i < old_hops.size(); ++i) {
                        bearer_hop_channel_[{b.id, old_hops[i].value}] = old_channels[i];
                    }
                    for (bap::ChannelId ch : now.channels) {
                        if (std::find(old_channels.begin(), old_channels.end(), ch) ==
                            old_channels.end()) {
                            registry_.release(ch);
                        }
                    }
                } else {
                    for (bap::ChannelId ch : old_channels) release_channel(ch);
                }
            }
        }
    }

    void generate_traffic() {
        for (const auto& t : traffic_) {
            if (!generates_now(t.decl)) continue;
            const auto& b = bearer_decl(t.decl.bearer);
            PacketRecord p;
            p.id = packets_.size();
            p.bearer = b.id;
            p.dir = b.direction;
            p.bearer_seq = bearer_gen_count_[b.id]++;
            p.gen_slot = slot_;
            packets_.push_back(p);
            ++mx_.bearers[b.id].generated;

            if (!bearer_mapped_[b.id]) {
                if (bearer_was_mapped_[b.id]) {
                    packet_lost(p.id, "detached");
                } else {
                    pre_map_buffer_[b.id].push_back(p.id);
                }
                continue;
            }
            originate_packet(p.id);
        }
    }

    bool generates_now(const scenario::TrafficDecl& t) const {
        if (slot_ < t.start_slot) return false;
        const std::int64_t rel = slot_ - t.start_slot;
        switch (t.kind) {
            case scenario::TrafficDecl::Kind::VoipCbr:
            case scenario::TrafficDecl::Kind::StreamingCbr:
                return rel % t.interval_slots == 0;
            case scenario::TrafficDecl::Kind::WebOnOff: {
                const std::int64_t cycle = t.on_slots + t.off_slots;
                const std::int64_t ph = rel % cycle;
                return ph < t.on_slots && ph % t.interval_slots == 0;
            }
        }
        return false;
    }

    /// Builds the BAP PDU for a mapped packet and queues it at its origin.
    void originate_packet(std::uint64_t packet) {
        PacketRecord& p = packets_[packet];
        const auto& b = bearer_decl(p.bearer);
        const auto& map = bearer_maps_.at(p.bearer);
        const NodeId ue = ids_.at(b.ue);
        const NodeId access = topo_.node(ue).parents.front();

        p.state = PacketRecord::State::InFlight;
        p.path_epoch = path_epoch_;

        if (scn_.arq_mode == rlc::ArqMode::EndToEndReference) {
            auto& ent = e2e_transmitter(p.bearer);
            if (!ent.enqueue(packet)) {
                packet_lost(packet, "e2e_window_overflow");
            }
            return;
        }

        if (p.dir == Direction::Dl) {
            p.routing_id = map.dl_routing_id;
            const NodeId donor = serving_donor_du_for(access);
            std::uint64_t h = make_data_pdu(packet, donor, map.dl_routing_id, Direction::Dl);
            route_and_enqueue(donor, h);
        } else {
            p.routing_id = map.ul_routing_id;
            // raw SDU rides the access link; the access node adds the header
            PduInstance inst;
            inst.packet = packet;
            inst.dir = Direction::Ul;
            inst.bearer = p.bearer;
            const std::uint64_t h = store_pdu(std::move(inst));
            auto link = topo_.find_link(ue, access);
            enqueue_pdu(access_channels_.at(p.bearer), ue, access, *link, h);
        }
    }

    std::uint64_t make_data_pdu(std::uint64_t packet, NodeId origin,
                                const bap::BapRoutingId& rid, Direction dir) {
        PduInstance inst;
        bap::BapHeader h;
        h.data_control_flag = true;
        h.destination = rid.destination;
        h.path_id = rid.path_id;
        inst.header = bap::encode_header(h);
        inst.has_header = true;
        inst.packet = packet;
        inst.dir = dir;
        inst.bearer = packets_[packet].bearer;
        inst.visited = {origin};
        return store_pdu(std::move(inst));
    }

    rlc::RlcTransmitter& e2e_transmitter(bap::BearerId bearer) {
        auto it = e2e_tx_.find(bearer);
        if (it == e2e_tx_.end()) {
            rlc::RlcConfig cfg = scn_.rlc;
            const auto& map = bearer_maps_.at(bearer);
            cfg.retx_timeout_slots =
                scn_.rlc.retx_timeout_slots * static_cast<int>(map.hops.size() + 2);
            cfg.reassembly_timeout_slots = (cfg.max_retx + 2) * cfg.retx_timeout_slots;
            it = e2e_tx_.emplace(bearer, rlc::RlcTransmitter(bearer, cfg)).first;
        }
        return it->second;
    }

    rlc::RlcReceiver& e2e_receiver(bap::BearerId bearer) {
        auto it = e2e_rx_.find(bearer);
        if (it == e2e_rx_.end()) {
            rlc::RlcConfig cfg = scn_.rlc;
            cfg.reassembly_timeout_slots *= 4;
            it = e2e_rx_.emplace(bearer, rlc::RlcReceiver(bearer, cfg)).first;
        }
        return it->second;
    }

    // ------------------------------------------------------------------
    // forwarding plumbing

    /// Routes a header-carrying PDU at `node` and queues it toward the next
    /// hop (or delivers it locally).
    void route_and_enqueue(NodeId node, std::uint64_t handle) {
        PduInstance& inst = pdus_[handle];
        auto decoded = bap::decode_header(inst.header);
        const auto self = topo_.node(node).bap_address;
        if (self && decoded.header.destination == *self) {
            deliver_locally(node, handle);
            return;
        }
        const auto& tables = inst.dir == Direction::Dl ? dl_tables_ : ul_tables_;
        auto tit = tables.find(node);
        bap::RoutingDecision d;
        if (tit != tables.end()) {
            d = bap::route_next_hop(tit->second, decoded.header.routing_id(), self);
        }
        if (d.used_fallback) ++rt_[node].fallback;
        if (d.kind != bap::RoutingDecision::Kind::NextHop) {
            ++rt_[node].no_route;
            trace_.add(slot_, static_cast<int>(Phase::Deliver), "no_route",
                       {{"node", name(node)},
                        {"dest", decoded.header.destination.value()},
                        {"path", decoded.header.path_id.value()}});
            drop_pdu(handle, "no_route");
            return;
        }
        auto link = topo_.find_link(node, d.next_hop);
        if (!link) {
            ++rt_[node].no_route;
            drop_pdu(handle, "no_route");
            return;
        }
        auto ch = channel_for(inst, node, *link);
        if (!ch) {
            if (scn_.strict) {
                throw MappingIncomplete("no channel for bearer " +
                                        std::to_string(inst.bearer) + " on link " +
                                        std::to_string(link->value));
            }
            drop_pdu(handle, "no_channel");
            return;
        }
        enqueue_pdu(*ch, node, d.next_hop, *link, handle);
    }

    std::optional<bap::ChannelId> channel_for(const PduInstance& inst, NodeId at,
                                              LinkRef link) {
        if (inst.is_control) {
            auto it = f1_channels_.find({inst.f1_owner.value, link.value});
            if (it != f1_channels_.end()) return it->second;
            // F1 traffic may ride any established class channel as a last
            // resort (reconfiguration races)
            auto any = registry_.find_class_channel(link, 0);
            return any;
        }
        auto it = bearer_hop_channel_.find({inst.bearer, link.value});
        if (it != bearer_hop_channel_.end()) return it->second;
        const auto& decl = bearer_decl(inst.bearer);
        return registry_.find_class_channel(link, decl.qos.qos_class);
    }

    void enqueue_pdu(bap::ChannelId ch, NodeId from, NodeId to, LinkRef link,
                     std::uint64_t handle) {
        auto& t = tx_slot(ch, from, to, link);
        t.upstream.push_back(handle);
    }

    TxRt& tx_slot(bap::ChannelId ch, NodeId from, NodeId to, LinkRef link) {
        const TxKey key{ch, from.value};
        auto it = tx_.find(key);
        if (it == tx_.end()) {
            TxRt t;
            const bap::BhRlcChannel* info = registry_.find(ch);
            t.priority = info ? info->priority : 0;
            t.link = link;
            t.to = to;
            const bool access_link = !is_backhaul_node(from) || !is_backhaul_node(to);
            t.is_access = access_link;
            t.raw = (scn_.arq_mode == rlc::ArqMode::EndToEndReference) &&
                    !(info && info->is_control);
            if (!t.raw) t.ent = rlc::RlcTransmitter(ch, scn_.rlc);
            it = tx_.emplace(key, std::move(t)).first;
        }
        return it->second;
    }

    RxRt& rx_slot(bap::ChannelId ch, NodeId at) {
        const TxKey key{ch, at.value};
        auto it = rx_.find(key);
        if (it == rx_.end()) {
            it = rx_.emplace(key, RxRt{rlc::RlcReceiver(ch, scn_.rlc)}).first;
        }
        return it->second;
    }

    /// BAP destination reached: strip the header and hand the payload to
    /// whatever sits above (CU inbox, access leg, or the UL sink).
    void deliver_locally(NodeId node, std::uint64_t handle) {
        PduInstance& inst = pdus_[handle];
        if (inst.is_control) {
            const CuMsg& m = cu_msgs_[inst.ctrl];
            if (inst.dir == Direction::Ul) {
                // CU-bound: requests and acks
                if (m.kind == control::CuMessageKind::F1SetupRequest) {
                    trace_.add(slot_, static_cast<int>(Phase::Deliver), "f1_setup_request_rx",
                               {{"node", name(m.about)}});
                }
                cu_inbox_.push_back(inst.ctrl);
            } else {
                auto relay = relay_payload_.find(inst.ctrl);
                if (relay != relay_payload_.end()) {
                    // parent relays the joining node's bundle over SRB
                    srb_[{node.value, cu_msgs_[relay->second].target.value}].push_back(
                        {relay->second, -1});
                } else {
                    pending_apply_[node].push_back(inst.ctrl);
                }
            }
            return;
        }
        PacketRecord& p = packets_[inst.packet];
        if (p.dir == Direction::Ul) {
            // the donor DU is the UL sink
            if (scn_.arq_mode == rlc::ArqMode::EndToEndReference && inst.is_e2e) {
                feed_e2e_receiver(node, inst);
                return;
            }
            complete_packet(node, inst.packet, node, &inst);
            return;
        }
        // DL: strip the header and continue over the access link to the UE
        const auto& decl = bearer_decl(inst.bearer);
        const NodeId ue = ids_.at(decl.ue);
        auto link = topo_.find_link(node, ue);
        auto chit = access_channels_.find(inst.bearer);
        if (!link || chit == access_channels_.end()) {
            drop_pdu(handle, "no_channel");
            return;
        }
        inst.has_header = false;
        enqueue_pdu(chit->second, node, ue, *link, handle);
    }

    void feed_e2e_receiver(NodeId node, PduInstance& inst) {
        rlc::RlcDataPdu pdu;
        pdu.channel = inst.bearer;
        pdu.seq = inst.e2e_seq;
        pdu.poll = inst.e2e_poll;
        pdu.sdu = inst.packet;
        auto outcome = e2e_receiver(inst.bearer).rx_pdu(pdu, slot_);
        for (std::uint64_t packet : outcome.delivered) {
            complete_packet(node, packet, packets_[packet].dir == Direction::Dl
                                              ? ids_.at(bearer_decl(packets_[packet].bearer).ue)
                                              : node);
        }
        if (outcome.status) {
            // the status rides the control plane back to the origin
            const auto& map = bearer_maps_.at(inst.bearer);
            Arrival a;
            a.kind = ArrKind::E2eStatus;
            a.bearer = inst.bearer;
            a.status = *outcome.status;
            a.to = e2e_origin(inst.bearer);
            std::int64_t fb = static_cast<std::int64_t>(map.hops.size()) + 2;
            arrivals_[slot_ + std::max<std::int64_t>(1, fb)].push_back(a);
        }
    }

    NodeId e2e_origin(bap::BearerId bearer) {
        const auto& decl = bearer_decl(bearer);
        if (decl.direction == Direction::Dl) {
            return serving_donor_du_for(access_node_of(bearer));
        }
        return ids_.at(decl.ue);
    }

    void complete_packet(NodeId at, std::uint64_t packet, NodeId terminus,
                         PduInstance* inst = nullptr) {
        PacketRecord& p = packets_[packet];
        if (p.state == PacketRecord::State::Delivered) return;
        if (p.state == PacketRecord::State::Lost) return;
        p.state = PacketRecord::State::Delivered;
        p.deliver_slot = slot_;
        if (inst) p.visited = inst->visited;
        auto& bm = mx_.bearers[p.bearer];
        ++bm.delivered;
        bm.latencies.push_back(slot_ - p.gen_slot);
        auto& last = bearer_last_delivered_seq_[p.bearer];
        if (static_cast<std::int64_t>(p.bearer_seq) < last) {
            ++bm.out_of_order;
        } else {
            last = static_cast<std::int64_t>(p.bearer_seq);
        }
        trace_.add(slot_, static_cast<int>(Phase::Deliver), "pdu_deliver",
                   {{"packet", packet}, {"bearer", p.bearer}, {"at", name(terminus)}});
        (void)at;
    }

    // ==================================================================
    // Phase 2: MtActivityFix
    // ==================================================================

    std::vector<NodeId> nodes_by_depth() const {
        std::vector<std::pair<int, NodeId>> order;
        for (const auto& [id, node] : topo_.nodes()) {
            if (node.role == topo::NodeRole::DonorCu) continue;
            if (node.role == topo::NodeRole::DonorDu) {
                order.emplace_back(0, id);
            } else if (rt_.at(id).attached) {
                order.emplace_back(depth_of(id), id);
            }
        }
        std::sort(order.begin(), order.end());
        std::vector<NodeId> out;
        out.reserve(order.size());
        for (auto& [d, id] : order) out.push_back(id);
        return out;
    }

    void mt_activity_fix() {
        // reset per-slot state
        for (auto& [id, r] : rt_) {
            r.activity = {};
            r.avail = {};
            r.du_dir_fixed.reset();
            r.mt_active = false;
            r.du_active = false;
        }
        for (auto& l : lrt_) l.budget_used = 0;

        const auto order = nodes_by_depth();
        for (NodeId n : order) {
            NodeRt& r = rt_[n];
            const auto& node = topo_.node(n);

            // scheduled explicit releases for this slot
            if (r.attached && node.has_mt() &&
                releases_.released(r.active_parent, n, slot_)) {
                r.activity.explicit_release = true;
                trace_.add(slot_, 1, "soft_release",
                           {{"parent", name(r.active_parent)}, {"child", name(n)}});
            }
            if (node.has_mt() && r.attached) {
                r.activity.has_ul_data = mt_has_ul_backlog(n);
            }

            // resolve this node's availability (parents already ran and
            // set our grant / expected-DL flags)
            r.avail = availability_of(n, r);

            if (!node.has_du() || !r.avail.du_usable) {
                if (node.has_du() && du_has_backlog(n)) ++r.hd_idle;
                continue;
            }

            fix_du_direction_and_children(n, r);
        }
        releases_.forget_before(slot_ - 4);
    }

    phy::SlotAvailability availability_of(NodeId n, NodeRt& r) {
        const auto& node = topo_.node(n);
        if (node.role == topo::NodeRole::Ue) {
            phy::SlotAvailability a;
            a.mt_usable = true;
            a.mt_dir = phy::SlotDirection::Flexible;
            return a;
        }
        if (node.role == topo::NodeRole::DonorDu) {
            const auto& cfg = r.pattern.at(static_cast<std::uint64_t>(slot_));
            return phy::resolve_du_only(cfg.du_dir, cfg.du_attr);
        }
        // IAB node
        if (!r.has_pattern) {
            // pre-configuration the node is MT-only
            phy::SlotAvailability a;
            a.mt_usable = true;
            a.mt_dir = phy::SlotDirection::Flexible;
            return a;
        }
        const auto& cfg = r.pattern.at(static_cast<std::uint64_t>(slot_));
        return phy::resolve_slot_availability(cfg.mt_dir, cfg.du_dir, cfg.du_attr,
                                              r.activity, node.caps);
    }

    bool mt_has_ul_backlog(NodeId n) const {
        const NodeRt& r = rt_.at(n);
        if (!r.attached) return false;
        auto link = topo_.find_link(n, r.active_parent);
        if (!link) return false;
        for (const auto& [key, t] : tx_) {
            if (key.sender == n.value && t.link == *link && t.pending() > 0) return true;
        }
        return false;
    }

    bool du_has_backlog(NodeId n) const {
        for (const auto& [key, t] : tx_) {
            if (key.sender != n.value || t.pending() == 0) continue;
            // DL side: this node transmits toward a child
            const NodeRt* peer = rt_.count(t.to) ? &rt_.at(t.to) : nullptr;
            if (peer && peer->attached && peer->active_parent == n) return true;
        }
        for (const auto& [key, q] : srb_) {
            if (key.first == n.value && !q.empty()) return true;
        }
        return false;
    }

    void fix_du_direction_and_children(NodeId n, NodeRt& r) {
        const auto children = attached_children(n);

        bool dl_work = false, ul_work = false;
        std::vector<NodeId> dl_kids, ul_kids;
        for (NodeId c : children) {
            const bool receivable = child_mt_open(c);
            if (!receivable) continue;
            if (dl_backlog_toward(n, c)) {
                dl_work = true;
                dl_kids.push_back(c);
            }
            if (topo_.node(c).has_mt() && mt_has_ul_backlog(c)) {
                ul_work = true;
                ul_kids.push_back(c);
            }
        }

        const auto& cfg_dir = r.avail.du_dir.value_or(phy::SlotDirection::Flexible);
        std::optional<phy::SlotDirection> dir;
        if (cfg_dir == phy::SlotDirection::Downlink) {
            if (dl_work) dir = phy::SlotDirection::Downlink;
        } else if (cfg_dir == phy::SlotDirection::Uplink) {
            if (ul_work) dir = phy::SlotDirection::Uplink;
        } else {
            if (dl_work && ul_work) {
                dir = (r.du_alternation++ % 2 == 0) ? phy::SlotDirection::Downlink
                                                    : phy::SlotDirection::Uplink;
            } else if (dl_work) {
                dir = phy::SlotDirection::Downlink;
            } else if (ul_work) {
                dir = phy::SlotDirection::Uplink;
            }
        }
        r.du_dir_fixed = dir;

        std::set<NodeId> touched;
        if (dir == phy::SlotDirection::Downlink) {
            for (NodeId c : dl_kids) {
                rt_[c].activity.expecting_dl = true;
                touched.insert(c);
            }
        } else if (dir == phy::SlotDirection::Uplink) {
            for (NodeId c : ul_kids) {
                if (!releases_.note_grant(n, c, slot_)) {
                    ++r.grant_conflicts;
                    trace_.add(slot_, 1, "grant_rejected",
                               {{"parent", name(n)}, {"child", name(c)}});
                    continue;
                }
                rt_[c].activity.has_ul_grant = true;
                touched.insert(c);
            }
        }

        if (scn_.auto_soft_release) {
            for (NodeId c : children) {
                if (touched.count(c)) continue;
                if (releases_.issue_release(n, c, slot_)) {
                    rt_[c].activity.explicit_release = true;
                }
            }
        }
    }

    /// Whether a child's MT could be active this slot (its own DU does not
    /// hold the slot Hard, unless capabilities lift the constraint).
    bool child_mt_open(NodeId c) const {
        const auto& node = topo_.node(c);
        if (!node.has_mt()) return false;
        if (node.caps.exempt_from_half_duplex()) return true;
        const NodeRt& r = rt_.at(c);
        if (!r.has_pattern) return true;
        return r.pattern.at(static_cast<std::uint64_t>(slot_)).du_attr !=
               phy::DuAttribute::Hard;
    }

    bool dl_backlog_toward(NodeId n, NodeId c) const {
        if (srb_.count({n.value, c.value}) && !srb_.at({n.value, c.value}).empty()) {
            return true;
        }
        auto link = topo_.find_link(n, c);
        if (!link) return false;
        for (const auto& [key, t] : tx_) {
            if (key.sender == n.value && t.link == *link && t.to == c && t.pending() > 0) {
                return true;
            }
        }
        return false;
    }

    // ==================================================================
    // Phase 3: Schedule
    // ==================================================================

    void schedule() {
        txs_.clear();
        pump_e2e();
        run_tx_timers();

        for (auto& [n, r] : rt_) {
            const auto& node = topo_.node(n);
            if (node.role == topo::NodeRole::DonorCu) continue;

            // DU side transmits toward children in a Downlink slot
            if (node.has_du() && r.avail.du_usable &&
                r.du_dir_fixed == phy::SlotDirection::Downlink) {
                for (NodeId c : attached_children(n)) {
                    if (!child_mt_open(c)) continue;
                    serve_link(n, c, /*is_dl=*/true);
                }
            }
            // MT side transmits toward the parent when granted
            if (node.has_mt() && r.attached && r.avail.mt_usable &&
                r.activity.has_ul_grant) {
                serve_link(n, r.active_parent, /*is_dl=*/false);
            }
        }

        schedule_rach();
    }

    void pump_e2e() {
        if (scn_.arq_mode != rlc::ArqMode::EndToEndReference) return;
        for (auto& [bearer, ent] : e2e_tx_) {
            // exhausted SDUs die at the origin
            for (const auto& ex : ent.on_slot(slot_)) {
                packet_lost(ex.sdu, "retx_exhausted_e2e");
            }
            if (!bearer_mapped_[bearer]) continue;
            const auto& decl = bearer_decl(bearer);
            const auto& map = bearer_maps_.at(bearer);
            while (auto pdu = ent.next_pdu(slot_)) {
                PduInstance inst;
                inst.packet = pdu->sdu;
                inst.bearer = bearer;
                inst.dir = decl.direction;
                inst.is_e2e = true;
                inst.e2e_seq = pdu->seq;
                inst.e2e_poll = pdu->poll;
                if (decl.direction == Direction::Dl) {
                    bap::BapHeader h;
                    h.destination = map.dl_routing_id.destination;
                    h.path_id = map.dl_routing_id.path_id;
                    inst.header = bap::encode_header(h);
                    inst.has_header = true;
                    const NodeId donor = e2e_origin(bearer);
                    const std::uint64_t handle = store_pdu(std::move(inst));
                    pdus_[handle].visited = {donor};
                    route_and_enqueue(donor, handle);
                } else {
                    const NodeId ue = ids_.at(decl.ue);
                    const NodeId access = topo_.node(ue).parents.front();
                    auto link = topo_.find_link(ue, access);
                    const std::uint64_t handle = store_pdu(std::move(inst));
                    enqueue_pdu(access_channels_.at(bearer), ue, access, *link, handle);
                }
            }
        }
        for (auto& [bearer, ent] : e2e_rx_) {
            for (std::uint64_t packet : ent.on_slot(slot_)) {
                const auto& decl = bearer_decl(bearer);
                const NodeId terminus = decl.direction == Direction::Dl
                                            ? ids_.at(decl.ue)
                                            : e2e_origin(bearer);
                complete_packet(terminus, packet, terminus);
            }
        }
    }

    void run_tx_timers() {
        for (auto& [key, t] : tx_) {
            if (t.raw) continue;
            for (const auto& ex : t.ent.on_slot(slot_)) {
                handle_exhaustion(NodeId{key.sender}, t, ex);
            }
        }
    }

    void handle_exhaustion(NodeId sender, TxRt& t, const rlc::RetxExhausted& ex) {
        trace_.add(slot_, static_cast<int>(Phase::Schedule), "rlc_exhausted",
                   {{"node", name(sender)}, {"channel", ex.channel}, {"seq", ex.seq}});
        drop_pdu(ex.sdu, "retx_exhausted");
        control::AdaptationTrigger trig;
        trig.kind = control::AdaptationTrigger::Kind::LinkFailure;
        trig.slot = slot_;
        trig.link = t.link;
        trigger_q_.push_back(trig);
    }

    void serve_link(NodeId from, NodeId to, bool is_dl) {
        auto link = topo_.find_link(from, to);
        if (!link) return;
        LinkRt& lr = lrt_[link->value];
        const int capacity = topo_.link(*link).per_slot_capacity;

        // SRB relay first: control plane outranks everything
        if (is_dl) {
            auto sit = srb_.find({from.value, to.value});
            if (sit != srb_.end()) {
                auto& q = sit->second;
                while (!q.empty() && lr.budget_used < capacity) {
                    SrbMsg m = q.front();
                    q.pop_front();
                    Transmission tx;
                    tx.kind = ArrKind::SrbRelay;
                    tx.link = *link;
                    tx.from = from;
                    tx.to = to;
                    tx.payload = m.ctrl;
                    txs_.push_back(tx);
                    ++lr.budget_used;
                }
            }
        }

        while (lr.budget_used < capacity) {
            // strict priority, ties by longest queue then lowest channel id;
            // re-evaluated per PDU
            TxRt* best = nullptr;
            TxKey best_key{};
            for (auto& [key, t] : tx_) {
                if (key.sender != from.value || t.link != *link || t.to != to) continue;
                if (t.pending() == 0) continue;
                if (!best) {
                    best = &t;
                    best_key = key;
                    continue;
                }
                if (t.priority < best->priority ||
                    (t.priority == best->priority &&
                     (t.pending() > best->pending() ||
                      (t.pending() == best->pending() && key.ch < best_key.ch)))) {
                    best = &t;
                    best_key = key;
                }
            }
            if (!best) break;

            Transmission tx;
            tx.link = *link;
            tx.from = from;
            tx.to = to;
            tx.channel = best_key.ch;
            if (best->raw) {
                tx.kind = ArrKind::Raw;
                tx.payload = best->upstream.front();
                best->upstream.pop_front();
            } else {
                // move upstream SDUs into the window, then pull the next PDU
                while (!best->upstream.empty() && best->ent.can_accept()) {
                    best->ent.enqueue(best->upstream.front());
                    best->upstream.pop_front();
                }
                auto pdu = best->ent.next_pdu(slot_);
                if (!pdu) break;  // window full of unacked PDUs, nothing to send
                tx.kind = ArrKind::RlcData;
                tx.data = *pdu;
            }
            txs_.push_back(tx);
            ++lr.budget_used;
        }
    }

    void schedule_rach() {
        for (auto& [node, ir] : integ_) {
            if (!ir.rach_pending || slot_ != ir.next_occasion) continue;
            const NodeRt& parent_rt = rt_.at(ir.parent);
            if (!parent_rt.avail.du_usable) {
                ir.next_occasion = next_rach_occasion(ir.parent, slot_);
                continue;
            }
            auto link = topo_.find_link(node, ir.parent);
            if (!link) continue;
            Transmission tx;
            tx.kind = ArrKind::RachPreamble;
            tx.link = *link;
            tx.from = node;
            tx.to = ir.parent;
            tx.counts_capacity = false;
            txs_.push_back(tx);
            trace_.add(slot_, static_cast<int>(Phase::Schedule), "rach_attempt",
                       {{"node", name(node)}, {"parent", name(ir.parent)}});
        }
    }

    // ==================================================================
    // Phase 4: Transmit
    // ==================================================================

    void transmit() {
        for (const Transmission& tx : txs_) {
            const topo::Link& link = topo_.link(tx.link);
            LinkRt& lr = lrt_[tx.link.value];

            mark_activity(tx.from, tx.to, tx.link);

            if (tx.counts_capacity) {
                ++lr.transmitted;
                if (tx.kind == ArrKind::RlcData && tx.data.is_retx) ++lr.retx;
            }

            bool lost = link.blocked;
            if (!lost && link.loss_probability > 0.0 &&
                tx.kind != ArrKind::RachPreamble) {
                std::uniform_real_distribution<double> u(0.0, 1.0);
                lost = u(stream(0x6c6f7373, tx.link.value)) < link.loss_probability;
            }
            if (lost && tx.kind == ArrKind::RachPreamble) {
                // the preamble vanished; the node retries next occasion
                integ_.at(tx.from).next_occasion = next_rach_occasion(tx.to, slot_);
                continue;
            }
            if (lost) {
                ++lr.lost;
                if (tx.kind == ArrKind::Raw) {
                    // no per-hop ARQ to recover it; the loss is end-to-end's
                    // problem (or final, on access links in hop-by-hop mode)
                    if (scn_.arq_mode != rlc::ArqMode::EndToEndReference) {
                        drop_pdu(tx.payload, "link_loss");
                    }
                } else if (tx.kind == ArrKind::SrbRelay) {
                    srb_[{tx.from.value, tx.to.value}].push_back(
                        {static_cast<std::uint32_t>(tx.payload), slot_});
                }
                trace_.add(slot_, static_cast<int>(Phase::Transmit), "pdu_lost_on_air",
                           {{"a", name(tx.from)}, {"b", name(tx.to)}});
                continue;
            }

            Arrival a;
            a.kind = tx.kind;
            a.link = tx.link;
            a.to = tx.to;
            a.from = tx.from;
            a.channel = tx.channel;
            a.data = tx.data;
            a.payload = tx.payload;
            a.bearer = tx.bearer;
            arrivals_[slot_ + wire_slots(link)].push_back(a);

            if (trace_.enabled() && tx.kind == ArrKind::RlcData) {
                trace_.add(slot_, static_cast<int>(Phase::Transmit), "pdu_tx",
                           {{"from", name(tx.from)},
                            {"to", name(tx.to)},
                            {"channel", tx.channel},
                            {"seq", tx.data.seq},
                            {"retx", tx.data.is_retx}});
            }
        }
        txs_.clear();
    }

    void mark_activity(NodeId from, NodeId to, LinkRef link) {
        (void)link;
        // transmitting toward a child uses the DU half; toward a parent the
        // MT half (and symmetrically for the receiver)
        const bool from_is_parent =
            rt_.count(to) && rt_.at(to).attached && rt_.at(to).active_parent == from;
        if (from_is_parent) {
            rt_[from].du_active = true;
            rt_[to].mt_active = true;
        } else {
            rt_[from].mt_active = true;
            rt_[to].du_active = true;
        }
    }

    // ==================================================================
    // Phase 5: Deliver
    // ==================================================================

    void deliver() {
        // receiver-side reassembly expiry
        for (auto& [key, r] : rx_) {
            for (std::uint64_t h : r.ent.on_slot(slot_)) {
                accept_upward(NodeId{key.sender}, h);
            }
        }

        auto it = arrivals_.find(slot_);
        if (it == arrivals_.end()) return;
        auto list = std::move(it->second);
        arrivals_.erase(it);

        for (const Arrival& a : list) {
            switch (a.kind) {
                case ArrKind::RlcData: {
                    auto& r = rx_slot(a.channel, a.to);
                    auto outcome = r.ent.rx_pdu(a.data, slot_);
                    if (outcome.status) {
                        Arrival st;
                        st.kind = ArrKind::RlcStatus;
                        st.link = a.link;
                        st.to = a.from;
                        st.channel = a.channel;
                        st.status = *outcome.status;
                        const int fb =
                            std::max(1, wire_slots(topo_.link(a.link)));
                        arrivals_[slot_ + fb].push_back(st);
                    }
                    for (std::uint64_t h : outcome.delivered) accept_upward(a.to, h);
                    break;
                }
                case ArrKind::RlcStatus: {
                    const TxKey key{a.channel, a.to.value};
                    auto tit = tx_.find(key);
                    if (tit == tx_.end()) break;
                    auto outcome = tit->second.ent.on_status(a.status, slot_);
                    for (const auto& ex : outcome.exhausted) {
                        handle_exhaustion(a.to, tit->second, ex);
                    }
                    break;
                }
                case ArrKind::Raw:
                    accept_upward(a.to, a.payload);
                    break;
                case ArrKind::SrbRelay: {
                    pending_apply_[a.to].push_back(static_cast<std::uint32_t>(a.payload));
                    trace_.add(slot_, static_cast<int>(Phase::Deliver), "srb_rx",
                               {{"node", name(a.to)}});
                    break;
                }
                case ArrKind::RachPreamble: {
                    auto& ir = integ_.at(a.from);
                    if (ir.rach_pending && ir.parent == a.to) {
                        ir.rach_delivered = true;
                        establish_timing(a.from, a.to, a.link);
                        trace_.add(slot_, static_cast<int>(Phase::Deliver), "rach_rx",
                                   {{"node", name(a.from)}, {"parent", name(a.to)}});
                    }
                    break;
                }
                case ArrKind::E2eStatus: {
                    auto eit = e2e_tx_.find(a.bearer);
                    if (eit == e2e_tx_.end()) break;
                    auto outcome = eit->second.on_status(a.status, slot_);
                    for (const auto& ex : outcome.exhausted) {
                        packet_lost(ex.sdu, "retx_exhausted_e2e");
                    }
                    break;
                }
            }
        }
    }

    /// A PDU cleared the hop's RLC (or raw transport): records the visit
    /// and runs BAP forwarding, access delivery, or control handling.
    void accept_upward(NodeId node, std::uint64_t handle) {
        PduInstance& inst = pdus_[handle];

        if (!inst.has_header) {
            // raw SDU on an access link
            if (topo_.node(node).role == topo::NodeRole::Ue) {
                if (inst.is_e2e) {
                    feed_e2e_receiver(node, inst);
                } else {
                    inst.visited.push_back(node);
                    complete_packet(node, inst.packet, node, &inst);
                }
                return;
            }
            // access IAB node (or donor DU): UL origination point
            originate_ul_at_access(node, handle);
            return;
        }

        // loop assertion: a BAP PDU instance never revisits a node
        if (std::find(inst.visited.begin(), inst.visited.end(), node) !=
            inst.visited.end()) {
            throw InvariantViolation("forwarding loop: instance revisited " + name(node));
        }
        inst.visited.push_back(node);
        route_and_enqueue(node, handle);
    }

    void originate_ul_at_access(NodeId access, std::uint64_t handle) {
        PduInstance& inst = pdus_[handle];
        const auto& map = bearer_maps_.find(inst.bearer);
        if (map == bearer_maps_.end()) {
            drop_pdu(handle, "no_channel");
            return;
        }
        bap::BapHeader h;
        h.destination = map->second.ul_routing_id.destination;
        h.path_id = map->second.ul_routing_id.path_id;
        inst.header = bap::encode_header(h);
        inst.has_header = true;
        inst.visited = {access};
        route_and_enqueue(access, handle);
    }

    void establish_timing(NodeId child, NodeId parent, LinkRef link) {
        const double p = topo_.link(link).propagation_delay_us;
        auto& t = rt_[child].timing;
        const auto& decl = scn_.nodes[child.value];
        const double parent_dl_tx = rt_[parent].timing.dl_tx_time_us;
        const double dl_rx = parent_dl_tx + p;
        // the parent commands a timing advance of one round trip; the two
        // offsets then encode the propagation delay
        t.offset_node_us = -2.0 * p;
        t.offset_parent_us = 0.0;
        t.estimated_prop_delay_us =
            phy::estimate_propagation_delay(t.offset_node_us, t.offset_parent_us);
        if (t.estimated_prop_delay_us < -1e-9) {
            throw InvariantViolation("inconsistent timing offsets at " + name(child));
        }
        t.reference_synced = decl.gps_synced;
        t.dl_tx_time_us = decl.gps_synced
                              ? 0.0
                              : phy::derive_dl_tx_timing(dl_rx, t.estimated_prop_delay_us);
        ++mx_.timing_sync_events;
        trace_.add(slot_, static_cast<int>(Phase::Deliver), "timing_sync",
                   {{"node", name(child)},
                    {"estimated_us", t.estimated_prop_delay_us},
                    {"configured_us", p}});
    }

    /// Re-derives OTA timing down the tree after a reconfiguration.
    void resync_timing() {
        for (NodeId n : nodes_by_depth()) {
            const auto& node = topo_.node(n);
            if (node.role != topo::NodeRole::IabNode) continue;
            const NodeRt& r = rt_.at(n);
            if (!r.attached) continue;
            auto link = topo_.find_link(n, r.active_parent);
            if (!link) continue;
            establish_timing(n, r.active_parent, *link);
        }
    }

    // ==================================================================
    // Phase 6: Report
    // ==================================================================

    void report() {
        for (std::size_t i = 0; i < lrt_.size(); ++i) {
            const auto& link = topo_.link(LinkRef{static_cast<std::uint32_t>(i)});
            if (link.blocked) ++lrt_[i].blocked_slots;
            // overload watch: a slot counts when the link ran at >= the
            // configured utilization
            const double used = static_cast<double>(lrt_[i].budget_used) /
                                static_cast<double>(link.per_slot_capacity);
            if (used >= scn_.overload_utilization) {
                if (++lrt_[i].overload_streak == scn_.overload_threshold_slots) {
                    control::AdaptationTrigger t;
                    t.kind = control::AdaptationTrigger::Kind::LinkOverload;
                    t.slot = slot_;
                    t.link = LinkRef{static_cast<std::uint32_t>(i)};
                    t.metric = used;
                    trigger_q_.push_back(t);
                    lrt_[i].overload_streak = 0;
                }
            } else {
                lrt_[i].overload_streak = 0;
            }
        }

        // half-duplex hard assertion
        for (auto& [n, r] : rt_) {
            const auto& node = topo_.node(n);
            if (node.role != topo::NodeRole::IabNode) continue;
            if (node.caps.exempt_from_half_duplex() || node.caps.simultaneous_tx_rx) {
                continue;
            }
            if (r.mt_active && r.du_active) {
                ++r.hd_viol;
                if (scn_.strict) {
                    throw InvariantViolation("half-duplex violation at " + name(n) +
                                             " in slot " + std::to_string(slot_));
                }
            }
        }

        if (scn_.report_period_slots > 0 && slot_ % scn_.report_period_slots == 0) {
            // the CU's periodic link report; a healed link rejoins the
            // candidate set
            for (std::uint32_t v : std::vector<std::uint32_t>(failed_links_.begin(),
                                                              failed_links_.end())) {
                if (!topo_.link(LinkRef{v}).blocked) {
                    // stays failed until something re-triggers computation;
                    // the CU merely notes recovery
                    trace_.add(slot_, 5, "link_report",
                               {{"link", v}, {"state", "recovered"}});
                }
            }
            check_conservation();
        }
    }

    void check_conservation() {
        // every packet that is neither delivered nor lost must be findable
        // somewhere in the system
        std::set<std::uint64_t> seen;
        for (const auto& [bearer, buf] : pre_map_buffer_) {
            for (std::uint64_t packet : buf) seen.insert(packet);
        }
        for (const auto& [key, t] : tx_) {
            for (std::uint64_t h : t.upstream) note_packet(seen, h);
            if (!t.raw) {
                for (std::uint64_t h : t.ent.held()) note_packet(seen, h);
            }
        }
        for (const auto& [key, r] : rx_) {
            for (std::uint64_t h : r.ent.buffered()) note_packet(seen, h);
        }
        for (const auto& [bearer, ent] : e2e_tx_) {
            for (std::uint64_t packet : ent.held()) seen.insert(packet);
        }
        for (const auto& [bearer, ent] : e2e_rx_) {
            for (std::uint64_t packet : ent.buffered()) seen.insert(packet);
        }
        for (const auto& [when, list] : arrivals_) {
            for (const auto& a : list) {
                if (a.kind == ArrKind::RlcData) note_packet(seen, a.data.sdu);
                if (a.kind == ArrKind::Raw) note_packet(seen, a.payload);
            }
        }
        for (const auto& p : packets_) {
            if (p.state == PacketRecord::State::Delivered ||
                p.state == PacketRecord::State::Lost) {
                continue;
            }
            if (!seen.count(p.id)) {
                throw InvariantViolation("conservation: packet " + std::to_string(p.id) +
                                         " leaked in slot " + std::to_string(slot_));
            }
        }
    }

    // ------------------------------------------------------------------

    RunResult finish() {
        RunResult out;
        for (const auto& [id, node] : topo_.nodes()) {
            if (node.role == topo::NodeRole::DonorCu) continue;
            metrics::NodeMetrics nm;
            nm.name = name(id);
            const NodeRt& r = rt_.at(id);
            nm.no_route_drops = r.no_route;
            nm.fallback_hits = r.fallback;
            nm.hd_forced_idle_slots = r.hd_idle;
            nm.hd_violations = r.hd_viol;
            nm.grant_conflicts = r.grant_conflicts;
            mx_.nodes.push_back(nm);
            out.hd_violations += r.hd_viol;
        }
        for (std::size_t i = 0; i < lrt_.size(); ++i) {
            const auto& link = topo_.link(LinkRef{static_cast<std::uint32_t>(i)});
            metrics::LinkMetrics lm;
            lm.a = name(link.endpoint_a);
            lm.b = name(link.endpoint_b);
            lm.transmitted_pdus = lrt_[i].transmitted;
            lm.retransmissions = lrt_[i].retx;
            lm.lost_pdus = lrt_[i].lost;
            lm.blocked_slots = lrt_[i].blocked_slots;
            const double denom = static_cast<double>(horizon_) *
                                 static_cast<double>(link.per_slot_capacity);
            lm.utilization = denom > 0 ? static_cast<double>(lrt_[i].transmitted) / denom
                                       : 0.0;
            mx_.links.push_back(lm);
        }

        std::set<bap::ChannelId> mapped;
        for (const auto& [bearer, map] : bearer_maps_) {
            for (bap::ChannelId ch : map.channels) mapped.insert(ch);
        }
        mx_.bh_channels_mapped = mapped.size();
        std::uint64_t total = 0;
        for (const auto& [id, ch] : registry_.all()) {
            if (ch.is_control) continue;
            const auto& link = topo_.link(ch.link);
            if (is_backhaul_node(link.endpoint_a) && is_backhaul_node(link.endpoint_b)) {
                ++total;
            }
        }
        mx_.bh_channels_total = total;
        mx_.scenario = scn_.name;
        mx_.seed = seed_;
        mx_.horizon = horizon_;
        mx_.finalize();

        out.metrics = mx_;
        out.trace = std::move(trace_);
        out.packets = packets_;
        out.dl_tables = dl_tables_;
        out.ul_tables = ul_tables_;
        out.path_registry_history = path_history_;
        if (out.path_registry_history.empty()) out.path_registry_history.push_back({});
        out.bearer_maps = bearer_maps_;
        out.ids = ids_;
        out.names = names_;
        for (const auto& [id, r] : rt_) {
            out.timing[id] = r.timing;
            if (r.attached && topo_.node(id).role == topo::NodeRole::IabNode) {
                if (auto link = topo_.find_link(id, r.active_parent)) {
                    out.active_parent_delay_us[id] =
                        topo_.link(*link).propagation_delay_us;
                }
            }
        }
        for (const auto& [id, ir] : integ_) out.final_states[id] = ir.state;
        return out;
    }
};

}  // namespace iabsim::engine


