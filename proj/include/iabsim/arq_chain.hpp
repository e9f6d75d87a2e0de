#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <vector>

#include "iabsim/core.hpp"
#include "iabsim/rlc.hpp"

namespace iabsim::rlc {

/// One hop of the reference ARQ chain: a PDU transmitted at slot t lands at
/// t + delay_slots, a status transmitted at t lands back at t + feedback_slots,
/// and each data transmission is lost independently with probability loss.
struct HopSpec {
    int delay_slots = 1;
    int feedback_slots = 1;
    double loss = 0.0;
};

struct ArqChainStats {
    std::vector<std::int64_t> latencies;  // per delivered SDU, in slots
    std::vector<std::uint64_t> retx_per_hop;
    std::uint64_t delivered = 0;
    std::uint64_t exhausted = 0;

    double mean_latency() const {
        if (latencies.empty()) return 0.0;
        double sum = 0.0;
        for (auto l : latencies) sum += static_cast<double>(l);
        return sum / static_cast<double>(latencies.size());
    }
};

/// Drives real RLC entities over an abstract chain of hops, one SDU in the
/// pipe at a time, so each SDU's latency depends only on its own
/// retransmission draws. Data PDUs are subject to loss; status reports ride
/// a lossless control channel. In HopByHop mode every hop has its own
/// entity pair; in EndToEndReference mode a single entity pair spans the
/// chain and intermediate hops forward without ARQ.
class ArqChainSim {
public:
    /// Deterministic override: return true to force-drop the given
    /// (hop index, per-hop attempt counter) transmission.
    using LossHook = std::function<bool(std::size_t hop, std::uint64_t attempt)>;

    ArqChainSim(std::vector<HopSpec> hops, ArqMode mode, RlcConfig base_config,
                std::uint64_t seed)
        : hops_(std::move(hops)), mode_(mode), seed_(seed) {
        if (hops_.empty()) throw ConfigError("ARQ chain needs at least one hop");
        chain_delay_ = 0;
        chain_feedback_ = 0;
        for (const HopSpec& h : hops_) {
            if (h.delay_slots < 1 || h.feedback_slots < 0) {
                throw ConfigError("hop delay must be >= 1 slot, feedback >= 0");
            }
            chain_delay_ += h.delay_slots;
            chain_feedback_ += h.feedback_slots;
        }
        base_config.poll_sdu_interval = 1;  // solicit status on every PDU
        max_retx_ = base_config.max_retx;
        if (mode_ == ArqMode::HopByHop) {
            entities_.reserve(hops_.size());
            for (std::size_t h = 0; h < hops_.size(); ++h) {
                RlcConfig cfg = base_config;
                cfg.retx_timeout_slots = hops_[h].delay_slots + hops_[h].feedback_slots;
                cfg.reassembly_timeout_slots = (cfg.max_retx + 2) * cfg.retx_timeout_slots;
                entities_.push_back(
                    {RlcTransmitter(static_cast<bap::ChannelId>(h + 1), cfg),
                     RlcReceiver(static_cast<bap::ChannelId>(h + 1), cfg)});
            }
        } else {
            RlcConfig cfg = base_config;
            cfg.retx_timeout_slots = chain_delay_ + chain_feedback_;
            cfg.reassembly_timeout_slots = (cfg.max_retx + 2) * cfg.retx_timeout_slots;
            entities_.push_back({RlcTransmitter(1, cfg), RlcReceiver(1, cfg)});
        }
    }

    void set_loss_hook(LossHook hook) { loss_hook_ = std::move(hook); }

    ArqChainStats run(std::uint64_t num_sdus) {
        ArqChainStats stats;
        stats.retx_per_hop.assign(hops_.size(), 0);
        attempts_.assign(hops_.size(), 0);

        std::int64_t slot = 0;
        next_sdu_ = 0;
        num_sdus_ = num_sdus;

        const std::int64_t worst_sdu_slots =
            static_cast<std::int64_t>(max_retx_ + 3) *
            static_cast<std::int64_t>(chain_delay_ + chain_feedback_ + 2) *
            static_cast<std::int64_t>(hops_.size() + 1);
        const std::int64_t guard =
            static_cast<std::int64_t>(num_sdus) * worst_sdu_slots + 1000;

        inject(slot);
        while (stats.delivered + stats.exhausted < num_sdus && slot < guard) {
            // arrivals and statuses land before timers so that a timeout
            // equal to the exact round trip never races its own ack
            if (auto it = data_wire_.find(slot); it != data_wire_.end()) {
                auto arrivals = std::move(it->second);
                data_wire_.erase(it);
                for (const DataArrival& a : arrivals) {
                    auto outcome = entities_[a.entity].rx.rx_pdu(a.pdu, slot);
                    if (outcome.status) {
                        const std::int64_t fb = (mode_ == ArqMode::HopByHop)
                                                    ? hops_[a.entity].feedback_slots
                                                    : chain_feedback_;
                        status_wire_[slot + fb].push_back({a.entity, *outcome.status});
                    }
                    for (std::uint64_t sdu : outcome.delivered) {
                        complete_or_forward(a.entity, sdu, slot, stats);
                    }
                }
            }
            if (auto it = status_wire_.find(slot); it != status_wire_.end()) {
                auto arrivals = std::move(it->second);
                status_wire_.erase(it);
                for (const StatusArrival& a : arrivals) {
                    auto outcome = entities_[a.entity].tx.on_status(a.status, slot);
                    for (const RetxExhausted& ex : outcome.exhausted) {
                        (void)ex;
                        ++stats.exhausted;
                        inject(slot);
                    }
                }
            }
            for (std::size_t e = 0; e < entities_.size(); ++e) {
                for (const RetxExhausted& ex : entities_[e].tx.on_slot(slot)) {
                    (void)ex;
                    ++stats.exhausted;
                    inject(slot);
                }
                // reassembly skips free buffered SDUs for in-order delivery
                for (std::uint64_t sdu : entities_[e].rx.on_slot(slot)) {
                    complete_or_forward(e, sdu, slot, stats);
                }
            }
            for (std::size_t e = 0; e < entities_.size(); ++e) {
                while (auto pdu = entities_[e].tx.next_pdu(slot)) {
                    transmit(e, *pdu, slot, stats);
                }
            }
            ++slot;
        }

        stats.latencies.reserve(done_slot_.size());
        for (const auto& [sdu, done] : done_slot_) {
            stats.latencies.push_back(done - inject_slot_.at(sdu));
        }
        return stats;
    }

private:
    struct EntityPair {
        RlcTransmitter tx;
        RlcReceiver rx;
    };
    struct DataArrival {
        std::size_t entity;  // receiving entity index
        RlcDataPdu pdu;
    };
    struct StatusArrival {
        std::size_t entity;
        RlcStatusPdu status;
    };

    void inject(std::int64_t slot) {
        if (next_sdu_ >= num_sdus_) return;
        const std::uint64_t sdu = next_sdu_++;
        inject_slot_[sdu] = slot;
        if (!entities_[0].tx.enqueue(sdu)) {
            throw InvariantViolation("chain harness window full with one SDU in flight");
        }
    }

    void complete_or_forward(std::size_t entity, std::uint64_t sdu,
                             std::int64_t slot, ArqChainStats& stats) {
        const bool last_hop =
            (mode_ != ArqMode::HopByHop) || (entity + 1 == entities_.size());
        if (last_hop) {
            done_slot_[sdu] = slot;
            ++stats.delivered;
            inject(slot);
        } else {
            if (!entities_[entity + 1].tx.enqueue(sdu)) {
                throw InvariantViolation("downstream harness window full");
            }
        }
    }

    bool lost(std::size_t hop) {
        const std::uint64_t attempt = attempts_[hop]++;
        if (loss_hook_) return loss_hook_(hop, attempt);
        if (hops_[hop].loss <= 0.0) return false;
        auto it = rng_.find(hop);
        if (it == rng_.end()) {
            it = rng_.emplace(hop,
                              std::mt19937_64(derive_stream_seed(seed_, 0x686f70, hop)))
                     .first;
        }
        std::uniform_real_distribution<double> u(0.0, 1.0);
        return u(it->second) < hops_[hop].loss;
    }

    void transmit(std::size_t entity, const RlcDataPdu& pdu, std::int64_t slot,
                  ArqChainStats& stats) {
        if (mode_ == ArqMode::HopByHop) {
            if (pdu.is_retx) ++stats.retx_per_hop[entity];
            if (!lost(entity)) {
                data_wire_[slot + hops_[entity].delay_slots].push_back({entity, pdu});
            }
            return;
        }
        // end-to-end: the attempt re-traverses hops until it is lost, and a
        // retransmission burdens every hop it crosses
        std::int64_t arrival = slot;
        for (std::size_t h = 0; h < hops_.size(); ++h) {
            if (pdu.is_retx) ++stats.retx_per_hop[h];
            arrival += hops_[h].delay_slots;
            if (lost(h)) return;
        }
        data_wire_[arrival].push_back({0, pdu});
    }

    std::vector<HopSpec> hops_;
    ArqMode mode_;
    std::uint64_t seed_;
    int chain_delay_ = 0;
    int chain_feedback_ = 0;
    int max_retx_ = 4;
    std::uint64_t next_sdu_ = 0;
    std::uint64_t num_sdus_ = 0;
    std::vector<EntityPair> entities_;
    std::map<std::int64_t, std::vector<DataArrival>> data_wire_;
    std::map<std::int64_t, std::vector<StatusArrival>> status_wire_;
    std::map<std::size_t, std::mt19937_64> rng_;
    std::map<std::uint64_t, std::int64_t> done_slot_;
    std::map<std::uint64_t, std::int64_t> inject_slot_;
    std::vector<std::uint64_t> attempts_;
    LossHook loss_hook_;
};

}  // namespace iabsim::rlc
