#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <vector>

#include "iabsim/bap.hpp"
#include "iabsim/core.hpp"

namespace iabsim::rlc {

/// ARQ placement for a whole scenario: per-hop entities (the IAB design)
/// or a single end-to-end entity pair (reference mode for comparison).
enum class ArqMode : std::uint8_t { HopByHop, EndToEndReference };

inline const char* to_string(ArqMode m) {
    return m == ArqMode::HopByHop ? "hop_by_hop" : "end_to_end_reference";
}

using SeqNum = std::uint16_t;
inline constexpr std::uint32_t kSeqSpace = 1u << 16;
inline constexpr std::uint32_t kMaxWindow = kSeqSpace / 2;

/// a - b modulo the sequence space.
inline std::uint32_t seq_distance(SeqNum a, SeqNum b) {
    return static_cast<std::uint32_t>(static_cast<std::uint16_t>(a - b));
}

/// True when a is in [base, base + window).
inline bool seq_in_window(SeqNum a, SeqNum base, std::uint32_t window) {
    return seq_distance(a, base) < window;
}

struct RlcConfig {
    int max_retx = 4;
    int poll_sdu_interval = 8;    // poll at least every N SDUs
    int poll_slot_interval = 10;  // ... or every N slots, whichever first
    int retx_timeout_slots = 12;  // status awaited this long before assuming loss
    int reassembly_timeout_slots = 72;  // receiver skips a gap after this long
    std::uint32_t window_size = 2048;   // must be <= kMaxWindow

    void validate() const {
        if (max_retx < 0) throw ConfigError("max_retx must be >= 0");
        if (window_size == 0 || window_size > kMaxWindow) {
            throw ConfigError("RLC window must be in [1, half the sequence space]");
        }
        if (poll_sdu_interval < 1 || poll_slot_interval < 1) {
            throw ConfigError("poll intervals must be >= 1");
        }
        if (retx_timeout_slots < 1) throw ConfigError("retx timeout must be >= 1");
    }
};

struct RlcDataPdu {
    bap::ChannelId channel = 0;
    SeqNum seq = 0;
    bool poll = false;
    bool is_retx = false;
    std::uint64_t sdu = 0;  // opaque payload handle
};

struct RlcStatusPdu {
    bap::ChannelId channel = 0;
    // One past the highest sequence seen so far. Everything below ack_sn
    // that is not listed in nacks has been received.
    SeqNum ack_sn = 0;
    std::vector<SeqNum> nacks;
};

/// An SDU the transmitter gave up on after max_retx retransmissions.
struct RetxExhausted {
    bap::ChannelId channel = 0;
    SeqNum seq = 0;
    std::uint64_t sdu = 0;
};

/// Transmitting half of an acknowledged-mode entity. Owns the window of
/// unacknowledged SDUs and the retransmission queue.
class RlcTransmitter {
public:
    RlcTransmitter() = default;
    RlcTransmitter(bap::ChannelId channel, RlcConfig config)
        : channel_(channel), config_(config) {
        config_.validate();
    }

    bap::ChannelId channel() const { return channel_; }
    const RlcConfig& config() const { return config_; }

    bool can_accept() const { return window_occupancy() < config_.window_size; }

    std::uint32_t window_occupancy() const { return seq_distance(tx_next_, tx_base_); }

    /// Number of SDUs this entity currently holds (unacked + never sent).
    std::uint32_t held_sdus() const {
        return static_cast<std::uint32_t>(window_.size()) +
               static_cast<std::uint32_t>(fresh_.size());
    }

    /// Accepts one SDU, assigning the next sequence number. Returns false
    /// (backpressure) when the window is full; the SDU stays upstream.
    bool enqueue(std::uint64_t sdu) {
        if (!can_accept()) return false;
        SeqNum seq = tx_next_;
        tx_next_ = static_cast<SeqNum>(tx_next_ + 1);
        window_.emplace(seq, TxState{sdu, 0, -1});
        fresh_.push_back(seq);
        return true;
    }

    bool has_pending() const { return !retx_.empty() || !fresh_.empty(); }

    /// Transmittable PDUs waiting in this entity (fresh + queued retx).
    std::size_t pending_count() const { return fresh_.size() + retx_.size(); }

    /// Every SDU the entity still holds, in sequence order.
    std::vector<std::uint64_t> held() const {
        std::vector<std::uint64_t> out;
        out.reserve(window_.size());
        for (SeqNum seq = tx_base_; seq != tx_next_; seq = static_cast<SeqNum>(seq + 1)) {
            auto it = window_.find(seq);
            if (it != window_.end()) out.push_back(it->second.sdu);
        }
        return out;
    }

    /// Pulls the next PDU to put on the air this slot: retransmissions
    /// first, then fresh SDUs. Returns nullopt when nothing is pending.
    std::optional<RlcDataPdu> next_pdu(std::int64_t slot) {
        while (!retx_.empty()) {
            SeqNum seq = retx_.front();
            retx_.pop_front();
            auto it = window_.find(seq);
            if (it == window_.end()) continue;  // acked meanwhile
            it->second.last_tx_slot = slot;
            RlcDataPdu pdu;
            pdu.channel = channel_;
            pdu.seq = seq;
            pdu.sdu = it->second.sdu;
            pdu.is_retx = true;
            pdu.poll = true;  // retransmissions always solicit a status
            note_poll(slot);
            ++retx_sent_;
            return pdu;
        }
        if (!fresh_.empty()) {
            SeqNum seq = fresh_.front();
            fresh_.pop_front();
            auto it = window_.find(seq);
            if (it == window_.end()) return std::nullopt;
            it->second.last_tx_slot = slot;
            RlcDataPdu pdu;
            pdu.channel = channel_;
            pdu.seq = seq;
            pdu.sdu = it->second.sdu;
            ++sdus_since_poll_;
            // poll on the configured intervals, and always on the last PDU
            // in the buffer so a lost tail is still recoverable
            if (sdus_since_poll_ >= config_.poll_sdu_interval ||
                slot - last_poll_slot_ >= config_.poll_slot_interval ||
                (fresh_.empty() && retx_.empty())) {
                pdu.poll = true;
                note_poll(slot);
            }
            ++data_sent_;
            return pdu;
        }
        return std::nullopt;
    }

    /// Per-slot timer processing: a transmitted SDU whose status has been
    /// awaited for retx_timeout_slots is treated as lost. Returns the SDUs
    /// that exhausted max_retx.
    std::vector<RetxExhausted> on_slot(std::int64_t slot) {
        std::vector<RetxExhausted> exhausted;
        for (auto it = window_.begin(); it != window_.end();) {
            TxState& st = it->second;
            if (st.last_tx_slot < 0 ||  // never transmitted yet
                slot - st.last_tx_slot < config_.retx_timeout_slots) {
                ++it;
                continue;
            }
            if (st.retx_count >= config_.max_retx) {
                exhausted.push_back({channel_, it->first, st.sdu});
                it = discard(it);
            } else {
                ++st.retx_count;
                st.last_tx_slot = slot;  // rearm until actually retransmitted
                schedule_retx(it->first);
                ++it;
            }
        }
        return exhausted;
    }

    struct StatusOutcome {
        std::vector<std::uint64_t> acked;
        std::vector<RetxExhausted> exhausted;
    };

    /// Processes a status report: acknowledges everything below ack_sn not
    /// reported missing, and queues retransmissions for the NACKed holes.
    StatusOutcome on_status(const RlcStatusPdu& status, std::int64_t slot) {
        StatusOutcome out;
        // a status whose ack_sn lies outside [tx_base_, tx_next_] predates
        // the current window state; discard it wholesale
        if (seq_distance(status.ack_sn, tx_base_) > seq_distance(tx_next_, tx_base_)) {
            return out;
        }
        for (SeqNum seq = tx_base_; seq != status.ack_sn;
             seq = static_cast<SeqNum>(seq + 1)) {
            bool nacked = false;
            for (SeqNum n : status.nacks) {
                if (n == seq) {
                    nacked = true;
                    break;
                }
            }
            if (nacked) continue;
            auto it = window_.find(seq);
            if (it != window_.end()) {
                out.acked.push_back(it->second.sdu);
                window_.erase(it);
            }
        }
        for (SeqNum seq : status.nacks) {
            auto it = window_.find(seq);
            if (it == window_.end()) continue;
            TxState& st = it->second;
            // a NACK built before our last (re)transmission could have
            // landed is stale; ignore it
            if (st.last_tx_slot >= 0 &&
                slot - st.last_tx_slot < config_.retx_timeout_slots) {
                continue;
            }
            if (st.retx_count >= config_.max_retx) {
                out.exhausted.push_back({channel_, seq, st.sdu});
                window_.erase(it);
            } else {
                ++st.retx_count;
                st.last_tx_slot = slot;
                schedule_retx(seq);
            }
        }
        advance_base();
        return out;
    }

    std::uint64_t data_pdus_sent() const { return data_sent_; }
    std::uint64_t retx_pdus_sent() const { return retx_sent_; }

    /// Drains every held SDU (used when the control plane tears the
    /// channel down and re-routes its contents).
    std::vector<std::uint64_t> drain() {
        std::vector<std::uint64_t> out;
        for (SeqNum seq = tx_base_; seq != tx_next_; seq = static_cast<SeqNum>(seq + 1)) {
            auto it = window_.find(seq);
            if (it != window_.end()) out.push_back(it->second.sdu);
        }
        window_.clear();
        fresh_.clear();
        retx_.clear();
        tx_base_ = tx_next_;
        return out;
    }

private:
    struct TxState {
        std::uint64_t sdu = 0;
        int retx_count = 0;
        std::int64_t last_tx_slot = -1;
    };

    void note_poll(std::int64_t slot) {
        sdus_since_poll_ = 0;
        last_poll_slot_ = slot;
    }

    void schedule_retx(SeqNum seq) {
        for (SeqNum queued : retx_) {
            if (queued == seq) return;
        }
        retx_.push_back(seq);
    }

    std::map<SeqNum, TxState>::iterator discard(std::map<SeqNum, TxState>::iterator it) {
        auto next = window_.erase(it);
        advance_base();
        return next;
    }

    void advance_base() {
        while (tx_base_ != tx_next_ && window_.find(tx_base_) == window_.end()) {
            tx_base_ = static_cast<SeqNum>(tx_base_ + 1);
        }
    }

    bap::ChannelId channel_ = 0;
    RlcConfig config_;
    SeqNum tx_next_ = 0;
    SeqNum tx_base_ = 0;
    std::map<SeqNum, TxState> window_;
    std::deque<SeqNum> fresh_;
    std::deque<SeqNum> retx_;
    int sdus_since_poll_ = 0;
    std::int64_t last_poll_slot_ = 0;
    std::uint64_t data_sent_ = 0;
    std::uint64_t retx_sent_ = 0;
};

/// Receiving half: reorders, deduplicates, and reports status.
class RlcReceiver {
public:
    RlcReceiver() = default;
    RlcReceiver(bap::ChannelId channel, RlcConfig config)
        : channel_(channel), config_(config) {}

    struct RxOutcome {
        std::vector<std::uint64_t> delivered;  // in order
        std::optional<RlcStatusPdu> status;
    };

    RxOutcome rx_pdu(const RlcDataPdu& pdu, std::int64_t slot) {
        RxOutcome out;
        const bool in_window = seq_in_window(pdu.seq, rx_expected_, config_.window_size);
        if (!in_window) {
            ++duplicates_;  // stale sequence from before the window advanced
            if (pdu.poll) out.status = build_status();
            return out;
        }
        if (buffer_.count(pdu.seq)) {
            ++duplicates_;
            if (pdu.poll) out.status = build_status();
            return out;
        }
        buffer_.emplace(pdu.seq, pdu.sdu);
        // in-order delivery
        while (true) {
            auto it = buffer_.find(rx_expected_);
            if (it == buffer_.end()) break;
            out.delivered.push_back(it->second);
            buffer_.erase(it);
            rx_expected_ = static_cast<SeqNum>(rx_expected_ + 1);
        }
        const bool gap = !buffer_.empty();
        if (gap) {
            if (gap_since_ < 0) gap_since_ = slot;
        } else {
            gap_since_ = -1;
        }
        if (pdu.poll || gap) out.status = build_status();
        return out;
    }

    /// Reassembly-style gap expiry: when the transmitter gave up on a
    /// sequence, skip past it so in-order delivery can resume. Returns the
    /// SDUs freed by the skip.
    std::vector<std::uint64_t> on_slot(std::int64_t slot) {
        std::vector<std::uint64_t> out;
        if (gap_since_ < 0 || buffer_.empty() ||
            slot - gap_since_ < config_.reassembly_timeout_slots) {
            return out;
        }
        // jump to the oldest buffered sequence and flush in-order from there
        SeqNum lowest = buffer_.begin()->first;
        std::uint32_t best = seq_distance(lowest, rx_expected_);
        for (const auto& [seq, sdu] : buffer_) {
            std::uint32_t d = seq_distance(seq, rx_expected_);
            if (d < best) {
                best = d;
                lowest = seq;
            }
        }
        skipped_ += best;
        rx_expected_ = lowest;
        while (true) {
            auto it = buffer_.find(rx_expected_);
            if (it == buffer_.end()) break;
            out.push_back(it->second);
            buffer_.erase(it);
            rx_expected_ = static_cast<SeqNum>(rx_expected_ + 1);
        }
        gap_since_ = buffer_.empty() ? -1 : slot;
        return out;
    }

    SeqNum rx_expected() const { return rx_expected_; }
    std::uint64_t duplicates() const { return duplicates_; }
    std::uint64_t skipped() const { return skipped_; }

    /// SDUs parked in the reorder buffer.
    std::vector<std::uint64_t> buffered() const {
        std::vector<std::uint64_t> out;
        out.reserve(buffer_.size());
        for (const auto& [seq, sdu] : buffer_) out.push_back(sdu);
        return out;
    }

private:
    RlcStatusPdu build_status() const {
        RlcStatusPdu status;
        status.channel = channel_;
        status.ack_sn = rx_expected_;
        if (!buffer_.empty()) {
            // ack_sn goes one past the highest buffered sequence; every hole
            // between rx_expected_ and there is reported missing
            SeqNum highest = rx_expected_;
            std::uint32_t span = 0;
            for (const auto& [seq, sdu] : buffer_) {
                std::uint32_t d = seq_distance(seq, rx_expected_);
                if (d >= span) {
                    span = d;
                    highest = seq;
                }
            }
            status.ack_sn = static_cast<SeqNum>(highest + 1);
            for (SeqNum s = rx_expected_; s != highest; s = static_cast<SeqNum>(s + 1)) {
                if (!buffer_.count(s)) status.nacks.push_back(s);
            }
        }
        return status;
    }

    bap::ChannelId channel_ = 0;
    RlcConfig config_;
    SeqNum rx_expected_ = 0;
    std::map<SeqNum, std::uint64_t> buffer_;
    std::int64_t gap_since_ = -1;
    std::uint64_t duplicates_ = 0;
    std::uint64_t skipped_ = 0;
};

}  // namespace iabsim::rlc
