#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace iabsim {

/// Base class for all domain errors raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Scenario or topology input rejected during construction/validation.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Wire data that cannot be parsed (wrong length, bad framing).
class MalformedHeader : public Error {
public:
    using Error::Error;
};

/// A bearer was used before the control plane finished mapping it.
class MappingIncomplete : public Error {
public:
    using Error::Error;
};

/// Internal invariant violated at runtime (hard assertion).
class InvariantViolation : public Error {
public:
    using Error::Error;
};

/// Identifies one simulated entity (CU, DU, IAB node or UE).
/// Unique for the lifetime of a scenario; never reused after detachment.
struct NodeId {
    std::uint32_t value = 0;

    friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

/// Index of a link in the topology's link set.
struct LinkRef {
    std::uint32_t value = 0;

    friend auto operator<=>(const LinkRef&, const LinkRef&) = default;
};

inline constexpr std::uint16_t kBapAddressMax = 1023;  // 10 bits
inline constexpr std::uint16_t kPathIdMax = 1023;      // 10 bits

/// L2 address of an IAB node or donor DU, assigned by the donor CU.
class BapAddress {
public:
    constexpr BapAddress() = default;
    explicit constexpr BapAddress(std::uint16_t v) : value_(v) {
        if (v > kBapAddressMax) {
            throw std::out_of_range("BapAddress out of 10-bit range");
        }
    }

    constexpr std::uint16_t value() const { return value_; }

    friend auto operator<=>(const BapAddress&, const BapAddress&) = default;

private:
    std::uint16_t value_ = 0;
};

/// Distinguishes redundant routes toward the same BAP address.
class PathId {
public:
    constexpr PathId() = default;
    explicit constexpr PathId(std::uint16_t v) : value_(v) {
        if (v > kPathIdMax) {
            throw std::out_of_range("PathId out of 10-bit range");
        }
    }

    constexpr std::uint16_t value() const { return value_; }

    friend auto operator<=>(const PathId&, const PathId&) = default;

private:
    std::uint16_t value_ = 0;
};

/// Traffic direction through the backhaul: Dl flows donor -> access node,
/// Ul flows access node -> donor.
enum class Direction : std::uint8_t { Dl, Ul };

inline const char* to_string(Direction d) {
    return d == Direction::Dl ? "DL" : "UL";
}

/// splitmix64 step; used to derive independent seeds from (run seed, key)
/// so that adding one random consumer does not perturb the others' draws.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives a per-entity stream seed from the run seed and a stable key.
inline std::uint64_t derive_stream_seed(std::uint64_t run_seed,
                                        std::uint64_t kind,
                                        std::uint64_t id) {
    std::uint64_t s = splitmix64(run_seed ^ splitmix64(kind));
    return splitmix64(s ^ splitmix64(id));
}

}  // namespace iabsim

template <>
struct std::hash<iabsim::NodeId> {
    std::size_t operator()(const iabsim::NodeId& id) const noexcept {
        return std::hash<std::uint32_t>{}(id.value);
    }
};
