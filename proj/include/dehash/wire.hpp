#pragma once

// Query payload sent from the device: a binary code plus optional context.
//   "DHWIRE01", u32 K, ceil(K/8) code bytes, u8 flags (bit0 GPS, bit1 category),
//   f64 lat, f64 lon when GPS, u32 category when category.

#include <span>
#include <vector>

#include "dehash/context.hpp"
#include "dehash/hashing.hpp"

namespace dehash {

struct WireMessage {
    BinaryCode code;
    ContextTag context;
    bool operator==(const WireMessage&) const = default;
};

std::vector<std::uint8_t> wire_encode(const BinaryCode& code, const ContextTag& context);
WireMessage wire_decode(std::span<const std::uint8_t> bytes, const std::string& source = "<wire>");

/// Exact length of wire_encode output.
std::uint64_t wire_size(std::uint32_t bits, const ContextTag& context);

}  // namespace dehash
