#include "dehash/wire.hpp"

#include "dehash/binary_io.hpp"

namespace dehash {

namespace {
constexpr std::string_view kWireMagic = "DHWIRE01";
constexpr std::uint8_t kHasGps = 1u << 0;
constexpr std::uint8_t kHasCategory = 1u << 1;
}  // namespace

std::vector<std::uint8_t> wire_encode(const BinaryCode& code, const ContextTag& context) {
    io::ByteWriter w;
    w.magic(kWireMagic);
    w.u32(code.size());
    w.bytes(code.to_bytes());
    std::uint8_t flags = 0;
    if (context.gps) flags |= kHasGps;
    if (context.category) flags |= kHasCategory;
    w.u8(flags);
    if (context.gps) {
        w.f64(context.gps->lat);
        w.f64(context.gps->lon);
    }
    if (context.category) w.u32(*context.category);
    return w.take();
}

WireMessage wire_decode(std::span<const std::uint8_t> bytes, const std::string& source) {
    io::ByteReader r(bytes, source);
    r.expect_magic(kWireMagic);
    const std::uint32_t bits = r.u32();
    const auto packed = r.bytes((static_cast<std::size_t>(bits) + 7) / 8);
    WireMessage msg;
    try {
        msg.code = BinaryCode::from_bytes(bits, packed);
    } catch (const Error& e) {
        r.fail(e.what());
    }
    const std::uint8_t flags = r.u8();
    if (flags & ~(kHasGps | kHasCategory)) r.fail("unknown context flags");
    if (flags & kHasGps) {
        GeoPoint g;
        g.lat = r.f64();
        g.lon = r.f64();
        msg.context.gps = g;
    }
    if (flags & kHasCategory) msg.context.category = r.u32();
    if (!r.at_end()) r.fail("trailing bytes");
    return msg;
}

std::uint64_t wire_size(std::uint32_t bits, const ContextTag& context) {
    return 8 + 4 + (static_cast<std::uint64_t>(bits) + 7) / 8 + 1 + (context.gps ? 16 : 0) + (context.category ? 4 : 0);
}

}  // namespace dehash
