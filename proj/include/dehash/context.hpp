#pragma once

#include <cstdint>
#include <optional>

namespace dehash {

struct GeoPoint {
    double lat = 0.0;  ///< degrees
    double lon = 0.0;  ///< degrees
    bool operator==(const GeoPoint&) const = default;
};

/// Side information sent along with a query code.
struct ContextTag {
    std::optional<GeoPoint> gps;
    std::optional<std::uint32_t> category;
    bool operator==(const ContextTag&) const = default;
};

}  // namespace dehash
