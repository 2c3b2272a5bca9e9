#pragma once

/**
 * @file noc.hpp
 * @brief 2D-mesh topology, XY routing and closed-form collective latencies.
 *
 * Coordinates are 0-based; x grows eastward from the west edge and y grows
 * northward from the south edge. A collective covers a contiguous run of
 * tiles along one row or column starting at its root: multicasts flow away
 * from the root (east or north), reductions flow toward it.
 *
 * The latencies here are uncontended service times. Queuing on shared links
 * is the simulator's business.
 */

#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "arch.hpp"

namespace flatsim {

struct TileCoord {
    int x = 0;
    int y = 0;

    bool operator==(const TileCoord&) const = default;
    auto operator<=>(const TileCoord&) const = default;
};

inline std::string to_string(TileCoord t) {
    return "(" + std::to_string(t.x) + "," + std::to_string(t.y) + ")";
}

inline bool in_mesh(TileCoord t, const ArchConfig& cfg) noexcept {
    return t.x >= 0 && t.y >= 0 && t.x < cfg.mesh_x && t.y < cfg.mesh_y;
}

inline int tile_index(TileCoord t, const ArchConfig& cfg) noexcept { return t.y * cfg.mesh_x + t.x; }

inline TileCoord tile_at(int index, const ArchConfig& cfg) noexcept {
    return {index % cfg.mesh_x, index / cfg.mesh_x};
}

enum class Direction : std::uint8_t { east = 0, west = 1, north = 2, south = 3 };

/// One directed hop between adjacent routers.
struct Link {
    TileCoord from;
    TileCoord to;

    bool operator==(const Link&) const = default;

    Direction direction() const noexcept {
        if (to.x > from.x) return Direction::east;
        if (to.x < from.x) return Direction::west;
        if (to.y > from.y) return Direction::north;
        return Direction::south;
    }
};

/// Dense id of a directed link, leaving the tile at `from` in `direction()`.
inline int link_id(const Link& l, const ArchConfig& cfg) noexcept {
    return tile_index(l.from, cfg) * 4 + static_cast<int>(l.direction());
}

inline int link_count(const ArchConfig& cfg) noexcept { return cfg.tiles() * 4; }

/// Dimension-ordered route: all X hops first, then Y.
inline std::vector<Link> route_xy(TileCoord src, TileCoord dst, const ArchConfig& cfg) {
    if (!in_mesh(src, cfg)) throw std::out_of_range("route_xy: source " + to_string(src) + " outside mesh");
    if (!in_mesh(dst, cfg)) throw std::out_of_range("route_xy: destination " + to_string(dst) + " outside mesh");
    std::vector<Link> path;
    path.reserve(static_cast<std::size_t>(std::abs(dst.x - src.x) + std::abs(dst.y - src.y)));
    TileCoord cur = src;
    const int sx = dst.x > src.x ? 1 : -1;
    while (cur.x != dst.x) {
        TileCoord next{cur.x + sx, cur.y};
        path.push_back({cur, next});
        cur = next;
    }
    const int sy = dst.y > src.y ? 1 : -1;
    while (cur.y != dst.y) {
        TileCoord next{cur.x, cur.y + sy};
        path.push_back({cur, next});
        cur = next;
    }
    return path;
}

/// ceil(alpha/beta) + 2 L_d + h L_r
inline Cycles unicast_latency(Bytes payload, std::int64_t hops, const ArchConfig& cfg) {
    if (payload < 0 || hops < 0) throw std::invalid_argument("unicast_latency: negative payload or hop count");
    return ceil_div(payload, cfg.noc_link_bytes_per_cycle) + 2 * cfg.l1_to_router_cycles +
           hops * cfg.router_hop_cycles;
}

enum class CollectiveKind : std::uint8_t { multicast, reduce_sum, reduce_max };
enum class Axis : std::uint8_t { row, column };

inline std::string_view to_string(CollectiveKind k) {
    switch (k) {
        case CollectiveKind::multicast: return "multicast";
        case CollectiveKind::reduce_sum: return "reduce_sum";
        case CollectiveKind::reduce_max: return "reduce_max";
    }
    return "unknown";
}

/**
 * A row- or column-wise collective. `span` is the number of tiles beyond
 * the root (multicast destinations, or reduction sources), so the
 * collective touches span + 1 tiles and span links.
 */
struct CollectiveSpec {
    CollectiveKind kind = CollectiveKind::multicast;
    Axis axis = Axis::row;
    TileCoord root;
    int span = 1;
    Bytes payload_bytes = 0;
    int elem_bytes = 2;  ///< element width, for the software combine step of reductions

    bool is_reduction() const noexcept { return kind != CollectiveKind::multicast; }

    TileCoord participant(int i) const noexcept {
        return axis == Axis::row ? TileCoord{root.x + i, root.y} : TileCoord{root.x, root.y + i};
    }

    bool operator==(const CollectiveSpec&) const = default;
};

inline void validate_collective(const CollectiveSpec& spec, const ArchConfig& cfg) {
    if (spec.span < 1) throw std::invalid_argument("collective span must be >= 1");
    if (spec.payload_bytes < 0) throw std::invalid_argument("collective payload must be >= 0");
    if (!in_mesh(spec.root, cfg)) throw std::out_of_range("collective root " + to_string(spec.root) + " outside mesh");
    if (!in_mesh(spec.participant(spec.span), cfg))
        throw std::out_of_range("collective span " + std::to_string(spec.span) + " from root " +
                                to_string(spec.root) + " exceeds mesh");
}

/// Links held by a collective: away from the root for multicasts, toward it for reductions.
inline std::vector<Link> collective_links(const CollectiveSpec& spec, const ArchConfig& cfg) {
    validate_collective(spec, cfg);
    std::vector<Link> links;
    links.reserve(static_cast<std::size_t>(spec.span));
    for (int i = 0; i < spec.span; ++i) {
        const TileCoord a = spec.participant(i);
        const TileCoord b = spec.participant(i + 1);
        links.push_back(spec.is_reduction() ? Link{b, a} : Link{a, b});
    }
    return links;
}

inline VectorOp combine_op(CollectiveKind kind) noexcept {
    return kind == CollectiveKind::reduce_max ? VectorOp::rowmax : VectorOp::elementwise;
}

/**
 * Software collective as a chain of unicasts, the i-th travelling i hops:
 * N (ceil(alpha/beta) + 2 L_d) + L_r N (N+1) / 2.
 * Reductions add one vector-engine combine of the payload per chain step.
 */
inline Cycles sw_collective_latency(const CollectiveSpec& spec, const ArchConfig& cfg) {
    validate_collective(spec, cfg);
    const std::int64_t n = spec.span;
    Cycles t = n * (ceil_div(spec.payload_bytes, cfg.noc_link_bytes_per_cycle) + 2 * cfg.l1_to_router_cycles) +
               cfg.router_hop_cycles * n * (n + 1) / 2;
    if (spec.is_reduction()) t += n * vector_cycles(combine_op(spec.kind), spec.payload_bytes / spec.elem_bytes, cfg);
    return t;
}

/// Path-based forwarding: ceil(alpha/beta) + 2 L_d + N L_r (+ per-hop combine for reductions).
inline Cycles hw_collective_latency(const CollectiveSpec& spec, const ArchConfig& cfg) {
    if (!cfg.hw_collectives) throw std::logic_error("hw_collective_latency: architecture has no hardware collectives");
    validate_collective(spec, cfg);
    Cycles t = ceil_div(spec.payload_bytes, cfg.noc_link_bytes_per_cycle) + 2 * cfg.l1_to_router_cycles +
               spec.span * cfg.router_hop_cycles;
    if (spec.is_reduction()) t += spec.span * cfg.hw_reduce_hop_cycles;
    return t;
}

}  // namespace flatsim
