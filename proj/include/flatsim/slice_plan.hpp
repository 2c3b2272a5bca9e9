#pragma once

/**
 * @file slice_plan.hpp
 * @brief Dataflow variants, tile groups and per-tile slice sizing.
 *
 * A group of G_x x G_y tiles processes one B_r x B_c attention block; each
 * tile owns a (B_r/G_y) x (B_c/G_x) slice. FlashAttention-style variants are
 * the 1x1 group case. Slices are always square.
 */

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "arch.hpp"

namespace flatsim {

/// The requested plan cannot be realized on the given architecture.
class PlanError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DataflowKind { FA2, FA3, Flat, FlatColl, FlatAsyn };

inline std::string_view to_string(DataflowKind k) {
    switch (k) {
        case DataflowKind::FA2: return "fa2";
        case DataflowKind::FA3: return "fa3";
        case DataflowKind::Flat: return "flat";
        case DataflowKind::FlatColl: return "flatcoll";
        case DataflowKind::FlatAsyn: return "flatasyn";
    }
    return "unknown";
}

inline std::optional<DataflowKind> parse_dataflow(std::string_view s) {
    for (auto k : {DataflowKind::FA2, DataflowKind::FA3, DataflowKind::Flat, DataflowKind::FlatColl, DataflowKind::FlatAsyn})
        if (to_string(k) == s) return k;
    return std::nullopt;
}

inline bool is_flat(DataflowKind k) noexcept {
    return k == DataflowKind::Flat || k == DataflowKind::FlatColl || k == DataflowKind::FlatAsyn;
}
inline bool needs_hw_collectives(DataflowKind k) noexcept {
    return k == DataflowKind::FlatColl || k == DataflowKind::FlatAsyn;
}
/// Two head streams interleaved per tile/group.
inline bool is_async(DataflowKind k) noexcept { return k == DataflowKind::FA3 || k == DataflowKind::FlatAsyn; }

struct GroupShape {
    int gx = 1;
    int gy = 1;

    int tiles() const noexcept { return gx * gy; }
    bool operator==(const GroupShape&) const = default;
};

inline std::string to_string(GroupShape g) { return std::to_string(g.gx) + "x" + std::to_string(g.gy); }

/// Parses "GxxGy", e.g. "16x16".
inline GroupShape parse_group(std::string_view s) {
    const auto pos = s.find('x');
    if (pos == std::string_view::npos) throw std::invalid_argument("group shape must look like 16x16, got '" + std::string(s) + "'");
    try {
        std::size_t a = 0, b = 0;
        const std::string lhs(s.substr(0, pos)), rhs(s.substr(pos + 1));
        GroupShape g{std::stoi(lhs, &a), std::stoi(rhs, &b)};
        if (a != lhs.size() || b != rhs.size() || g.gx < 1 || g.gy < 1) throw std::invalid_argument("");
        return g;
    } catch (const std::exception&) {
        throw std::invalid_argument("group shape must look like 16x16, got '" + std::string(s) + "'");
    }
}

inline void validate_group(GroupShape g, const ArchConfig& cfg) {
    if (g.gx < 1 || g.gy < 1) throw PlanError("group " + to_string(g) + ": dimensions must be positive");
    if (cfg.mesh_x % g.gx != 0)
        throw PlanError("group " + to_string(g) + ": G_x does not divide mesh_x = " + std::to_string(cfg.mesh_x));
    if (cfg.mesh_y % g.gy != 0)
        throw PlanError("group " + to_string(g) + ": G_y does not divide mesh_y = " + std::to_string(cfg.mesh_y));
}

enum class Buffering { single, double_buffered };

struct SlicePlan {
    GroupShape group;
    int block_rows = 0;  ///< B_r
    int block_cols = 0;  ///< B_c
    int slice_rows = 0;  ///< B_r / G_y
    int slice_cols = 0;  ///< B_c / G_x
    int kv_buffers = 2;  ///< K^T/V buffers per stream
    int streams = 1;     ///< concurrently resident head streams
    Bytes l1_footprint_bytes = 0;

    Buffering buffering() const noexcept { return kv_buffers > 1 ? Buffering::double_buffered : Buffering::single; }
    int row_blocks(int seq_len) const noexcept { return seq_len / block_rows; }
    int col_blocks(int seq_len) const noexcept { return seq_len / block_cols; }

    bool operator==(const SlicePlan&) const = default;
};

/**
 * L1 bytes for a square slice s: per stream
 *   Q (s D) + K^T (D s kbuf) + V (s D kbuf) + O (s D) + scores (s^2) + stats (4 s)
 * elements.
 */
inline Bytes slice_footprint(std::int64_t s, const MhaLayer& layer, int kv_buffers, int streams) {
    const std::int64_t d = layer.head_dim;
    const std::int64_t elems = s * d + d * s * kv_buffers + s * d * kv_buffers + s * d + s * s + 4 * s;
    return static_cast<Bytes>(streams) * layer.bytes_per_elem * elems;
}

/// Buffering layout of a dataflow. The async variants keep two streams with
/// one K^T/V buffer each: the second stream plays the role of the second buffer.
inline void buffering_for(DataflowKind kind, int& kv_buffers, int& streams) {
    if (is_async(kind)) {
        kv_buffers = 1;
        streams = 2;
    } else {
        kv_buffers = 2;
        streams = 1;
    }
}

/// Slice plan with an explicit square slice size; checks every invariant.
inline SlicePlan make_slice_plan(const MhaLayer& layer, const ArchConfig& cfg, GroupShape group, DataflowKind kind, int s) {
    layer.validate();
    validate_group(group, cfg);
    SlicePlan p;
    p.group = group;
    buffering_for(kind, p.kv_buffers, p.streams);
    p.slice_rows = p.slice_cols = s;
    p.block_rows = s * group.gy;
    p.block_cols = s * group.gx;
    p.l1_footprint_bytes = slice_footprint(s, layer, p.kv_buffers, p.streams);
    const std::string where = "slice " + std::to_string(s) + " on group " + to_string(group);
    if (s < 1) throw PlanError(where + ": slice size must be positive");
    if (layer.seq_len % p.block_rows != 0 || layer.seq_len % p.block_cols != 0)
        throw PlanError(where + ": block " + std::to_string(p.block_rows) + "x" + std::to_string(p.block_cols) +
                        " does not divide sequence length " + std::to_string(layer.seq_len));
    if (p.l1_footprint_bytes > cfg.l1_bytes)
        throw PlanError(where + ": L1 footprint " + std::to_string(p.l1_footprint_bytes) + " B exceeds l1_bytes " +
                        std::to_string(cfg.l1_bytes));
    return p;
}

/**
 * Largest square slice s that fits L1, keeps s*G_x and s*G_y dividing S and
 * is a multiple of the larger CE array dimension. When divisibility alone
 * caps s below the CE dimension (short sequences on large groups) the
 * largest divisor-compatible s that fits L1 is taken instead.
 *
 * Among those, the largest s that still gives every group one
 * (batch, head, row-block) job per stream is taken; if no s does, the
 * smallest feasible one.
 */
inline SlicePlan choose_slice_plan(const MhaLayer& layer, const ArchConfig& cfg, GroupShape group, DataflowKind kind) {
    layer.validate();
    validate_group(group, cfg);
    int kv_buffers = 0, streams = 0;
    buffering_for(kind, kv_buffers, streams);

    const int seq = layer.seq_len;
    const int ce = std::max(cfg.ce_rows, cfg.ce_cols);
    const int cap = seq / std::max(group.gx, group.gy);
    auto divisible = [&](int s) { return seq % (s * group.gx) == 0 && seq % (s * group.gy) == 0; };
    auto fits = [&](int s) { return slice_footprint(s, layer, kv_buffers, streams) <= cfg.l1_bytes; };
    const std::int64_t min_jobs = static_cast<std::int64_t>(cfg.tiles() / group.tiles()) * streams;
    auto jobs = [&](int s) {
        return static_cast<std::int64_t>(layer.batch) * layer.heads * (seq / (s * group.gy));
    };

    std::vector<int> feasible;  // descending
    int largest_divisible = 0;
    for (int s = cap; s >= 1; --s) {
        if (!divisible(s)) continue;
        if (largest_divisible == 0) largest_divisible = s;
        if (s % ce == 0 && fits(s)) feasible.push_back(s);
    }
    if (largest_divisible == 0)
        throw PlanError("infeasible slice plan: no slice size makes group " + to_string(group) +
                        " tile sequence length " + std::to_string(seq));
    if (feasible.empty()) {
        if (largest_divisible >= ce) {
            const bool any_ce_multiple = [&] {
                for (int s = ce; s <= cap; s += ce)
                    if (divisible(s)) return true;
                return false;
            }();
            if (!any_ce_multiple)
                throw PlanError("infeasible slice plan: no multiple of the CE dimension " + std::to_string(ce) +
                                " divides sequence length " + std::to_string(seq) + " on group " + to_string(group));
            throw PlanError("infeasible slice plan: L1 capacity " + std::to_string(cfg.l1_bytes) + " B cannot hold a " +
                            std::to_string(ce) + "-row slice (needs " +
                            std::to_string(slice_footprint(ce, layer, kv_buffers, streams)) + " B)");
        }
        for (int s = largest_divisible; s >= 1; --s)
            if (divisible(s) && fits(s)) feasible.push_back(s);
        if (feasible.empty())
            throw PlanError("infeasible slice plan: L1 capacity " + std::to_string(cfg.l1_bytes) +
                            " B cannot hold any slice of group " + to_string(group));
    }
    for (int s : feasible)
        if (jobs(s) >= min_jobs) return make_slice_plan(layer, cfg, group, kind, s);
    return make_slice_plan(layer, cfg, group, kind, feasible.back());
}

}  // namespace flatsim
