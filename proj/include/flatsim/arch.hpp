#pragma once

/**
 * @file arch.hpp
 * @brief Architecture parameterization of a tile-based many-PE accelerator
 *        and uncontended timing models for its per-tile engines and HBM.
 *
 * A tile holds a matrix engine (CE array of ce_rows x ce_cols FMA units),
 * a vector engine with a separate exponential unit, a DMA engine and a
 * software-managed L1. Tiles sit on a 2D mesh NoC; HBM channels attach to
 * the west (x = 0) and south (y = 0) mesh edges.
 *
 * All cycle counts are at the accelerator clock. Timing functions here are
 * pure: contention is layered on top by the simulator.
 */

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace flatsim {

using Cycles = std::int64_t;
using Bytes = std::int64_t;

/// Raised for malformed or inconsistent configuration input. The message
/// always starts with the offending field path (e.g. "mesh.mesh_x").
class ConfigError : public std::invalid_argument {
public:
    ConfigError(const std::string& field_path, const std::string& what)
        : std::invalid_argument(field_path + ": " + what), field_(field_path) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

struct ArchConfig {
    // mesh
    int mesh_x = 1;
    int mesh_y = 1;

    // noc
    int noc_link_bytes_per_cycle = 128;  ///< beta
    Cycles l1_to_router_cycles = 10;     ///< L_d
    Cycles router_hop_cycles = 4;        ///< L_r
    bool hw_collectives = false;
    Cycles hw_reduce_hop_cycles = 0;     ///< extra combine latency per hop for in-network reductions

    // hbm
    int hbm_channels_west = 1;
    int hbm_channels_south = 0;
    int hbm_channel_bytes_per_cycle = 64;
    Cycles hbm_access_latency_cycles = 200;

    // tile
    int ce_rows = 32;
    int ce_cols = 16;
    Cycles gemm_fill_cycles = 32;
    int vector_elems_per_cycle = 64;
    int exp_elems_per_cycle = 16;
    Bytes l1_bytes = 384 * 1024;
    int l1_bytes_per_cycle = 512;
    Cycles sync_overhead_cycles = 50;

    int tiles() const noexcept { return mesh_x * mesh_y; }
    int hbm_channels() const noexcept { return hbm_channels_west + hbm_channels_south; }

    /// FMA counts as two flops.
    std::int64_t peak_matrix_flops_per_cycle() const noexcept {
        return 2LL * ce_rows * ce_cols;
    }
    std::int64_t peak_system_flops_per_cycle() const noexcept {
        return peak_matrix_flops_per_cycle() * tiles();
    }
    Bytes total_l1_bytes() const noexcept { return l1_bytes * tiles(); }
    Bytes peak_hbm_bytes_per_cycle() const noexcept {
        return static_cast<Bytes>(hbm_channels()) * hbm_channel_bytes_per_cycle;
    }

    /// Throws ConfigError naming the first violated field.
    void validate() const;

    bool operator==(const ArchConfig&) const = default;
};

/// One MHA layer in the prefill phase.
struct MhaLayer {
    int batch = 1;
    int heads = 1;
    int seq_len = 1;
    int head_dim = 1;
    int bytes_per_elem = 2;

    void validate() const {
        auto check = [](int v, const char* name) {
            if (v <= 0) throw ConfigError(std::string("layer.") + name, "must be positive, got " + std::to_string(v));
        };
        check(batch, "batch");
        check(heads, "heads");
        check(seq_len, "seq_len");
        check(head_dim, "head_dim");
        check(bytes_per_elem, "bytes_per_elem");
    }

    /// Bytes of one S x D operand (Q, K, V or O) of one head.
    Bytes head_tensor_bytes() const noexcept {
        return static_cast<Bytes>(seq_len) * head_dim * bytes_per_elem;
    }

    /// Two GEMMs (QK^T and PV) per head: 4 * B * H * S^2 * D.
    std::int64_t mha_flops() const noexcept {
        return 4LL * batch * heads * static_cast<std::int64_t>(seq_len) * seq_len * head_dim;
    }

    bool operator==(const MhaLayer&) const = default;
};

enum class VectorOp { elementwise, rowmax, rowsum, exp, scale_accumulate };

inline std::string_view to_string(VectorOp op) {
    switch (op) {
        case VectorOp::elementwise: return "elementwise";
        case VectorOp::rowmax: return "rowmax";
        case VectorOp::rowsum: return "rowsum";
        case VectorOp::exp: return "exp";
        case VectorOp::scale_accumulate: return "scale_accumulate";
    }
    return "unknown";
}

constexpr std::int64_t ceil_div(std::int64_t a, std::int64_t b) noexcept {
    return (a + b - 1) / b;
}

/**
 * Output-stationary block scan over the CE array:
 * ceil(m/A_r) * ceil(n/A_c) * k + F.
 */
inline Cycles gemm_cycles(std::int64_t m, std::int64_t k, std::int64_t n, const ArchConfig& cfg) {
    if (m < 1 || k < 1 || n < 1) throw std::invalid_argument("gemm_cycles: dimensions must be >= 1");
    return ceil_div(m, cfg.ce_rows) * ceil_div(n, cfg.ce_cols) * k + cfg.gemm_fill_cycles;
}

inline Cycles vector_cycles(VectorOp op, std::int64_t n_elems, const ArchConfig& cfg) {
    if (n_elems < 0) throw std::invalid_argument("vector_cycles: negative element count");
    const int rate = op == VectorOp::exp ? cfg.exp_elems_per_cycle : cfg.vector_elems_per_cycle;
    return ceil_div(n_elems, rate);
}

/// Serialization time of a request on one channel, without the access latency.
inline Cycles hbm_transfer_cycles(Bytes bytes, const ArchConfig& cfg) {
    if (bytes < 0) throw std::invalid_argument("hbm_transfer_cycles: negative byte count");
    return ceil_div(bytes, cfg.hbm_channel_bytes_per_cycle);
}

inline Cycles hbm_request_time_uncontended(Bytes bytes, const ArchConfig& cfg) {
    return cfg.hbm_access_latency_cycles + hbm_transfer_cycles(bytes, cfg);
}

inline void ArchConfig::validate() const {
    auto positive = [](std::int64_t v, const char* path) {
        if (v <= 0) throw ConfigError(path, "must be positive, got " + std::to_string(v));
    };
    auto non_negative = [](std::int64_t v, const char* path) {
        if (v < 0) throw ConfigError(path, "must be non-negative, got " + std::to_string(v));
    };
    positive(mesh_x, "mesh.mesh_x");
    positive(mesh_y, "mesh.mesh_y");
    positive(noc_link_bytes_per_cycle, "noc.noc_link_bytes_per_cycle");
    positive(l1_to_router_cycles, "noc.l1_to_router_cycles");
    positive(router_hop_cycles, "noc.router_hop_cycles");
    non_negative(hw_reduce_hop_cycles, "noc.hw_reduce_hop_cycles");
    non_negative(hbm_channels_west, "hbm.hbm_channels_west");
    non_negative(hbm_channels_south, "hbm.hbm_channels_south");
    if (hbm_channels() < 1) throw ConfigError("hbm.hbm_channels_west", "at least one HBM channel is required");
    if (hbm_channels_west > mesh_y)
        throw ConfigError("hbm.hbm_channels_west", "channel count " + std::to_string(hbm_channels_west) +
                                                       " exceeds west edge length " + std::to_string(mesh_y));
    if (hbm_channels_south > mesh_x)
        throw ConfigError("hbm.hbm_channels_south", "channel count " + std::to_string(hbm_channels_south) +
                                                        " exceeds south edge length " + std::to_string(mesh_x));
    positive(hbm_channel_bytes_per_cycle, "hbm.hbm_channel_bytes_per_cycle");
    non_negative(hbm_access_latency_cycles, "hbm.hbm_access_latency_cycles");
    positive(ce_rows, "tile.ce_rows");
    positive(ce_cols, "tile.ce_cols");
    non_negative(gemm_fill_cycles, "tile.gemm_fill_cycles");
    positive(vector_elems_per_cycle, "tile.vector_elems_per_cycle");
    positive(exp_elems_per_cycle, "tile.exp_elems_per_cycle");
    positive(l1_bytes, "tile.l1_bytes");
    positive(l1_bytes_per_cycle, "tile.l1_bytes_per_cycle");
    non_negative(sync_overhead_cycles, "tile.sync_overhead_cycles");
}

}  // namespace flatsim
