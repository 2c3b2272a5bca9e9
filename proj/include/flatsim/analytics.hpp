#pragma once

/**
 * @file analytics.hpp
 * @brief Closed-form HBM traffic models and simulation summaries.
 */

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>

#include "arch.hpp"
#include "simulator.hpp"

namespace flatsim {

/// Exact rational number; used for traffic ratios.
struct Ratio {
    std::int64_t num = 0;
    std::int64_t den = 1;

    static Ratio of(std::int64_t n, std::int64_t d) {
        if (d == 0) throw std::invalid_argument("ratio with zero denominator");
        const std::int64_t g = std::gcd(n, d);
        if (d < 0) return {-n / g, -d / g};
        return {n / g, d / g};
    }
    double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
    std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
    bool operator==(const Ratio&) const = default;
};

struct IoBreakdown {
    Bytes q_bytes = 0;
    Bytes kv_bytes = 0;
    Bytes o_bytes = 0;
};

struct IoModelResult {
    Bytes total_bytes = 0;
    IoBreakdown breakdown;
    std::optional<Ratio> ratio_vs_baseline;  ///< FlashAttention bytes / these bytes
};

namespace detail {

inline IoModelResult io_bytes(const MhaLayer& layer, std::int64_t effective_block) {
    const std::int64_t head = static_cast<std::int64_t>(layer.batch) * layer.heads * layer.seq_len * layer.head_dim *
                              layer.bytes_per_elem;
    const std::int64_t passes = layer.seq_len / effective_block;
    IoModelResult r;
    r.breakdown.q_bytes = head;
    r.breakdown.o_bytes = head;
    r.breakdown.kv_bytes = 2 * head * passes;
    r.total_bytes = r.breakdown.q_bytes + r.breakdown.kv_bytes + r.breakdown.o_bytes;
    return r;
}

inline std::int64_t exact_sqrt(std::int64_t n) {
    auto r = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
    while (r * r > n) --r;
    while ((r + 1) * (r + 1) <= n) ++r;
    return r * r == n ? r : -1;
}

}  // namespace detail

/// 2 H B D S (1 + S/M) bytes_per_elem
inline IoModelResult fa_io_bytes(const MhaLayer& layer, int block) {
    layer.validate();
    if (block < 1 || layer.seq_len % block != 0)
        throw std::invalid_argument("fa_io_bytes: block " + std::to_string(block) + " does not divide S = " +
                                    std::to_string(layer.seq_len));
    return detail::io_bytes(layer, block);
}

/// 2 H B D S (1 + S/(sqrt(N) M)) bytes_per_elem; N must be a perfect square.
inline IoModelResult flat_io_bytes(const MhaLayer& layer, int block, int group_tiles) {
    layer.validate();
    if (group_tiles < 1) throw std::invalid_argument("flat_io_bytes: group tile count must be positive");
    const std::int64_t root = detail::exact_sqrt(group_tiles);
    if (root < 0)
        throw std::invalid_argument("flat_io_bytes: N = " + std::to_string(group_tiles) + " is not a perfect square");
    if (block < 1 || layer.seq_len % (root * block) != 0)
        throw std::invalid_argument("flat_io_bytes: sqrt(N) * M = " + std::to_string(root * block) +
                                    " does not divide S = " + std::to_string(layer.seq_len));
    IoModelResult r = detail::io_bytes(layer, root * block);
    r.ratio_vs_baseline = Ratio::of(fa_io_bytes(layer, block).total_bytes, r.total_bytes);
    return r;
}

struct Metrics {
    Cycles cycles = 0;
    double utilization = 0.0;         ///< MHA flops / (peak * cycles)
    double active_utilization = 0.0;  ///< gemm flops / (peak * matrix-busy cycles)
    Bytes hbm_bytes = 0;
    double hbm_bw_utilization = 0.0;
    std::array<double, kCategoryCount> exposed{};  ///< mean per tile
    std::array<double, kCategoryCount> busy{};     ///< mean per tile

    double exposed_of(Category c) const noexcept { return exposed[static_cast<std::size_t>(c)]; }
};

/// Ideal MHA flop count over the simulated runtime; the gemm flops in the
/// report equal 4 B H S^2 D for every complete plan.
inline Metrics summarize(const SimReport& rep, const ArchConfig& cfg, const MhaLayer& layer) {
    Metrics m;
    m.cycles = rep.total_cycles;
    m.hbm_bytes = rep.total_hbm_bytes();
    if (rep.total_cycles > 0) {
        m.utilization = static_cast<double>(layer.mha_flops()) /
                        (static_cast<double>(cfg.peak_system_flops_per_cycle()) * static_cast<double>(rep.total_cycles));
        m.hbm_bw_utilization = static_cast<double>(m.hbm_bytes) /
                               (static_cast<double>(cfg.peak_hbm_bytes_per_cycle()) * static_cast<double>(rep.total_cycles));
    }
    if (rep.matrix_busy_cycles > 0)
        m.active_utilization = static_cast<double>(rep.gemm_flops) /
                               (static_cast<double>(cfg.peak_matrix_flops_per_cycle()) *
                                static_cast<double>(rep.matrix_busy_cycles));
    for (int c = 0; c < kCategoryCount; ++c) {
        m.exposed[static_cast<std::size_t>(c)] = rep.mean_exposed(static_cast<Category>(c));
        m.busy[static_cast<std::size_t>(c)] = rep.mean_busy(static_cast<Category>(c));
    }
    return m;
}

/// Category with the most exposed cycles; ties go to the lower category.
inline Category dominant_exposed(const Metrics& m) {
    int best = 0;
    for (int c = 1; c < kCategoryCount; ++c)
        if (m.exposed[static_cast<std::size_t>(c)] > m.exposed[static_cast<std::size_t>(best)]) best = c;
    return static_cast<Category>(best);
}

}  // namespace flatsim
