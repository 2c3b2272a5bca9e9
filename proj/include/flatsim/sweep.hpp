#pragma once

/**
 * @file sweep.hpp
 * @brief Design-space sweeps over architectures, layers, dataflows and groups.
 *
 * Points run independently (optionally on worker threads) and results are
 * stored by point index, so the table never depends on execution order.
 */

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "analytics.hpp"
#include "planner.hpp"
#include "simulator.hpp"

namespace flatsim {

struct NamedArch {
    std::string name;
    ArchConfig cfg;
};

struct SweepPoint {
    std::size_t arch = 0;  ///< index into SweepGrid::archs
    MhaLayer layer;
    DataflowKind kind = DataflowKind::FlatAsyn;
    GroupShape group;
};

struct SweepRow {
    SweepPoint point;
    std::optional<Metrics> metrics;
    std::string error;  ///< planner or simulator message when metrics is empty

    bool ok() const noexcept { return metrics.has_value(); }
};

struct SweepGrid {
    std::vector<NamedArch> archs;
    std::vector<MhaLayer> layers;
    std::vector<DataflowKind> dataflows;
    std::vector<GroupShape> groups;  ///< used by Flat variants; FA variants run once at 1x1
};

/// Defaults: S in {512, 1024, 2048, 4096}, D in {64, 128}, square groups 4..32.
inline SweepGrid default_grid(std::vector<NamedArch> archs, int batch = 4, int heads = 32) {
    SweepGrid g;
    g.archs = std::move(archs);
    for (int d : {64, 128})
        for (int s : {512, 1024, 2048, 4096}) g.layers.push_back({batch, heads, s, d, 2});
    g.dataflows = {DataflowKind::FA3, DataflowKind::FlatAsyn};
    for (int n : {4, 8, 16, 32}) g.groups.push_back({n, n});
    return g;
}

/// Points in arch, layer, dataflow, group order.
inline std::vector<SweepPoint> expand(const SweepGrid& grid) {
    std::vector<SweepPoint> pts;
    for (std::size_t a = 0; a < grid.archs.size(); ++a)
        for (const auto& layer : grid.layers)
            for (auto kind : grid.dataflows) {
                if (!is_flat(kind)) {
                    pts.push_back({a, layer, kind, {1, 1}});
                    continue;
                }
                for (auto g : grid.groups) pts.push_back({a, layer, kind, g});
            }
    return pts;
}

inline SweepRow run_point(const SweepGrid& grid, const SweepPoint& pt, const PlanOptions& opts = {}) {
    SweepRow row{pt, std::nullopt, {}};
    const ArchConfig& cfg = grid.archs.at(pt.arch).cfg;
    try {
        const Plan plan = make_plan(pt.kind, pt.layer, cfg, pt.group, opts);
        row.metrics = summarize(simulate(cfg, plan.graph), cfg, pt.layer);
    } catch (const std::exception& e) {
        row.error = e.what();
    }
    return row;
}

struct SweepResult {
    std::vector<SweepRow> rows;
};

inline SweepResult run_sweep(const SweepGrid& grid, unsigned threads = 1, const PlanOptions& opts = {}) {
    const auto pts = expand(grid);
    if (pts.empty()) throw std::invalid_argument("sweep: no points");
    SweepResult res;
    res.rows.resize(pts.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < pts.size(); i = next++) res.rows[i] = run_point(grid, pts[i], opts);
    };
    threads = std::clamp<unsigned>(threads, 1, static_cast<unsigned>(pts.size()));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    return res;
}

/// Winner of one (arch, dataflow, layer) cell.
struct CellBest {
    std::size_t arch = 0;
    DataflowKind kind = DataflowKind::FlatAsyn;
    MhaLayer layer;
    std::size_t row = 0;  ///< index into SweepResult::rows
};

/// Highest utilization per cell; ties go to the smaller group.
inline std::vector<CellBest> best_per_cell(const SweepResult& res) {
    using Key = std::tuple<std::size_t, int, int, int, int, int, int>;
    std::map<Key, std::size_t> best;
    std::vector<Key> order;
    for (std::size_t i = 0; i < res.rows.size(); ++i) {
        const SweepRow& r = res.rows[i];
        if (!r.ok()) continue;
        const auto& p = r.point;
        const Key k{p.arch, static_cast<int>(p.kind), p.layer.batch, p.layer.heads, p.layer.seq_len, p.layer.head_dim,
                    p.layer.bytes_per_elem};
        auto it = best.find(k);
        if (it == best.end()) {
            best.emplace(k, i);
            order.push_back(k);
            continue;
        }
        const SweepRow& cur = res.rows[it->second];
        const double u = r.metrics->utilization, cu = cur.metrics->utilization;
        const int n = p.group.tiles(), cn = cur.point.group.tiles();
        if (u > cu || (u == cu && n < cn)) it->second = i;
    }
    std::vector<CellBest> out;
    for (const auto& k : order) {
        const SweepRow& r = res.rows[best.at(k)];
        out.push_back({r.point.arch, r.point.kind, r.point.layer, best.at(k)});
    }
    return out;
}

struct ArchScore {
    std::size_t arch = 0;
    double mean_best_utilization = 0.0;  ///< over layers, best dataflow and group per layer
};

/**
 * Architectures ranked by the mean over layers of the best utilization any
 * dataflow/group reached. Layers where an arch produced no result count as 0.
 * Ties go to fewer HBM channels, then to the earlier arch.
 */
inline std::vector<ArchScore> rank_archs(const SweepGrid& grid, const SweepResult& res) {
    std::vector<std::vector<double>> per_layer(grid.archs.size(), std::vector<double>(grid.layers.size(), 0.0));
    for (const auto& r : res.rows) {
        if (!r.ok()) continue;
        for (std::size_t l = 0; l < grid.layers.size(); ++l) {
            const auto& a = grid.layers[l];
            const auto& b = r.point.layer;
            if (a.batch == b.batch && a.heads == b.heads && a.seq_len == b.seq_len && a.head_dim == b.head_dim &&
                a.bytes_per_elem == b.bytes_per_elem)
                per_layer[r.point.arch][l] = std::max(per_layer[r.point.arch][l], r.metrics->utilization);
        }
    }
    std::vector<ArchScore> scores;
    for (std::size_t a = 0; a < grid.archs.size(); ++a) {
        double s = 0;
        for (double u : per_layer[a]) s += u;
        scores.push_back({a, grid.layers.empty() ? 0.0 : s / static_cast<double>(grid.layers.size())});
    }
    std::stable_sort(scores.begin(), scores.end(), [&](const ArchScore& x, const ArchScore& y) {
        if (x.mean_best_utilization != y.mean_best_utilization) return x.mean_best_utilization > y.mean_best_utilization;
        return grid.archs[x.arch].cfg.hbm_channels() < grid.archs[y.arch].cfg.hbm_channels();
    });
    return scores;
}

inline constexpr const char* kCsvHeader =
    "arch,dataflow,group,S,D,B,H,cycles,util,active_util,hbm_bytes,hbm_bw_util,exposed_hbm,exposed_inter_tile,"
    "exposed_matmul,exposed_softmax,exposed_sync,error";

namespace detail {

inline std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c == '\n' ? ' ' : c;
    }
    return out + "\"";
}

}  // namespace detail

inline std::string csv_row(const std::string& arch, const SweepRow& r) {
    const auto& p = r.point;
    std::string line = detail::csv_escape(arch) + "," + std::string(to_string(p.kind)) + "," + to_string(p.group) + "," +
                       std::to_string(p.layer.seq_len) + "," + std::to_string(p.layer.head_dim) + "," +
                       std::to_string(p.layer.batch) + "," + std::to_string(p.layer.heads) + ",";
    if (r.ok()) {
        const Metrics& m = *r.metrics;
        line += std::to_string(m.cycles) + "," + detail::fixed6(m.utilization) + "," +
                detail::fixed6(m.active_utilization) + "," + std::to_string(m.hbm_bytes) + "," +
                detail::fixed6(m.hbm_bw_utilization);
        for (double e : m.exposed) line += "," + detail::fixed6(e);
        line += ",";
    } else {
        line += ",,,,,,,,,," + detail::csv_escape(r.error);
    }
    return line;
}

inline void write_csv(std::ostream& os, const SweepGrid& grid, const SweepResult& res) {
    os << kCsvHeader << "\n";
    for (const auto& r : res.rows) os << csv_row(grid.archs.at(r.point.arch).name, r) << "\n";
}

}  // namespace flatsim
