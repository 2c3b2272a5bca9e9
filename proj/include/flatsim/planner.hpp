#pragma once

/**
 * @file planner.hpp
 * @brief Compiles an MHA layer into task graphs for the five dataflows.
 *
 * All variants share one builder. Work is split into jobs, one per
 * (batch, head, row-block), assigned round-robin to groups. FlashAttention
 * variants use 1x1 groups, so every job lives on one tile and no inter-tile
 * traffic appears. For larger groups:
 *
 *   - west-edge tiles load Q slices and multicast them along their row;
 *   - per column block, south-edge tiles load K^T and V slices and multicast
 *     them up their column;
 *   - every tile computes its score slice and local row maxima, which are
 *     max-reduced to the west edge and multicast back; the same happens for
 *     the softmax denominators;
 *   - O slices are rescaled and accumulated locally, normalized on exit,
 *     sum-reduced to the west edge and stored from there.
 *
 * Async variants run two streams per group (alternate jobs of the group's
 * job list) with private buffers, so one stream's DMA and softmax work can
 * overlap the other's GEMMs.
 */

#include <algorithm>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "arch.hpp"
#include "noc.hpp"
#include "slice_plan.hpp"
#include "task_graph.hpp"

namespace flatsim {

enum class CollectiveMode { sw, hw };

struct PlanOptions {
    /// Add one S x D read + write per head for pre-transposing K in HBM.
    bool account_transpose = false;
};

struct Plan {
    DataflowKind kind = DataflowKind::FA2;
    MhaLayer layer;
    SlicePlan slices;
    CollectiveMode collectives = CollectiveMode::sw;
    bool sync_tasks = false;
    int jobs = 0;
    Bytes predicted_hbm_bytes = 0;
    std::vector<std::string> warnings;
    TaskGraph graph;

    GroupShape group() const noexcept { return slices.group; }
};

/**
 * Closed-form HBM traffic of a plan: Q reads and O writes once per element,
 * plus one K^T and one V pass per row block.
 */
inline Bytes predicted_hbm_bytes(const MhaLayer& layer, const SlicePlan& slices, const PlanOptions& opts = {}) {
    const Bytes per_head = layer.head_tensor_bytes();
    const std::int64_t heads = static_cast<std::int64_t>(layer.batch) * layer.heads;
    Bytes total = heads * (2 * per_head + static_cast<std::int64_t>(slices.row_blocks(layer.seq_len)) * 2 * per_head);
    if (opts.account_transpose) total += heads * 2 * per_head;
    return total;
}

namespace detail {

inline constexpr TaskId kNoTask = std::numeric_limits<TaskId>::max();

/// Dependency list builder that drops absent ids.
class DepList {
public:
    DepList& operator<<(TaskId id) {
        if (id != kNoTask) ids_.push_back(id);
        return *this;
    }
    std::span<const TaskId> span() const { return ids_; }
    void clear() { ids_.clear(); }

private:
    std::vector<TaskId> ids_;
};

struct TileBuffers {
    TaskId q_free = kNoTask;       ///< last QK^T GEMM reading the Q buffer
    TaskId scores_free = kNoTask;  ///< last PV GEMM reading the score buffer
    TaskId o_free = kNoTask;       ///< task that drained the O buffer
    std::vector<TaskId> kv_free;   ///< per K^T/V buffer slot
};

struct StreamState {
    std::vector<TileBuffers> tiles;  ///< local tile index ly * gx + lx
    std::int64_t iterations = 0;     ///< for K^T/V slot rotation
};

class PlanBuilder {
public:
    PlanBuilder(const ArchConfig& cfg, Plan& plan, const PlanOptions& opts) : cfg_(cfg), plan_(plan), opts_(opts) {
        const auto& sp = plan_.slices;
        groups_x_ = cfg_.mesh_x / sp.group.gx;
        groups_y_ = cfg_.mesh_y / sp.group.gy;
    }

    void build() {
        const MhaLayer& L = plan_.layer;
        const SlicePlan& sp = plan_.slices;
        const int ngroups = groups_x_ * groups_y_;
        const int row_blocks = sp.row_blocks(L.seq_len);
        const std::int64_t heads = static_cast<std::int64_t>(L.batch) * L.heads;
        const std::int64_t jobs = heads * row_blocks;
        if (jobs > std::numeric_limits<int>::max()) throw PlanError("too many jobs");
        plan_.jobs = static_cast<int>(jobs);

        const int gtiles = sp.group.tiles();
        const std::int64_t iters = sp.col_blocks(L.seq_len);
        const std::int64_t est = jobs * (iters * (gtiles * 9 + sp.group.gx * 4 + sp.group.gy * 2 + 4) + gtiles * 2 + 4);
        plan_.graph.reserve(static_cast<std::size_t>(est), static_cast<std::size_t>(est * 3));

        streams_.assign(static_cast<std::size_t>(ngroups), {});
        for (auto& per_group : streams_) {
            per_group.resize(static_cast<std::size_t>(sp.streams));
            for (auto& st : per_group) {
                st.tiles.resize(static_cast<std::size_t>(gtiles));
                for (auto& tb : st.tiles) tb.kv_free.assign(static_cast<std::size_t>(sp.kv_buffers), kNoTask);
            }
        }

        std::vector<TaskId> transpose_done;
        if (opts_.account_transpose) {
            transpose_done.reserve(static_cast<std::size_t>(heads));
            const Bytes bytes = L.head_tensor_bytes();
            for (std::int64_t hd = 0; hd < heads; ++hd) {
                const int g = static_cast<int>((hd * row_blocks) % ngroups);
                const TileCoord t = local_tile(g, 0, 0);
                const int ch = qo_channel(g, 0);
                const TaskId ld = plan_.graph.hbm_load(t, bytes, ch, TaskGraph::Deps{});
                transpose_done.push_back(plan_.graph.hbm_store(t, bytes, ch, {ld}));
            }
        }

        std::vector<int> group_job_count(static_cast<std::size_t>(ngroups), 0);
        for (std::int64_t j = 0; j < jobs; ++j) {
            const int g = static_cast<int>(j % ngroups);
            const int stream = group_job_count[static_cast<std::size_t>(g)]++ % sp.streams;
            const TaskId k_gate = opts_.account_transpose ? transpose_done[static_cast<std::size_t>(j / row_blocks)] : kNoTask;
            emit_job(g, streams_[static_cast<std::size_t>(g)][static_cast<std::size_t>(stream)], k_gate);
        }
    }

private:
    TileCoord local_tile(int g, int lx, int ly) const {
        const auto& grp = plan_.slices.group;
        return {(g % groups_x_) * grp.gx + lx, (g / groups_x_) * grp.gy + ly};
    }

    int home_channel(TileCoord t) const { return tile_index(t, cfg_) % cfg_.hbm_channels(); }

    int west_channel(int mesh_row) const { return mesh_row * cfg_.hbm_channels_west / cfg_.mesh_y; }
    int south_channel(int mesh_col) const {
        return cfg_.hbm_channels_west + mesh_col * cfg_.hbm_channels_south / cfg_.mesh_x;
    }

    /// Channel serving Q loads and O stores of group row ly.
    int qo_channel(int g, int ly) const {
        const TileCoord t = local_tile(g, 0, ly);
        if (plan_.slices.group.tiles() == 1) return home_channel(t);
        return cfg_.hbm_channels_west > 0 ? west_channel(t.y) : south_channel(t.x);
    }

    /// Channel serving K^T and V loads of group column lx.
    int kv_channel(int g, int lx) const {
        const TileCoord t = local_tile(g, lx, 0);
        if (plan_.slices.group.tiles() == 1) return home_channel(t);
        return cfg_.hbm_channels_south > 0 ? south_channel(t.x) : west_channel(t.y);
    }

    CollectiveSpec row_collective(int g, int ly, CollectiveKind kind, Bytes bytes) const {
        return {kind, Axis::row, local_tile(g, 0, ly), plan_.slices.group.gx - 1, bytes, plan_.layer.bytes_per_elem};
    }
    CollectiveSpec column_collective(int g, int lx, CollectiveKind kind, Bytes bytes) const {
        return {kind, Axis::column, local_tile(g, lx, 0), plan_.slices.group.gy - 1, bytes, plan_.layer.bytes_per_elem};
    }

    void emit_job(int g, StreamState& st, TaskId k_gate) {
        TaskGraph& G = plan_.graph;
        const MhaLayer& L = plan_.layer;
        const SlicePlan& sp = plan_.slices;
        const int gx = sp.group.gx, gy = sp.group.gy;
        const int s = sp.slice_rows;
        const int d = L.head_dim;
        const int eb = L.bytes_per_elem;
        const bool hw = plan_.collectives == CollectiveMode::hw;
        const int iters = sp.col_blocks(L.seq_len);
        const Bytes slice_bytes = static_cast<Bytes>(s) * d * eb;
        const Bytes stat_bytes = static_cast<Bytes>(s) * eb;
        const std::int64_t score_elems = static_cast<std::int64_t>(s) * s;
        const std::int64_t out_elems = static_cast<std::int64_t>(s) * d;
        auto idx = [gx](int lx, int ly) { return static_cast<std::size_t>(ly * gx + lx); };
        const auto ntiles = static_cast<std::size_t>(gx * gy);

        DepList deps;
        std::vector<TaskId> q_ready(ntiles), k_ready(ntiles), v_ready(ntiles), m_ready(ntiles), l_ready(ntiles, kNoTask);
        std::vector<TaskId> qk(ntiles), row_stat(ntiles), ex(ntiles), pv(ntiles, kNoTask), norm(ntiles);
        std::vector<TaskId> row_task(static_cast<std::size_t>(gy)), col_k(static_cast<std::size_t>(gx)),
            col_v(static_cast<std::size_t>(gx));

        // Q: west edge loads, row multicast.
        for (int ly = 0; ly < gy; ++ly) {
            deps.clear();
            deps << st.tiles[idx(0, ly)].q_free;
            const TaskId ld = G.hbm_load(local_tile(g, 0, ly), slice_bytes, qo_channel(g, ly), deps.span());
            TaskId ready = ld;
            if (gx > 1) {
                deps.clear();
                deps << ld;
                for (int lx = 1; lx < gx; ++lx) deps << st.tiles[idx(lx, ly)].q_free;
                ready = G.collective(row_collective(g, ly, CollectiveKind::multicast, slice_bytes), hw, deps.span());
            }
            for (int lx = 0; lx < gx; ++lx) q_ready[idx(lx, ly)] = ready;
        }

        for (int j = 0; j < iters; ++j) {
            const auto slot = static_cast<std::size_t>(st.iterations++ % sp.kv_buffers);

            // K^T and V: south edge loads, column multicast.
            for (int lx = 0; lx < gx; ++lx) {
                const TileCoord root = local_tile(g, lx, 0);
                const int ch = kv_channel(g, lx);
                deps.clear();
                deps << st.tiles[idx(lx, 0)].kv_free[slot] << k_gate;
                const TaskId kl = G.hbm_load(root, slice_bytes, ch, deps.span());
                deps.clear();
                deps << st.tiles[idx(lx, 0)].kv_free[slot];
                const TaskId vl = G.hbm_load(root, slice_bytes, ch, deps.span());
                col_k[static_cast<std::size_t>(lx)] = kl;
                col_v[static_cast<std::size_t>(lx)] = vl;
                if (gy > 1) {
                    deps.clear();
                    deps << kl;
                    for (int ly = 1; ly < gy; ++ly) deps << st.tiles[idx(lx, ly)].kv_free[slot];
                    col_k[static_cast<std::size_t>(lx)] =
                        G.collective(column_collective(g, lx, CollectiveKind::multicast, slice_bytes), hw, deps.span());
                    deps.clear();
                    deps << vl;
                    for (int ly = 1; ly < gy; ++ly) deps << st.tiles[idx(lx, ly)].kv_free[slot];
                    col_v[static_cast<std::size_t>(lx)] =
                        G.collective(column_collective(g, lx, CollectiveKind::multicast, slice_bytes), hw, deps.span());
                }
            }

            // S = Q K^T and local row maxima.
            for (int ly = 0; ly < gy; ++ly) {
                for (int lx = 0; lx < gx; ++lx) {
                    const auto i = idx(lx, ly);
                    const TileCoord t = local_tile(g, lx, ly);
                    k_ready[i] = col_k[static_cast<std::size_t>(lx)];
                    v_ready[i] = col_v[static_cast<std::size_t>(lx)];
                    TaskId gate = kNoTask;
                    if (plan_.sync_tasks) {
                        deps.clear();
                        deps << k_ready[i];
                        gate = G.sync(t, deps.span());
                    }
                    deps.clear();
                    deps << q_ready[i] << k_ready[i] << st.tiles[i].scores_free << gate;
                    qk[i] = G.gemm(t, s, d, s, deps.span());
                    row_stat[i] = G.vec(t, VectorOp::rowmax, score_elems, {qk[i]});
                }
            }
            reduce_and_broadcast(g, CollectiveKind::reduce_max, stat_bytes, hw, row_stat, m_ready, row_task);

            // P = exp(S - m) and local denominators.
            for (int ly = 0; ly < gy; ++ly) {
                for (int lx = 0; lx < gx; ++lx) {
                    const auto i = idx(lx, ly);
                    const TileCoord t = local_tile(g, lx, ly);
                    ex[i] = G.vec(t, VectorOp::exp, score_elems, {m_ready[i]});
                    row_stat[i] = G.vec(t, VectorOp::rowsum, score_elems, {ex[i]});
                }
            }
            std::vector<TaskId> prev_l = l_ready;
            reduce_and_broadcast(g, CollectiveKind::reduce_sum, stat_bytes, hw, row_stat, l_ready, row_task);

            // O = diag(exp(m_old - m_new)) O + P V
            for (int ly = 0; ly < gy; ++ly) {
                for (int lx = 0; lx < gx; ++lx) {
                    const auto i = idx(lx, ly);
                    const TileCoord t = local_tile(g, lx, ly);
                    TileBuffers& tb = st.tiles[i];
                    TaskId acc_gate = tb.o_free;
                    if (j > 0) {
                        deps.clear();
                        deps << m_ready[i] << pv[i] << prev_l[i];
                        acc_gate = G.vec(t, VectorOp::scale_accumulate, out_elems, deps.span());
                    }
                    deps.clear();
                    deps << ex[i] << v_ready[i] << acc_gate;
                    pv[i] = G.gemm(t, s, s, d, deps.span());
                    tb.scores_free = pv[i];
                    tb.kv_free[slot] = pv[i];
                    if (j == iters - 1) tb.q_free = qk[i];
                }
            }
        }

        // Normalize, reduce O slices to the west edge and store.
        for (int ly = 0; ly < gy; ++ly) {
            for (int lx = 0; lx < gx; ++lx) {
                const auto i = idx(lx, ly);
                norm[i] = G.vec(local_tile(g, lx, ly), VectorOp::elementwise, out_elems, {pv[i], l_ready[i]});
            }
        }
        for (int ly = 0; ly < gy; ++ly) {
            TaskId gathered = norm[idx(0, ly)];
            if (gx > 1) {
                deps.clear();
                for (int lx = 0; lx < gx; ++lx) deps << norm[idx(lx, ly)];
                gathered = G.collective(row_collective(g, ly, CollectiveKind::reduce_sum, slice_bytes), hw, deps.span());
            }
            const TaskId store = G.hbm_store(local_tile(g, 0, ly), slice_bytes, qo_channel(g, ly), {gathered});
            st.tiles[idx(0, ly)].o_free = store;
            for (int lx = 1; lx < gx; ++lx) st.tiles[idx(lx, ly)].o_free = gathered;
        }
    }

    /// Row-wise reduce to the west edge followed by a multicast back; a no-op
    /// for single-column groups.
    void reduce_and_broadcast(int g, CollectiveKind kind, Bytes bytes, bool hw, const std::vector<TaskId>& local,
                              std::vector<TaskId>& out, std::vector<TaskId>& row_task) {
        const int gx = plan_.slices.group.gx, gy = plan_.slices.group.gy;
        if (gx == 1) {
            out = local;
            return;
        }
        DepList deps;
        for (int ly = 0; ly < gy; ++ly) {
            deps.clear();
            for (int lx = 0; lx < gx; ++lx) deps << local[static_cast<std::size_t>(ly * gx + lx)];
            const TaskId red = plan_.graph.collective(row_collective(g, ly, kind, bytes), hw, deps.span());
            row_task[static_cast<std::size_t>(ly)] =
                plan_.graph.collective(row_collective(g, ly, CollectiveKind::multicast, bytes), hw, {red});
            for (int lx = 0; lx < gx; ++lx) out[static_cast<std::size_t>(ly * gx + lx)] = row_task[static_cast<std::size_t>(ly)];
        }
    }

    const ArchConfig& cfg_;
    Plan& plan_;
    PlanOptions opts_;
    int groups_x_ = 1;
    int groups_y_ = 1;
    std::vector<std::vector<StreamState>> streams_;
};

inline Plan build_plan(DataflowKind kind, const MhaLayer& layer, const ArchConfig& cfg, const SlicePlan& slices,
                       CollectiveMode mode, bool sync_tasks, const PlanOptions& opts) {
    if (mode == CollectiveMode::hw && !cfg.hw_collectives)
        throw PlanError(std::string(to_string(kind)) + ": hardware collectives requested but noc.hw_collectives is false");
    Plan plan;
    plan.kind = kind;
    plan.layer = layer;
    plan.slices = slices;
    plan.collectives = mode;
    plan.sync_tasks = sync_tasks;
    PlanBuilder(cfg, plan, opts).build();
    plan.predicted_hbm_bytes = predicted_hbm_bytes(layer, slices, opts);
    return plan;
}

}  // namespace detail

/// FlashAttention-2: one (batch, head, row-block) job per tile at a time,
/// double-buffered K^T/V, no inter-tile traffic. The block is the largest
/// that still gives every tile a job.
inline Plan plan_fa2(const MhaLayer& layer, const ArchConfig& cfg, const PlanOptions& opts = {}) {
    const SlicePlan sp = choose_slice_plan(layer, cfg, {1, 1}, DataflowKind::FA2);
    return detail::build_plan(DataflowKind::FA2, layer, cfg, sp, CollectiveMode::sw, false, opts);
}

/// FlashAttention-3 style: two head streams interleaved per tile plus a
/// per-iteration synchronization task. Falls back to FA-2 when the layer
/// does not give every tile two jobs.
inline Plan plan_fa3(const MhaLayer& layer, const ArchConfig& cfg, const PlanOptions& opts = {}) {
    const SlicePlan sp = choose_slice_plan(layer, cfg, {1, 1}, DataflowKind::FA3);
    const std::int64_t jobs = static_cast<std::int64_t>(layer.batch) * layer.heads * sp.row_blocks(layer.seq_len);
    if (jobs < 2LL * cfg.tiles()) {
        Plan p = plan_fa2(layer, cfg, opts);
        p.warnings.push_back("fa3: only " + std::to_string(jobs) + " jobs for " + std::to_string(cfg.tiles()) +
                             " tiles, fewer than two streams per tile; falling back to fa2");
        return p;
    }
    return detail::build_plan(DataflowKind::FA3, layer, cfg, sp, CollectiveMode::sw, true, opts);
}

/// FlatAttention on groups of tiles. `asyn` interleaves two heads per group.
inline Plan plan_flat(const MhaLayer& layer, const ArchConfig& cfg, GroupShape group, CollectiveMode collectives,
                      bool asyn, const PlanOptions& opts = {}) {
    DataflowKind kind = DataflowKind::Flat;
    if (asyn)
        kind = DataflowKind::FlatAsyn;
    else if (collectives == CollectiveMode::hw)
        kind = DataflowKind::FlatColl;
    if (asyn && collectives != CollectiveMode::hw) throw PlanError("flatasyn requires hardware collectives");
    const SlicePlan sp = choose_slice_plan(layer, cfg, group, kind);
    return detail::build_plan(kind, layer, cfg, sp, collectives, group.tiles() > 1, opts);
}

/// Dispatch by variant; `group` is ignored for the FlashAttention variants.
inline Plan make_plan(DataflowKind kind, const MhaLayer& layer, const ArchConfig& cfg, GroupShape group,
                      const PlanOptions& opts = {}) {
    switch (kind) {
        case DataflowKind::FA2: return plan_fa2(layer, cfg, opts);
        case DataflowKind::FA3: return plan_fa3(layer, cfg, opts);
        case DataflowKind::Flat: return plan_flat(layer, cfg, group, CollectiveMode::sw, false, opts);
        case DataflowKind::FlatColl: return plan_flat(layer, cfg, group, CollectiveMode::hw, false, opts);
        case DataflowKind::FlatAsyn: return plan_flat(layer, cfg, group, CollectiveMode::hw, true, opts);
    }
    throw PlanError("unknown dataflow");
}

/// Human-readable listing, grouped by tile in mesh order then by task id.
inline void dump_plan(std::ostream& os, const Plan& plan, const ArchConfig& cfg) {
    const auto& G = plan.graph;
    std::vector<std::vector<TaskId>> by_tile(static_cast<std::size_t>(cfg.tiles()));
    for (TaskId id = 0; id < G.size(); ++id) by_tile[static_cast<std::size_t>(tile_index(G[id].tile, cfg))].push_back(id);
    os << "plan " << to_string(plan.kind) << " group " << to_string(plan.group()) << " slice " << plan.slices.slice_rows
       << " block " << plan.slices.block_rows << "x" << plan.slices.block_cols << " tasks " << G.size() << "\n";
    for (std::size_t ti = 0; ti < by_tile.size(); ++ti) {
        if (by_tile[ti].empty()) continue;
        os << "tile " << to_string(tile_at(static_cast<int>(ti), cfg)) << "\n";
        for (TaskId id : by_tile[ti]) {
            const Task& t = G[id];
            os << "  #" << id << " " << to_string(t.kind);
            std::visit(
                [&](const auto& p) {
                    using P = std::decay_t<decltype(p)>;
                    if constexpr (std::is_same_v<P, HbmPayload>) os << " bytes=" << p.bytes << " ch=" << p.channel;
                    else if constexpr (std::is_same_v<P, UnicastPayload>) os << " bytes=" << p.bytes << " dst=" << to_string(p.dst);
                    else if constexpr (std::is_same_v<P, CollectivePayload>)
                        os << " " << to_string(p.spec.kind) << (p.spec.axis == Axis::row ? " row" : " col")
                           << " span=" << p.spec.span << " bytes=" << p.spec.payload_bytes << (p.hardware ? " hw" : " sw");
                    else if constexpr (std::is_same_v<P, GemmPayload>) os << " " << p.m << "x" << p.k << "x" << p.n;
                    else if constexpr (std::is_same_v<P, VecPayload>) os << " " << to_string(p.op) << " n=" << p.elems;
                },
                t.payload);
            const auto deps = G.deps(id);
            if (!deps.empty()) {
                os << " deps=";
                for (std::size_t i = 0; i < deps.size(); ++i) os << (i ? "," : "") << deps[i];
            }
            os << "\n";
        }
    }
}

}  // namespace flatsim
