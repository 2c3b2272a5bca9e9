#pragma once

/**
 * @file task_graph.hpp
 * @brief Per-tile task DAGs: the executable form of a dataflow plan.
 *
 * Task ids are dense indices into the graph. Dependencies are stored in one
 * shared pool so that multi-million task plans stay compact.
 */

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "arch.hpp"
#include "noc.hpp"

namespace flatsim {

using TaskId = std::uint32_t;

enum class TaskKind : std::uint8_t { hbm_load, hbm_store, noc_multicast, noc_reduce, noc_unicast, gemm, vec_op, sync };

enum class Category : std::uint8_t { hbm = 0, inter_tile = 1, matmul = 2, softmax = 3, sync = 4 };
inline constexpr int kCategoryCount = 5;

inline std::string_view to_string(TaskKind k) {
    switch (k) {
        case TaskKind::hbm_load: return "hbm_load";
        case TaskKind::hbm_store: return "hbm_store";
        case TaskKind::noc_multicast: return "noc_multicast";
        case TaskKind::noc_reduce: return "noc_reduce";
        case TaskKind::noc_unicast: return "noc_unicast";
        case TaskKind::gemm: return "gemm";
        case TaskKind::vec_op: return "vec_op";
        case TaskKind::sync: return "sync";
    }
    return "unknown";
}

inline std::string_view to_string(Category c) {
    switch (c) {
        case Category::hbm: return "hbm";
        case Category::inter_tile: return "inter_tile";
        case Category::matmul: return "matmul";
        case Category::softmax: return "softmax";
        case Category::sync: return "sync";
    }
    return "unknown";
}

struct HbmPayload {
    Bytes bytes = 0;
    int channel = 0;  ///< west channels are [0, W), south channels [W, W+S)
    bool operator==(const HbmPayload&) const = default;
};

struct UnicastPayload {
    TileCoord dst;
    Bytes bytes = 0;
    bool operator==(const UnicastPayload&) const = default;
};

struct CollectivePayload {
    CollectiveSpec spec;
    bool hardware = false;
    bool operator==(const CollectivePayload&) const = default;
};

struct GemmPayload {
    int m = 1, k = 1, n = 1;
    std::int64_t flops() const noexcept { return 2LL * m * k * n; }
    bool operator==(const GemmPayload&) const = default;
};

struct VecPayload {
    VectorOp op = VectorOp::elementwise;
    std::int64_t elems = 0;
    bool operator==(const VecPayload&) const = default;
};

struct SyncPayload {
    bool operator==(const SyncPayload&) const = default;
};

using TaskPayload = std::variant<HbmPayload, UnicastPayload, CollectivePayload, GemmPayload, VecPayload, SyncPayload>;

struct Task {
    TileCoord tile;
    TaskKind kind = TaskKind::sync;
    Category category = Category::sync;
    TaskPayload payload = SyncPayload{};
    std::uint32_t deps_begin = 0;
    std::uint32_t deps_count = 0;

    /// Bytes moved for transfers, 0 otherwise.
    Bytes bytes() const noexcept {
        if (auto* h = std::get_if<HbmPayload>(&payload)) return h->bytes;
        if (auto* u = std::get_if<UnicastPayload>(&payload)) return u->bytes;
        if (auto* c = std::get_if<CollectivePayload>(&payload)) return c->spec.payload_bytes;
        return 0;
    }
    std::int64_t flops() const noexcept {
        if (auto* g = std::get_if<GemmPayload>(&payload)) return g->flops();
        return 0;
    }
};

class TaskGraph {
public:
    using Deps = std::initializer_list<TaskId>;

    std::size_t size() const noexcept { return tasks_.size(); }
    bool empty() const noexcept { return tasks_.empty(); }
    const Task& operator[](TaskId id) const { return tasks_[id]; }
    const std::vector<Task>& tasks() const noexcept { return tasks_; }

    std::span<const TaskId> deps(TaskId id) const {
        const Task& t = tasks_[id];
        return {dep_pool_.data() + t.deps_begin, t.deps_count};
    }

    void reserve(std::size_t tasks, std::size_t deps) {
        tasks_.reserve(tasks);
        dep_pool_.reserve(deps);
    }

    TaskId add(TileCoord tile, TaskKind kind, Category category, TaskPayload payload, std::span<const TaskId> deps) {
        Task t;
        t.tile = tile;
        t.kind = kind;
        t.category = category;
        t.payload = std::move(payload);
        t.deps_begin = static_cast<std::uint32_t>(dep_pool_.size());
        for (TaskId d : deps) {
            // Duplicate deps are harmless but waste pool space.
            if (std::find(dep_pool_.begin() + t.deps_begin, dep_pool_.end(), d) == dep_pool_.end())
                dep_pool_.push_back(d);
        }
        t.deps_count = static_cast<std::uint32_t>(dep_pool_.size() - t.deps_begin);
        tasks_.push_back(std::move(t));
        return static_cast<TaskId>(tasks_.size() - 1);
    }

    TaskId hbm_load(TileCoord tile, Bytes bytes, int channel, std::span<const TaskId> deps) {
        return add(tile, TaskKind::hbm_load, Category::hbm, HbmPayload{bytes, channel}, deps);
    }
    TaskId hbm_store(TileCoord tile, Bytes bytes, int channel, std::span<const TaskId> deps) {
        return add(tile, TaskKind::hbm_store, Category::hbm, HbmPayload{bytes, channel}, deps);
    }
    TaskId unicast(TileCoord src, TileCoord dst, Bytes bytes, std::span<const TaskId> deps) {
        return add(src, TaskKind::noc_unicast, Category::inter_tile, UnicastPayload{dst, bytes}, deps);
    }
    TaskId collective(const CollectiveSpec& spec, bool hardware, std::span<const TaskId> deps) {
        const TaskKind kind = spec.is_reduction() ? TaskKind::noc_reduce : TaskKind::noc_multicast;
        return add(spec.root, kind, Category::inter_tile, CollectivePayload{spec, hardware}, deps);
    }
    TaskId gemm(TileCoord tile, int m, int k, int n, std::span<const TaskId> deps) {
        return add(tile, TaskKind::gemm, Category::matmul, GemmPayload{m, k, n}, deps);
    }
    TaskId vec(TileCoord tile, VectorOp op, std::int64_t elems, std::span<const TaskId> deps) {
        return add(tile, TaskKind::vec_op, Category::softmax, VecPayload{op, elems}, deps);
    }
    TaskId sync(TileCoord tile, std::span<const TaskId> deps) {
        return add(tile, TaskKind::sync, Category::sync, SyncPayload{}, deps);
    }

    // initializer_list conveniences
    TaskId hbm_load(TileCoord tile, Bytes bytes, int channel, Deps deps) { return hbm_load(tile, bytes, channel, std::span(deps.begin(), deps.size())); }
    TaskId hbm_store(TileCoord tile, Bytes bytes, int channel, Deps deps) { return hbm_store(tile, bytes, channel, std::span(deps.begin(), deps.size())); }
    TaskId unicast(TileCoord src, TileCoord dst, Bytes bytes, Deps deps) { return unicast(src, dst, bytes, std::span(deps.begin(), deps.size())); }
    TaskId collective(const CollectiveSpec& spec, bool hardware, Deps deps) { return collective(spec, hardware, std::span(deps.begin(), deps.size())); }
    TaskId gemm(TileCoord tile, int m, int k, int n, Deps deps) { return gemm(tile, m, k, n, std::span(deps.begin(), deps.size())); }
    TaskId vec(TileCoord tile, VectorOp op, std::int64_t elems, Deps deps) { return vec(tile, op, elems, std::span(deps.begin(), deps.size())); }
    TaskId sync(TileCoord tile, Deps deps) { return sync(tile, std::span(deps.begin(), deps.size())); }

private:
    std::vector<Task> tasks_;
    std::vector<TaskId> dep_pool_;
};

/// Tiles a task occupies for accounting: the participants of a collective, otherwise its own tile.
template <typename Fn>
void for_each_participant(const Task& t, Fn&& fn) {
    if (auto* c = std::get_if<CollectivePayload>(&t.payload)) {
        for (int i = 0; i <= c->spec.span; ++i) fn(c->spec.participant(i));
    } else {
        fn(t.tile);
    }
}

struct Diagnostics {
    std::vector<std::string> messages;
    bool ok() const noexcept { return messages.empty(); }
};

/// Structural checks: dangling deps, dependency cycles, out-of-mesh tiles,
/// absent HBM channels and malformed payloads.
inline Diagnostics validate_graph(const TaskGraph& graph, const ArchConfig& cfg) {
    Diagnostics diag;
    const auto n = static_cast<TaskId>(graph.size());
    bool dangling = false;

    for (TaskId id = 0; id < n; ++id) {
        const Task& t = graph[id];
        const std::string name = "task " + std::to_string(id);
        for (TaskId d : graph.deps(id)) {
            if (d >= n) {
                diag.messages.push_back(name + ": dangling dependency on missing task " + std::to_string(d));
                dangling = true;
            }
        }
        if (!in_mesh(t.tile, cfg)) diag.messages.push_back(name + ": tile " + to_string(t.tile) + " is outside the mesh");
        std::visit(
            [&](const auto& p) {
                using P = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<P, HbmPayload>) {
                    if (p.bytes < 0) diag.messages.push_back(name + ": negative transfer size");
                    if (p.channel < 0 || p.channel >= cfg.hbm_channels())
                        diag.messages.push_back(name + ": HBM channel " + std::to_string(p.channel) + " does not exist");
                } else if constexpr (std::is_same_v<P, UnicastPayload>) {
                    if (p.bytes < 0) diag.messages.push_back(name + ": negative transfer size");
                    if (!in_mesh(p.dst, cfg))
                        diag.messages.push_back(name + ": destination " + to_string(p.dst) + " is outside the mesh");
                } else if constexpr (std::is_same_v<P, CollectivePayload>) {
                    if (p.spec.payload_bytes < 0) diag.messages.push_back(name + ": negative transfer size");
                    if (p.spec.span < 1 || !in_mesh(p.spec.participant(p.spec.span), cfg))
                        diag.messages.push_back(name + ": collective span leaves the mesh");
                    if (p.hardware && !cfg.hw_collectives)
                        diag.messages.push_back(name + ": hardware collective on a NoC without collective support");
                } else if constexpr (std::is_same_v<P, GemmPayload>) {
                    if (p.m < 1 || p.k < 1 || p.n < 1) diag.messages.push_back(name + ": GEMM dimensions must be >= 1");
                } else if constexpr (std::is_same_v<P, VecPayload>) {
                    if (p.elems < 0) diag.messages.push_back(name + ": negative element count");
                }
            },
            t.payload);
    }
    if (dangling) return diag;

    // Kahn; whatever remains lies on or behind a cycle.
    std::vector<std::uint32_t> indegree(n, 0);
    std::vector<std::vector<TaskId>> succ(n);
    for (TaskId id = 0; id < n; ++id) {
        for (TaskId d : graph.deps(id)) {
            ++indegree[id];
            succ[d].push_back(id);
        }
    }
    std::vector<TaskId> stack;
    for (TaskId id = 0; id < n; ++id)
        if (indegree[id] == 0) stack.push_back(id);
    std::size_t visited = 0;
    while (!stack.empty()) {
        TaskId id = stack.back();
        stack.pop_back();
        ++visited;
        for (TaskId s : succ[id])
            if (--indegree[s] == 0) stack.push_back(s);
    }
    if (visited == n) return diag;

    TaskId start = 0;
    while (indegree[start] == 0) ++start;
    // Walk backwards through unresolved deps until a task repeats.
    std::vector<int> seen_at(n, -1);
    std::vector<TaskId> walk;
    TaskId cur = start;
    while (seen_at[cur] < 0) {
        seen_at[cur] = static_cast<int>(walk.size());
        walk.push_back(cur);
        for (TaskId d : graph.deps(cur)) {
            if (indegree[d] > 0) {
                cur = d;
                break;
            }
        }
    }
    std::string chain;
    for (std::size_t i = static_cast<std::size_t>(seen_at[cur]); i < walk.size(); ++i)
        chain += std::to_string(walk[i]) + " -> ";
    chain += std::to_string(cur);
    diag.messages.push_back("dependency cycle: " + chain);
    return diag;
}

}  // namespace flatsim
