#pragma once

/**
 * @file simulator.hpp
 * @brief Deterministic discrete-event execution of task graphs.
 *
 * Each task acquires all of its resources atomically and holds them for its
 * service time:
 *   - gemm     -> the tile's matrix engine
 *   - vec_op   -> the tile's vector engine
 *   - sync     -> the tile's control core
 *   - hbm_*    -> one HBM channel (FIFO server). The channel is held for the
 *                 serialization time; the access latency is pipelined and
 *                 only delays completion.
 *   - noc_*    -> every directed link on the path / collective span, held
 *                 for the whole closed-form latency (circuit-switched
 *                 approximation).
 *
 * Ready tasks are served in (ready time, task id) order, so runs are
 * bit-reproducible. A resource is never left idle while a ready task that
 * waits only on it exists.
 */

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <ostream>
#include <queue>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "arch.hpp"
#include "noc.hpp"
#include "task_graph.hpp"

namespace flatsim {

class SimulationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TileStats {
    std::array<Cycles, kCategoryCount> busy{};     ///< union of intervals per category
    std::array<Cycles, kCategoryCount> exposed{};  ///< part of busy not overlapped by the matrix engine
    std::int64_t gemm_flops = 0;
};

struct SimReport {
    Cycles total_cycles = 0;
    std::size_t task_count = 0;
    std::vector<TileStats> tiles;
    std::vector<Bytes> hbm_bytes_read;  ///< per channel
    std::vector<Bytes> hbm_bytes_written;
    std::int64_t gemm_flops = 0;
    Cycles matrix_busy_cycles = 0;  ///< summed over tiles

    double avg_hbm_bw_utilization = 0.0;
    double matrix_engine_utilization = 0.0;
    double matrix_engine_active_utilization = 0.0;

    Bytes total_hbm_read() const {
        Bytes s = 0;
        for (Bytes b : hbm_bytes_read) s += b;
        return s;
    }
    Bytes total_hbm_written() const {
        Bytes s = 0;
        for (Bytes b : hbm_bytes_written) s += b;
        return s;
    }
    Bytes total_hbm_bytes() const { return total_hbm_read() + total_hbm_written(); }

    /// Mean over tiles.
    double mean_busy(Category c) const { return mean_of(c, &TileStats::busy); }
    double mean_exposed(Category c) const { return mean_of(c, &TileStats::exposed); }

private:
    double mean_of(Category c, std::array<Cycles, kCategoryCount> TileStats::*field) const {
        if (tiles.empty()) return 0.0;
        long double s = 0;
        for (const auto& t : tiles) s += (t.*field)[static_cast<int>(c)];
        return static_cast<double>(s / tiles.size());
    }
};

struct TraceRecord {
    TaskId id = 0;
    TileCoord tile;
    TaskKind kind = TaskKind::sync;
    Category category = Category::sync;
    Cycles ready = 0;
    Cycles start = 0;
    Cycles end = 0;
    Bytes bytes = 0;
    std::int64_t flops = 0;
};

inline nlohmann::json to_json(const TraceRecord& r) {
    return nlohmann::json{{"id", r.id},
                          {"tile", {r.tile.x, r.tile.y}},
                          {"kind", std::string(to_string(r.kind))},
                          {"category", std::string(to_string(r.category))},
                          {"ready", r.ready},
                          {"start", r.start},
                          {"end", r.end},
                          {"bytes", r.bytes},
                          {"flops", r.flops}};
}

/// Newline-delimited JSON, one record per task in id order.
inline void write_trace(std::ostream& os, const std::vector<TraceRecord>& trace) {
    for (const auto& r : trace) os << to_json(r).dump() << '\n';
}

namespace detail {

struct ResourceMap {
    int tiles;
    int matrix(TileCoord t, const ArchConfig& cfg) const { return tile_index(t, cfg); }
    int vector(TileCoord t, const ArchConfig& cfg) const { return tiles + tile_index(t, cfg); }
    int control(TileCoord t, const ArchConfig& cfg) const { return 2 * tiles + tile_index(t, cfg); }
    int link(const Link& l, const ArchConfig& cfg) const { return 3 * tiles + link_id(l, cfg); }
    int channel(int c) const { return 7 * tiles + c; }
    int count(const ArchConfig& cfg) const { return 7 * tiles + cfg.hbm_channels(); }
};

struct Interval {
    Cycles begin;
    Cycles end;
    Category category;
};

inline std::vector<std::pair<Cycles, Cycles>> merge(std::vector<std::pair<Cycles, Cycles>>& v) {
    std::sort(v.begin(), v.end());
    std::vector<std::pair<Cycles, Cycles>> out;
    for (const auto& iv : v) {
        if (iv.second <= iv.first) continue;
        if (!out.empty() && iv.first <= out.back().second)
            out.back().second = std::max(out.back().second, iv.second);
        else
            out.push_back(iv);
    }
    return out;
}

inline Cycles length(const std::vector<std::pair<Cycles, Cycles>>& u) {
    Cycles s = 0;
    for (const auto& iv : u) s += iv.second - iv.first;
    return s;
}

inline Cycles overlap(const std::vector<std::pair<Cycles, Cycles>>& a, const std::vector<std::pair<Cycles, Cycles>>& b) {
    Cycles s = 0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        const Cycles lo = std::max(a[i].first, b[j].first);
        const Cycles hi = std::min(a[i].second, b[j].second);
        if (hi > lo) s += hi - lo;
        if (a[i].second < b[j].second)
            ++i;
        else
            ++j;
    }
    return s;
}

}  // namespace detail

/// Service time split into resource occupancy and completion latency.
struct ServiceTime {
    Cycles occupancy = 0;
    Cycles completion = 0;
};

inline ServiceTime service_time(const Task& t, const ArchConfig& cfg) {
    return std::visit(
        [&](const auto& p) -> ServiceTime {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, HbmPayload>) {
                const Cycles occ = hbm_transfer_cycles(p.bytes, cfg);
                return {occ, occ + cfg.hbm_access_latency_cycles};
            } else if constexpr (std::is_same_v<P, UnicastPayload>) {
                const auto hops = std::abs(p.dst.x - t.tile.x) + std::abs(p.dst.y - t.tile.y);
                const Cycles c = unicast_latency(p.bytes, hops, cfg);
                return {c, c};
            } else if constexpr (std::is_same_v<P, CollectivePayload>) {
                const Cycles c = p.hardware ? hw_collective_latency(p.spec, cfg) : sw_collective_latency(p.spec, cfg);
                return {c, c};
            } else if constexpr (std::is_same_v<P, GemmPayload>) {
                const Cycles c = gemm_cycles(p.m, p.k, p.n, cfg);
                return {c, c};
            } else if constexpr (std::is_same_v<P, VecPayload>) {
                const Cycles c = vector_cycles(p.op, p.elems, cfg);
                return {c, c};
            } else {
                return {cfg.sync_overhead_cycles, cfg.sync_overhead_cycles};
            }
        },
        t.payload);
}

/**
 * Run `graph` on `cfg`. Throws SimulationError if the graph fails
 * validation or execution cannot make progress. When `trace` is non-null it
 * receives one record per task, in id order.
 */
inline SimReport simulate(const ArchConfig& cfg, const TaskGraph& graph, std::vector<TraceRecord>* trace = nullptr) {
    cfg.validate();
    if (auto diag = validate_graph(graph, cfg); !diag.ok()) {
        std::string msg = "invalid task graph:";
        for (std::size_t i = 0; i < diag.messages.size() && i < 8; ++i) msg += "\n  " + diag.messages[i];
        if (diag.messages.size() > 8) msg += "\n  ... " + std::to_string(diag.messages.size() - 8) + " more";
        throw SimulationError(msg);
    }

    const auto n = static_cast<TaskId>(graph.size());
    const detail::ResourceMap rmap{cfg.tiles()};

    // Resource lists, successor lists and service times.
    std::vector<std::uint32_t> res_begin(n + 1, 0);
    std::vector<int> res_pool;
    res_pool.reserve(n + n / 2);
    std::vector<ServiceTime> service(n);
    std::vector<std::uint32_t> pending(n, 0);
    std::vector<std::uint32_t> succ_begin(n + 1, 0);
    for (TaskId id = 0; id < n; ++id) {
        const Task& t = graph[id];
        res_begin[id] = static_cast<std::uint32_t>(res_pool.size());
        switch (t.kind) {
            case TaskKind::gemm: res_pool.push_back(rmap.matrix(t.tile, cfg)); break;
            case TaskKind::vec_op: res_pool.push_back(rmap.vector(t.tile, cfg)); break;
            case TaskKind::sync: res_pool.push_back(rmap.control(t.tile, cfg)); break;
            case TaskKind::hbm_load:
            case TaskKind::hbm_store: res_pool.push_back(rmap.channel(std::get<HbmPayload>(t.payload).channel)); break;
            case TaskKind::noc_unicast:
                for (const Link& l : route_xy(t.tile, std::get<UnicastPayload>(t.payload).dst, cfg))
                    res_pool.push_back(rmap.link(l, cfg));
                break;
            case TaskKind::noc_multicast:
            case TaskKind::noc_reduce:
                for (const Link& l : collective_links(std::get<CollectivePayload>(t.payload).spec, cfg))
                    res_pool.push_back(rmap.link(l, cfg));
                break;
        }
        service[id] = service_time(t, cfg);
        pending[id] = t.deps_count;
        for (TaskId d : graph.deps(id)) ++succ_begin[d + 1];
    }
    res_begin[n] = static_cast<std::uint32_t>(res_pool.size());
    for (TaskId id = 0; id < n; ++id) succ_begin[id + 1] += succ_begin[id];
    std::vector<TaskId> succ_pool(succ_begin[n]);
    {
        std::vector<std::uint32_t> fill(succ_begin.begin(), succ_begin.end() - 1);
        for (TaskId id = 0; id < n; ++id)
            for (TaskId d : graph.deps(id)) succ_pool[fill[d]++] = id;
    }

    constexpr Cycles kUnset = -1;
    std::vector<Cycles> ready(n, kUnset), start(n, kUnset), finish(n, kUnset);
    std::vector<char> busy(static_cast<std::size_t>(rmap.count(cfg)), 0);
    std::vector<std::vector<TaskId>> waiters(busy.size());

    enum : int { kRelease = 0, kComplete = 1 };
    using Event = std::tuple<Cycles, int, TaskId>;
    std::priority_queue<Event, std::vector<Event>, std::greater<>> events;

    std::vector<TaskId> candidates;
    for (TaskId id = 0; id < n; ++id) {
        if (pending[id] == 0) {
            ready[id] = 0;
            candidates.push_back(id);
        }
    }

    std::size_t completed = 0;
    Cycles now = 0;
    std::vector<int> freed;

    auto dispatch = [&]() {
        for (int r : freed) {
            for (TaskId w : waiters[static_cast<std::size_t>(r)]) candidates.push_back(w);
            waiters[static_cast<std::size_t>(r)].clear();
        }
        freed.clear();
        std::sort(candidates.begin(), candidates.end(),
                  [&](TaskId a, TaskId b) { return std::tie(ready[a], a) < std::tie(ready[b], b); });
        for (TaskId id : candidates) {
            int blocker = -1;
            for (auto i = res_begin[id]; i < res_begin[id + 1]; ++i) {
                if (busy[static_cast<std::size_t>(res_pool[i])]) {
                    blocker = res_pool[i];
                    break;
                }
            }
            if (blocker >= 0) {
                waiters[static_cast<std::size_t>(blocker)].push_back(id);
                continue;
            }
            for (auto i = res_begin[id]; i < res_begin[id + 1]; ++i) busy[static_cast<std::size_t>(res_pool[i])] = 1;
            start[id] = now;
            events.emplace(now + service[id].occupancy, kRelease, id);
            events.emplace(now + service[id].completion, kComplete, id);
        }
        candidates.clear();
    };

    dispatch();
    while (!events.empty()) {
        now = std::get<0>(events.top());
        while (!events.empty() && std::get<0>(events.top()) == now) {
            const auto [t, type, id] = events.top();
            events.pop();
            if (type == kRelease) {
                for (auto i = res_begin[id]; i < res_begin[id + 1]; ++i) {
                    busy[static_cast<std::size_t>(res_pool[i])] = 0;
                    freed.push_back(res_pool[i]);
                }
            } else {
                finish[id] = now;
                ++completed;
                for (auto i = succ_begin[id]; i < succ_begin[id + 1]; ++i) {
                    const TaskId s = succ_pool[i];
                    if (--pending[s] == 0) {
                        ready[s] = now;
                        candidates.push_back(s);
                    }
                }
            }
        }
        dispatch();
    }

    if (completed != n) {
        TaskId cur = 0;
        while (finish[cur] != kUnset) ++cur;
        std::string chain = std::to_string(cur);
        for (int guard = 0; guard < 64; ++guard) {
            TaskId next = cur;
            for (TaskId d : graph.deps(cur))
                if (finish[d] == kUnset) next = d;
            if (next == cur) break;
            cur = next;
            chain += " <- " + std::to_string(cur);
        }
        throw SimulationError("deadlock: " + std::to_string(n - completed) + " tasks never ran; waiting chain " + chain);
    }

    SimReport rep;
    rep.task_count = n;
    rep.tiles.resize(static_cast<std::size_t>(cfg.tiles()));
    rep.hbm_bytes_read.assign(static_cast<std::size_t>(cfg.hbm_channels()), 0);
    rep.hbm_bytes_written.assign(static_cast<std::size_t>(cfg.hbm_channels()), 0);

    std::vector<std::vector<detail::Interval>> per_tile(rep.tiles.size());
    for (TaskId id = 0; id < n; ++id) {
        const Task& t = graph[id];
        rep.total_cycles = std::max(rep.total_cycles, finish[id]);
        if (auto* h = std::get_if<HbmPayload>(&t.payload)) {
            auto& counters = t.kind == TaskKind::hbm_load ? rep.hbm_bytes_read : rep.hbm_bytes_written;
            counters[static_cast<std::size_t>(h->channel)] += h->bytes;
        }
        // Transfers are charged from the moment they are ready: queuing on a
        // channel or link is time the tile spends waiting on that transfer.
        const bool transfer = t.category == Category::hbm || t.category == Category::inter_tile;
        const Cycles begin = transfer ? ready[id] : start[id];
        for_each_participant(t, [&](TileCoord p) {
            per_tile[static_cast<std::size_t>(tile_index(p, cfg))].push_back({begin, finish[id], t.category});
        });
        if (t.kind == TaskKind::gemm) {
            rep.tiles[static_cast<std::size_t>(tile_index(t.tile, cfg))].gemm_flops += t.flops();
            rep.gemm_flops += t.flops();
        }
        if (trace) trace->push_back({id, t.tile, t.kind, t.category, ready[id], start[id], finish[id], t.bytes(), t.flops()});
    }

    std::array<std::vector<std::pair<Cycles, Cycles>>, kCategoryCount> buckets;
    for (std::size_t ti = 0; ti < per_tile.size(); ++ti) {
        for (auto& b : buckets) b.clear();
        for (const auto& iv : per_tile[ti]) buckets[static_cast<int>(iv.category)].emplace_back(iv.begin, iv.end);
        per_tile[ti].clear();
        per_tile[ti].shrink_to_fit();
        std::array<std::vector<std::pair<Cycles, Cycles>>, kCategoryCount> unions;
        for (int c = 0; c < kCategoryCount; ++c) unions[c] = detail::merge(buckets[c]);
        const auto& matrix = unions[static_cast<int>(Category::matmul)];
        TileStats& ts = rep.tiles[ti];
        for (int c = 0; c < kCategoryCount; ++c) {
            ts.busy[c] = detail::length(unions[c]);
            ts.exposed[c] = c == static_cast<int>(Category::matmul) ? ts.busy[c] : ts.busy[c] - detail::overlap(unions[c], matrix);
        }
        rep.matrix_busy_cycles += ts.busy[static_cast<int>(Category::matmul)];
    }

    if (rep.total_cycles > 0) {
        const long double cycles = static_cast<long double>(rep.total_cycles);
        rep.avg_hbm_bw_utilization =
            static_cast<double>(rep.total_hbm_bytes() / (cycles * cfg.peak_hbm_bytes_per_cycle()));
        rep.matrix_engine_utilization =
            static_cast<double>(rep.gemm_flops / (cycles * cfg.peak_system_flops_per_cycle()));
    }
    if (rep.matrix_busy_cycles > 0) {
        rep.matrix_engine_active_utilization = static_cast<double>(
            rep.gemm_flops / (static_cast<long double>(rep.matrix_busy_cycles) * cfg.peak_matrix_flops_per_cycle()));
    }
    return rep;
}

}  // namespace flatsim
