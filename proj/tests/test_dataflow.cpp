#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <tuple>

#include "flatsim/analytics.hpp"
#include "flatsim/functional.hpp"
#include "flatsim/planner.hpp"
#include "flatsim/simulator.hpp"
#include "test_support.hpp"

using namespace flatsim;
using flatsim::testing::small_mesh;
using flatsim::testing::table1;

namespace {

std::string plan_error(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const PlanError& e) {
        return e.what();
    }
    return "";
}

struct CollectiveCounts {
    int row_multicast = 0, col_multicast = 0, reduce_max = 0, reduce_sum_stats = 0, reduce_sum_o = 0;
};

CollectiveCounts count_collectives(const Plan& p) {
    CollectiveCounts c;
    const Bytes stat_bytes = static_cast<Bytes>(p.slices.slice_rows) * p.layer.bytes_per_elem;
    for (const Task& t : p.graph.tasks()) {
        const auto* cp = std::get_if<CollectivePayload>(&t.payload);
        if (!cp) continue;
        switch (cp->spec.kind) {
            case CollectiveKind::multicast:
                (cp->spec.axis == Axis::row ? c.row_multicast : c.col_multicast)++;
                break;
            case CollectiveKind::reduce_max: c.reduce_max++; break;
            case CollectiveKind::reduce_sum:
                (cp->spec.payload_bytes == stat_bytes ? c.reduce_sum_stats : c.reduce_sum_o)++;
                break;
        }
    }
    return c;
}

int count_kind(const Plan& p, TaskKind k) {
    return static_cast<int>(std::count_if(p.graph.tasks().begin(), p.graph.tasks().end(),
                                          [k](const Task& t) { return t.kind == k; }));
}

}  // namespace

// ---- slice plans ----------------------------------------------------------

TEST(SlicePlan, Table1HeadDim128FitsFullCeSlices) {
    const ArchConfig c = table1();
    const MhaLayer layer{2, 32, 4096, 128, 2};
    const SlicePlan p = choose_slice_plan(layer, c, {1, 1}, DataflowKind::FA2);
    EXPECT_EQ(p.slice_rows, 128);
    EXPECT_EQ(p.block_rows, 128);
    EXPECT_EQ(p.buffering(), Buffering::double_buffered);
    EXPECT_EQ(p.l1_footprint_bytes, 2 * (128 * 128 * 6 + 128 * 128 + 512));
    EXPECT_LE(p.l1_footprint_bytes, c.l1_bytes);
    const SlicePlan a = choose_slice_plan(layer, c, {32, 32}, DataflowKind::FlatAsyn);
    EXPECT_EQ(a.slice_rows, 128);
    EXPECT_EQ(a.streams, 2);
    EXPECT_EQ(a.block_rows, 4096);
}

TEST(SlicePlan, ShortSequenceOnLargeGroupIsDivisibilityBound) {
    const ArchConfig c = table1();
    const SlicePlan p = choose_slice_plan({4, 32, 512, 128, 2}, c, {32, 32}, DataflowKind::FlatAsyn);
    EXPECT_EQ(p.slice_rows, 16);
    EXPECT_EQ(p.slice_cols, 16);
    EXPECT_EQ(p.block_rows, 512);
    EXPECT_EQ(p.block_cols, 512);
}

TEST(SlicePlan, OverflowingHeadDimIsInfeasible) {
    const ArchConfig c = table1();
    const std::string msg = plan_error([&] { choose_slice_plan({1, 1, 4096, 1024, 2}, c, {1, 1}, DataflowKind::FA2); });
    EXPECT_NE(msg.find("L1 capacity"), std::string::npos) << msg;
}

TEST(SlicePlan, NoCeMultipleDividesSequence) {
    const ArchConfig c = table1();
    const std::string msg = plan_error([&] { choose_slice_plan({1, 1, 48, 64, 2}, c, {1, 1}, DataflowKind::FA2); });
    EXPECT_NE(msg.find("CE dimension"), std::string::npos) << msg;
}

TEST(SlicePlan, GroupMustTileMesh) {
    const ArchConfig c = table1();
    EXPECT_THROW(choose_slice_plan({1, 1, 4096, 128, 2}, c, {3, 3}, DataflowKind::Flat), PlanError);
    EXPECT_THROW(parse_group("16by16"), std::invalid_argument);
    EXPECT_EQ(parse_group("16x8"), (GroupShape{16, 8}));
}

TEST(SlicePlan, KeepsEveryTileBusyWhenL1AllowsLargerSlices) {
    const ArchConfig c = table1();
    // 256 fits L1 at D=64 but would leave 3/4 of the tiles idle.
    EXPECT_EQ(choose_slice_plan({2, 32, 1024, 64, 2}, c, {1, 1}, DataflowKind::FA2).slice_rows, 64);
    EXPECT_EQ(choose_slice_plan({2, 32, 4096, 64, 2}, c, {1, 1}, DataflowKind::FA2).slice_rows, 256);
}

TEST(SlicePlan, ExplicitSliceChecksInvariants) {
    const ArchConfig c = table1();
    const MhaLayer l{1, 1, 4096, 128, 2};
    EXPECT_NO_THROW(make_slice_plan(l, c, {2, 2}, DataflowKind::Flat, 128));
    EXPECT_THROW(make_slice_plan(l, c, {2, 2}, DataflowKind::Flat, 3000), PlanError);
    EXPECT_THROW(make_slice_plan(l, c, {1, 1}, DataflowKind::FA2, 512), PlanError);
}

// ---- plans ----------------------------------------------------------------

TEST(Planner, Fa2TrafficMatchesClosedForm) {
    const ArchConfig c = small_mesh();
    const MhaLayer l{1, 4, 512, 64, 2};
    const Plan p = plan_fa2(l, c);
    ASSERT_EQ(p.slices.block_rows, 128);
    const SimReport r = simulate(c, p.graph);
    EXPECT_EQ(r.total_hbm_bytes(), fa_io_bytes(l, 128).total_bytes);
    EXPECT_EQ(r.total_hbm_bytes(), p.predicted_hbm_bytes);
    EXPECT_EQ(count_kind(p, TaskKind::noc_multicast) + count_kind(p, TaskKind::noc_reduce) +
                  count_kind(p, TaskKind::noc_unicast),
              0);
    EXPECT_EQ(count_kind(p, TaskKind::sync), 0);
    EXPECT_EQ(r.gemm_flops, l.mha_flops());
}

TEST(Planner, SingleColumnBlockHasFactorTwo) {
    ArchConfig c = small_mesh(1, 1);
    c.hbm_channels_west = c.hbm_channels_south = 1;
    const MhaLayer l{1, 2, 128, 64, 2};
    const Plan p = plan_fa2(l, c);
    ASSERT_EQ(p.slices.block_rows, 128);
    EXPECT_EQ(p.slices.col_blocks(l.seq_len), 1);
    EXPECT_EQ(simulate(c, p.graph).total_hbm_bytes(), 2LL * 2 * 1 * 64 * 128 * 2 * 2);
}

TEST(Planner, FlatTrafficMatchesClosedForm) {
    const ArchConfig c = small_mesh();
    const MhaLayer l{1, 4, 512, 64, 2};
    for (auto kind : {DataflowKind::Flat, DataflowKind::FlatColl, DataflowKind::FlatAsyn}) {
        const Plan p = make_plan(kind, l, c, {2, 2});
        const Bytes sim = simulate(c, p.graph).total_hbm_bytes();
        EXPECT_EQ(sim, flat_io_bytes(l, p.slices.slice_rows, 4).total_bytes) << to_string(kind);
        EXPECT_EQ(sim, p.predicted_hbm_bytes);
    }
}

TEST(Planner, TransposeAccountingAddsOnePass) {
    const ArchConfig c = small_mesh();
    const MhaLayer l{1, 4, 512, 64, 2};
    const Plan base = plan_fa2(l, c);
    const Plan tr = plan_fa2(l, c, {true});
    const Bytes extra = 2LL * l.batch * l.heads * l.seq_len * l.head_dim * l.bytes_per_elem;
    EXPECT_EQ(tr.predicted_hbm_bytes, base.predicted_hbm_bytes + extra);
    EXPECT_EQ(simulate(c, tr.graph).total_hbm_bytes(), tr.predicted_hbm_bytes);
}

TEST(Planner, FlatCollectiveCounts) {
    const ArchConfig c = small_mesh();
    const MhaLayer l{1, 4, 1024, 64, 2};
    const Plan p = plan_flat(l, c, {2, 2}, CollectiveMode::hw, false);
    const int T = p.slices.col_blocks(l.seq_len);
    const int gx = 2, gy = 2;
    ASSERT_EQ(T, 2);
    const int jobs = p.jobs;
    const CollectiveCounts k = count_collectives(p);
    EXPECT_EQ(k.col_multicast, jobs * T * gx * 2);               // K^T and V per column per iteration
    EXPECT_EQ(k.row_multicast, jobs * gy * (1 + 2 * T));         // Q, then max and sum broadcasts
    EXPECT_EQ(k.reduce_max, jobs * gy * T);
    EXPECT_EQ(k.reduce_sum_stats, jobs * gy * T);
    EXPECT_EQ(k.reduce_sum_o, jobs * gy);
    EXPECT_GT(count_kind(p, TaskKind::sync), 0);
}

TEST(Planner, SingleTileFlatCollapsesToFa2) {
    const ArchConfig c = small_mesh();
    const MhaLayer l{2, 4, 512, 64, 2};
    const Plan fa = plan_fa2(l, c);
    const Plan flat = plan_flat(l, c, {1, 1}, CollectiveMode::sw, false);
    ASSERT_EQ(fa.graph.size(), flat.graph.size());
    using Key = std::tuple<int, int, int, std::string>;
    auto multiset = [&](const Plan& p) {
        std::map<Key, int> m;
        for (const Task& t : p.graph.tasks()) {
            std::ostringstream os;
            std::visit(
                [&](const auto& pl) {
                    using P = std::decay_t<decltype(pl)>;
                    if constexpr (std::is_same_v<P, HbmPayload>) os << pl.bytes << "@" << pl.channel;
                    else if constexpr (std::is_same_v<P, GemmPayload>) os << pl.m << "x" << pl.k << "x" << pl.n;
                    else if constexpr (std::is_same_v<P, VecPayload>) os << static_cast<int>(pl.op) << ":" << pl.elems;
                    else os << "other";
                },
                t.payload);
            ++m[{t.tile.x, t.tile.y, static_cast<int>(t.kind), os.str()}];
        }
        return m;
    };
    EXPECT_EQ(multiset(fa), multiset(flat));
    const SimReport a = simulate(c, fa.graph), b = simulate(c, flat.graph);
    EXPECT_EQ(a.total_hbm_bytes(), b.total_hbm_bytes());
    EXPECT_EQ(a.total_cycles, b.total_cycles);
}

TEST(Planner, Fa3InterleavesTwoStreamsOrFallsBack) {
    const ArchConfig c = small_mesh();
    const MhaLayer l{2, 8, 512, 128, 2};
    const Plan fa2 = plan_fa2(l, c);
    const Plan fa3 = plan_fa3(l, c);
    EXPECT_EQ(fa3.kind, DataflowKind::FA3);
    EXPECT_TRUE(fa3.warnings.empty());
    EXPECT_EQ(fa3.slices.streams, 2);
    EXPECT_EQ(fa3.slices.slice_rows, fa2.slices.slice_rows);
    EXPECT_GT(count_kind(fa3, TaskKind::sync), 0);
    EXPECT_EQ(simulate(c, fa3.graph).total_hbm_bytes(), simulate(c, fa2.graph).total_hbm_bytes());

    const Plan small = plan_fa3({1, 1, 128, 64, 2}, c);
    EXPECT_EQ(small.kind, DataflowKind::FA2);
    ASSERT_EQ(small.warnings.size(), 1u);
    EXPECT_NE(small.warnings[0].find("falling back"), std::string::npos);
}

TEST(Planner, Fa3HidesSoftmaxWhenComputeBound) {
    ArchConfig c = small_mesh();
    c.hbm_channel_bytes_per_cycle *= 100;
    const MhaLayer l{2, 8, 512, 128, 2};
    const Metrics m2 = summarize(simulate(c, plan_fa2(l, c).graph), c, l);
    const Metrics m3 = summarize(simulate(c, plan_fa3(l, c).graph), c, l);
    EXPECT_LT(m3.exposed_of(Category::softmax), m2.exposed_of(Category::softmax));
}

TEST(Planner, CollectiveRequirements) {
    ArchConfig c = small_mesh();
    c.hw_collectives = false;
    const MhaLayer l{1, 4, 512, 64, 2};
    EXPECT_THROW(plan_flat(l, c, {2, 2}, CollectiveMode::hw, false), PlanError);
    EXPECT_THROW(make_plan(DataflowKind::FlatAsyn, l, c, {2, 2}), PlanError);
    EXPECT_THROW(plan_flat(l, small_mesh(), {2, 2}, CollectiveMode::sw, true), PlanError);
    EXPECT_NO_THROW(plan_flat(l, c, {2, 2}, CollectiveMode::sw, false));
}

TEST(Planner, DumpIsStable) {
    const ArchConfig c = small_mesh();
    const MhaLayer l{1, 2, 256, 64, 2};
    std::ostringstream a, b;
    dump_plan(a, plan_flat(l, c, {2, 2}, CollectiveMode::hw, true), c);
    dump_plan(b, plan_flat(l, c, {2, 2}, CollectiveMode::hw, true), c);
    EXPECT_EQ(a.str(), b.str());
    EXPECT_NE(a.str().find("tile (0,0)"), std::string::npos);
    EXPECT_NE(a.str().find("multicast row"), std::string::npos);
}

// ---- functional -----------------------------------------------------------

TEST(Reference, SingleRowIsV) {
    const auto t = random_qkv(1, 8, 3);
    const Matrix o = reference_attention(t.q, t.k, t.v, default_scale(8));
    for (int c = 0; c < 8; ++c) EXPECT_EQ(o(0, c), t.v(0, c));
}

TEST(Reference, ZeroScaleAveragesV) {
    const auto t = random_qkv(16, 4, 5);
    const Matrix o = reference_attention(t.q, t.k, t.v, 0.0);
    for (int c = 0; c < 4; ++c) {
        double mean = 0;
        for (int r = 0; r < 16; ++r) mean += t.v(r, c) / 16.0;
        for (int r = 0; r < 16; ++r) EXPECT_NEAR(o(r, c), mean, 1e-14);
    }
}

TEST(Reference, SoftmaxRowsSumToOne) {
    const auto t = random_qkv(64, 32, 7);
    for (const auto& row : reference_softmax(t.q, t.k, default_scale(32))) {
        long double s = 0;
        for (auto p : row) s += p;
        EXPECT_NEAR(static_cast<double>(s), 1.0, 1e-12);
    }
}

TEST(Reference, ShapeMismatch) {
    const Matrix q(4, 2), k(4, 3), v(4, 2);
    EXPECT_THROW(reference_attention(q, k, v, 1.0), std::invalid_argument);
    EXPECT_THROW(execute_functional({{1, 1}, 2, 2}, q, k, v), std::invalid_argument);
}

TEST(Functional, UniformScoresAverageV) {
    Matrix q(4, 2, 0.0), k(4, 2), v(4, 2);
    for (int r = 0; r < 4; ++r) {
        k(r, 0) = r;
        k(r, 1) = -r;
        v(r, 0) = r == 0 ? 1.0 : 0.0;
        v(r, 1) = r == 1 ? 1.0 : 0.0;
    }
    for (const FunctionalSchedule& s : {FunctionalSchedule{{1, 1}, 2, 2}, FunctionalSchedule{{2, 2}, 2, 2}}) {
        const Matrix o = execute_functional(s, q, k, v);
        for (int r = 0; r < 4; ++r) {
            EXPECT_NEAR(o(r, 0), 0.25, 1e-15);
            EXPECT_NEAR(o(r, 1), 0.25, 1e-15);
        }
    }
}

TEST(Functional, AllVariantsMatchOracle) {
    const ArchConfig c = small_mesh();
    const auto t = random_qkv(128, 64, 0);
    const Matrix ref = reference_attention(t.q, t.k, t.v, default_scale(64));
    for (auto kind : {DataflowKind::FA2, DataflowKind::FA3, DataflowKind::Flat, DataflowKind::FlatColl,
                      DataflowKind::FlatAsyn}) {
        const FunctionalSchedule sched = functional_schedule(kind, 128, {4, 4}, 16);
        EXPECT_LE(max_relative_error(execute_functional(sched, t.q, t.k, t.v), ref), 1e-3) << to_string(kind);
        // Same geometry the timed planner picks.
        const SlicePlan sp = choose_slice_plan({1, 1, 128, 64, 2}, c, is_flat(kind) ? GroupShape{2, 2} : GroupShape{1, 1},
                                               kind);
        EXPECT_LE(max_relative_error(execute_functional(FunctionalSchedule::from(sp), t.q, t.k, t.v), ref), 1e-3);
    }
}

TEST(Functional, NonSquareGroups) {
    const auto t = random_qkv(64, 16, 11);
    const Matrix ref = reference_attention(t.q, t.k, t.v, default_scale(16));
    for (GroupShape g : {GroupShape{4, 1}, GroupShape{1, 4}, GroupShape{4, 2}}) {
        const Matrix o = execute_functional({g, 8 * g.gy, 8 * g.gx}, t.q, t.k, t.v);
        EXPECT_LE(max_relative_error(o, ref), 1e-12) << to_string(g);
    }
}

TEST(Functional, LargeScoreOutlierStaysFinite) {
    auto t = random_qkv(64, 16, 1);
    // Pushes one score per row to ~+800, far past exp overflow.
    for (int c = 0; c < 16; ++c) t.k(37, c) = 0.0;
    for (int r = 0; r < 64; ++r) t.k(r, 0) = 0.0;
    t.k(37, 0) = 1.0;
    for (int r = 0; r < 64; ++r) t.q(r, 0) = 800.0;
    const Matrix ref = reference_attention(t.q, t.k, t.v, 1.0);
    for (auto kind : {DataflowKind::FA2, DataflowKind::FlatAsyn}) {
        const Matrix o = execute_functional(functional_schedule(kind, 64, {2, 2}, 8), t.q, t.k, t.v, {1.0});
        for (double x : o.data) ASSERT_TRUE(std::isfinite(x));
        EXPECT_LE(max_relative_error(o, ref), 1e-3);
    }
}

TEST(Functional, SkippedRescaleIsDetected) {
    const auto t = random_qkv(128, 64, 0);
    const Matrix ref = reference_attention(t.q, t.k, t.v, default_scale(64));
    const auto sched = functional_schedule(DataflowKind::FlatAsyn, 128, {4, 4}, 16);
    const Matrix bad = execute_functional(sched, t.q, t.k, t.v, {std::nan(""), false, InjectedFault::skip_rescale});
    EXPECT_GT(max_relative_error(bad, ref), 1e-3);
}

TEST(Functional, ScheduleRejectsBadGeometry) {
    const auto t = random_qkv(64, 8, 0);
    EXPECT_THROW(execute_functional({{2, 2}, 24, 24}, t.q, t.k, t.v), std::invalid_argument);
    EXPECT_THROW(execute_functional({{3, 1}, 16, 16}, t.q, t.k, t.v), std::invalid_argument);
}

TEST(Prng, DeterministicStandardNormal) {
    const auto a = random_qkv(32, 32, 42), b = random_qkv(32, 32, 42), c = random_qkv(32, 32, 43);
    EXPECT_EQ(a.q.data, b.q.data);
    EXPECT_EQ(a.v.data, b.v.data);
    EXPECT_NE(a.q.data, c.q.data);

    NormalGenerator g(0);
    const int n = 200000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        const double x = g.next();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.01);
}
