#include <gtest/gtest.h>

#include <sstream>

#include "flatsim/simulator.hpp"
#include "test_support.hpp"

using namespace flatsim;
using flatsim::testing::small_mesh;

namespace {

constexpr int kHbm = static_cast<int>(Category::hbm);
constexpr int kMat = static_cast<int>(Category::matmul);
constexpr int kSoft = static_cast<int>(Category::softmax);
constexpr int kNoc = static_cast<int>(Category::inter_tile);

}  // namespace

TEST(Simulator, EmptyGraph) {
    const SimReport r = simulate(small_mesh(), TaskGraph{});
    EXPECT_EQ(r.total_cycles, 0);
    EXPECT_EQ(r.task_count, 0u);
    EXPECT_EQ(r.matrix_engine_utilization, 0.0);
}

TEST(Simulator, SingleGemmAtPeakOfOneTile) {
    const ArchConfig c = small_mesh();
    TaskGraph g;
    g.gemm({0, 0}, 128, 128, 128, {});
    const SimReport r = simulate(c, g);
    EXPECT_EQ(r.total_cycles, 4 * 8 * 128 + 32);
    EXPECT_EQ(r.gemm_flops, 2LL * 128 * 128 * 128);
    const double expect = 2.0 * 128 * 128 * 128 / (4128.0 * 1024 * 16);
    EXPECT_DOUBLE_EQ(r.matrix_engine_utilization, expect);
    EXPECT_DOUBLE_EQ(r.matrix_engine_active_utilization, 4096.0 / 4128.0);
    EXPECT_EQ(r.tiles[0].busy[kMat], 4128);
    EXPECT_EQ(r.tiles[0].exposed[kMat], 4128);
}

TEST(Simulator, HbmChannelSerializesButLatencyPipelines) {
    const ArchConfig c = small_mesh();
    TaskGraph same;
    same.hbm_load({0, 0}, 6400, 0, {});
    same.hbm_load({1, 0}, 6400, 0, {});
    std::vector<TraceRecord> tr;
    const SimReport r = simulate(c, same, &tr);
    // transfer 100 cycles each, latency 200: [0,100)+200 and [100,200)+200
    EXPECT_EQ(r.total_cycles, 400);
    ASSERT_EQ(tr.size(), 2u);
    EXPECT_EQ(tr[0].start, 0);
    EXPECT_EQ(tr[0].end, 300);
    EXPECT_EQ(tr[1].start, 100);
    EXPECT_EQ(tr[1].end, 400);
    EXPECT_EQ(r.hbm_bytes_read[0], 12800);
    EXPECT_DOUBLE_EQ(r.avg_hbm_bw_utilization, 12800.0 / (400.0 * 256));

    TaskGraph split;
    split.hbm_load({0, 0}, 6400, 0, {});
    split.hbm_load({1, 0}, 6400, 1, {});
    EXPECT_EQ(simulate(c, split).total_cycles, 300);
}

TEST(Simulator, DependencyChainAndExposure) {
    const ArchConfig c = small_mesh();
    TaskGraph g;
    const TaskId ld = g.hbm_load({0, 0}, 6400, 0, {});
    const TaskId mm = g.gemm({0, 0}, 32, 16, 16, {ld});
    g.hbm_store({0, 0}, 64, 1, {mm});
    const SimReport r = simulate(c, g);
    // load 300, gemm 16 + 32, store 1 + 200
    EXPECT_EQ(r.total_cycles, 300 + 48 + 201);
    EXPECT_EQ(r.tiles[0].exposed[kHbm], 501);
    EXPECT_EQ(r.tiles[0].busy[kMat], 48);
    EXPECT_EQ(r.hbm_bytes_written[1], 64);
    EXPECT_EQ(r.total_hbm_bytes(), 6464);
}

TEST(Simulator, OverlapIsHiddenBehindMatrixEngine) {
    const ArchConfig c = small_mesh();
    TaskGraph g;
    g.gemm({0, 0}, 32, 100, 16, {});               // 132 cycles
    g.vec({0, 0}, VectorOp::exp, 16 * 200, {});    // 200 cycles, parallel engine
    const SimReport r = simulate(c, g);
    EXPECT_EQ(r.total_cycles, 200);
    EXPECT_EQ(r.tiles[0].busy[kSoft], 200);
    EXPECT_EQ(r.tiles[0].exposed[kSoft], 200 - 132);
}

TEST(Simulator, SameEngineTasksSerializeInReadyOrder) {
    const ArchConfig c = small_mesh();
    TaskGraph g;
    const TaskId a = g.gemm({0, 0}, 32, 10, 16, {});  // 42
    g.gemm({0, 0}, 32, 10, 16, {});
    g.gemm({0, 0}, 32, 10, 16, {a});
    std::vector<TraceRecord> tr;
    const SimReport r = simulate(c, g, &tr);
    EXPECT_EQ(r.total_cycles, 3 * 42);
    EXPECT_EQ(tr[0].start, 0);
    EXPECT_EQ(tr[1].start, 42);
    EXPECT_EQ(tr[2].start, 84);
}

TEST(Simulator, CollectivesHoldLinksAndChargeParticipants) {
    const ArchConfig c = small_mesh();
    TaskGraph g;
    const CollectiveSpec row{CollectiveKind::multicast, Axis::row, {0, 1}, 3, 16384, 2};
    g.collective(row, true, {});
    g.collective(row, true, {});
    const SimReport r = simulate(c, g);
    const Cycles one = 128 + 20 + 3 * 4;
    EXPECT_EQ(r.total_cycles, 2 * one);
    for (int x = 0; x < 4; ++x) EXPECT_EQ(r.tiles[static_cast<std::size_t>(4 + x)].busy[kNoc], 2 * one);
    EXPECT_EQ(r.tiles[0].busy[kNoc], 0);
}

TEST(Simulator, DisjointCollectivesRunConcurrently) {
    const ArchConfig c = small_mesh();
    TaskGraph g;
    g.collective({CollectiveKind::multicast, Axis::row, {0, 0}, 3, 16384, 2}, false, {});
    g.collective({CollectiveKind::multicast, Axis::row, {0, 1}, 3, 16384, 2}, false, {});
    const SimReport r = simulate(c, g);
    EXPECT_EQ(r.total_cycles, 3 * (128 + 20) + 4 * 6);
}

TEST(Simulator, UnicastTiming) {
    const ArchConfig c = small_mesh();
    TaskGraph g;
    g.unicast({0, 0}, {3, 3}, 256, {});
    EXPECT_EQ(simulate(c, g).total_cycles, 2 + 20 + 6 * 4);
}

TEST(Simulator, RejectsCycle) {
    TaskGraph g;
    g.gemm({0, 0}, 1, 1, 1, {1});
    g.gemm({0, 0}, 1, 1, 1, {0});
    try {
        simulate(small_mesh(), g);
        FAIL() << "expected SimulationError";
    } catch (const SimulationError& e) {
        EXPECT_NE(std::string(e.what()).find("dependency cycle"), std::string::npos) << e.what();
    }
}

TEST(Simulator, RejectsMalformedTasks) {
    const ArchConfig c = small_mesh();
    {
        TaskGraph g;
        g.gemm({0, 0}, 1, 1, 1, {7});
        EXPECT_THROW(simulate(c, g), SimulationError);
    }
    {
        TaskGraph g;
        g.hbm_load({0, 0}, 64, 9, {});
        EXPECT_THROW(simulate(c, g), SimulationError);
    }
    {
        TaskGraph g;
        g.gemm({5, 0}, 1, 1, 1, {});
        EXPECT_THROW(simulate(c, g), SimulationError);
    }
    {
        ArchConfig no_hw = c;
        no_hw.hw_collectives = false;
        TaskGraph g;
        g.collective({CollectiveKind::multicast, Axis::row, {0, 0}, 3, 64, 2}, true, {});
        EXPECT_THROW(simulate(no_hw, g), SimulationError);
    }
}

TEST(Simulator, TraceIsDeterministicNdjson) {
    const ArchConfig c = small_mesh();
    TaskGraph g;
    const TaskId a = g.hbm_load({0, 0}, 640, 0, {});
    g.gemm({0, 0}, 32, 16, 16, {a});
    std::vector<TraceRecord> t1, t2;
    simulate(c, g, &t1);
    simulate(c, g, &t2);
    std::ostringstream s1, s2;
    write_trace(s1, t1);
    write_trace(s2, t2);
    EXPECT_EQ(s1.str(), s2.str());
    const auto first = nlohmann::json::parse(s1.str().substr(0, s1.str().find('\n')));
    EXPECT_EQ(first["kind"], "hbm_load");
    EXPECT_EQ(first["end"], 210);
}
