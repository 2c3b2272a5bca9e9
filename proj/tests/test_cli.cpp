#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string out;  ///< stdout and stderr
};

Result run(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + (env.empty() ? "" : " ") + FLATSIM_CLI + std::string(" ") + args + " 2>&1";
    Result r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    while (std::fgets(buf, sizeof buf, p)) r.out += buf;
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    const fs::path d = fs::path(::testing::TempDir()) / "flatsim_cli_test" / info->name();
    fs::create_directories(d);
    return d / name;
}

/// 4 x 4 mesh, written once per test that needs it.
fs::path small_config() {
    const fs::path p = scratch("small.json");
    std::ofstream(p) << R"({
  "mesh": { "mesh_x": 4, "mesh_y": 4 },
  "noc": { "noc_link_bytes_per_cycle": 128, "l1_to_router_cycles": 10, "router_hop_cycles": 4,
           "hw_collectives": true },
  "hbm": { "hbm_channels_west": 2, "hbm_channels_south": 2, "hbm_channel_bytes_per_cycle": 64 },
  "tile": { "ce_rows": 32, "ce_cols": 16, "vector_elems_per_cycle": 64, "exp_elems_per_cycle": 16,
            "l1_bytes": 393216, "l1_bytes_per_cycle": 512 }
})";
    return p;
}

}  // namespace

TEST(Cli, IoModelReportsExactRatio) {
    const Result r = run("io-model --seq 4096 --block 128 --group-tiles 1 64 1024");
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("N=64    flat bytes="), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("ratio=33/5 (6.600000)"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("ratio=33/2 (16.500000)"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("ratio=1/1"), std::string::npos) << r.out;
}

TEST(Cli, RunWritesDeterministicReport) {
    const fs::path cfg = small_config();
    const fs::path a = scratch("a.json"), b = scratch("b.json"), csv = scratch("run.csv");
    const std::string common = "run --arch " + cfg.string() +
                               " --dataflow flatasyn --group 2x2 --seq 512 --dim 64 --batch 1 --heads 4";
    const Result r1 = run(common + " --report " + a.string() + " --csv " + csv.string());
    ASSERT_EQ(r1.code, 0) << r1.out;
    ASSERT_EQ(run(common + " --report " + b.string()).code, 0);
    EXPECT_EQ(slurp(a), slurp(b));
    const auto doc = nlohmann::json::parse(slurp(a));
    EXPECT_EQ(doc["schema_version"], 1);
    EXPECT_EQ(doc["run"]["dataflow"], "flatasyn");
    EXPECT_EQ(doc["metrics"]["hbm_bytes"], doc["plan"]["predicted_hbm_bytes"]);
    EXPECT_EQ(slurp(csv).rfind("arch,dataflow,group,S,D,B,H,cycles,util", 0), 0u);
    EXPECT_NE(r1.out.find("utilization"), std::string::npos);
}

TEST(Cli, MalformedConfigExitsTwoWithFieldPath) {
    const fs::path bad = scratch("bad.json");
    std::ofstream(bad) << R"({"mesh": {"mesh_x": 4}})";
    const Result r = run("run --arch " + bad.string() + " --report ''");
    EXPECT_EQ(r.code, 2) << r.out;
    EXPECT_NE(r.out.find("mesh.mesh_y"), std::string::npos) << r.out;

    std::ofstream(bad) << "{ nope";
    EXPECT_EQ(run("run --arch " + bad.string() + " --report ''").code, 2);
}

TEST(Cli, EnvOverrideIsAppliedAndValidated) {
    const fs::path cfg = small_config();
    const std::string args = "run --arch " + cfg.string() + " --dataflow fa2 --seq 256 --dim 64 --batch 1 --heads 2 --report ''";
    const Result bad = run(args, "MESH__MESH_X=abc");
    EXPECT_EQ(bad.code, 2) << bad.out;
    EXPECT_NE(bad.out.find("mesh.mesh_x"), std::string::npos) << bad.out;
    const Result off = run("run --arch " + cfg.string() +
                               " --dataflow flatcoll --group 2x2 --seq 256 --dim 64 --batch 1 --heads 2 --report ''",
                           "NOC__HW_COLLECTIVES=false");
    EXPECT_EQ(off.code, 2) << off.out;
    EXPECT_NE(off.out.find("hardware collectives"), std::string::npos) << off.out;
}

TEST(Cli, InputErrorsExitTwo) {
    const fs::path cfg = small_config();
    EXPECT_EQ(run("run --arch " + cfg.string() + " --dataflow fa9 --report ''").code, 2);
    EXPECT_EQ(run("run --arch " + cfg.string() + " --group 3x3 --dataflow flat --seq 256 --report ''").code, 2);
    EXPECT_EQ(run("run --arch /nonexistent.json").code, 2);
    EXPECT_EQ(run("bogus").code, 2);
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, OracleCheck) {
    const Result ok = run("oracle-check --seq 128 --dim 64 --seed 0");
    EXPECT_EQ(ok.code, 0) << ok.out;
    for (const char* v : {"fa2 ", "fa3 ", "flat ", "flatcoll ", "flatasyn "})
        EXPECT_NE(ok.out.find(v), std::string::npos) << v;
    EXPECT_EQ(ok.out.find("FAIL"), std::string::npos) << ok.out;

    const Result one = run("oracle-check --seq 1 --dim 8");
    EXPECT_EQ(one.code, 0) << one.out;
    EXPECT_NE(one.out.find("max_rel_err 0.000e+00"), std::string::npos) << one.out;

    const Result bad = run("oracle-check --seq 128 --dim 64 --inject-fault skip-rescale");
    EXPECT_EQ(bad.code, 1) << bad.out;
    EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}

TEST(Cli, TraceSubcommand) {
    const fs::path cfg = small_config();
    const fs::path t = scratch("trace.ndjson");
    const Result r = run("trace --arch " + cfg.string() + " --dataflow fa2 --seq 128 --dim 64 --batch 1 --heads 1 --trace " +
                         t.string());
    ASSERT_EQ(r.code, 0) << r.out;
    const std::string body = slurp(t);
    EXPECT_EQ(body.rfind("{\"bytes\":", 0), 0u) << body.substr(0, 200);
    EXPECT_NE(body.find("\"kind\":\"gemm\""), std::string::npos);
}

TEST(Cli, SweepGrid) {
    const fs::path cfg = small_config();
    const fs::path grid = scratch("grid.json"), csv = scratch("sweep.csv"), csv2 = scratch("sweep2.csv");
    std::ofstream(grid) << R"({"archs": ["small.json"], "batch": 1, "heads": 4, "seq": [512], "dim": [64],
                               "dataflows": ["fa2", "flatasyn"], "groups": ["2x2", "3x3", "4x4"]})";
    const Result r = run("sweep " + grid.string() + " --csv " + csv.string() + " --parallel 3");
    ASSERT_EQ(r.code, 0) << r.out;
    ASSERT_EQ(run("sweep " + grid.string() + " --csv " + csv2.string()).code, 0);
    EXPECT_EQ(slurp(csv), slurp(csv2));
    const std::string body = slurp(csv);
    EXPECT_EQ(std::count(body.begin(), body.end(), '\n'), 5);  // header + fa2 + 3 groups
    EXPECT_NE(body.find("3x3"), std::string::npos);
    EXPECT_NE(body.find("does not divide mesh_x"), std::string::npos) << body;
    EXPECT_NE(r.out.find("best group per cell"), std::string::npos);
    EXPECT_NE(r.out.find("* small"), std::string::npos) << r.out;

    std::ofstream(grid) << R"({"archs": ["small.json"], "seq": []})";
    const Result empty = run("sweep " + grid.string());
    EXPECT_EQ(empty.code, 2) << empty.out;
    EXPECT_NE(empty.out.find("no points"), std::string::npos) << empty.out;
    (void)cfg;
}
