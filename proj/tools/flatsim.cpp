// flatsim command-line driver.
//
// Exit codes: 0 success, 1 verification failure, 2 input error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flatsim/flatsim.hpp"

namespace fs = std::filesystem;
using namespace flatsim;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerify = 1;
constexpr int kExitInput = 2;

struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LayerArgs {
    int seq = 4096;
    int dim = 128;
    int batch = 2;
    int heads = 32;
    int elem_bytes = 2;

    MhaLayer layer() const { return {batch, heads, seq, dim, elem_bytes}; }
};

struct RunArgs {
    std::string arch;
    std::string dataflow = "flatasyn";
    std::string group = "1x1";
    std::string collectives;  // empty: variant default
    LayerArgs layer;
    bool account_transpose = false;
    std::string trace;
    std::string report = "report.json";
    std::string csv;
    std::string dump_plan;
    std::uint64_t seed = 0;
};

void add_layer_flags(CLI::App* cmd, LayerArgs& a) {
    cmd->add_option("--seq", a.seq, "sequence length S")->check(CLI::PositiveNumber);
    cmd->add_option("--dim", a.dim, "head dimension D")->check(CLI::PositiveNumber);
    cmd->add_option("--batch", a.batch, "batch size B")->check(CLI::PositiveNumber);
    cmd->add_option("--heads", a.heads, "number of heads H")->check(CLI::PositiveNumber);
    cmd->add_option("--elem-bytes", a.elem_bytes, "bytes per element")->check(CLI::PositiveNumber);
}

std::string arch_name(const std::string& path) { return fs::path(path).stem().string(); }

DataflowKind dataflow_arg(const std::string& s) {
    auto k = parse_dataflow(s);
    if (!k) throw InputError("unknown dataflow '" + s + "' (expected fa2|fa3|flat|flatcoll|flatasyn)");
    return *k;
}

Plan build_run_plan(const RunArgs& a, const ArchConfig& cfg) {
    const DataflowKind kind = dataflow_arg(a.dataflow);
    const MhaLayer layer = a.layer.layer();
    const PlanOptions opts{a.account_transpose};
    if (!a.collectives.empty() && a.collectives != "sw" && a.collectives != "hw")
        throw InputError("--collectives must be sw or hw, got '" + a.collectives + "'");
    if (!is_flat(kind)) return make_plan(kind, layer, cfg, {1, 1}, opts);
    CollectiveMode mode = needs_hw_collectives(kind) ? CollectiveMode::hw : CollectiveMode::sw;
    if (!a.collectives.empty()) mode = a.collectives == "hw" ? CollectiveMode::hw : CollectiveMode::sw;
    return plan_flat(layer, cfg, parse_group(a.group), mode, kind == DataflowKind::FlatAsyn, opts);
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << content;
}

int cmd_run(const RunArgs& a, bool trace_only) {
    const ArchConfig cfg = load_config_file(a.arch);
    const Plan plan = build_run_plan(a, cfg);
    for (const auto& w : plan.warnings) std::cerr << "warning: " << w << "\n";
    if (!a.dump_plan.empty()) {
        std::ostringstream os;
        dump_plan(os, plan, cfg);
        write_file(a.dump_plan, os.str());
    }
    std::vector<TraceRecord> trace;
    const bool want_trace = trace_only || !a.trace.empty();
    const SimReport rep = simulate(cfg, plan.graph, want_trace ? &trace : nullptr);
    if (want_trace) {
        std::ostringstream os;
        write_trace(os, trace);
        if (a.trace.empty())
            std::cout << os.str();
        else
            write_file(a.trace, os.str());
    }
    if (trace_only) return kExitOk;

    const Metrics m = summarize(rep, cfg, plan.layer);
    const std::string name = arch_name(a.arch);
    if (!a.report.empty()) write_file(a.report, run_report(name, cfg, plan, {a.account_transpose}, rep, m).dump(2) + "\n");
    if (!a.csv.empty()) {
        SweepRow row{{0, plan.layer, plan.kind, plan.group()}, m, {}};
        write_file(a.csv, std::string(kCsvHeader) + "\n" + csv_row(name, row) + "\n");
    }

    std::printf("%s %s group %s  S=%d D=%d B=%d H=%d  slice %d\n", name.c_str(), std::string(to_string(plan.kind)).c_str(),
                to_string(plan.group()).c_str(), plan.layer.seq_len, plan.layer.head_dim, plan.layer.batch,
                plan.layer.heads, plan.slices.slice_rows);
    std::printf("  cycles              %lld\n", static_cast<long long>(m.cycles));
    std::printf("  utilization         %.4f\n", m.utilization);
    std::printf("  active utilization  %.4f\n", m.active_utilization);
    std::printf("  hbm bytes           %lld (predicted %lld)\n", static_cast<long long>(m.hbm_bytes),
                static_cast<long long>(plan.predicted_hbm_bytes));
    std::printf("  hbm bw utilization  %.4f\n", m.hbm_bw_utilization);
    std::printf("  exposed cycles      ");
    for (int c = 0; c < kCategoryCount; ++c)
        std::printf("%s%s=%.1f", c ? " " : "", std::string(to_string(static_cast<Category>(c))).c_str(),
                    m.exposed[static_cast<std::size_t>(c)]);
    std::printf("\n");
    return kExitOk;
}

// Grid document:
//   { "archs": ["table2_32x32_hbm16x2.json", ...],   paths relative to the grid file
//     "batch": 4, "heads": 32, "seq": [...], "dim": [...],
//     "dataflows": ["fa3", "flatasyn"], "groups": ["4x4", ...] }
// Omitted keys take the default grid's values.
SweepGrid load_grid(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open grid '" + path + "'");
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw InputError("malformed grid '" + path + "': " + e.what());
    }
    if (!doc.is_object()) throw InputError("grid: top level must be an object");
    for (auto it = doc.begin(); it != doc.end(); ++it)
        if (it.key() != "archs" && it.key() != "batch" && it.key() != "heads" && it.key() != "seq" &&
            it.key() != "dim" && it.key() != "dataflows" && it.key() != "groups")
            throw InputError("grid." + it.key() + ": unknown key");
    try {
        std::vector<NamedArch> archs;
        const fs::path base = fs::path(path).parent_path();
        for (const auto& a : doc.at("archs")) {
            const std::string p = (base / a.get<std::string>()).string();
            archs.push_back({arch_name(p), load_config_file(p)});
        }
        SweepGrid g = default_grid(std::move(archs), doc.value("batch", 4), doc.value("heads", 32));
        if (doc.contains("seq") || doc.contains("dim")) {
            const auto seqs = doc.contains("seq") ? doc["seq"].get<std::vector<int>>() : std::vector<int>{512, 1024, 2048, 4096};
            const auto dims = doc.contains("dim") ? doc["dim"].get<std::vector<int>>() : std::vector<int>{64, 128};
            g.layers.clear();
            for (int d : dims)
                for (int s : seqs) g.layers.push_back({doc.value("batch", 4), doc.value("heads", 32), s, d, 2});
        }
        if (doc.contains("dataflows")) {
            g.dataflows.clear();
            for (const auto& d : doc["dataflows"]) g.dataflows.push_back(dataflow_arg(d.get<std::string>()));
        }
        if (doc.contains("groups")) {
            g.groups.clear();
            for (const auto& s : doc["groups"]) g.groups.push_back(parse_group(s.get<std::string>()));
        }
        return g;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("grid: ") + e.what());
    }
}

int cmd_sweep(const std::string& grid_path, const std::string& csv, unsigned parallel, bool account_transpose) {
    const SweepGrid grid = load_grid(grid_path);
    if (expand(grid).empty()) throw InputError("sweep: no points");
    const SweepResult res = run_sweep(grid, parallel, {account_transpose});

    std::ostringstream table;
    write_csv(table, grid, res);
    std::ostream& summary = csv.empty() ? std::cerr : std::cout;
    if (csv.empty())
        std::cout << table.str();
    else
        write_file(csv, table.str());

    std::size_t ran = 0;
    for (const auto& r : res.rows) ran += r.ok() ? 1 : 0;
    summary << "points " << res.rows.size() << ", ran " << ran << ", failed " << res.rows.size() - ran << "\n";
    summary << "best group per cell:\n";
    for (const auto& c : best_per_cell(res)) {
        const SweepRow& r = res.rows[c.row];
        char line[256];
        std::snprintf(line, sizeof line, "  %-24s %-9s S=%-5d D=%-4d group %-6s util %.4f\n",
                      grid.archs[c.arch].name.c_str(), std::string(to_string(c.kind)).c_str(), c.layer.seq_len,
                      c.layer.head_dim, to_string(r.point.group).c_str(), r.metrics->utilization);
        summary << line;
    }
    const auto ranking = rank_archs(grid, res);
    summary << "arch ranking (mean best utilization):\n";
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        char line[256];
        std::snprintf(line, sizeof line, "  %s %-24s %.4f\n", i == 0 ? "*" : " ",
                      grid.archs[ranking[i].arch].name.c_str(), ranking[i].mean_best_utilization);
        summary << line;
    }
    return ran > 0 ? kExitOk : kExitVerify;
}

int cmd_oracle_check(const LayerArgs& la, std::uint64_t seed, const std::vector<std::string>& variants,
                     const std::string& group, int max_slice, const std::string& fault) {
    InjectedFault f = InjectedFault::none;
    if (fault == "skip-rescale")
        f = InjectedFault::skip_rescale;
    else if (!fault.empty() && fault != "none")
        throw InputError("--inject-fault must be none or skip-rescale, got '" + fault + "'");
    std::vector<DataflowKind> kinds;
    if (variants.empty())
        kinds = {DataflowKind::FA2, DataflowKind::FA3, DataflowKind::Flat, DataflowKind::FlatColl, DataflowKind::FlatAsyn};
    for (const auto& v : variants) kinds.push_back(dataflow_arg(v));
    const GroupShape g = parse_group(group);

    const auto t = random_qkv(la.seq, la.dim, seed);
    const double scale = default_scale(la.dim);
    const Matrix ref = reference_attention(t.q, t.k, t.v, scale);
    bool all_ok = true;
    for (auto kind : kinds) {
        const FunctionalSchedule sched = functional_schedule(kind, la.seq, g, max_slice);
        std::string status;
        double err = 0;
        try {
            // The invariant check would trip on the injected fault before the
            // output could show it, so it only runs on clean executions.
            const Matrix o = execute_functional(sched, t.q, t.k, t.v, {scale, f == InjectedFault::none, f});
            err = max_relative_error(o, ref);
            status = err <= 1e-3 ? "PASS" : "FAIL";
        } catch (const InvariantViolation& e) {
            status = std::string("FAIL (") + e.what() + ")";
        }
        all_ok = all_ok && status == "PASS";
        std::printf("%-9s group %-5s block %dx%d  max_rel_err %.3e  %s\n", std::string(to_string(kind)).c_str(),
                    to_string(sched.group).c_str(), sched.block_rows, sched.block_cols, err, status.c_str());
    }
    return all_ok ? kExitOk : kExitVerify;
}

std::vector<int> default_group_tiles() { return {1, 4, 16, 64, 256, 1024}; }

int cmd_io_model(const LayerArgs& la, int block, const std::vector<int>& group_tiles) {
    const MhaLayer layer = la.layer();
    const IoModelResult fa = fa_io_bytes(layer, block);
    std::printf("S=%d D=%d B=%d H=%d M=%d bytes/elem=%d\n", layer.seq_len, layer.head_dim, layer.batch, layer.heads,
                block, layer.bytes_per_elem);
    std::printf("fa    bytes=%lld (q=%lld kv=%lld o=%lld)\n", static_cast<long long>(fa.total_bytes),
                static_cast<long long>(fa.breakdown.q_bytes), static_cast<long long>(fa.breakdown.kv_bytes),
                static_cast<long long>(fa.breakdown.o_bytes));
    for (int n : group_tiles) {
        try {
            const IoModelResult fl = flat_io_bytes(layer, block, n);
            std::printf("N=%-5d flat bytes=%lld ratio=%s (%.6f)\n", n, static_cast<long long>(fl.total_bytes),
                        fl.ratio_vs_baseline->str().c_str(), fl.ratio_vs_baseline->value());
        } catch (const std::invalid_argument& e) {
            std::printf("N=%-5d error: %s\n", n, e.what());
        }
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flatsim: tile-mesh attention dataflow simulator"};
    app.require_subcommand(1);

    RunArgs run;
    auto add_run_flags = [&](CLI::App* cmd) {
        cmd->add_option("--arch", run.arch, "architecture config (JSON)")->required()->check(CLI::ExistingFile);
        cmd->add_option("--dataflow", run.dataflow, "fa2|fa3|flat|flatcoll|flatasyn");
        cmd->add_option("--group", run.group, "tile group GxxGy, e.g. 16x16");
        cmd->add_option("--collectives", run.collectives, "sw|hw (Flat variants)");
        cmd->add_flag("--account-transpose", run.account_transpose, "add a K pre-transposition pass");
        cmd->add_option("--trace", run.trace, "NDJSON event trace output");
        cmd->add_option("--seed", run.seed, "seed (functional tensors)");
        add_layer_flags(cmd, run.layer);
    };

    auto* run_cmd = app.add_subcommand("run", "plan and simulate one layer");
    add_run_flags(run_cmd);
    run_cmd->add_option("--report", run.report, "JSON report output (empty to skip)");
    run_cmd->add_option("--csv", run.csv, "one-row CSV output");
    run_cmd->add_option("--dump-plan", run.dump_plan, "human-readable plan listing output");

    auto* trace_cmd = app.add_subcommand("trace", "simulate and emit the event trace (stdout unless --trace)");
    add_run_flags(trace_cmd);

    std::string grid_path, sweep_csv;
    unsigned parallel = 1;
    bool sweep_transpose = false;
    auto* sweep_cmd = app.add_subcommand("sweep", "run a design-space grid");
    sweep_cmd->add_option("grid", grid_path, "grid document (JSON)")->required()->check(CLI::ExistingFile);
    sweep_cmd->add_option("--csv", sweep_csv, "CSV output (stdout if omitted)");
    sweep_cmd->add_option("--parallel", parallel, "worker threads")->check(CLI::PositiveNumber);
    sweep_cmd->add_flag("--account-transpose", sweep_transpose, "add a K pre-transposition pass");

    LayerArgs oracle_layer{128, 64, 1, 1, 2};
    std::uint64_t oracle_seed = 0;
    std::vector<std::string> oracle_variants;
    std::string oracle_group = "4x4", oracle_fault;
    int oracle_slice = 16;
    auto* oracle_cmd = app.add_subcommand("oracle-check", "compare scheduled execution against the oracle");
    oracle_cmd->add_option("--seq", oracle_layer.seq, "sequence length S")->check(CLI::PositiveNumber);
    oracle_cmd->add_option("--dim", oracle_layer.dim, "head dimension D")->check(CLI::PositiveNumber);
    oracle_cmd->add_option("--seed", oracle_seed, "PRNG seed");
    oracle_cmd->add_option("--dataflow", oracle_variants, "variants to check (default all)");
    oracle_cmd->add_option("--group", oracle_group, "largest group for Flat variants");
    oracle_cmd->add_option("--slice", oracle_slice, "largest per-tile slice")->check(CLI::PositiveNumber);
    oracle_cmd->add_option("--inject-fault", oracle_fault, "none|skip-rescale");

    LayerArgs io_layer{4096, 128, 2, 32, 2};
    int io_block = 128;
    std::vector<int> io_groups = default_group_tiles();
    auto* io_cmd = app.add_subcommand("io-model", "closed-form HBM traffic table");
    add_layer_flags(io_cmd, io_layer);
    io_cmd->add_option("--block", io_block, "block size M")->check(CLI::PositiveNumber);
    io_cmd->add_option("--group-tiles", io_groups, "group tile counts N");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitInput;
    }

    try {
        if (*run_cmd) return cmd_run(run, false);
        if (*trace_cmd) return cmd_run(run, true);
        if (*sweep_cmd) return cmd_sweep(grid_path, sweep_csv, parallel, sweep_transpose);
        if (*oracle_cmd) return cmd_oracle_check(oracle_layer, oracle_seed, oracle_variants, oracle_group, oracle_slice,
                                                 oracle_fault);
        if (*io_cmd) return cmd_io_model(io_layer, io_block, io_groups);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitInput;
    } catch (const PlanError& e) {
        std::cerr << "plan error: " << e.what() << "\n";
        return kExitInput;
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitVerify;
    }
    return kExitInput;
}
