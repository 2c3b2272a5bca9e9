#pragma once

// Run report document. One JSON object per run:
//   schema_version, arch (name + config echo), layer, run (dataflow, group,
//   collectives, account_transpose), plan (slice geometry, task count,
//   predicted bytes, warnings), metrics.

#include <string>

#include <json.hpp>

#include "analytics.hpp"
#include "config_io.hpp"
#include "planner.hpp"

namespace flatsim {

inline constexpr int kReportSchemaVersion = 1;

inline nlohmann::json layer_to_json(const MhaLayer& l) {
    return {{"batch", l.batch}, {"heads", l.heads}, {"seq_len", l.seq_len}, {"head_dim", l.head_dim},
            {"bytes_per_elem", l.bytes_per_elem}};
}

inline nlohmann::json metrics_to_json(const Metrics& m) {
    nlohmann::json exposed = nlohmann::json::object(), busy = nlohmann::json::object();
    for (int c = 0; c < kCategoryCount; ++c) {
        const std::string key(to_string(static_cast<Category>(c)));
        exposed[key] = m.exposed[static_cast<std::size_t>(c)];
        busy[key] = m.busy[static_cast<std::size_t>(c)];
    }
    return {{"cycles", m.cycles},
            {"utilization", m.utilization},
            {"active_utilization", m.active_utilization},
            {"hbm_bytes", m.hbm_bytes},
            {"hbm_bw_utilization", m.hbm_bw_utilization},
            {"exposed_cycles", exposed},
            {"busy_cycles", busy}};
}

inline nlohmann::json run_report(const std::string& arch_name, const ArchConfig& cfg, const Plan& plan,
                                 const PlanOptions& opts, const SimReport& rep, const Metrics& m) {
    nlohmann::json arch = arch_to_json(cfg);
    arch["name"] = arch_name;
    const SlicePlan& sp = plan.slices;
    return {{"schema_version", kReportSchemaVersion},
            {"arch", arch},
            {"layer", layer_to_json(plan.layer)},
            {"run",
             {{"dataflow", std::string(to_string(plan.kind))},
              {"group", to_string(plan.group())},
              {"collectives", plan.collectives == CollectiveMode::hw ? "hw" : "sw"},
              {"account_transpose", opts.account_transpose}}},
            {"plan",
             {{"slice", sp.slice_rows},
              {"block_rows", sp.block_rows},
              {"block_cols", sp.block_cols},
              {"kv_buffers", sp.kv_buffers},
              {"streams", sp.streams},
              {"l1_footprint_bytes", sp.l1_footprint_bytes},
              {"tasks", rep.task_count},
              {"predicted_hbm_bytes", plan.predicted_hbm_bytes},
              {"warnings", plan.warnings}}},
            {"metrics", metrics_to_json(m)},
            {"hbm", {{"read_bytes", rep.total_hbm_read()}, {"written_bytes", rep.total_hbm_written()}}}};
}

}  // namespace flatsim
