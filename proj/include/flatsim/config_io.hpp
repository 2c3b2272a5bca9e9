#pragma once

// Architecture config documents.
//
// A config is a JSON object with four sections. Every ArchConfig field is
// keyed by its own name inside its section:
//
//   {
//     "name": "table1",                        (optional)
//     "mesh": { "mesh_x": 32, "mesh_y": 32 },
//     "noc":  { "noc_link_bytes_per_cycle": 128, "l1_to_router_cycles": 10,
//               "router_hop_cycles": 4, "hw_collectives": true,
//               "hw_reduce_hop_cycles": 0 },
//     "hbm":  { "hbm_channels_west": 16, "hbm_channels_south": 16,
//               "hbm_channel_bytes_per_cycle": 64,
//               "hbm_access_latency_cycles": 200 },
//     "tile": { "ce_rows": 32, "ce_cols": 16, "gemm_fill_cycles": 32,
//               "vector_elems_per_cycle": 64, "exp_elems_per_cycle": 16,
//               "l1_bytes": 393216, "l1_bytes_per_cycle": 512,
//               "sync_overhead_cycles": 50 }
//   }
//
// Unknown sections and keys are rejected. Any field can be overridden from
// the environment as SECTION__FIELD, e.g. MESH__MESH_X=16 or
// NOC__HW_COLLECTIVES=false.

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <json.hpp>

#include "arch.hpp"

namespace flatsim {

namespace detail {

struct ConfigField {
    const char* section;
    const char* key;
    bool required;
    std::variant<int ArchConfig::*, std::int64_t ArchConfig::*, bool ArchConfig::*> member;
};

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = {
        {"mesh", "mesh_x", true, &ArchConfig::mesh_x},
        {"mesh", "mesh_y", true, &ArchConfig::mesh_y},
        {"noc", "noc_link_bytes_per_cycle", true, &ArchConfig::noc_link_bytes_per_cycle},
        {"noc", "l1_to_router_cycles", true, &ArchConfig::l1_to_router_cycles},
        {"noc", "router_hop_cycles", true, &ArchConfig::router_hop_cycles},
        {"noc", "hw_collectives", true, &ArchConfig::hw_collectives},
        {"noc", "hw_reduce_hop_cycles", false, &ArchConfig::hw_reduce_hop_cycles},
        {"hbm", "hbm_channels_west", true, &ArchConfig::hbm_channels_west},
        {"hbm", "hbm_channels_south", true, &ArchConfig::hbm_channels_south},
        {"hbm", "hbm_channel_bytes_per_cycle", true, &ArchConfig::hbm_channel_bytes_per_cycle},
        {"hbm", "hbm_access_latency_cycles", false, &ArchConfig::hbm_access_latency_cycles},
        {"tile", "ce_rows", true, &ArchConfig::ce_rows},
        {"tile", "ce_cols", true, &ArchConfig::ce_cols},
        {"tile", "gemm_fill_cycles", false, &ArchConfig::gemm_fill_cycles},
        {"tile", "vector_elems_per_cycle", true, &ArchConfig::vector_elems_per_cycle},
        {"tile", "exp_elems_per_cycle", true, &ArchConfig::exp_elems_per_cycle},
        {"tile", "l1_bytes", true, &ArchConfig::l1_bytes},
        {"tile", "l1_bytes_per_cycle", true, &ArchConfig::l1_bytes_per_cycle},
        {"tile", "sync_overhead_cycles", false, &ArchConfig::sync_overhead_cycles},
    };
    return fields;
}

inline std::string upper(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
    return s;
}

inline nlohmann::json parse_env_value(const ConfigField& f, const std::string& raw) {
    const std::string path = std::string(f.section) + "." + f.key;
    if (std::holds_alternative<bool ArchConfig::*>(f.member)) {
        if (raw == "true" || raw == "1") return true;
        if (raw == "false" || raw == "0") return false;
        throw ConfigError(path, "environment override '" + raw + "' is not a boolean");
    }
    try {
        std::size_t used = 0;
        const long long v = std::stoll(raw, &used);
        if (used != raw.size()) throw std::invalid_argument(raw);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(path, "environment override '" + raw + "' is not an integer");
    }
}

}  // namespace detail

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

inline std::optional<std::string> process_env(const std::string& name) {
    if (const char* v = std::getenv(name.c_str())) return std::string(v);
    return std::nullopt;
}

/// Overlay SECTION__FIELD environment values onto a parsed document.
inline void apply_env_overrides(nlohmann::json& doc, const EnvLookup& lookup = process_env) {
    for (const auto& f : detail::config_fields()) {
        const std::string var = detail::upper(f.section) + "__" + detail::upper(f.key);
        if (auto v = lookup(var)) {
            if (!doc.contains(f.section) || !doc[f.section].is_object()) doc[f.section] = nlohmann::json::object();
            doc[f.section][f.key] = detail::parse_env_value(f, *v);
        }
    }
}

inline ArchConfig arch_from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ConfigError("<root>", "config document must be an object");

    for (auto it = doc.begin(); it != doc.end(); ++it) {
        const auto& k = it.key();
        if (k == "name") {
            if (!it->is_string()) throw ConfigError("name", "must be a string");
            continue;
        }
        if (k != "mesh" && k != "noc" && k != "hbm" && k != "tile") throw ConfigError(k, "unknown section");
        if (!it->is_object()) throw ConfigError(k, "section must be an object");
        for (auto jt = it->begin(); jt != it->end(); ++jt) {
            const auto& fields = detail::config_fields();
            const bool known = std::any_of(fields.begin(), fields.end(), [&](const detail::ConfigField& f) {
                return k == f.section && jt.key() == f.key;
            });
            if (!known) throw ConfigError(k + "." + jt.key(), "unknown key");
        }
    }

    ArchConfig cfg;
    for (const auto& f : detail::config_fields()) {
        const std::string path = std::string(f.section) + "." + f.key;
        const bool present = doc.contains(f.section) && doc.at(f.section).contains(f.key);
        if (!present) {
            if (f.required) throw ConfigError(path, "missing field");
            continue;
        }
        const auto& v = doc.at(f.section).at(f.key);
        std::visit(
            [&](auto member) {
                using T = std::remove_reference_t<decltype(cfg.*member)>;
                if constexpr (std::is_same_v<T, bool>) {
                    if (!v.is_boolean()) throw ConfigError(path, "expected a boolean");
                    cfg.*member = v.get<bool>();
                } else {
                    if (!v.is_number_integer()) throw ConfigError(path, "expected an integer");
                    const auto raw = v.get<std::int64_t>();
                    if constexpr (std::is_same_v<T, int>) {
                        if (raw > std::numeric_limits<int>::max() || raw < std::numeric_limits<int>::min())
                            throw ConfigError(path, "value out of range");
                    }
                    cfg.*member = static_cast<T>(raw);
                }
            },
            f.member);
    }
    cfg.validate();
    return cfg;
}

inline nlohmann::json arch_to_json(const ArchConfig& cfg) {
    nlohmann::json doc = nlohmann::json::object();
    for (const auto& f : detail::config_fields()) {
        std::visit([&](auto member) { doc[f.section][f.key] = cfg.*member; }, f.member);
    }
    return doc;
}

inline std::string serialize_config(const ArchConfig& cfg) { return arch_to_json(cfg).dump(2) + "\n"; }

/// Parse a config document (no environment overlay).
inline ArchConfig load_config(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("<root>", std::string("malformed document: ") + e.what());
    }
    return arch_from_json(doc);
}

/// Read a config file and apply environment overrides.
inline ArchConfig load_config_file(const std::string& path, const EnvLookup& lookup = process_env) {
    std::ifstream in(path);
    if (!in) throw ConfigError("<file>", "cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(buf.str());
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("<root>", "malformed document '" + path + "': " + e.what());
    }
    apply_env_overrides(doc, lookup);
    return arch_from_json(doc);
}

}  // namespace flatsim
