#pragma once

// Network description files.
//
// A description is a JSON object:
//
//   {
//     "family": "v1x_3_o1",            // mobilenet_v1 | v1x_3_o1 | v1x_2_o2 | v1x_1_o3
//     "shuffle_code": "xxx",           // 1-3 chars of {0,x}; default "000"
//     "relu_mode": "end_only",         // all | pointwise_only | end_only; default "all"
//     "input_mode": "cifar_32",        // cifar_32 | faithful_224; default "cifar_32"
//     "width_multiplier": 1.0,         // (0, 1]; default 1.0
//     "group_overrides": [             // optional
//       {"layer": 2, "group_sizes": [16, 16, 8]}
//     ]
//   }
//
// Unknown keys are rejected. Syntax errors report the line number.

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "xxnet/arch.hpp"
#include "xxnet/error.hpp"

namespace xxnet {

struct NetworkDescription {
    Family family = Family::V1x3O1;
    ShuffleCode shuffle;
    ReluMode relu = ReluMode::All;
    InputMode input_mode = InputMode::Cifar32;
    double width = 1.0;
    GroupOverrides overrides;

    friend bool operator==(const NetworkDescription&, const NetworkDescription&) = default;
};

inline NetworkSpec build(const NetworkDescription& d) {
    return assemble(d.family, d.shuffle, d.relu, d.input_mode, d.width, d.overrides);
}

inline NetworkDescription describe(const NetworkSpec& spec) {
    return {spec.family, spec.shuffle, spec.relu, spec.input_mode, spec.width, spec.overrides};
}

inline nlohmann::ordered_json to_json(const NetworkDescription& d) {
    nlohmann::ordered_json j;
    j["family"] = to_string(d.family);
    j["shuffle_code"] = d.shuffle.str();
    j["relu_mode"] = to_string(d.relu);
    j["input_mode"] = to_string(d.input_mode);
    j["width_multiplier"] = d.width;
    if (!d.overrides.empty()) {
        auto list = nlohmann::ordered_json::array();
        for (const auto& [layer, sizes] : d.overrides) {
            nlohmann::ordered_json entry;
            entry["layer"] = layer;
            entry["group_sizes"] = sizes;
            list.push_back(std::move(entry));
        }
        j["group_overrides"] = std::move(list);
    }
    return j;
}

inline std::string to_text(const NetworkDescription& d) { return to_json(d).dump(2) + "\n"; }

namespace detail {

inline std::size_t line_of(const std::string& text, std::size_t byte) {
    byte = std::min(byte, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

template <class J>
std::string string_field(const J& j, const char* key) {
    if (!j.is_string()) throw ConfigError(std::string("'") + key + "' must be a string");
    return j.template get<std::string>();
}

}  // namespace detail

/// Parses description text. `origin` names the source in error messages.
inline NetworkDescription parse_description(const std::string& text, const std::string& origin = "<text>") {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(origin + ":" + std::to_string(detail::line_of(text, e.byte == 0 ? 0 : e.byte - 1)) +
                          ": parse error: " + e.what());
    }
    if (!j.is_object()) throw ConfigError(origin + ": top level must be an object");
    NetworkDescription d;
    try {
        if (!j.contains("family")) throw ConfigError("missing required key 'family'");
        for (const auto& [key, value] : j.items()) {
            if (key == "family") {
                d.family = parse_family(detail::string_field(value, "family"));
            } else if (key == "shuffle_code") {
                d.shuffle = ShuffleCode::parse(detail::string_field(value, "shuffle_code"));
            } else if (key == "relu_mode") {
                d.relu = parse_relu_mode(detail::string_field(value, "relu_mode"));
            } else if (key == "input_mode") {
                d.input_mode = parse_input_mode(detail::string_field(value, "input_mode"));
            } else if (key == "width_multiplier") {
                if (!value.is_number()) throw ConfigError("'width_multiplier' must be a number");
                d.width = value.get<double>();
            } else if (key == "group_overrides") {
                if (!value.is_array()) throw ConfigError("'group_overrides' must be a list");
                for (const auto& entry : value) {
                    if (!entry.is_object() || !entry.contains("layer") || !entry.contains("group_sizes") ||
                        entry.size() != 2 || !entry["layer"].is_number_integer() || !entry["group_sizes"].is_array())
                        throw ConfigError("each group override needs integer 'layer' and list 'group_sizes'");
                    std::vector<std::size_t> sizes;
                    for (const auto& g : entry["group_sizes"]) {
                        if (!g.is_number_unsigned()) throw ConfigError("group sizes must be positive integers");
                        sizes.push_back(g.get<std::size_t>());
                    }
                    const int layer = entry["layer"].get<int>();
                    if (!d.overrides.emplace(layer, std::move(sizes)).second)
                        throw ConfigError("duplicate group override for layer " + std::to_string(layer));
                }
            } else {
                throw ConfigError("unknown key '" + key + "'");
            }
        }
    } catch (const ConfigError& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    return d;
}

inline NetworkDescription load_description(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open network file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_description(ss.str(), path);
}

}  // namespace xxnet
