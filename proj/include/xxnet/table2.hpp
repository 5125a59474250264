#pragma once

// Published per-layer parameter counts of the four reference networks at
// width 1. Used by `xxnet analyze --check-table2` and the acceptance suite.

#include <array>
#include <cstdint>
#include <sstream>
#include <string>

#include "xxnet/analysis.hpp"
#include "xxnet/arch.hpp"

namespace xxnet {

struct Table2Column {
    Family family;
    std::array<std::uint64_t, kLayerCount> layers;
    std::uint64_t total;
};

inline constexpr std::array<Table2Column, 4> kTable2 = {{
    {Family::MobilenetV1,
     {2336, 8768, 17536, 33920, 67840, 133376, 266752, 266752, 266752, 266752, 266752, 528896, 1057792},
     3184224},
    {Family::V1x3O1,
     {1824, 5696, 5248, 13440, 14592, 43264, 37376, 37376, 37376, 37376, 37376, 102912, 107520},
     481376},
    {Family::V1x2O2,
     {1824, 5696, 5248, 13440, 14592, 43264, 37376, 37376, 37376, 37376, 37376, 102912, 107520},
     481376},
    {Family::V1x1O3,
     {2475, 3498, 6996, 12804, 13992, 48840, 51216, 51216, 51216, 51216, 51216, 97680, 102432},
     544797},
}};

inline const Table2Column& table2_column(Family family) {
    for (const auto& col : kTable2)
        if (col.family == family) return col;
    throw ConfigError("no reference column for family");
}

struct Table2Check {
    std::size_t matching_layers = 0;
    bool total_matches = false;
    std::string detail;  // one line per mismatch

    bool ok() const noexcept { return matching_layers == kLayerCount && total_matches; }
};

inline Table2Check check_table2(const ParamReport& report) {
    const auto& col = table2_column(report.family);
    Table2Check check;
    std::ostringstream os;
    for (std::size_t i = 0; i < kLayerCount && i < report.layers.size(); ++i) {
        if (report.layers[i].params == col.layers[i])
            ++check.matching_layers;
        else
            os << "layer " << i + 1 << ": got " << report.layers[i].params << ", expected " << col.layers[i] << '\n';
    }
    check.total_matches = report.total_params == col.total;
    if (!check.total_matches) os << "total: got " << report.total_params << ", expected " << col.total << '\n';
    check.detail = os.str();
    return check;
}

}  // namespace xxnet
