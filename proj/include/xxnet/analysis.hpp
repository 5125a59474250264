#pragma once

// Parameter and multiply-accumulate accounting, and boolean channel
// reachability (influence) through grouped pointwise stacks.
//
// Parameter counts cover only the depthwise and pointwise weights of the 13
// separable layers: no stem, no batch-norm, no classifier.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "xxnet/arch.hpp"
#include "xxnet/error.hpp"

namespace xxnet {

inline std::uint64_t layer_params_mobilenet(std::uint64_t in_channels, std::uint64_t out_channels,
                                            std::uint64_t kernel = kKernelSize) {
    return in_channels * kernel * kernel + in_channels * out_channels;
}

/// M*k^2 + N*(G_1 + ... + G_s); each G_i must divide N.
inline std::uint64_t layer_params_grouped(std::uint64_t in_channels, std::uint64_t out_channels, std::uint64_t kernel,
                                          std::span<const std::size_t> group_sizes) {
    std::uint64_t sum = 0;
    for (std::size_t g : group_sizes) {
        if (g == 0 || out_channels % g != 0)
            throw ConfigError("group size " + std::to_string(g) + " does not divide " + std::to_string(out_channels));
        sum += g;
    }
    return in_channels * kernel * kernel + out_channels * sum;
}

inline std::uint64_t layer_params_grouped(std::uint64_t in_channels, std::uint64_t out_channels, std::uint64_t kernel,
                                          std::initializer_list<std::size_t> group_sizes) {
    return layer_params_grouped(in_channels, out_channels, kernel,
                                std::span<const std::size_t>(group_sizes.begin(), group_sizes.size()));
}

inline std::uint64_t layer_params(const SeparableLayer& layer) {
    std::uint64_t total = layer.shape.in_channels * kKernelSize * kKernelSize;
    for (const auto& s : layer.plan.stages) total += s.params();
    return total;
}

/// Spatial extent of each separable layer's output for a square input.
inline std::vector<std::size_t> layer_output_sizes(const NetworkSpec& spec, std::size_t input_size) {
    std::vector<std::size_t> sizes;
    std::size_t side = same_out(input_size, spec.stem.stride);
    for (const auto& layer : spec.layers) {
        side = same_out(side, layer.shape.stride);
        sizes.push_back(side);
    }
    return sizes;
}

/// Per-layer MACs: layer parameters times output pixels. Tiling is a copy
/// and contributes nothing.
inline std::vector<std::uint64_t> mac_count(const NetworkSpec& spec, std::size_t input_size) {
    const auto sides = layer_output_sizes(spec, input_size);
    std::vector<std::uint64_t> macs;
    for (std::size_t i = 0; i < spec.layers.size(); ++i)
        macs.push_back(layer_params(spec.layers[i]) * sides[i] * sides[i]);
    return macs;
}

inline std::vector<std::uint64_t> mac_count(const NetworkSpec& spec) { return mac_count(spec, spec.input_size()); }

struct LayerCount {
    int layer = 0;
    std::uint64_t params = 0;
    std::uint64_t macs = 0;
};

struct ParamReport {
    Family family = Family::MobilenetV1;
    std::vector<LayerCount> layers;
    std::uint64_t total_params = 0;
    std::uint64_t total_macs = 0;
};

inline ParamReport network_params(const NetworkSpec& spec) {
    ParamReport report;
    report.family = spec.family;
    const auto macs = mac_count(spec);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerCount row{spec.layers[i].shape.index, layer_params(spec.layers[i]), macs[i]};
        report.total_params += row.params;
        report.total_macs += row.macs;
        report.layers.push_back(row);
    }
    return report;
}

/// a.total / b.total
inline double reduction_factor(const ParamReport& a, const ParamReport& b) {
    if (a.layers.size() != b.layers.size()) throw ConfigError("reports cover different layer structures");
    if (b.total_params == 0) throw ConfigError("reduction factor against an empty report");
    return static_cast<double>(a.total_params) / static_cast<double>(b.total_params);
}

// ---------------------------------------------------------------------------
// Boolean reachability.

/// Dense boolean matrix with bit-packed rows.
class BoolMatrix {
public:
    BoolMatrix() = default;
    BoolMatrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), words_((cols + 63) / 64), bits_(rows * words_, 0) {}

    static BoolMatrix identity(std::size_t n) {
        BoolMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m.set(i, i);
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    bool get(std::size_t r, std::size_t c) const noexcept { return (row(r)[c / 64] >> (c % 64)) & 1u; }
    void set(std::size_t r, std::size_t c, bool v = true) noexcept {
        const std::uint64_t bit = std::uint64_t{1} << (c % 64);
        auto& word = bits_[r * words_ + c / 64];
        word = v ? (word | bit) : (word & ~bit);
    }

    std::size_t row_count(std::size_t r) const noexcept {
        std::size_t n = 0;
        for (std::uint64_t w : row(r)) n += static_cast<std::size_t>(std::popcount(w));
        return n;
    }

    std::size_t count() const noexcept {
        std::size_t n = 0;
        for (std::uint64_t w : bits_) n += static_cast<std::size_t>(std::popcount(w));
        return n;
    }

    bool all() const noexcept { return count() == rows_ * cols_; }

    /// Boolean product (*this) x rhs.
    BoolMatrix operator*(const BoolMatrix& rhs) const {
        if (cols_ != rhs.rows_) throw ShapeError("boolean product of incompatible matrices");
        BoolMatrix out(rows_, rhs.cols_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t k = 0; k < cols_; ++k)
                if (get(r, k)) out.or_row(r, rhs.row(k));
        return out;
    }

    friend bool operator==(const BoolMatrix&, const BoolMatrix&) = default;

    std::span<const std::uint64_t> row(std::size_t r) const noexcept { return {bits_.data() + r * words_, words_}; }

    void or_row(std::size_t r, std::span<const std::uint64_t> src) noexcept {
        for (std::size_t i = 0; i < words_; ++i) bits_[r * words_ + i] |= src[i];
    }

    void copy_row(std::size_t r, std::span<const std::uint64_t> src) noexcept {
        std::copy(src.begin(), src.end(), bits_.begin() + static_cast<std::ptrdiff_t>(r * words_));
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::size_t words_ = 0;
    std::vector<std::uint64_t> bits_;
};

/// R[o][i] is true iff output channel o of the pointwise stack depends on
/// input channel i of the layer. Rows are the N outputs, columns the M
/// inputs; growth tiling is folded in. The depthwise mini-layer maps each
/// channel to itself and does not change reachability.
using InfluenceMatrix = BoolMatrix;

inline InfluenceMatrix influence_matrix(const GroupPlan& plan, std::size_t in_channels) {
    const std::size_t tiled = in_channels * plan.growth_tile_factor;
    InfluenceMatrix reach(tiled, in_channels);
    for (std::size_t j = 0; j < tiled; ++j) reach.set(j, j % in_channels);

    for (const auto& stage : plan.stages) {
        if (stage.in_channels != reach.rows()) throw ShapeError("pointwise stage does not match channel count");
        InfluenceMatrix next(stage.out_channels, in_channels);
        InfluenceMatrix group_union(1, in_channels);
        for (std::size_t g = 0; g < stage.group_count; ++g) {
            group_union = InfluenceMatrix(1, in_channels);
            for (std::size_t i = 0; i < stage.group_in(); ++i) group_union.or_row(0, reach.row(g * stage.group_in() + i));
            for (std::size_t o = 0; o < stage.group_out(); ++o) next.copy_row(g * stage.group_out() + o, group_union.row(0));
        }
        if (stage.shuffle_after) {
            InfluenceMatrix shuffled(next.rows(), in_channels);
            for (std::size_t i = 0; i < next.rows(); ++i)
                shuffled.copy_row(shuffle_destination(i, next.rows(), stage.group_count), next.row(i));
            next = std::move(shuffled);
        }
        reach = std::move(next);
    }
    return reach;
}

inline InfluenceMatrix influence_matrix(const SeparableLayer& layer) {
    return influence_matrix(layer.plan, layer.shape.in_channels);
}

/// Reachability from the input of layer `first` to the output of layer
/// `last` (1-based, inclusive).
inline InfluenceMatrix influence_matrix(const NetworkSpec& spec, int first, int last) {
    if (first < 1 || last > static_cast<int>(spec.layers.size()) || first > last)
        throw ConfigError("invalid layer range " + std::to_string(first) + ".." + std::to_string(last));
    InfluenceMatrix reach = influence_matrix(spec.layers[static_cast<std::size_t>(first - 1)]);
    for (int l = first + 1; l <= last; ++l) reach = influence_matrix(spec.layers[static_cast<std::size_t>(l - 1)]) * reach;
    return reach;
}

struct LayerConnectivity {
    int layer = 0;
    std::size_t outputs = 0;
    std::size_t inputs = 0;
    std::size_t reachable = 0;  // true cells
    std::size_t min_reach = 0;  // fewest inputs seen by any output
    double fraction = 0;        // reachable / (outputs * inputs)
    bool fully_connected = false;
};

inline LayerConnectivity connectivity(const SeparableLayer& layer) {
    const auto m = influence_matrix(layer);
    LayerConnectivity c;
    c.layer = layer.shape.index;
    c.outputs = m.rows();
    c.inputs = m.cols();
    c.reachable = m.count();
    c.min_reach = m.cols();
    for (std::size_t r = 0; r < m.rows(); ++r) c.min_reach = std::min(c.min_reach, m.row_count(r));
    c.fraction = static_cast<double>(c.reachable) / static_cast<double>(c.outputs * c.inputs);
    c.fully_connected = c.reachable == c.outputs * c.inputs;
    return c;
}

inline std::vector<LayerConnectivity> connectivity_report(const NetworkSpec& spec) {
    std::vector<LayerConnectivity> out;
    for (const auto& layer : spec.layers) out.push_back(connectivity(layer));
    return out;
}

// ---------------------------------------------------------------------------
// Report emission.

inline constexpr const char* kReportCsvHeader = "layer,mobilenet_params,family_params,macs,reach_fraction";

/// CSV with one row per layer and a final "total" row. The total row's
/// reach_fraction is the cell-weighted mean over all layers.
inline void write_report_csv(std::ostream& os, const ParamReport& baseline, const ParamReport& family,
                             const std::vector<LayerConnectivity>& reach) {
    if (baseline.layers.size() != family.layers.size() || reach.size() != family.layers.size())
        throw ConfigError("report row counts differ");
    os << kReportCsvHeader << '\n';
    std::size_t cells = 0, hits = 0;
    for (std::size_t i = 0; i < family.layers.size(); ++i) {
        os << family.layers[i].layer << ',' << baseline.layers[i].params << ',' << family.layers[i].params << ','
           << family.layers[i].macs << ',' << std::fixed << std::setprecision(6) << reach[i].fraction << '\n';
        cells += reach[i].outputs * reach[i].inputs;
        hits += reach[i].reachable;
    }
    os << "total," << baseline.total_params << ',' << family.total_params << ',' << family.total_macs << ','
       << std::fixed << std::setprecision(6) << static_cast<double>(hits) / static_cast<double>(cells) << '\n';
    os.unsetf(std::ios::floatfield);
}

/// "key: value" lines summarising a report against the MobileNet baseline.
inline void write_summary(std::ostream& os, const NetworkSpec& spec, const ParamReport& baseline,
                          const ParamReport& family, const std::vector<LayerConnectivity>& reach) {
    std::size_t full = 0;
    for (const auto& r : reach) full += r.fully_connected ? 1 : 0;
    os << "family: " << to_string(spec.family) << '\n'
       << "shuffle_code: " << spec.shuffle.str() << '\n'
       << "relu_mode: " << to_string(spec.relu) << '\n'
       << "input_mode: " << to_string(spec.input_mode) << '\n'
       << "width_multiplier: " << spec.width << '\n'
       << "total_params: " << family.total_params << '\n'
       << "mobilenet_params: " << baseline.total_params << '\n'
       << "reduction_factor: " << std::setprecision(6) << reduction_factor(baseline, family) << '\n'
       << "total_macs: " << family.total_macs << '\n'
       << "fully_connected_layers: " << full << '/' << reach.size() << '\n';
}

}  // namespace xxnet
