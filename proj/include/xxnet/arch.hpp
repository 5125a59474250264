#pragma once

// Network builders for MobileNet v1 and the three grouped-pointwise (xxnet)
// families. Every builder returns a fully resolved NetworkSpec: channel
// counts, strides, per-stage group sizes, shuffle positions and ReLU flags.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "xxnet/error.hpp"
#include "xxnet/kernels.hpp"

namespace xxnet {

enum class Family { MobilenetV1, V1x3O1, V1x2O2, V1x1O3 };
enum class ReluMode { All, PointwiseOnly, EndOnly };
enum class InputMode { Faithful224, Cifar32 };

inline constexpr std::array<Family, 4> kAllFamilies = {Family::MobilenetV1, Family::V1x3O1, Family::V1x2O2,
                                                       Family::V1x1O3};
inline constexpr std::size_t kLayerCount = 13;
inline constexpr std::size_t kClasses = 10;
inline constexpr std::size_t kMaxStages = 3;

inline std::string to_string(Family f) {
    switch (f) {
        case Family::MobilenetV1: return "mobilenet_v1";
        case Family::V1x3O1: return "v1x_3_o1";
        case Family::V1x2O2: return "v1x_2_o2";
        case Family::V1x1O3: return "v1x_1_o3";
    }
    return "?";
}

inline std::string to_string(ReluMode m) {
    switch (m) {
        case ReluMode::All: return "all";
        case ReluMode::PointwiseOnly: return "pointwise_only";
        case ReluMode::EndOnly: return "end_only";
    }
    return "?";
}

inline std::string to_string(InputMode m) { return m == InputMode::Faithful224 ? "faithful_224" : "cifar_32"; }

inline Family parse_family(std::string_view s) {
    for (Family f : kAllFamilies)
        if (s == to_string(f)) return f;
    throw ConfigError("unknown family '" + std::string(s) + "' (expected mobilenet_v1, v1x_3_o1, v1x_2_o2, v1x_1_o3)");
}

inline ReluMode parse_relu_mode(std::string_view s) {
    for (ReluMode m : {ReluMode::All, ReluMode::PointwiseOnly, ReluMode::EndOnly})
        if (s == to_string(m)) return m;
    throw ConfigError("unknown relu mode '" + std::string(s) + "' (expected all, pointwise_only, end_only)");
}

inline InputMode parse_input_mode(std::string_view s) {
    if (s == "faithful_224") return InputMode::Faithful224;
    if (s == "cifar_32") return InputMode::Cifar32;
    throw ConfigError("unknown input mode '" + std::string(s) + "' (expected faithful_224, cifar_32)");
}

inline std::size_t input_resolution(InputMode m) { return m == InputMode::Faithful224 ? 224 : 32; }

/// Shuffle placement code over {0, x}, right-aligned to the pointwise stages:
/// the last character is the shuffle after the last stage, the one before
/// it the shuffle after the second-to-last stage, and so on.
class ShuffleCode {
public:
    ShuffleCode() = default;

    static ShuffleCode parse(std::string_view text) {
        if (text.empty() || text.size() > kMaxStages)
            throw ConfigError("shuffle code '" + std::string(text) + "' must have 1 to 3 characters");
        for (char ch : text)
            if (ch != '0' && ch != 'x')
                throw ConfigError("shuffle code '" + std::string(text) + "' may only contain '0' and 'x'");
        ShuffleCode code;
        code.code_ = std::string(kMaxStages - text.size(), '0') + std::string(text);
        return code;
    }

    /// Normalized three-character form, e.g. "x" -> "00x".
    const std::string& str() const noexcept { return code_; }

    std::size_t shuffle_count() const noexcept {
        return static_cast<std::size_t>(std::count(code_.begin(), code_.end(), 'x'));
    }

    /// mask[i] is true iff a shuffle follows pointwise stage i. Positions to
    /// the left of the first stage would shuffle right after growth tiling,
    /// which is never done, so they must be '0'.
    std::vector<bool> mask(std::size_t stage_count) const {
        if (stage_count == 0 || stage_count > kMaxStages)
            throw ConfigError("stage count must be 1..3, got " + std::to_string(stage_count));
        const std::size_t lead = kMaxStages - stage_count;
        for (std::size_t i = 0; i < lead; ++i)
            if (code_[i] != '0')
                throw ConfigError("shuffle code '" + code_ + "' is unsupported for " + std::to_string(stage_count) +
                                  " pointwise stage(s)");
        std::vector<bool> out(stage_count);
        for (std::size_t i = 0; i < stage_count; ++i) out[i] = code_[lead + i] == 'x';
        return out;
    }

    friend bool operator==(const ShuffleCode&, const ShuffleCode&) = default;

private:
    std::string code_ = "000";
};

inline std::vector<bool> shuffle_positions(const ShuffleCode& code, std::size_t stage_count) {
    return code.mask(stage_count);
}

struct LayerShape {
    int index = 0;  // 1..13
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    int stride = 1;

    friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

/// One pointwise mini-layer. xxnet stages are channel preserving
/// (in == out == N); the MobileNet stage is a dense M -> N mapping.
struct PointwiseStage {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t group_count = 1;
    bool shuffle_after = false;
    bool relu_after = false;

    std::size_t group_in() const noexcept { return in_channels / group_count; }
    std::size_t group_out() const noexcept { return out_channels / group_count; }
    std::size_t group_size() const noexcept { return group_in(); }
    std::size_t params() const noexcept { return out_channels * group_in(); }

    friend bool operator==(const PointwiseStage&, const PointwiseStage&) = default;
};

struct GroupPlan {
    std::vector<PointwiseStage> stages;
    std::size_t growth_tile_factor = 1;

    std::vector<std::size_t> group_sizes() const {
        std::vector<std::size_t> out;
        for (const auto& s : stages) out.push_back(s.group_size());
        return out;
    }

    friend bool operator==(const GroupPlan&, const GroupPlan&) = default;
};

/// Depthwise mini-layer followed by the pointwise stack.
struct SeparableLayer {
    LayerShape shape;
    GroupPlan plan;
    bool depthwise_relu = true;

    std::size_t relu_count() const {
        std::size_t n = depthwise_relu ? 1 : 0;
        for (const auto& s : plan.stages) n += s.relu_after ? 1 : 0;
        return n;
    }

    friend bool operator==(const SeparableLayer&, const SeparableLayer&) = default;
};

struct Stem {
    std::size_t in_channels = 3;
    std::size_t out_channels = 32;
    int stride = 2;

    friend bool operator==(const Stem&, const Stem&) = default;
};

struct Head {
    std::size_t features = 1024;
    std::size_t classes = kClasses;

    friend bool operator==(const Head&, const Head&) = default;
};

using GroupOverrides = std::map<int, std::vector<std::size_t>>;

struct NetworkSpec {
    Family family = Family::MobilenetV1;
    ShuffleCode shuffle;
    ReluMode relu = ReluMode::All;
    InputMode input_mode = InputMode::Cifar32;
    double width = 1.0;
    GroupOverrides overrides;
    Stem stem;
    std::vector<SeparableLayer> layers;
    Head head;

    std::size_t input_size() const { return input_resolution(input_mode); }

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

// ---------------------------------------------------------------------------
// Layer table and group-size rules.

/// MobileNet v1 separable-layer table at width 1 with its original strides.
inline const std::array<LayerShape, kLayerCount>& mobilenet_layer_table() {
    static const std::array<LayerShape, kLayerCount> table = {{
        {1, 32, 64, 1},     {2, 64, 128, 2},    {3, 128, 128, 1},   {4, 128, 256, 2},   {5, 256, 256, 1},
        {6, 256, 512, 2},   {7, 512, 512, 1},   {8, 512, 512, 1},   {9, 512, 512, 1},   {10, 512, 512, 1},
        {11, 512, 512, 1},  {12, 512, 1024, 2}, {13, 1024, 1024, 1},
    }};
    return table;
}

constexpr bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

inline std::size_t exact_sqrt(std::size_t n) {
    auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    return r * r == n ? r : 0;
}

/// Three-stage group sizes for N channels: (sqrt N)^3 when N is a perfect
/// square, otherwise the two nearest powers of two arranged small-big-small.
inline std::array<std::size_t, 3> optimal_group_sizes(std::size_t channels) {
    if (!is_power_of_two(channels))
        throw ConfigError("no optimal group plan for " + std::to_string(channels) +
                          " channels (power of two required)");
    if (std::size_t r = exact_sqrt(channels)) return {r, r, r};
    const std::size_t small = exact_sqrt(channels / 2);
    return {small, 2 * small, small};
}

/// Group sizes of a three-stage layer. Growth layers whose width is not a
/// perfect square use big-big-small (64 -> 128 gives 16 16 8).
inline std::array<std::size_t, 3> v1x3_group_sizes(std::size_t channels, bool growth) {
    auto sizes = optimal_group_sizes(channels);
    if (growth && sizes[0] != sizes[1]) return {sizes[1], sizes[1], sizes[0]};
    return sizes;
}

/// Two-stage plan: the first stage doubles the first three-stage group size,
/// the second takes whatever keeps the parameter count equal.
inline std::array<std::size_t, 2> v1x2_group_sizes(std::size_t channels, bool growth) {
    const auto three = v1x3_group_sizes(channels, growth);
    const std::size_t first = 2 * three[0];
    const std::size_t total = three[0] + three[1] + three[2];
    if (first >= total) throw ConfigError("no two-stage plan for " + std::to_string(channels) + " channels");
    return {first, total - first};
}

// Group counts of the single-stage family at width 1 (33-channel base).
inline constexpr std::array<std::size_t, kLayerCount> kV1x1GroupCounts = {2, 6, 3, 6, 6, 6, 6, 6, 6, 6, 6, 12, 12};
inline constexpr std::size_t kV1x1BaseChannels = 33;

namespace detail {

inline std::size_t scaled(std::size_t channels, double width) {
    const auto c = static_cast<std::size_t>(std::llround(width * static_cast<double>(channels)));
    if (c == 0) throw ConfigError("width multiplier " + std::to_string(width) + " leaves zero channels");
    return c;
}

// Divisor of n closest to target; ties go to the smaller divisor.
inline std::size_t nearest_divisor(std::size_t n, std::size_t target) {
    std::size_t best = 1;
    for (std::size_t d = 1; d <= n; ++d) {
        if (n % d) continue;
        const auto dist = [&](std::size_t v) { return v > target ? v - target : target - v; };
        if (dist(d) < dist(best)) best = d;
    }
    return best;
}

inline void check_width(double width) {
    if (!(width > 0.0 && width <= 1.0))
        throw ConfigError("width multiplier must be in (0, 1], got " + std::to_string(width));
}

// Channel chain (stem output followed by each layer's output) for a family.
inline std::vector<std::size_t> channel_chain(Family family, double width) {
    std::vector<std::size_t> chain;
    const auto& table = mobilenet_layer_table();
    if (family == Family::V1x1O3) {
        std::size_t c = scaled(kV1x1BaseChannels, width);
        chain.push_back(c);
        for (const auto& row : table) {
            if (row.out_channels != row.in_channels) c *= 2;
            chain.push_back(c);
        }
    } else {
        chain.push_back(scaled(table[0].in_channels, width));
        for (const auto& row : table) chain.push_back(scaled(row.out_channels, width));
    }
    return chain;
}

inline std::vector<PointwiseStage> grouped_stages(std::size_t channels, const std::vector<std::size_t>& sizes,
                                                  int layer) {
    if (sizes.empty() || sizes.size() > kMaxStages)
        throw ConfigError("layer " + std::to_string(layer) + ": 1 to 3 pointwise stages required");
    std::vector<PointwiseStage> stages;
    for (std::size_t g : sizes) {
        if (g == 0 || channels % g != 0)
            throw ConfigError("layer " + std::to_string(layer) + ": group size " + std::to_string(g) +
                              " does not divide " + std::to_string(channels) + " channels");
        stages.push_back({channels, channels, channels / g});
    }
    return stages;
}

}  // namespace detail

/// Sets the per-mini-layer ReLU flags of every separable layer. The stem
/// always keeps its ReLU.
inline NetworkSpec resolve_relu_flags(NetworkSpec spec, ReluMode mode) {
    spec.relu = mode;
    for (auto& layer : spec.layers) {
        layer.depthwise_relu = mode == ReluMode::All;
        for (std::size_t i = 0; i < layer.plan.stages.size(); ++i) {
            const bool last = i + 1 == layer.plan.stages.size();
            layer.plan.stages[i].relu_after = mode != ReluMode::EndOnly || last;
        }
    }
    return spec;
}

/// Re-applies the shuffle code to every layer's stage mask.
inline void apply_shuffle_code(NetworkSpec& spec) {
    for (auto& layer : spec.layers) {
        const auto mask = spec.shuffle.mask(layer.plan.stages.size());
        for (std::size_t i = 0; i < mask.size(); ++i) layer.plan.stages[i].shuffle_after = mask[i];
    }
}

/// Structural checks: channel chaining, tiling factors and group divisibility.
inline void validate(const NetworkSpec& spec) {
    if (spec.layers.size() != kLayerCount) throw ConfigError("network must have 13 separable layers");
    std::size_t channels = spec.stem.out_channels;
    for (const auto& layer : spec.layers) {
        const auto& s = layer.shape;
        const std::string where = "layer " + std::to_string(s.index);
        if (s.in_channels != channels) throw ConfigError(where + ": input channels do not chain");
        const auto& plan = layer.plan;
        if (plan.stages.empty()) throw ConfigError(where + ": no pointwise stages");
        std::size_t c = s.in_channels * plan.growth_tile_factor;
        for (const auto& st : plan.stages) {
            if (st.in_channels != c || st.group_count == 0 || st.in_channels % st.group_count ||
                st.out_channels % st.group_count)
                throw ConfigError(where + ": inconsistent pointwise stage");
            c = st.out_channels;
        }
        if (c != s.out_channels) throw ConfigError(where + ": output channels do not chain");
        channels = c;
    }
    if (spec.head.features != channels) throw ConfigError("head does not match last layer");
}

/// Shared assembly for every family. Group overrides replace the computed
/// group sizes of the named layers (xxnet families only).
inline NetworkSpec assemble(Family family, const ShuffleCode& code, ReluMode relu, InputMode input_mode, double width,
                            const GroupOverrides& overrides = {}) {
    detail::check_width(width);
    if (family == Family::MobilenetV1) {
        if (code.shuffle_count() != 0) throw ConfigError("mobilenet_v1 has no shuffles; shuffle code must be 000");
        if (relu == ReluMode::EndOnly)
            throw ConfigError("end_only relu is meaningless for mobilenet_v1 (one pointwise stage); use pointwise_only");
        if (!overrides.empty()) throw ConfigError("group overrides do not apply to mobilenet_v1");
    }
    for (const auto& [index, sizes] : overrides)
        if (index < 1 || index > static_cast<int>(kLayerCount))
            throw ConfigError("group override for nonexistent layer " + std::to_string(index));

    NetworkSpec spec;
    spec.family = family;
    spec.shuffle = code;
    spec.input_mode = input_mode;
    spec.width = width;
    spec.overrides = overrides;

    const auto chain = detail::channel_chain(family, width);
    const bool cifar = input_mode == InputMode::Cifar32;
    spec.stem = {3, chain[0], cifar ? 1 : 2};

    const auto& table = mobilenet_layer_table();
    for (std::size_t i = 0; i < kLayerCount; ++i) {
        SeparableLayer layer;
        const int index = static_cast<int>(i) + 1;
        int stride = table[i].stride;
        if (cifar && (index == 2 || index == 4)) stride = 1;
        layer.shape = {index, chain[i], chain[i + 1], stride};
        const std::size_t m = chain[i];
        const std::size_t n = chain[i + 1];
        const bool growth = n != m;

        if (family == Family::MobilenetV1) {
            layer.plan.stages.push_back({m, n, 1});
        } else {
            if (n % m != 0 || n / m > 2)
                throw ConfigError("layer " + std::to_string(index) + ": cannot tile " + std::to_string(m) + " to " +
                                  std::to_string(n) + " channels");
            layer.plan.growth_tile_factor = n / m;
            std::vector<std::size_t> sizes;
            if (auto it = overrides.find(index); it != overrides.end()) {
                sizes = it->second;
            } else if (family == Family::V1x3O1) {
                const auto g = v1x3_group_sizes(n, growth);
                sizes.assign(g.begin(), g.end());
            } else if (family == Family::V1x2O2) {
                const auto g = v1x2_group_sizes(n, growth);
                sizes.assign(g.begin(), g.end());
            } else {
                sizes = {n / detail::nearest_divisor(n, kV1x1GroupCounts[i])};
            }
            layer.plan.stages = detail::grouped_stages(n, sizes, index);
        }
        spec.layers.push_back(std::move(layer));
    }
    spec.head = {chain.back(), kClasses};
    apply_shuffle_code(spec);
    spec = resolve_relu_flags(std::move(spec), relu);
    validate(spec);
    return spec;
}

inline NetworkSpec build_mobilenet_v1(ReluMode relu, InputMode input_mode = InputMode::Cifar32, double width = 1.0) {
    return assemble(Family::MobilenetV1, ShuffleCode{}, relu, input_mode, width);
}

inline NetworkSpec build_v1x3(const ShuffleCode& code, ReluMode relu, InputMode input_mode = InputMode::Cifar32,
                              double width = 1.0) {
    return assemble(Family::V1x3O1, code, relu, input_mode, width);
}

inline NetworkSpec build_v1x2(const ShuffleCode& code, ReluMode relu, InputMode input_mode = InputMode::Cifar32,
                              double width = 1.0) {
    return assemble(Family::V1x2O2, code, relu, input_mode, width);
}

inline NetworkSpec build_v1x1(const ShuffleCode& code, ReluMode relu, InputMode input_mode = InputMode::Cifar32,
                              double width = 1.0) {
    return assemble(Family::V1x1O3, code, relu, input_mode, width);
}

inline NetworkSpec build(Family family, const ShuffleCode& code, ReluMode relu,
                         InputMode input_mode = InputMode::Cifar32, double width = 1.0) {
    return assemble(family, code, relu, input_mode, width);
}

}  // namespace xxnet
