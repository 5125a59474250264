#pragma once

// Trainable parameters for a NetworkSpec and the graph that evaluates it.
//
// Every conv mini-layer is followed by batch normalization, then the ReLU
// when its flag is set, then the channel shuffle when its flag is set.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "xxnet/arch.hpp"
#include "xxnet/autograd.hpp"
#include "xxnet/kernels.hpp"
#include "xxnet/tensor.hpp"

namespace xxnet {

template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> velocity;  // optimizer momentum
};

template <class T>
struct NamedStats {
    std::string name;
    BatchNormStats<T> stats;
};

template <class T>
class Model {
public:
    using Var = typename Graph<T>::Var;

    /// Conv kernels ~ N(0, 2/fan_in); classifier ~ N(0, 1/features) with zero
    /// bias; batch-norm scale 1, shift 0.
    Model(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
        std::mt19937_64 rng(seed);
        const auto he = [&](Shape s, std::size_t fan_in, double gain = 2.0) {
            Tensor<T> t(s);
            std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
            for (auto& v : t.data()) v = static_cast<T>(dist(rng));
            return t;
        };
        const auto& stem = spec_.stem;
        add("stem.conv", he({stem.out_channels, stem.in_channels, kKernelSize, kKernelSize},
                            stem.in_channels * kKernelSize * kKernelSize));
        add_bn("stem.bn", stem.out_channels);
        for (const auto& layer : spec_.layers) {
            const std::string p = "L" + std::to_string(layer.shape.index);
            const std::size_t m = layer.shape.in_channels;
            add(p + ".dw", he({m, 1, kKernelSize, kKernelSize}, kKernelSize * kKernelSize));
            add_bn(p + ".dw.bn", m);
            for (std::size_t s = 0; s < layer.plan.stages.size(); ++s) {
                const auto& st = layer.plan.stages[s];
                const std::string q = p + ".pw" + std::to_string(s + 1);
                add(q, he({st.group_count, st.group_out(), st.group_in(), 1}, st.group_in()));
                add_bn(q + ".bn", st.out_channels);
            }
        }
        add("fc.weight", he({spec_.head.classes, spec_.head.features, 1, 1}, spec_.head.features, 1.0));
        add("fc.bias", Tensor<T>(1, spec_.head.classes, 1, 1));
    }

    const NetworkSpec& spec() const noexcept { return spec_; }
    std::vector<Parameter<T>>& parameters() noexcept { return params_; }
    const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
    std::vector<NamedStats<T>>& batch_norm_stats() noexcept { return stats_; }
    const std::vector<NamedStats<T>>& batch_norm_stats() const noexcept { return stats_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.grad.fill(T(0));
    }

    /// Appends the network to `g` and returns the logits node, shape (n, 10, 1, 1).
    Var build(Graph<T>& g, Var x, Mode mode) {
        std::size_t pi = 0, si = 0;
        const auto param = [&]() {
            auto& p = params_[pi++];
            return g.parameter(p.value, p.grad, p.name);
        };
        const auto norm = [&](Var v) {
            auto& st = stats_[si++];
            Var scale = param();
            Var shift = param();
            return g.batch_norm(v, scale, shift, st.stats, mode, st.name);
        };

        x = g.conv3x3(x, param(), spec_.stem.stride, "stem.conv");
        x = g.relu(norm(x), "stem.relu");
        for (const auto& layer : spec_.layers) {
            const std::string p = "L" + std::to_string(layer.shape.index);
            x = norm(g.depthwise_conv3x3(x, param(), layer.shape.stride, p + ".dw"));
            if (layer.depthwise_relu) x = g.relu(x, p + ".dw.relu");
            if (layer.plan.growth_tile_factor > 1) x = g.tile_channels(x, layer.plan.growth_tile_factor, p + ".tile");
            for (std::size_t s = 0; s < layer.plan.stages.size(); ++s) {
                const auto& st = layer.plan.stages[s];
                const std::string q = p + ".pw" + std::to_string(s + 1);
                x = norm(g.grouped_pointwise_conv(x, param(), q));
                if (st.relu_after) x = g.relu(x, q + ".relu");
                if (st.shuffle_after) x = g.channel_shuffle(x, st.group_count, q + ".shuffle");
            }
        }
        x = g.global_avg_pool(x, "pool");
        Var w = param();
        Var b = param();
        return g.fully_connected(x, w, b, "fc");
    }

    /// Forward pass without gradient bookkeeping.
    Tensor<T> logits(const Tensor<T>& images, Mode mode) {
        Graph<T> g;
        Var in = g.input(images);
        build(g, in, mode);
        return g.forward();
    }

private:
    void add(std::string name, Tensor<T> value) {
        Parameter<T> p;
        p.name = std::move(name);
        p.grad = Tensor<T>(value.shape());
        p.velocity = Tensor<T>(value.shape());
        p.value = std::move(value);
        params_.push_back(std::move(p));
    }

    void add_bn(std::string name, std::size_t channels) {
        add(name + ".scale", Tensor<T>(1, channels, 1, 1, T(1)));
        add(name + ".shift", Tensor<T>(1, channels, 1, 1, T(0)));
        stats_.push_back({std::move(name), BatchNormStats<T>(channels)});
    }

    NetworkSpec spec_;
    std::vector<Parameter<T>> params_;
    std::vector<NamedStats<T>> stats_;
};

/// Index of the largest logit per sample.
template <class T>
std::vector<int> predictions(const Tensor<T>& logits) {
    std::vector<int> out;
    const std::size_t k = logits.c() * logits.plane();
    const auto d = logits.data();
    for (std::size_t n = 0; n < logits.n(); ++n) {
        const auto row = d.subspan(n * k, k);
        out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
    return out;
}

}  // namespace xxnet
