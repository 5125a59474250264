#pragma once

// Reverse-mode differentiation over the kernels in kernels.hpp.
//
// A Graph records nodes in creation order, which is a topological order
// because every op can only reference nodes that already exist. forward()
// evaluates every node; backward() walks the nodes in reverse exactly once
// and accumulates (+=) into the gradient sinks of parameter nodes, so
// callers zero their gradient buffers between optimizer steps.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xxnet/error.hpp"
#include "xxnet/kernels.hpp"
#include "xxnet/tensor.hpp"

namespace xxnet {

template <class T>
class Graph {
public:
    struct Var {
        std::size_t id = static_cast<std::size_t>(-1);
    };

    struct Node {
        std::string op;
        std::string name;
        std::vector<std::size_t> inputs;
        Tensor<T> value;
        Tensor<T> grad;
        bool trainable = false;
        const Tensor<T>* source = nullptr;  // leaf payload read at forward time
        Tensor<T>* grad_sink = nullptr;     // parameter gradient accumulator
        std::function<Tensor<T>(Graph&)> forward;
        std::function<void(Graph&)> backward;
    };

    /// Constant leaf. The tensor is owned by the graph; replace it with set_input().
    Var input(Tensor<T> value, std::string name = "input") {
        auto owned = std::make_shared<Tensor<T>>(std::move(value));
        inputs_.push_back(owned);
        Node node;
        node.op = "input";
        node.name = std::move(name);
        node.source = owned.get();
        return push(std::move(node));
    }

    void set_input(Var v, Tensor<T> value) {
        Node& node = at(v);
        if (node.op != "input") throw StateError("node #" + std::to_string(v.id) + " is not an input");
        for (auto& owned : inputs_)
            if (owned.get() == node.source) *owned = std::move(value);
        forwarded_ = false;
    }

    /// Trainable leaf backed by caller storage. `value` is read on every
    /// forward(); gradients are added into `grad` by backward().
    Var parameter(const Tensor<T>& value, Tensor<T>& grad, std::string name) {
        if (grad.shape() != value.shape())
            throw ShapeError("parameter " + name + ": gradient buffer " + grad.shape().str() +
                             " does not match value " + value.shape().str());
        Node node;
        node.op = "parameter";
        node.name = std::move(name);
        node.trainable = true;
        node.source = &value;
        node.grad_sink = &grad;
        return push(std::move(node));
    }

    Var depthwise_conv3x3(Var x, Var kernels, int stride, std::string name = {}) {
        return op("depthwise_conv3x3", std::move(name), {x, kernels},
                  [=](Graph& g) { return xxnet::depthwise_conv3x3(g.val(x), g.val(kernels), stride); },
                  [=](Graph& g, const Tensor<T>& dy) {
                      Tensor<T> dx, dk;
                      depthwise_conv3x3_backward(g.val(x), g.val(kernels), stride, dy, &dx, &dk);
                      g.accumulate(x, std::move(dx));
                      g.accumulate(kernels, std::move(dk));
                  });
    }

    Var conv3x3(Var x, Var weights, int stride, std::string name = {}) {
        return op("conv3x3", std::move(name), {x, weights},
                  [=](Graph& g) { return xxnet::conv3x3(g.val(x), g.val(weights), stride); },
                  [=](Graph& g, const Tensor<T>& dy) {
                      Tensor<T> dx, dw;
                      conv3x3_backward(g.val(x), g.val(weights), stride, dy, &dx, &dw);
                      g.accumulate(x, std::move(dx));
                      g.accumulate(weights, std::move(dw));
                  });
    }

    Var grouped_pointwise_conv(Var x, Var weights, std::string name = {}) {
        return op("grouped_pointwise_conv", std::move(name), {x, weights},
                  [=](Graph& g) { return xxnet::grouped_pointwise_conv(g.val(x), g.val(weights)); },
                  [=](Graph& g, const Tensor<T>& dy) {
                      Tensor<T> dx, dw;
                      grouped_pointwise_conv_backward(g.val(x), g.val(weights), dy, &dx, &dw);
                      g.accumulate(x, std::move(dx));
                      g.accumulate(weights, std::move(dw));
                  });
    }

    Var channel_shuffle(Var x, std::size_t groups, std::string name = {}) {
        return op("channel_shuffle", std::move(name), {x},
                  [=](Graph& g) { return xxnet::channel_shuffle(g.val(x), groups); },
                  [=](Graph& g, const Tensor<T>& dy) { g.accumulate(x, channel_unshuffle(dy, groups)); });
    }

    Var tile_channels(Var x, std::size_t factor, std::string name = {}) {
        return op("tile_channels", std::move(name), {x},
                  [=](Graph& g) { return xxnet::tile_channels(g.val(x), factor); },
                  [=](Graph& g, const Tensor<T>& dy) {
                      g.accumulate(x, tile_channels_backward(dy, g.val(x).c()));
                  });
    }

    Var relu(Var x, std::string name = {}) {
        return op("relu", std::move(name), {x}, [=](Graph& g) { return xxnet::relu(g.val(x)); },
                  [=](Graph& g, const Tensor<T>& dy) { g.accumulate(x, relu_backward(g.val(x), dy)); });
    }

    /// `scale` and `shift` are (1, c, 1, 1) nodes; `stats` must outlive the graph.
    Var batch_norm(Var x, Var scale, Var shift, BatchNormStats<T>& stats, Mode mode, std::string name = {}) {
        auto cache = std::make_shared<BatchNormCache<T>>();
        BatchNormStats<T>* st = &stats;
        return op("batch_norm", std::move(name), {x, scale, shift},
                  [=](Graph& g) {
                      return xxnet::batch_norm(g.val(x), g.val(scale).data(), g.val(shift).data(), *st, mode,
                                               cache.get());
                  },
                  [=](Graph& g, const Tensor<T>& dy) {
                      Tensor<T> dx;
                      std::vector<T> ds, db;
                      batch_norm_backward(g.val(x), g.val(scale).data(), *cache, mode, dy, &dx, &ds, &db);
                      const Shape ps = g.val(scale).shape();
                      g.accumulate(x, std::move(dx));
                      g.accumulate(scale, Tensor<T>(ps, std::move(ds)));
                      g.accumulate(shift, Tensor<T>(ps, std::move(db)));
                  });
    }

    Var global_avg_pool(Var x, std::string name = {}) {
        return op("global_avg_pool", std::move(name), {x}, [=](Graph& g) { return xxnet::global_avg_pool(g.val(x)); },
                  [=](Graph& g, const Tensor<T>& dy) {
                      g.accumulate(x, global_avg_pool_backward(g.val(x).shape(), dy));
                  });
    }

    Var fully_connected(Var x, Var weights, Var bias, std::string name = {}) {
        return op("fully_connected", std::move(name), {x, weights, bias},
                  [=](Graph& g) { return xxnet::fully_connected(g.val(x), g.val(weights), g.val(bias)); },
                  [=](Graph& g, const Tensor<T>& dy) {
                      Tensor<T> dx, dw, db;
                      fully_connected_backward(g.val(x), g.val(weights), dy, &dx, &dw, &db);
                      g.accumulate(x, std::move(dx));
                      g.accumulate(weights, std::move(dw));
                      g.accumulate(bias, std::move(db));
                  });
    }

    /// Mean softmax cross-entropy; the node value is a (1,1,1,1) scalar.
    Var softmax_cross_entropy(Var logits, std::vector<int> labels, std::string name = {}) {
        auto probs = std::make_shared<Tensor<T>>();
        auto lab = std::make_shared<std::vector<int>>(std::move(labels));
        return op("softmax_cross_entropy", std::move(name), {logits},
                  [=](Graph& g) {
                      auto r = xxnet::softmax_cross_entropy<T>(g.val(logits), *lab);
                      *probs = std::move(r.probabilities);
                      return Tensor<T>(Shape{1, 1, 1, 1}, r.loss);
                  },
                  [=](Graph& g, const Tensor<T>& dy) {
                      g.accumulate(logits,
                                   softmax_cross_entropy_backward<T>(*probs, *lab, dy[0], g.val(logits).shape()));
                  });
    }

    /// Scalar sum of all elements.
    Var sum(Var x, std::string name = {}) {
        return op("sum", std::move(name), {x},
                  [=](Graph& g) {
                      T acc = 0;
                      for (T v : g.val(x).data()) acc += v;
                      return Tensor<T>(Shape{1, 1, 1, 1}, acc);
                  },
                  [=](Graph& g, const Tensor<T>& dy) { g.accumulate(x, Tensor<T>(g.val(x).shape(), dy[0])); });
    }

    /// Scalar sum of x * weights (elementwise); weights are a constant.
    Var weighted_sum(Var x, Tensor<T> weights, std::string name = {}) {
        auto w = std::make_shared<Tensor<T>>(std::move(weights));
        return op("weighted_sum", std::move(name), {x},
                  [=](Graph& g) {
                      require_shape(g.val(x).shape(), w->shape(), "weighted_sum");
                      return Tensor<T>(Shape{1, 1, 1, 1}, detail::dot<T>(g.val(x).data(), w->data()));
                  },
                  [=](Graph& g, const Tensor<T>& dy) {
                      Tensor<T> dx = *w;
                      for (auto& v : dx.data()) v *= dy[0];
                      g.accumulate(x, std::move(dx));
                  });
    }

    /// Evaluates every node in creation order and returns the last node's value.
    const Tensor<T>& forward() {
        if (nodes_.empty()) throw StateError("forward on an empty graph");
        for (std::size_t id = 0; id < nodes_.size(); ++id) {
            Node& node = nodes_[id];
            try {
                node.value = node.forward ? node.forward(*this) : *node.source;
            } catch (const ShapeError& e) {
                throw ShapeError("node #" + std::to_string(id) + " " + describe(node) + ": " + e.what());
            }
            node.grad = Tensor<T>();
        }
        forwarded_ = true;
        return nodes_.back().value;
    }

    const Tensor<T>& forward(Var in, Tensor<T> batch) {
        set_input(in, std::move(batch));
        return forward();
    }

    /// Propagates d(loss)/d(node) for every node the loss depends on.
    void backward(Var loss) {
        if (!forwarded_) throw StateError("backward called before forward");
        Node& root = at(loss);
        if (root.value.size() != 1)
            throw ShapeError("backward needs a scalar loss, node #" + std::to_string(loss.id) + " has shape " +
                             root.value.shape().str());
        for (auto& node : nodes_) node.grad = Tensor<T>();
        root.grad = Tensor<T>(root.value.shape(), T(1));
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            Node& node = nodes_[id];
            if (node.grad.empty()) continue;
            if (node.backward) node.backward(*this);
            if (node.grad_sink) {
                auto sink = node.grad_sink->data();
                auto g = node.grad.data();
                for (std::size_t i = 0; i < g.size(); ++i) sink[i] += g[i];
            }
        }
    }

    const Tensor<T>& value(Var v) const {
        if (!forwarded_) throw StateError("value read before forward");
        return at(v).value;
    }

    /// Gradient of the last backward() loss; empty if the node did not contribute.
    const Tensor<T>& grad(Var v) const { return at(v).grad; }

    const Node& node(Var v) const { return at(v); }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool forwarded() const noexcept { return forwarded_; }

private:
    using Forward = std::function<Tensor<T>(Graph&)>;
    using Backward = std::function<void(Graph&, const Tensor<T>&)>;

    Var push(Node node) {
        for (std::size_t in : node.inputs)
            if (in >= nodes_.size()) throw StateError("node input refers to a node that does not exist yet");
        nodes_.push_back(std::move(node));
        forwarded_ = false;
        return Var{nodes_.size() - 1};
    }

    Var op(const char* tag, std::string name, std::initializer_list<Var> ins, Forward fwd, Backward bwd) {
        Node node;
        node.op = tag;
        node.name = std::move(name);
        for (Var v : ins) node.inputs.push_back(v.id);
        node.forward = std::move(fwd);
        const std::size_t self = nodes_.size();
        node.backward = [self, bwd = std::move(bwd)](Graph& g) { bwd(g, g.nodes_[self].grad); };
        return push(std::move(node));
    }

    Node& at(Var v) {
        if (v.id >= nodes_.size()) throw StateError("unknown node #" + std::to_string(v.id));
        return nodes_[v.id];
    }
    const Node& at(Var v) const {
        if (v.id >= nodes_.size()) throw StateError("unknown node #" + std::to_string(v.id));
        return nodes_[v.id];
    }

    const Tensor<T>& val(Var v) const { return nodes_[v.id].value; }

    void accumulate(Var v, Tensor<T> g) {
        Node& node = nodes_[v.id];
        if (node.grad.empty()) {
            node.grad = std::move(g);
            return;
        }
        auto dst = node.grad.data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }

    static std::string describe(const Node& node) {
        return node.name.empty() ? "'" + node.op + "'" : "'" + node.op + "' (" + node.name + ")";
    }

    std::vector<Node> nodes_;
    std::vector<std::shared_ptr<Tensor<T>>> inputs_;
    bool forwarded_ = false;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

struct GradCheckReport {
    double max_rel_error = 0;
    std::size_t checked = 0;
    std::size_t worst_leaf = 0;
    std::size_t worst_index = 0;
    bool passed = false;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)
inline double gradient_rel_error(double analytic, double numeric) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    return std::abs(analytic - numeric) / scale;
}

/// Compares analytic gradients of every leaf against central differences.
///
/// `build(graph, leaves)` wires the op under test and returns its output
/// node. Non-scalar outputs are reduced with a fixed random projection so
/// that every output element carries a distinct weight.
template <class Build>
GradCheckReport finite_diff_check(Build&& build, std::vector<Tensor<double>> leaves, double tolerance,
                                  double step = 1e-5, std::uint64_t seed = 7) {
    std::vector<Tensor<double>> grads;
    for (const auto& leaf : leaves) grads.emplace_back(leaf.shape());

    Graph<double> graph;
    std::vector<Graph<double>::Var> vars;
    for (std::size_t i = 0; i < leaves.size(); ++i)
        vars.push_back(graph.parameter(leaves[i], grads[i], "leaf" + std::to_string(i)));
    auto out = build(graph, std::span<const Graph<double>::Var>(vars));
    graph.forward();
    auto loss = out;
    if (graph.value(out).size() != 1) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> dist(-1.0, 1.0);
        Tensor<double> proj(graph.value(out).shape());
        for (auto& v : proj.data()) v = dist(rng);
        loss = graph.weighted_sum(out, std::move(proj));
    }
    graph.forward();
    graph.backward(loss);

    GradCheckReport report;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto values = leaves[li].data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + step;
            const double up = graph.forward()[0];
            values[i] = saved - step;
            const double down = graph.forward()[0];
            values[i] = saved;
            const double numeric = (up - down) / (2 * step);
            const double err = gradient_rel_error(grads[li][i], numeric);
            ++report.checked;
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_leaf = li;
                report.worst_index = i;
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    return report;
}

/// Same as above with leaves drawn uniformly from [-1, 1] for the given shapes.
template <class Build>
GradCheckReport finite_diff_check(Build&& build, const std::vector<Shape>& shapes, double tolerance,
                                  std::uint64_t seed, double step = 1e-5) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<Tensor<double>> leaves;
    for (const auto& s : shapes) {
        Tensor<double> t(s);
        for (auto& v : t.data()) v = dist(rng);
        leaves.push_back(std::move(t));
    }
    return finite_diff_check(std::forward<Build>(build), std::move(leaves), tolerance, step, seed + 1);
}

}  // namespace xxnet
