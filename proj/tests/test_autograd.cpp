#include <gtest/gtest.h>

#include <cmath>

#include "gradient_cases.hpp"
#include "oracles.hpp"
#include "xxnet/kernels.hpp"
#include "xxnet/model.hpp"

using namespace xxnet;
using Var = Graph<double>::Var;

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
    static const auto cases = gradcases::all_cases();
    const auto& c = cases[GetParam()];
    const auto report = gradcases::run(c);
    EXPECT_GT(report.checked, 0u);
    EXPECT_LT(report.max_rel_error, c.tolerance)
        << c.name << ": worst leaf " << report.worst_leaf << " index " << report.worst_index;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, gradcases::all_cases().size()),
                         [](const auto& info) {
                             std::string name = gradcases::all_cases()[info.param].name;
                             for (auto& ch : name)
                                 if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                             return name + "_" + std::to_string(info.param);
                         });

TEST(Autograd, EveryOpHasThreeShapes) {
    std::map<std::string, int> per_op;
    for (const auto& c : gradcases::all_cases()) ++per_op[c.name.substr(0, c.name.find(' '))];
    for (const char* op : {"depthwise_conv3x3", "conv3x3", "grouped_pointwise_conv", "channel_shuffle", "tile_channels",
                           "relu", "global_avg_pool", "fully_connected", "softmax_cross_entropy", "sum"})
        EXPECT_GE(per_op[op], 3) << op;
    EXPECT_GE(per_op["batch_norm"], 6);
}

TEST(Autograd, GroupedPointwiseSixChannelsThreeGroups) {
    const auto r = finite_diff_check(
        [](Graph<double>& g, std::span<const Var> v) { return g.grouped_pointwise_conv(v[0], v[1]); },
        std::vector<Shape>{{2, 6, 3, 3}, {3, 2, 2, 1}}, 1e-4, 101);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Autograd, BatchNormTrainTwoChannelsBatchFour) {
    BatchNormStats<double> stats(2);
    const auto r = finite_diff_check(
        [&](Graph<double>& g, std::span<const Var> v) { return g.batch_norm(v[0], v[1], v[2], stats, Mode::Train); },
        std::vector<Shape>{{4, 2, 3, 3}, {1, 2, 1, 1}, {1, 2, 1, 1}}, 1e-4, 102);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Autograd, SoftmaxCrossEntropyTenClasses) {
    const auto r = finite_diff_check(
        [](Graph<double>& g, std::span<const Var> v) { return g.softmax_cross_entropy(v[0], {2, 7, 0}); },
        std::vector<Shape>{{3, 10, 1, 1}}, 1e-6, 103);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

// ---------------------------------------------------------------------------
// Forward/backward semantics.

TEST(Graph, SingleRelu) {
    Graph<double> g;
    auto x = g.input(Tensor<double>(1, 1, 1, 1, -1.0));
    g.relu(x);
    EXPECT_EQ(g.forward()[0], 0.0);
}

TEST(Graph, DepthwiseThenPointwiseIdentityPassesThrough) {
    const auto x = oracle::random_tensor<double>({2, 4, 3, 3}, 30);
    Tensor<double> k(4, 1, 3, 3), w(1, 4, 4, 1);
    for (std::size_t c = 0; c < 4; ++c) {
        k(c, 0, 1, 1) = 1.0;
        w(0, c, c, 0) = 1.0;
    }
    Tensor<double> gk(k.shape()), gw(w.shape());
    Graph<double> g;
    auto in = g.input(x);
    auto y = g.depthwise_conv3x3(in, g.parameter(k, gk, "dw"), 1);
    g.grouped_pointwise_conv(y, g.parameter(w, gw, "pw"));
    EXPECT_EQ(g.forward(), x);
}

TEST(Graph, SumOfPositiveReluHasUnitGradient) {
    const auto x = oracle::random_tensor<double>({2, 3, 2, 2}, 31, 0.1, 2.0);
    Tensor<double> gx(x.shape());
    Graph<double> g;
    auto loss = g.sum(g.relu(g.parameter(x, gx, "x")));
    g.forward();
    g.backward(loss);
    for (double v : gx.data()) EXPECT_EQ(v, 1.0);
}

TEST(Graph, SumOfShuffleHasUnitGradient) {
    const auto x = oracle::random_tensor<double>({1, 6, 2, 2}, 32);
    Tensor<double> gx(x.shape());
    Graph<double> g;
    auto loss = g.sum(g.channel_shuffle(g.parameter(x, gx, "x"), 3));
    g.forward();
    g.backward(loss);
    for (double v : gx.data()) EXPECT_EQ(v, 1.0);
}

TEST(Graph, BackwardBeforeForwardThrows) {
    Graph<double> g;
    auto loss = g.sum(g.input(Tensor<double>(1, 1, 1, 1)));
    EXPECT_THROW(g.backward(loss), StateError);
}

TEST(Graph, BackwardNeedsScalar) {
    Graph<double> g;
    auto y = g.relu(g.input(Tensor<double>(1, 2, 1, 1)));
    g.forward();
    EXPECT_THROW(g.backward(y), ShapeError);
}

TEST(Graph, ShapeErrorNamesTheNode) {
    Graph<double> g;
    Tensor<double> w(2, 1, 1, 1), gw(w.shape());
    g.grouped_pointwise_conv(g.input(Tensor<double>(1, 3, 2, 2)), g.parameter(w, gw, "w"), "mixer");
    try {
        g.forward();
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("mixer"), std::string::npos) << e.what();
    }
}

TEST(Graph, ParameterGradientsAccumulate) {
    const auto x = oracle::random_tensor<double>({1, 2, 2, 2}, 33);
    Tensor<double> gx(x.shape());
    Graph<double> g;
    auto loss = g.sum(g.parameter(x, gx, "x"));
    g.forward();
    g.backward(loss);
    g.backward(loss);
    for (double v : gx.data()) EXPECT_EQ(v, 2.0);
}

// ---------------------------------------------------------------------------
// Structural gradient properties.

namespace {

// Gradient of <weights, op(x)> with respect to x.
template <class Op>
Tensor<double> input_gradient(const Tensor<double>& x, const Tensor<double>& upstream, Op op) {
    Tensor<double> gx(x.shape());
    Graph<double> g;
    auto loss = g.weighted_sum(op(g, g.parameter(x, gx, "x")), upstream);
    g.forward();
    g.backward(loss);
    return gx;
}

}  // namespace

TEST(GradientProperties, ShuffleGradientIsInversePermutation) {
    const auto x = oracle::random_tensor<double>({2, 12, 2, 2}, 34);
    const auto up = oracle::random_tensor<double>({2, 12, 2, 2}, 35);
    for (std::size_t groups : {2u, 3u, 4u}) {
        const auto gx = input_gradient(x, up, [&](Graph<double>& g, Var v) { return g.channel_shuffle(v, groups); });
        // The inverse of a (groups, c/groups) transpose is the (c/groups, groups) transpose.
        EXPECT_EQ(gx, oracle::shuffle(up, 12 / groups));
    }
}

TEST(GradientProperties, TileGradientSumsOverTiles) {
    const auto x = oracle::random_tensor<double>({2, 3, 2, 2}, 36);
    const auto up = oracle::random_tensor<double>({2, 6, 2, 2}, 37);
    const auto gx = input_gradient(x, up, [](Graph<double>& g, Var v) { return g.tile_channels(v, 2); });
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < 4; ++i)
                EXPECT_DOUBLE_EQ(gx.plane(n, c)[i], up.plane(n, c)[i] + up.plane(n, c + 3)[i]);
}

TEST(GradientProperties, OutOfGroupGradientsAreExactlyZero) {
    const std::size_t c = 8, groups = 4, gs = 2;
    const auto x = oracle::random_tensor<double>({2, c, 3, 3}, 38);
    const auto w = oracle::random_tensor<double>({groups, gs, gs, 1}, 39);
    // Upstream gradient only on the outputs of group 1.
    Tensor<double> up(2, c, 3, 3);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = gs; o < 2 * gs; ++o)
            for (auto& v : up.plane(n, o)) v = 1.0;
    Tensor<double> gx(x.shape()), gw(w.shape());
    Graph<double> g;
    auto y = g.grouped_pointwise_conv(g.parameter(x, gx, "x"), g.parameter(w, gw, "w"));
    auto loss = g.weighted_sum(y, up);
    g.forward();
    g.backward(loss);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < c; ++i) {
            const bool in_group = i / gs == 1;
            for (double v : gx.plane(n, i)) {
                if (in_group)
                    EXPECT_NE(v, 0.0);
                else
                    EXPECT_EQ(v, 0.0) << "input channel " << i;
            }
        }
    for (std::size_t grp = 0; grp < groups; ++grp)
        for (std::size_t o = 0; o < gs; ++o)
            for (std::size_t i = 0; i < gs; ++i) {
                if (grp == 1)
                    EXPECT_NE(gw(grp, o, i, 0), 0.0);
                else
                    EXPECT_EQ(gw(grp, o, i, 0), 0.0) << "group " << grp;
            }
}

// ---------------------------------------------------------------------------

TEST(ModelForward, V1x3LogitsShape) {
    Model<float> model(build(Family::V1x3O1, ShuffleCode::parse("xxx"), ReluMode::EndOnly), 1);
    const auto images = oracle::random_tensor<float>({1, 3, 32, 32}, 40);
    const auto logits = model.logits(images, Mode::Eval);
    EXPECT_EQ(logits.shape(), (Shape{1, 10, 1, 1}));
    for (float v : logits.data()) EXPECT_TRUE(std::isfinite(v));
}
