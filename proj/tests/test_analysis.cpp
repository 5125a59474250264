#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "influence_oracle.hpp"
#include "xxnet/analysis.hpp"
#include "xxnet/table2.hpp"

using namespace xxnet;

namespace {

const std::vector<std::string> kAllCodes = {"000", "00x", "0x0", "0xx", "x00", "x0x", "xx0", "xxx"};

NetworkSpec reference_network(Family f) {
    switch (f) {
        case Family::MobilenetV1: return build_mobilenet_v1(ReluMode::All);
        case Family::V1x1O3: return build_v1x1(ShuffleCode::parse("00x"), ReluMode::All);
        case Family::V1x2O2: return build_v1x2(ShuffleCode::parse("0xx"), ReluMode::All);
        default: return build_v1x3(ShuffleCode::parse("xxx"), ReluMode::All);
    }
}

// Published per-layer parameter counts, transcribed independently of the
// library's reference table.
const std::map<Family, std::vector<std::uint64_t>> kPublished = {
    {Family::MobilenetV1,
     {2336, 8768, 17536, 33920, 67840, 133376, 266752, 266752, 266752, 266752, 266752, 528896, 1057792}},
    {Family::V1x3O1, {1824, 5696, 5248, 13440, 14592, 43264, 37376, 37376, 37376, 37376, 37376, 102912, 107520}},
    {Family::V1x2O2, {1824, 5696, 5248, 13440, 14592, 43264, 37376, 37376, 37376, 37376, 37376, 102912, 107520}},
    {Family::V1x1O3, {2475, 3498, 6996, 12804, 13992, 48840, 51216, 51216, 51216, 51216, 51216, 97680, 102432}},
};
const std::map<Family, std::uint64_t> kPublishedTotals = {
    {Family::MobilenetV1, 3184224}, {Family::V1x3O1, 481376}, {Family::V1x2O2, 481376}, {Family::V1x1O3, 544797}};

}  // namespace

TEST(LayerParams, Mobilenet) {
    EXPECT_EQ(layer_params_mobilenet(32, 64, 3), 2336u);
    EXPECT_EQ(layer_params_mobilenet(512, 1024, 3), 528896u);
    EXPECT_EQ(layer_params_mobilenet(1, 1, 1), 2u);
}

TEST(LayerParams, Grouped) {
    EXPECT_EQ(layer_params_grouped(32, 64, 3, {8, 8, 8}), 1824u);
    EXPECT_EQ(layer_params_grouped(32, 64, 3, {8, 8, 8}), 32u * 9 + 24u * 64);
    EXPECT_EQ(layer_params_grouped(512, 1024, 3, {32, 32, 32}), 102912u);
    EXPECT_EQ(layer_params_grouped(512, 1024, 3, {32, 32, 32}), 512u * 9 + 96u * 1024);
    EXPECT_THROW(layer_params_grouped(1024, 1024, 3, {88}), ConfigError);
}

TEST(LayerParams, SingleFullGroupIsDense) {
    for (std::uint64_t n : {16u, 64u, 512u}) EXPECT_EQ(layer_params_grouped(n, n, 3, {n}), layer_params_mobilenet(n, n, 3));
}

class ReferenceTable : public ::testing::TestWithParam<Family> {};

TEST_P(ReferenceTable, EveryCellMatches) {
    const auto report = network_params(reference_network(GetParam()));
    const auto& published = kPublished.at(GetParam());
    ASSERT_EQ(report.layers.size(), kLayerCount);
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < kLayerCount; ++i) {
        EXPECT_EQ(report.layers[i].params, published[i]) << "layer " << i + 1;
        sum += report.layers[i].params;
    }
    EXPECT_EQ(report.total_params, sum);
    EXPECT_EQ(report.total_params, kPublishedTotals.at(GetParam()));
    EXPECT_TRUE(check_table2(report).ok()) << check_table2(report).detail;
}

TEST_P(ReferenceTable, IndependentOfShuffleReluAndInputMode) {
    const Family f = GetParam();
    const auto base = network_params(reference_network(f)).total_params;
    const ReluMode relu = f == Family::MobilenetV1 ? ReluMode::PointwiseOnly : ReluMode::EndOnly;
    const char* code = f == Family::MobilenetV1 || f == Family::V1x1O3 ? "000" : "0x0";
    EXPECT_EQ(network_params(build(f, ShuffleCode::parse(code), relu, InputMode::Faithful224)).total_params, base);
}

INSTANTIATE_TEST_SUITE_P(Families, ReferenceTable, ::testing::ValuesIn(kAllFamilies),
                         [](const auto& info) { return to_string(info.param); });

TEST(ReferenceTable, CheckerReportsMismatches) {
    auto report = network_params(reference_network(Family::V1x3O1));
    report.layers[4].params += 1;
    report.total_params += 1;
    const auto check = check_table2(report);
    EXPECT_FALSE(check.ok());
    EXPECT_EQ(check.matching_layers, 12u);
    EXPECT_NE(check.detail.find("layer 5"), std::string::npos);
}

TEST(ReductionFactor, Examples) {
    const auto mob = network_params(reference_network(Family::MobilenetV1));
    const auto v3 = network_params(reference_network(Family::V1x3O1));
    const auto v1 = network_params(reference_network(Family::V1x1O3));
    EXPECT_GT(reduction_factor(mob, v3), 6.6);
    EXPECT_DOUBLE_EQ(reduction_factor(mob, v3), 3184224.0 / 481376.0);
    EXPECT_NEAR(reduction_factor(mob, v3), 6.6148, 1e-4);
    EXPECT_DOUBLE_EQ(reduction_factor(mob, mob), 1.0);
    EXPECT_NEAR(reduction_factor(mob, v1), 5.8447, 1e-4);
    ParamReport empty;
    empty.layers = mob.layers;
    EXPECT_THROW(reduction_factor(mob, empty), ConfigError);
}

TEST(Macs, Examples) {
    const auto faithful = build_mobilenet_v1(ReluMode::All, InputMode::Faithful224);
    const auto macs = mac_count(faithful);
    EXPECT_EQ(macs[0], 2336u * 112 * 112);
    // Final layer runs at 7x7.
    EXPECT_EQ(macs[12], 1057792u * 7 * 7);
    const auto tiny = mac_count(faithful, 1);
    const auto report = network_params(faithful);
    for (std::size_t i = 0; i < kLayerCount; ++i) EXPECT_EQ(tiny[i], report.layers[i].params);
}

TEST(Macs, TilingAddsNothing) {
    // A growth layer's MACs are its conv parameters times output pixels, the
    // same as a non-growth layer with the same parameter count.
    const auto s = build_v1x3(ShuffleCode::parse("xxx"), ReluMode::All);
    const auto macs = mac_count(s);
    const auto sides = layer_output_sizes(s, 32);
    for (std::size_t i = 0; i < kLayerCount; ++i) EXPECT_EQ(macs[i], layer_params(s.layers[i]) * sides[i] * sides[i]);
}

// ---------------------------------------------------------------------------
// Connectivity.

TEST(Influence, DenseStageIsFull) {
    const auto s = build_mobilenet_v1(ReluMode::All);
    for (const auto& c : connectivity_report(s)) {
        EXPECT_TRUE(c.fully_connected);
        EXPECT_DOUBLE_EQ(c.fraction, 1.0);
    }
}

TEST(Influence, L5BlockDiagonalWithoutShuffles) {
    const auto s = build_v1x3(ShuffleCode::parse("000"), ReluMode::All);
    const auto m = influence_matrix(s.layers[4]);
    ASSERT_EQ(m.rows(), 256u);
    ASSERT_EQ(m.cols(), 256u);
    for (std::size_t o = 0; o < 256; ++o) {
        EXPECT_EQ(m.row_count(o), 16u);
        for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(m.get(o, i), o / 16 == i / 16);
    }
}

TEST(Influence, L5FullWithAllShuffles) {
    const auto s = build_v1x3(ShuffleCode::parse("xxx"), ReluMode::All);
    EXPECT_TRUE(influence_matrix(s.layers[4]).all());
}

TEST(Influence, V1x1L7Fraction) {
    const auto s = build_v1x1(ShuffleCode::parse("000"), ReluMode::All);
    const auto c = connectivity(s.layers[6]);
    EXPECT_EQ(c.outputs, 528u);
    EXPECT_DOUBLE_EQ(c.fraction, 88.0 / 528.0);
}

TEST(Influence, LastShuffleRaisesFractionOnMultiStageLayers) {
    const auto none = connectivity_report(build_v1x3(ShuffleCode::parse("000"), ReluMode::All));
    const auto last = connectivity_report(build_v1x3(ShuffleCode::parse("00x"), ReluMode::All));
    // A shuffle after the final stage only permutes outputs, so reach per
    // layer is unchanged; it pays off in the next layer.
    for (std::size_t i = 0; i < kLayerCount; ++i) EXPECT_DOUBLE_EQ(last[i].fraction, none[i].fraction);
    const auto s0 = build_v1x3(ShuffleCode::parse("000"), ReluMode::All);
    const auto s1 = build_v1x3(ShuffleCode::parse("00x"), ReluMode::All);
    for (int l = 1; l < static_cast<int>(kLayerCount); ++l) {
        const auto a = influence_matrix(s0, l, l + 1);
        const auto b = influence_matrix(s1, l, l + 1);
        EXPECT_GT(b.count(), a.count()) << "layers " << l << ".." << l + 1;
    }
}

TEST(Influence, NoShuffleReachIsLargestGroup) {
    const auto s = build_v1x3(ShuffleCode::parse("000"), ReluMode::All);
    for (const auto& layer : s.layers) {
        const auto sizes = layer.plan.group_sizes();
        const std::size_t expected = std::min(*std::max_element(sizes.begin(), sizes.end()), layer.shape.in_channels);
        const auto m = influence_matrix(layer);
        for (std::size_t o = 0; o < m.rows(); ++o) ASSERT_EQ(m.row_count(o), expected) << "L" << layer.shape.index;
        EXPECT_FALSE(connectivity(layer).fully_connected);
    }
}

TEST(Influence, AllShufflesFullEveryLayer) {
    for (const auto& c : connectivity_report(build_v1x3(ShuffleCode::parse("xxx"), ReluMode::All)))
        EXPECT_TRUE(c.fully_connected) << "L" << c.layer;
}

TEST(Influence, TwoSquareRootStagesWithShuffleAlreadyFull) {
    // Boolean reach saturates after two sqrt(N) stages joined by a shuffle.
    GroupPlan plan;
    plan.stages = {{256, 256, 16, true}, {256, 256, 16, false}};
    EXPECT_TRUE(influence_matrix(plan, 256).all());
}

TEST(Influence, MultiLayerRange) {
    const auto s = build_v1x3(ShuffleCode::parse("000"), ReluMode::All);
    EXPECT_THROW(influence_matrix(s, 0, 2), ConfigError);
    EXPECT_THROW(influence_matrix(s, 3, 2), ConfigError);
    const auto one = influence_matrix(s, 5, 5);
    EXPECT_EQ(one.count(), influence_matrix(s.layers[4]).count());
}

class OracleEquivalence : public ::testing::TestWithParam<std::string> {};

TEST_P(OracleEquivalence, V1x3LayersUpTo512) {
    for (ReluMode relu : {ReluMode::All, ReluMode::EndOnly}) {
        const auto s = build_v1x3(ShuffleCode::parse(GetParam()), relu);
        for (const auto& layer : s.layers) {
            if (layer.shape.out_channels > 512) continue;
            const auto analytic = influence_matrix(layer);
            const auto measured = oracle::perturbation_reach(layer, 1000 + layer.shape.index);
            EXPECT_TRUE(oracle::same_matrix(analytic, measured))
                << "code " << GetParam() << " L" << layer.shape.index << ": " << analytic.count() << " vs "
                << measured.count();
        }
    }
}

INSTANTIATE_TEST_SUITE_P(AllMasks, OracleEquivalence, ::testing::ValuesIn(kAllCodes));

TEST(OracleEquivalence, OtherFamiliesAndWidths) {
    for (auto [f, code] : {std::pair{Family::V1x2O2, "0x0"}, {Family::V1x2O2, "0xx"}, {Family::V1x1O3, "00x"},
                           {Family::MobilenetV1, "000"}})
        for (double w : {0.25, 0.5}) {
            const auto s = build(f, ShuffleCode::parse(code), ReluMode::All, InputMode::Cifar32, w);
            for (const auto& layer : s.layers)
                EXPECT_TRUE(oracle::same_matrix(influence_matrix(layer), oracle::perturbation_reach(layer, 7)))
                    << to_string(f) << " " << code << " w" << w << " L" << layer.shape.index;
        }
}

TEST(Influence, MonotoneInShuffles) {
    for (std::size_t li = 0; li < kLayerCount; ++li)
        for (const auto& a : kAllCodes)
            for (const auto& b : kAllCodes) {
                bool subset = true;
                for (std::size_t k = 0; k < 3; ++k) subset = subset && (a[k] == '0' || b[k] == 'x');
                if (!subset) continue;
                const auto fa = connectivity(build_v1x3(ShuffleCode::parse(a), ReluMode::All).layers[li]).fraction;
                const auto fb = connectivity(build_v1x3(ShuffleCode::parse(b), ReluMode::All).layers[li]).fraction;
                EXPECT_LE(fa, fb) << a << " vs " << b << " L" << li + 1;
            }
}

TEST(Report, CsvShape) {
    const auto mob = network_params(reference_network(Family::MobilenetV1));
    const auto spec = reference_network(Family::V1x3O1);
    std::ostringstream os;
    write_report_csv(os, mob, network_params(spec), connectivity_report(spec));
    std::istringstream in(os.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "layer,mobilenet_params,family_params,macs,reach_fraction");
    std::size_t rows = 0;
    std::string last;
    while (std::getline(in, line)) {
        ++rows;
        last = line;
    }
    EXPECT_EQ(rows, kLayerCount + 1);
    EXPECT_EQ(last.rfind("total,3184224,481376,", 0), 0u) << last;
}
