#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "multifuse/attribution.hpp"

using namespace multifuse;
using multifuse::testing::random_input;
using multifuse::testing::tiny_config;

namespace {

AttributionMap random_map(Modality m, Shape shape, Rng& rng, const std::string& subject)
{
    AttributionMap a;
    a.modality = m;
    a.subject = subject;
    a.shape = shape;
    a.values.resize(numel(shape));
    for (auto& v : a.values) v = rng.uniform(-1, 1);
    return a;
}

RegionTable scores(Modality m, const std::vector<double>& w)
{
    RegionTable t;
    t.modality = m;
    for (std::size_t i = 0; i < w.size(); ++i) t.rows.push_back({i, "r" + std::to_string(i), w[i], w[i], 0, 0, 0});
    return t;
}

std::vector<double> flat_params(const FusionModel<double>& m)
{
    std::vector<double> out;
    for (const auto& p : m.parameters())
        for (double v : p.tensor.data()) out.push_back(v);
    return out;
}

} // namespace

TEST(Guided, EqualsStandardOnAllPositiveVolumeNetwork)
{
    const auto mc = ModelConfig::unimodal(tiny_config(), BranchKind::Volume);
    FusionModel<double> model(mc, 3);
    for (auto& p : model.parameters())
        for (auto& v : p.tensor.data()) v = std::abs(v) + 0.01;
    Rng rng(4);
    for (int t = 0; t < 5; ++t) {
        const auto in = random_input<double>(mc, rng);
        const auto g = guided_attribution(model, in, Label::Pos, "s", ReluBackwardMode::Guided);
        const auto s = guided_attribution(model, in, Label::Pos, "s", ReluBackwardMode::Standard);
        ASSERT_EQ(g.size(), 1u);
        double mass = 0;
        for (std::size_t i = 0; i < g[0].values.size(); ++i) {
            EXPECT_NEAR(g[0].values[i], s[0].values[i], 1e-10);
            mass += std::abs(s[0].values[i]);
        }
        EXPECT_GT(mass, 0.0);
    }
}

TEST(Guided, ReluBackwardGradientsAreNonNegative)
{
    const auto mc = tiny_config();
    FusionModel<double> model(mc, 5);
    Rng rng(6);
    std::size_t seen = 0;
    double lowest = 0;
    auto hook = [&](std::span<const double> gr) {
        for (double v : gr) {
            lowest = std::min(lowest, v);
            ++seen;
        }
    };
    for (int t = 0; t < 5; ++t) {
        for (Label target : {Label::Pos, Label::Neg})
            guided_attribution(model, random_input<double>(mc, rng), target, "s", ReluBackwardMode::Guided, hook);
    }
    EXPECT_GT(seen, 0u);
    EXPECT_GE(lowest, 0.0);
}

TEST(Guided, ZeroWeightsGiveZeroMaps)
{
    const auto mc = tiny_config();
    FusionModel<double> model(mc, 7);
    for (auto& p : model.parameters())
        for (auto& v : p.tensor.data()) v = 0;
    Rng rng(8);
    for (const auto& m : guided_attribution(model, random_input<double>(mc, rng), Label::Pos))
        for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(Guided, MapShapesFollowInputsAndModelIsUntouched)
{
    const auto mc = tiny_config();
    FusionModel<double> model(mc, 9);
    Rng rng(10);
    const auto before = flat_params(model);
    for (auto& p : model.parameters()) p.tensor.zero_grad();
    const auto maps = guided_attribution(model, random_input<double>(mc, rng), Label::Pos, "sub-1");
    ASSERT_EQ(maps.size(), 3u);
    EXPECT_EQ(maps[0].modality, Modality::Volume);
    EXPECT_EQ(maps[0].shape, (Shape{8, 8, 8}));
    EXPECT_EQ(maps[1].modality, Modality::Func);
    EXPECT_EQ(maps[1].shape, (Shape{6}));
    EXPECT_EQ(maps[2].shape, (Shape{6}));
    for (const auto& m : maps) {
        EXPECT_EQ(m.subject, "sub-1");
        EXPECT_EQ(m.values.size(), numel(m.shape));
    }
    EXPECT_EQ(flat_params(model), before);
    for (const auto& p : model.parameters())
        for (double g : p.tensor.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Guided, RepeatedRunsAreBitwiseIdentical)
{
    const auto mc = tiny_config();
    FusionModel<double> model(mc, 11);
    Rng rng(12);
    const auto in = random_input<double>(mc, rng);
    const auto a = guided_attribution(model, in, Label::Pos), b = guided_attribution(model, in, Label::Pos);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k].values, b[k].values);
}

TEST(Average, IdentitySymmetryAndOracle)
{
    Rng rng(13);
    const auto m = random_map(Modality::Func, {7}, rng, "a");
    EXPECT_EQ(average_positive_map({m}, {"a"}).values, m.values);

    auto neg = m;
    neg.subject = "b";
    for (auto& v : neg.values) v = -v;
    for (double v : average_positive_map({m, neg}, {"a", "b"}).values) EXPECT_EQ(v, 0.0);

    std::vector<AttributionMap> maps;
    for (int i = 0; i < 8; ++i) maps.push_back(random_map(Modality::Volume, {3, 4, 5}, rng, "s" + std::to_string(i)));
    const std::set<std::string> ids{"s0", "s2", "s3", "s5", "s7"};
    const auto avg = average_positive_map(maps, ids);
    EXPECT_EQ(avg.subject, "mean");
    for (std::size_t v = 0; v < avg.values.size(); ++v) {
        double s = 0;
        for (int i : {0, 2, 3, 5, 7}) s += maps[static_cast<std::size_t>(i)].values[v];
        EXPECT_NEAR(avg.values[v], s / 5, 1e-12);
    }
    EXPECT_THROW(average_positive_map(maps, {}), ContractError);
    EXPECT_THROW(average_positive_map(maps, {"nobody"}), ContractError);
    maps[2].shape = {60};
    EXPECT_THROW(average_positive_map(maps, ids), ContractError);
}

TEST(RoiAggregate, BucketingOracleAndConservation)
{
    const auto atlas = generate_atlas(3, {16, 16, 16});
    Rng rng(14);
    const auto m = random_map(Modality::Volume, {16, 16, 16}, rng, "x");
    const auto t = roi_aggregate(m, atlas);
    ASSERT_EQ(t.rows.size(), atlas.n_rois);
    const auto counts = atlas.voxel_counts();
    double total = 0, regions = t.background;
    for (std::size_t r = 1; r <= atlas.n_rois; ++r) {
        double raw = 0;
        for (std::size_t i = 0; i < atlas.labels.size(); ++i)
            if (atlas.labels[i] == static_cast<int>(r)) raw += m.values[i];
        EXPECT_EQ(t.rows[r - 1].raw, raw) << "roi " << r;
        EXPECT_NEAR(t.rows[r - 1].weighted, raw / static_cast<double>(counts[r]), 1e-15);
        EXPECT_EQ(t.rows[r - 1].name, atlas.names[r - 1]);
        regions += t.rows[r - 1].raw;
    }
    for (double v : m.values) total += v;
    EXPECT_NEAR(regions, total, 1e-9);
}

TEST(RoiAggregate, UniformAndLocalMaps)
{
    const auto atlas = generate_atlas(4, {16, 16, 16});
    AttributionMap m;
    m.modality = Modality::Volume;
    m.shape = {16, 16, 16};
    m.values.assign(atlas.voxels(), 0.25);
    for (const auto& row : roi_aggregate(m, atlas).rows) EXPECT_DOUBLE_EQ(row.weighted, 0.25);

    std::fill(m.values.begin(), m.values.end(), 0.0);
    for (std::size_t i = 0; i < atlas.labels.size(); ++i)
        if (atlas.labels[i] == 3) m.values[i] = 1.5;
    const auto t = roi_aggregate(m, atlas);
    for (const auto& row : t.rows) {
        if (row.index == 2) {
            EXPECT_GT(row.raw, 0.0);
        } else {
            EXPECT_EQ(row.raw, 0.0);
        }
    }
    m.shape = {16, 16, 8};
    EXPECT_THROW(roi_aggregate(m, atlas), ContractError);
}

TEST(RoiAggregate, AveragingCommutesWithAggregation)
{
    const auto atlas = generate_atlas(5, {16, 16, 16});
    Rng rng(15);
    std::vector<AttributionMap> maps;
    std::set<std::string> ids;
    for (int i = 0; i < 6; ++i) {
        maps.push_back(random_map(Modality::Volume, {16, 16, 16}, rng, "s" + std::to_string(i)));
        ids.insert("s" + std::to_string(i));
    }
    const auto a = roi_aggregate(average_positive_map(maps, ids), atlas);
    std::vector<double> b(atlas.n_rois, 0.0);
    for (const auto& m : maps) {
        const auto t = roi_aggregate(m, atlas);
        for (std::size_t r = 0; r < b.size(); ++r) b[r] += t.rows[r].weighted / 6.0;
    }
    for (std::size_t r = 0; r < b.size(); ++r) EXPECT_NEAR(a.rows[r].weighted, b[r], 1e-12);
}

TEST(Percentages, WithinAndAcrossSumToHundred)
{
    Rng rng(16);
    std::vector<RegionTable> tabs;
    for (std::size_t n : {56u, 53u, 84u}) {
        std::vector<double> w(n);
        for (auto& v : w) v = rng.uniform(-0.5, 1.0);
        tabs.push_back(scores(Modality::Volume, w));
    }
    percentages(tabs);
    double across = 0;
    for (const auto& t : tabs) {
        double within = 0, signed_abs = 0;
        for (const auto& r : t.rows) {
            within += r.pct_within;
            across += r.pct_across;
            signed_abs += std::abs(r.pct_within_signed);
            EXPECT_GE(r.pct_within, 0.0);
            if (r.weighted < 0) {
                EXPECT_EQ(r.pct_within, 0.0);
                EXPECT_LT(r.pct_within_signed, 0.0);
            }
        }
        EXPECT_NEAR(within, 100.0, 1e-6);
        EXPECT_NEAR(signed_abs, 100.0, 1e-6);
        EXPECT_FALSE(t.zero_mass);
    }
    EXPECT_NEAR(across, 100.0, 1e-6);
}

TEST(Percentages, DegenerateMasses)
{
    std::vector<RegionTable> tabs{scores(Modality::Volume, {0, 3, 0}), scores(Modality::Func, {1, 1, 1}),
                                  scores(Modality::Struct, {0, -2, 0})};
    percentages(tabs);
    EXPECT_DOUBLE_EQ(tabs[0].rows[1].pct_within, 100.0);
    double across[3] = {0, 0, 0};
    for (std::size_t t = 0; t < 3; ++t)
        for (const auto& r : tabs[t].rows) across[t] += r.pct_across;
    EXPECT_NEAR(across[0], 50.0, 1e-12);
    EXPECT_NEAR(across[1], 50.0, 1e-12);
    EXPECT_EQ(across[2], 0.0);
    EXPECT_TRUE(tabs[2].zero_mass);
    for (const auto& r : tabs[2].rows) EXPECT_EQ(r.pct_within, 0.0);
}

TEST(TopK, SortOracleTiesAndRescaling)
{
    Rng rng(17);
    std::vector<double> w(40);
    for (auto& v : w) v = rng.uniform(0, 1);
    std::vector<RegionTable> tabs{scores(Modality::Func, w)};
    percentages(tabs);
    const auto top = top_k(tabs[0], 10);
    std::vector<std::size_t> order(w.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    EXPECT_EQ(top, std::vector<std::size_t>(order.begin(), order.begin() + 10));
    EXPECT_EQ(top_k(tabs[0], 40), order);

    auto scaled = w;
    for (auto& v : scaled) v *= 37.0;
    std::vector<RegionTable> tabs2{scores(Modality::Func, scaled)};
    percentages(tabs2);
    EXPECT_EQ(top_k(tabs2[0], 10), top);

    std::vector<RegionTable> flat{scores(Modality::Func, std::vector<double>(12, 0.5))};
    percentages(flat);
    EXPECT_EQ(top_k(flat[0], 4), (std::vector<std::size_t>{0, 1, 2, 3}));
    EXPECT_THROW(top_k(flat[0], 13), ContractError);
}

TEST(NodeTable, ScoresAreAttributionValues)
{
    AttributionMap m;
    m.modality = Modality::Struct;
    m.shape = {3};
    m.values = {0.5, -1, 2};
    const auto t = node_table(m, {"a", "b", "c"});
    ASSERT_EQ(t.rows.size(), 3u);
    EXPECT_EQ(t.rows[2].weighted, 2.0);
    EXPECT_EQ(t.rows[1].raw, -1.0);
    EXPECT_EQ(t.rows[0].name, "a");
    EXPECT_THROW(node_table(m, {"a"}), ContractError);
}
