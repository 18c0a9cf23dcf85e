#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "multifuse/compute_graph.hpp"
#include "multifuse/mmt1.hpp"
#include "multifuse/ops.hpp"

using namespace multifuse;
using multifuse::testing::grad_check;
using multifuse::testing::random_tensor;

namespace {

Tensor<double> vec(std::vector<double> v, bool grad = false)
{
    const std::size_t n = v.size();
    return Tensor<double>(Shape{n}, std::move(v), grad);
}

} // namespace

TEST(Dense, IdentityWeights)
{
    ComputeGraph<double> g;
    Tensor<double> W(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
    auto y = ops::dense(g, vec({3, -1}), W, vec({0, 0}));
    EXPECT_EQ(y[0], 3.0);
    EXPECT_EQ(y[1], -1.0);
}

TEST(Dense, DotProduct)
{
    ComputeGraph<double> g;
    Tensor<double> W(Shape{1, 2}, std::vector<double>{1, 2});
    auto y = ops::dense(g, vec({3, 4}), W, vec({0}));
    EXPECT_EQ(y.item(), 11.0);
}

TEST(Dense, ShapeMismatchIsContractError)
{
    ComputeGraph<double> g;
    Tensor<double> W(Shape{2, 3});
    EXPECT_THROW(ops::dense(g, vec({1, 2}), W, vec({0, 0})), ContractError);
}

TEST(Dense, GradientMatchesFiniteDifferences)
{
    Rng rng(11);
    auto x = random_tensor({7}, rng);
    auto W = random_tensor({5, 7}, rng);
    auto b = random_tensor({5}, rng);
    auto r = grad_check({x, W, b}, [&](ComputeGraph<double>& g) {
        auto y = ops::dense(g, x, W, b);
        // weighted sum so each output has a distinct upstream gradient
        Tensor<double> c(Shape{1, 5}, std::vector<double>{0.3, -1.2, 0.7, 2.0, -0.4});
        return ops::dense(g, y, c, vec({0.0}));
    });
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Conv3d, ZeroKernelGivesZeroOutput)
{
    ComputeGraph<double> g;
    Rng rng(1);
    auto x = random_tensor({2, 4, 4, 4}, rng, -1, 1, false);
    Tensor<double> K(Shape{3, 2, 3, 3, 3});
    auto y = ops::conv3d(g, x, K, Tensor<double>(Shape{3}), 1, 1);
    ASSERT_EQ(y.shape(), (Shape{3, 4, 4, 4}));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv3d, UnitKernelScales)
{
    ComputeGraph<double> g;
    Rng rng(2);
    auto x = random_tensor({1, 3, 4, 5}, rng, -1, 1, false);
    Tensor<double> K(Shape{1, 1, 1, 1, 1}, 2.0);
    auto y = ops::conv3d(g, x, K, Tensor<double>(Shape{1}), 1, 0);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], 2.0 * x[i]);
}

TEST(Conv3d, OnesSummation)
{
    ComputeGraph<double> g;
    Tensor<double> x(Shape{1, 2, 2, 2}, 1.0);
    Tensor<double> K(Shape{1, 1, 2, 2, 2}, 1.0);
    auto y = ops::conv3d(g, x, K, Tensor<double>(Shape{1}), 1, 0);
    ASSERT_EQ(y.size(), 1u);
    EXPECT_EQ(y.item(), 8.0);
}

TEST(Conv3d, OutputBelowOneIsConfigError)
{
    ComputeGraph<double> g;
    Tensor<double> x(Shape{1, 2, 2, 2}, 1.0);
    Tensor<double> K(Shape{1, 1, 3, 3, 3}, 1.0);
    EXPECT_THROW(ops::conv3d(g, x, K, Tensor<double>(Shape{1}), 1, 0), ConfigError);
}

TEST(Conv3d, GradientMatchesFiniteDifferences)
{
    Rng rng(3);
    for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 1}, {1, 0}}) {
        auto x = random_tensor({2, 5, 4, 6}, rng);
        auto K = random_tensor({3, 2, 3, 3, 3}, rng);
        auto b = random_tensor({3}, rng);
        auto r = grad_check({x, K, b}, [&](ComputeGraph<double>& g) {
            auto y = ops::conv3d(g, x, K, b, stride, pad);
            Rng wr(99);
            auto w = random_tensor({1, y.size()}, wr, -1, 1, false);
            return ops::dense(g, ops::reshape(g, y, Shape{y.size()}), w, vec({0.0}));
        });
        EXPECT_LT(r.max_rel_error, 1e-6) << "stride " << stride << " pad " << pad;
    }
}

TEST(MaxPool3d, ConstantInput)
{
    ComputeGraph<double> g;
    Tensor<double> x(Shape{2, 4, 4, 4}, 0.25);
    auto y = ops::maxpool3d(g, x, 2, 2);
    ASSERT_EQ(y.shape(), (Shape{2, 2, 2, 2}));
    for (double v : y.data()) EXPECT_EQ(v, 0.25);
}

TEST(MaxPool3d, BlockMaximum)
{
    ComputeGraph<double> g;
    Tensor<double> x(Shape{1, 2, 2, 2}, std::vector<double>{3, 1, 8, 2, 5, 7, 4, 6});
    auto y = ops::maxpool3d(g, x, 2, 2);
    EXPECT_EQ(y.item(), 8.0);
}

TEST(MaxPool3d, WindowLargerThanInputIsConfigError)
{
    ComputeGraph<double> g;
    Tensor<double> x(Shape{1, 4, 1, 4}, 1.0);
    EXPECT_THROW(ops::maxpool3d(g, x, 2, 2), ConfigError);
}

TEST(MaxPool3d, TiesRouteGradientToFirstIndex)
{
    ComputeGraph<double> g;
    Tensor<double> x(Shape{1, 2, 2, 2}, 1.0, true);
    auto y = ops::maxpool3d(g, x, 2, 2);
    auto loss = ops::sum(g, y);
    g.backward(loss);
    EXPECT_EQ(x.grad()[0], 1.0);
    for (std::size_t i = 1; i < 8; ++i) EXPECT_EQ(x.grad()[i], 0.0);
}

TEST(MaxPool3d, GradientMatchesFiniteDifferences)
{
    Rng rng(4);
    // distinct values spaced well beyond eps
    std::vector<double> vals(2 * 6 * 4 * 5);
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.01 * static_cast<double>(i);
    rng.shuffle(vals);
    Tensor<double> x(Shape{2, 6, 4, 5}, vals, true);
    auto r = grad_check({x}, [&](ComputeGraph<double>& g) {
        auto y = ops::maxpool3d(g, x, 2, 2);
        Rng wr(5);
        auto w = random_tensor({1, y.size()}, wr, -1, 1, false);
        return ops::dense(g, ops::reshape(g, y, Shape{y.size()}), w, vec({0.0}));
    });
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Relu, Definition)
{
    ComputeGraph<double> g;
    auto y = ops::relu(g, vec({-1, 0, 2}));
    EXPECT_EQ(y[0], 0.0);
    EXPECT_EQ(y[1], 0.0);
    EXPECT_EQ(y[2], 2.0);
}

namespace {

// Backprop a chosen upstream gradient through one ReLU.
std::vector<double> relu_backward(ReluBackwardMode mode, std::vector<double> input,
                                  std::vector<double> upstream)
{
    ComputeGraph<double> g;
    g.set_relu_mode(mode);
    auto x = vec(input, true);
    auto y = ops::relu(g, x);
    const std::size_t n = upstream.size();
    auto loss = ops::dense(g, y, Tensor<double>(Shape{1, n}, upstream), vec({0.0}));
    g.backward(loss);
    return {x.grad().begin(), x.grad().end()};
}

} // namespace

TEST(Relu, StandardBackwardOnPositiveInputIsIdentity)
{
    auto gr = relu_backward(ReluBackwardMode::Standard, {1, 2, 3}, {-1, 0.5, 4});
    EXPECT_EQ(gr, (std::vector<double>{-1, 0.5, 4}));
}

TEST(Relu, GuidedBlocksNegativeUpstream)
{
    auto gr = relu_backward(ReluBackwardMode::Guided, {2, 5}, {-1, 3});
    EXPECT_EQ(gr, (std::vector<double>{0, 3}));
}

TEST(Relu, ModeDefinitions)
{
    EXPECT_EQ(relu_backward(ReluBackwardMode::Standard, {-2}, {5})[0], 0.0);
    EXPECT_EQ(relu_backward(ReluBackwardMode::Guided, {2}, {-5})[0], 0.0);
    EXPECT_EQ(relu_backward(ReluBackwardMode::Guided, {-2}, {5})[0], 0.0);
    // gradient-only variant ignores the forward mask
    EXPECT_EQ(relu_backward(ReluBackwardMode::GuidedGradientOnly, {-2}, {5})[0], 5.0);
    EXPECT_EQ(relu_backward(ReluBackwardMode::GuidedGradientOnly, {2}, {-5})[0], 0.0);
}

TEST(Relu, ModeChangeDuringBackwardIsUsageError)
{
    ComputeGraph<double> g;
    auto x = vec({1.0, -1.0}, true);
    auto loss = ops::sum(g, ops::relu(g, x));
    g.set_relu_hook([&](std::span<const double>) { g.set_relu_mode(ReluBackwardMode::Guided); });
    EXPECT_THROW(g.backward(loss), UsageError);
    EXPECT_FALSE(g.in_backward());
    EXPECT_NO_THROW(g.set_relu_mode(ReluBackwardMode::Guided));
}

namespace {

struct Mlp {
    std::vector<Tensor<double>> W, b;
};

Mlp random_mlp(Rng& rng, std::vector<std::size_t> widths, double lo, double hi)
{
    Mlp m;
    for (std::size_t i = 1; i < widths.size(); ++i) {
        m.W.push_back(random_tensor({widths[i], widths[i - 1]}, rng, lo, hi));
        m.b.push_back(random_tensor({widths[i]}, rng, lo, hi));
    }
    return m;
}

Tensor<double> run_mlp(ComputeGraph<double>& g, const Mlp& m, Tensor<double> h)
{
    for (std::size_t i = 0; i < m.W.size(); ++i) h = ops::relu(g, ops::dense(g, h, m.W[i], m.b[i]));
    return ops::sum(g, h);
}

} // namespace

TEST(Relu, GuidedEqualsStandardOnAllPositiveNetwork)
{
    Rng rng(6);
    auto m = random_mlp(rng, {6, 8, 8, 4}, 0.01, 1.0);
    auto x = random_tensor({6}, rng, 0.1, 1.0);
    std::vector<std::vector<double>> grads;
    for (auto mode : {ReluBackwardMode::Standard, ReluBackwardMode::Guided}) {
        x.zero_grad();
        ComputeGraph<double> g;
        g.set_relu_mode(mode);
        g.set_track_parameters(false);
        auto loss = run_mlp(g, m, x);
        g.backward(loss);
        grads.emplace_back(x.grad().begin(), x.grad().end());
    }
    for (std::size_t i = 0; i < grads[0].size(); ++i) EXPECT_EQ(grads[0][i], grads[1][i]);
}

TEST(Relu, GuidedGradientsNonNegativeAfterEveryRelu)
{
    Rng rng(7);
    auto m = random_mlp(rng, {10, 16, 16, 16, 3}, -1.0, 1.0);
    auto x = random_tensor({10}, rng);
    ComputeGraph<double> g;
    g.set_relu_mode(ReluBackwardMode::Guided);
    std::size_t calls = 0;
    double min_seen = 0.0;
    g.set_relu_hook([&](std::span<const double> gr) {
        ++calls;
        for (double v : gr) min_seen = std::min(min_seen, v);
    });
    // signed readout so upstream gradients have both signs
    Tensor<double> h = x;
    for (std::size_t i = 0; i < m.W.size(); ++i) h = ops::relu(g, ops::dense(g, h, m.W[i], m.b[i]));
    auto loss = ops::dense(g, h, Tensor<double>(Shape{1, 3}, std::vector<double>{1, -2, 0.5}), vec({0}));
    g.backward(loss);
    EXPECT_EQ(calls, m.W.size());
    EXPECT_GE(min_seen, 0.0);
}

TEST(Softmax, Symmetric)
{
    ComputeGraph<double> g;
    auto p = ops::softmax(g, vec({0, 0}));
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, Analytic)
{
    ComputeGraph<double> g;
    auto p = ops::softmax(g, vec({std::log(3.0), 0}));
    EXPECT_NEAR(p[0], 0.75, 1e-15);
    EXPECT_NEAR(p[1], 0.25, 1e-15);
}

TEST(Softmax, RandomOutputsAreDistributions)
{
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        ComputeGraph<double> g;
        auto x = random_tensor({1 + rng.below(9)}, rng, -30, 30, false);
        auto p = ops::softmax(g, x);
        double s = 0;
        for (double v : p.data()) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Softmax, CrossEntropyGradientIsPMinusOneHot)
{
    Rng rng(9);
    auto z = random_tensor({4}, rng, -2, 2);
    ComputeGraph<double> g;
    auto loss = ops::weighted_cross_entropy(g, z, 2, 1.0);
    g.backward(loss);
    ComputeGraph<double> g2;
    auto p = ops::softmax(g2, z.detached());
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(z.grad()[i], p[i] - (i == 2 ? 1.0 : 0.0), 1e-14);
    }
    auto r = grad_check({z}, [&](ComputeGraph<double>& gg) { return ops::weighted_cross_entropy(gg, z, 2, 1.0); });
    EXPECT_LT(r.max_rel_error, 1e-6);
    auto r2 = grad_check({z}, [&](ComputeGraph<double>& gg) {
        auto pr = ops::softmax(gg, z);
        return ops::select(gg, pr, 2);
    });
    EXPECT_LT(r2.max_rel_error, 1e-6);
}

TEST(Backward, SumGivesOnes)
{
    Rng rng(10);
    auto x = random_tensor({3, 4}, rng);
    ComputeGraph<double> g;
    auto loss = ops::sum(g, x);
    g.backward(loss);
    for (double v : x.grad()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, DenseReluSumMatchesFiniteDifferences)
{
    Rng rng(12);
    auto x = random_tensor({6}, rng);
    auto W = random_tensor({9, 6}, rng);
    auto b = random_tensor({9}, rng);
    auto r = grad_check({x, W, b}, [&](ComputeGraph<double>& g) {
        return ops::sum(g, ops::relu(g, ops::dense(g, x, W, b)));
    });
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Backward, RepeatedCallsWithResetAreIdentical)
{
    Rng rng(13);
    auto m = random_mlp(rng, {5, 7, 3}, -1, 1);
    auto x = random_tensor({5}, rng);
    ComputeGraph<double> g;
    auto loss = run_mlp(g, m, x);
    g.backward(loss);
    std::vector<double> first(m.W[0].grad().begin(), m.W[0].grad().end());
    m.W[0].zero_grad();
    g.backward(loss);
    std::vector<double> second(m.W[0].grad().begin(), m.W[0].grad().end());
    EXPECT_EQ(first, second);
}

TEST(Backward, NonScalarLossIsUsageError)
{
    ComputeGraph<double> g;
    auto x = vec({1, 2}, true);
    auto y = ops::relu(g, x);
    EXPECT_THROW(g.backward(y), UsageError);
}

TEST(Backward, EveryNodeVisitedOnceInTopologicalOrder)
{
    Rng rng(14);
    auto m = random_mlp(rng, {4, 4, 2}, -1, 1);
    ComputeGraph<double> g;
    auto loss = run_mlp(g, m, random_tensor({4}, rng));
    const auto& nodes = g.nodes();
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        for (auto p : nodes[i].parents) EXPECT_LT(p, i);
    }
    std::size_t visits = 0;
    g.set_relu_hook([&](std::span<const double>) { ++visits; });
    g.backward(loss);
    EXPECT_EQ(visits, 2u);
}

TEST(Backward, RandomComposedNetworksMatchFiniteDifferences)
{
    Rng rng(15);
    for (int trial = 0; trial < 6; ++trial) {
        // conv -> relu -> pool -> dense -> relu -> dense -> CE, under 10k parameters
        const std::size_t c1 = 1 + rng.below(3), c2 = 1 + rng.below(3);
        auto x = random_tensor({c1, 6, 6, 6}, rng);
        auto K = random_tensor({c2, c1, 3, 3, 3}, rng, -0.5, 0.5);
        auto kb = random_tensor({c2}, rng, -0.1, 0.1);
        const std::size_t flat = c2 * 27;
        auto W1 = random_tensor({8, flat}, rng, -0.5, 0.5);
        auto b1 = random_tensor({8}, rng);
        auto W2 = random_tensor({2, 8}, rng);
        auto b2 = random_tensor({2}, rng);
        auto r = grad_check({x, K, kb, W1, b1, W2, b2}, [&](ComputeGraph<double>& g) {
            auto h = ops::relu(g, ops::conv3d(g, x, K, kb, 1, 1));
            h = ops::maxpool3d(g, h, 2, 2);
            h = ops::relu(g, ops::dense(g, ops::reshape(g, h, Shape{h.size()}), W1, b1));
            auto z = ops::dense(g, h, W2, b2);
            return ops::weighted_cross_entropy(g, z, trial % 2, 1.3);
        });
        EXPECT_LT(r.max_rel_error, 1e-4) << "trial " << trial;
    }
}

TEST(Forward, BitwiseDeterministic)
{
    Rng rng(16);
    auto x = random_tensor({2, 8, 8, 8}, rng, 0, 1, false);
    auto K = random_tensor({4, 2, 3, 3, 3}, rng, -1, 1, false);
    auto b = random_tensor({4}, rng, -1, 1, false);
    std::vector<double> first;
    for (int rep = 0; rep < 2; ++rep) {
        ComputeGraph<double> g;
        auto y = ops::maxpool3d(g, ops::relu(g, ops::conv3d(g, x, K, b, 1, 1)), 2, 2);
        std::vector<double> v(y.data().begin(), y.data().end());
        if (rep == 0) first = v;
        else EXPECT_EQ(0, std::memcmp(first.data(), v.data(), v.size() * sizeof(double)));
    }
}

TEST(Forward, NonFiniteGuard)
{
    ComputeGraph<double> g;
    g.set_check_finite(true);
    Tensor<double> W(Shape{1, 1}, std::vector<double>{std::numeric_limits<double>::infinity()});
    EXPECT_THROW(ops::dense(g, vec({1.0}), W, vec({0.0})), NumericError);
}

TEST(Mmt1, HeaderLayout)
{
    const auto path = std::filesystem::temp_directory_path() / "mf_header.mmt1";
    std::vector<float> vals{1.0f, -2.0f};
    mmt1::write<float>(path, Shape{2, 1}, vals);
    std::ifstream is(path, std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), {});
    ASSERT_EQ(bytes.size(), 4u + 2 + 1 + 1 + 2 * 8 + 2 * 4);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MMT1");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5], 0);
    EXPECT_EQ(bytes[6], 1); // float32
    EXPECT_EQ(bytes[7], 2); // ndim
    EXPECT_EQ(bytes[8], 2);
    for (int i = 9; i < 16; ++i) EXPECT_EQ(bytes[i], 0);
    EXPECT_EQ(bytes[16], 1);
    float f;
    std::memcpy(&f, bytes.data() + 24, 4);
    EXPECT_EQ(f, 1.0f);
    std::filesystem::remove(path);
}

TEST(Mmt1, RandomRoundTripIsBitExact)
{
    Rng rng(17);
    const auto path = std::filesystem::temp_directory_path() / "mf_rt.mmt1";
    for (int trial = 0; trial < 20; ++trial) {
        Shape s;
        const std::size_t rank = 1 + rng.below(4);
        for (std::size_t i = 0; i < rank; ++i) s.push_back(1 + rng.below(5));
        std::vector<double> d(numel(s));
        for (auto& v : d) v = rng.normal() * 1e3;
        std::vector<std::int32_t> iv(numel(s));
        for (auto& v : iv) v = static_cast<std::int32_t>(rng.below(1000)) - 500;
        mmt1::write<double>(path, s, d);
        auto a = mmt1::read(path);
        EXPECT_EQ(a.dtype, mmt1::DType::Float64);
        EXPECT_EQ(a.shape, s);
        EXPECT_EQ(0, std::memcmp(a.f64.data(), d.data(), d.size() * 8));
        mmt1::write<std::int32_t>(path, s, iv);
        EXPECT_EQ(mmt1::read(path).i32, iv);
    }
    std::filesystem::remove(path);
}

TEST(Mmt1, RejectsCorruptFiles)
{
    const auto path = std::filesystem::temp_directory_path() / "mf_bad.mmt1";
    {
        std::ofstream os(path, std::ios::binary);
        os << "MMT2xxxx";
    }
    EXPECT_THROW(mmt1::read(path), IoError);
    std::vector<float> vals{1, 2, 3};
    mmt1::write<float>(path, Shape{3}, vals);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 2);
    EXPECT_THROW(mmt1::read(path), IoError);
    std::filesystem::remove(path);
}
