#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mdseg/ops.hpp"

using namespace mdseg;

namespace {

// Six-nested-loop cross-correlation, written independently of the library.
Tensor reference_conv(const Tensor& x, const Tensor& k, const Tensor& b, int stride, int pad) {
    const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int kh = k.dim(0), kw = k.dim(1), co = k.dim(3);
    const int ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
    Tensor out(Shape{n, co, ho, wo});
    for (int s = 0; s < n; ++s)
        for (int o = 0; o < co; ++o)
            for (int y = 0; y < ho; ++y)
                for (int xx = 0; xx < wo; ++xx) {
                    double acc = b[o];
                    for (int i = 0; i < ci; ++i)
                        for (int dy = 0; dy < kh; ++dy)
                            for (int dx = 0; dx < kw; ++dx) {
                                const int iy = y * stride - pad + dy, ix = xx * stride - pad + dx;
                                if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                    acc += x.at(s, i, iy, ix) * k[((dy * kw + dx) * ci + i) * co + o];
                            }
                    out.at(s, o, y, xx) = acc;
                }
    return out;
}

// Swaps the c_in / c_out axes of a kh x kw x c_in x c_out kernel.
Tensor swap_channels(const Tensor& k) {
    const int kh = k.dim(0), kw = k.dim(1), ci = k.dim(2), co = k.dim(3);
    Tensor out(Shape{kh, kw, co, ci});
    for (int a = 0; a < kh * kw; ++a)
        for (int i = 0; i < ci; ++i)
            for (int o = 0; o < co; ++o) out[(a * co + o) * ci + i] = k[(a * ci + i) * co + o];
    return out;
}

// Plain scalar per-pixel cross-entropy.
double reference_xent(const Tensor& s, const LabelMap& l) {
    double total = 0;
    int count = 0;
    for (int n = 0; n < l.batch; ++n)
        for (int y = 0; y < l.height; ++y)
            for (int x = 0; x < l.width; ++x) {
                const int label = l.at(n, y, x);
                if (label == 255) continue;
                double z = 0;
                for (int c = 0; c < s.dim(1); ++c) z += std::exp(s.at(n, c, y, x));
                total += -std::log(std::exp(s.at(n, label, y, x)) / z);
                ++count;
            }
    return total / count;
}

} // namespace

// --- conv2d ---------------------------------------------------------------

TEST(Conv2d, WindowSumOfOnes) {
    const Tensor x(Shape{1, 1, 3, 3}, 1.0);
    const Tensor k(Shape{3, 3, 1, 1}, 1.0);
    const Tensor b = Tensor::from(Shape{1}, {0.5});
    const Tensor y = conv2d(x, k, b, {1, 0});
    ASSERT_EQ(y.size(), 1u);
    EXPECT_EQ(y[0], 9.5);
}

TEST(Conv2d, IdentityKernel) {
    std::mt19937_64 rng(1);
    const Tensor x = Tensor::normal(Shape{2, 1, 4, 5}, 0, 1, rng);
    const Tensor y = conv2d(x, Tensor(Shape{1, 1, 1, 1}, 1.0), Tensor(Shape{1}), {1, 0});
    EXPECT_TRUE(y.identical(x));
}

TEST(Conv2d, MatchesNestedLoopReference) {
    std::mt19937_64 rng(2);
    const Tensor x = Tensor::normal(Shape{1, 2, 5, 5}, 0, 1, rng);
    const Tensor k = Tensor::normal(Shape{3, 3, 2, 3}, 0, 1, rng);
    const Tensor b = Tensor::normal(Shape{3}, 0, 1, rng);
    const Tensor expected = reference_conv(x, k, b, 1, 1);
    EXPECT_LT(max_abs_diff(conv2d(x, k, b, {1, 1}), expected), 1e-12);
    EXPECT_LT(max_abs_diff(conv2d_direct(x, k, b, {1, 1}), expected), 1e-12);
}

TEST(Conv2d, LoweredPathMatchesDirectWithStride) {
    std::mt19937_64 rng(3);
    const Tensor x = Tensor::normal(Shape{2, 3, 7, 6}, 0, 1, rng);
    const Tensor k = Tensor::normal(Shape{3, 2, 3, 4}, 0, 1, rng);
    const Tensor b = Tensor::normal(Shape{4}, 0, 1, rng);
    EXPECT_LT(max_abs_diff(conv2d(x, k, b, {2, 1}), reference_conv(x, k, b, 2, 1)), 1e-12);
}

TEST(Conv2d, ChannelMismatchThrows) {
    EXPECT_THROW(conv2d(Tensor(Shape{1, 2, 3, 3}), Tensor(Shape{3, 3, 1, 1}), Tensor(Shape{1}), {1, 0}), ShapeError);
}

TEST(Conv2d, ParamsOverload) {
    ConvParams p{Tensor(Shape{3, 3, 1, 1}, 1.0), Tensor::from(Shape{1}, {2}), 1, 1};
    const Tensor y = conv2d(Tensor(Shape{1, 1, 3, 3}, 1.0), p);
    EXPECT_EQ(y.at(0, 0, 1, 1), 11);
    EXPECT_EQ(y.at(0, 0, 0, 0), 6);
}

// --- deconv2d -------------------------------------------------------------

TEST(Deconv2d, SingleActivationReproducesKernel) {
    std::mt19937_64 rng(4);
    const Tensor k = Tensor::normal(Shape{3, 3, 1, 1}, 0, 1, rng);
    const Tensor y = deconv2d(Tensor(Shape{1, 1, 1, 1}, 1.0), k, Tensor(Shape{1}), {1, 0});
    ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y[i], k[i]);
}

TEST(Deconv2d, ZerosMapToZeros) {
    std::mt19937_64 rng(5);
    const Tensor k = Tensor::normal(Shape{3, 3, 2, 3}, 0, 1, rng);
    const Tensor y = deconv2d(Tensor(Shape{1, 2, 4, 4}), k, Tensor(Shape{3}), {1, 1});
    for (Scalar v : y.values()) EXPECT_EQ(v, 0);
}

TEST(Deconv2d, NonPositiveOutputThrows) {
    EXPECT_THROW(deconv2d(Tensor(Shape{1, 1, 1, 1}), Tensor(Shape{1, 1, 1, 1}), Tensor(Shape{1}), {1, 1}), ShapeError);
}

TEST(Deconv2d, ChannelMismatchThrows) {
    EXPECT_THROW(deconv2d(Tensor(Shape{1, 2, 3, 3}), Tensor(Shape{3, 3, 1, 1}), Tensor(Shape{1}), {1, 1}), ShapeError);
}

TEST(Deconv2d, LoweredPathMatchesDirect) {
    std::mt19937_64 rng(6);
    const Tensor x = Tensor::normal(Shape{2, 3, 4, 5}, 0, 1, rng);
    const Tensor k = Tensor::normal(Shape{3, 3, 3, 2}, 0, 1, rng);
    const Tensor b = Tensor::normal(Shape{2}, 0, 1, rng);
    EXPECT_LT(max_abs_diff(deconv2d(x, k, b, {1, 1}), deconv2d_direct(x, k, b, {1, 1})), 1e-12);
    EXPECT_LT(max_abs_diff(deconv2d(x, k, b, {2, 1}), deconv2d_direct(x, k, b, {2, 1})), 1e-12);
}

// <conv(x), y> == <x, deconv(y)> with the channel-swapped kernel and matching geometry.
class Adjointness : public ::testing::TestWithParam<int> {};

TEST_P(Adjointness, ConvAndDeconvAreAdjoint) {
    std::mt19937_64 rng(static_cast<unsigned>(GetParam()));
    struct Case { int h, w, k, stride, pad; };
    for (const Case c : {Case{6, 6, 3, 1, 1}, Case{7, 5, 3, 2, 1}, Case{8, 8, 8, 1, 0}, Case{5, 6, 2, 1, 0}}) {
        const Tensor kern = Tensor::normal(Shape{c.k, c.k, 3, 2}, 0, 1, rng);
        const Tensor x = Tensor::normal(Shape{2, 3, c.h, c.w}, 0, 1, rng);
        const Tensor cx = conv2d(x, kern, Tensor(Shape{2}), {c.stride, c.pad});
        const Tensor y = Tensor::normal(cx.shape(), 0, 1, rng);
        // Geometry must round-trip for deconv; strided cases may drop trailing rows.
        if (deconv_output_size(cx.dim(2), c.k, {c.stride, c.pad}) != c.h ||
            deconv_output_size(cx.dim(3), c.k, {c.stride, c.pad}) != c.w)
            continue;
        const Tensor dy = deconv2d(y, swap_channels(kern), Tensor(Shape{3}), {c.stride, c.pad});
        EXPECT_NEAR(dot(cx, y), dot(x, dy), 1e-9);
    }
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, Adjointness, ::testing::Range(1, 11));

// --- pooling --------------------------------------------------------------

TEST(MaxPool, HandCase) {
    const Tensor x = Tensor::from(Shape{1, 1, 2, 2}, {1, 3, 2, 0});
    auto [p, m] = max_pool(x);
    EXPECT_EQ(p.item(), 3);
    EXPECT_EQ(m.position(0), std::make_pair(0, 1));
}

TEST(MaxPool, ConstantInputPicksFirstCell) {
    const Tensor x(Shape{1, 2, 4, 4}, 0.25);
    auto [p, m] = max_pool(x);
    for (Scalar v : p.values()) EXPECT_EQ(v, 0.25);
    for (std::size_t cell = 0; cell < m.index.size(); ++cell) {
        const int oy = static_cast<int>(cell % 4) / 2, ox = static_cast<int>(cell % 4) % 2;
        EXPECT_EQ(m.position(cell), std::make_pair(2 * oy, 2 * ox));
    }
}

TEST(MaxPool, MatchesWindowScan) {
    std::mt19937_64 rng(7);
    const Tensor x = Tensor::normal(Shape{1, 1, 6, 6}, 0, 1, rng);
    auto [p, m] = max_pool(x);
    for (int oy = 0; oy < 3; ++oy)
        for (int ox = 0; ox < 3; ++ox) {
            double best = -1e300;
            int by = -1, bx = -1;
            for (int y = 2 * oy; y < 2 * oy + 2; ++y)
                for (int xx = 2 * ox; xx < 2 * ox + 2; ++xx)
                    if (x.at(0, 0, y, xx) > best) {
                        best = x.at(0, 0, y, xx);
                        by = y;
                        bx = xx;
                    }
            EXPECT_EQ(p.at(0, 0, oy, ox), best);
            EXPECT_EQ(m.position(static_cast<std::size_t>(oy * 3 + ox)), std::make_pair(by, bx));
        }
}

TEST(MaxPool, MaskIndicesStayInsideTheirWindow) {
    std::mt19937_64 rng(8);
    auto [p, m] = max_pool(Tensor::normal(Shape{2, 3, 8, 6}, 0, 1, rng));
    EXPECT_EQ(m.output_shape, p.shape());
    const int wo = 3;
    for (std::size_t cell = 0; cell < m.index.size(); ++cell) {
        const int local = static_cast<int>(cell % (4 * wo));
        const auto [y, x] = m.position(cell);
        EXPECT_EQ(y / 2, local / wo);
        EXPECT_EQ(x / 2, local % wo);
    }
}

TEST(MaxPool, OddDimensionsThrow) {
    EXPECT_THROW(max_pool(Tensor(Shape{1, 1, 3, 4})), ShapeError);
    EXPECT_THROW(max_pool(Tensor(Shape{1, 1, 4, 5})), ShapeError);
}

TEST(Unpool, HandRoundTrip) {
    auto [p, m] = max_pool(Tensor::from(Shape{1, 1, 2, 2}, {1, 3, 2, 0}));
    const Tensor u = unpool(p, m);
    const std::vector<Scalar> expected{0, 3, 0, 0};
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(u[i], expected[i]);
}

TEST(Unpool, ZeroInputGivesZeroOutput) {
    std::mt19937_64 rng(9);
    auto [p, m] = max_pool(Tensor::normal(Shape{1, 2, 4, 4}, 0, 1, rng));
    const Tensor u = unpool(Tensor(p.shape()), m);
    for (Scalar v : u.values()) EXPECT_EQ(v, 0);
}

TEST(Unpool, ShapeMismatchThrows) {
    auto [p, m] = max_pool(Tensor(Shape{1, 1, 4, 4}));
    EXPECT_THROW(unpool(Tensor(Shape{1, 1, 3, 2}), m), ShapeError);
}

// Values land exactly at independently recomputed argmax cells; elsewhere zero.
class PoolRoundTrip : public ::testing::TestWithParam<int> {};

TEST_P(PoolRoundTrip, NonzerosExactlyAtArgmax) {
    std::mt19937_64 rng(static_cast<unsigned>(GetParam()));
    const Tensor x = Tensor::uniform(Shape{2, 3, 6, 8}, 0.1, 1.0, rng);
    auto [p, m] = max_pool(x);
    const Tensor u = unpool(p, m);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 6; ++y)
                for (int xx = 0; xx < 8; ++xx) {
                    const int wy = y / 2 * 2, wx = xx / 2 * 2;
                    bool is_argmax = true;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            if (x.at(n, c, wy + dy, wx + dx) > x.at(n, c, y, xx)) is_argmax = false;
                    EXPECT_LE(u.at(n, c, y, xx), x.at(n, c, y, xx));
                    if (is_argmax)
                        EXPECT_EQ(u.at(n, c, y, xx), x.at(n, c, y, xx));
                    else
                        EXPECT_EQ(u.at(n, c, y, xx), 0);
                }
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, PoolRoundTrip, ::testing::Range(1, 11));

// --- relu / fully connected -----------------------------------------------

TEST(Relu, Values) {
    const Tensor y = relu(Tensor::from(Shape{3}, {-1, 0, 2}));
    EXPECT_EQ(y[0], 0);
    EXPECT_EQ(y[1], 0);
    EXPECT_EQ(y[2], 2);
    const Tensor negative = relu(Tensor(Shape{4}, -3.0));
    for (Scalar v : negative.values()) EXPECT_EQ(v, 0);
}

TEST(Relu, GradientIsIndicatorOfPositive) {
    Graph g;
    relu(g.input("x", Shape{4}));
    g.evaluate({{"x", Tensor::from(Shape{4}, {-0.7, 0.0, 0.4, 2.0})}});
    auto grads = g.backprop(Tensor(Shape{4}, 1.0));
    const std::vector<Scalar> expected{0, 0, 1, 1};
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(grads.at("x")[i], expected[i]);
    // Away from the kink, finite differences agree.
    g.evaluate({{"x", Tensor::from(Shape{4}, {-0.7, -0.2, 0.4, 2.0})}});
    EXPECT_LT(finite_difference_check(g, "x", 1e-4), 1e-8);
}

TEST(FullyConnected, IdentityWeights) {
    Tensor eye(Shape{3, 3});
    for (int i = 0; i < 3; ++i) eye[static_cast<std::size_t>(i * 4)] = 1;
    const Tensor x = Tensor::from(Shape{3}, {0.5, -2, 7});
    EXPECT_TRUE(fully_connected(x, eye, Tensor(Shape{3})).identical(x));
}

TEST(FullyConnected, HandDot) {
    const Tensor y = fully_connected(Tensor::from(Shape{2}, {1, 1}), Tensor::from(Shape{2, 1}, {2, 3}),
                                     Tensor::from(Shape{1}, {1}));
    EXPECT_EQ(y.item(), 6);
}

TEST(FullyConnected, DimensionMismatchThrows) {
    EXPECT_THROW(fully_connected(Tensor(Shape{3}), Tensor(Shape{2, 1}), Tensor(Shape{1})), ShapeError);
}

TEST(FullyConnected, GradientCheck) {
    std::mt19937_64 rng(10);
    Tensor w = Tensor::normal(Shape{6, 3}, 0, 1, rng);
    Tensor b = Tensor::normal(Shape{3}, 0, 1, rng);
    Graph g;
    fully_connected(g.input("x", Shape{2, 6}), g.parameter("w", w), g.parameter("b", b));
    g.evaluate({{"x", Tensor::normal(Shape{2, 6}, 0, 1, rng)}});
    const Tensor seed = Tensor::normal(Shape{2, 3}, 0, 1, rng);
    for (const char* leaf : {"x", "w", "b"}) EXPECT_LT(finite_difference_check(g, leaf, 1e-4, &seed), 1e-6) << leaf;
}

// --- softmax cross-entropy ------------------------------------------------

TEST(SoftmaxXent, UniformScoresGiveLogC) {
    LabelMap labels(2, 3, 3);
    for (std::size_t i = 0; i < labels.size(); ++i) labels.data[i] = static_cast<std::uint8_t>(i % 5);
    EXPECT_NEAR(pixelwise_softmax_xent(Tensor(Shape{2, 5, 3, 3}, 0.7), labels), std::log(5.0), 1e-15);
}

TEST(SoftmaxXent, HugeMarginGivesZero) {
    Tensor s(Shape{1, 3, 1, 2});
    LabelMap labels(1, 1, 2);
    labels.data = {2, 0};
    s.at(0, 2, 0, 0) = 1e3;
    s.at(0, 0, 0, 1) = 1e3;
    EXPECT_NEAR(pixelwise_softmax_xent(s, labels), 0.0, 1e-300);
}

TEST(SoftmaxXent, MatchesScalarLoop) {
    std::mt19937_64 rng(12);
    const Tensor s = Tensor::normal(Shape{1, 2, 4, 4}, 0, 2, rng);
    LabelMap labels(1, 4, 4);
    std::uniform_int_distribution<int> pick(0, 1);
    for (auto& l : labels.data) l = static_cast<std::uint8_t>(pick(rng));
    labels.data[5] = LabelMap::kIgnore;
    EXPECT_NEAR(pixelwise_softmax_xent(s, labels), reference_xent(s, labels), 1e-13);
}

TEST(SoftmaxXent, IgnoredPixelsAreExcluded) {
    std::mt19937_64 rng(13);
    const Tensor s = Tensor::normal(Shape{1, 3, 2, 2}, 0, 1, rng);
    LabelMap all_ignored(1, 2, 2, LabelMap::kIgnore);
    EXPECT_EQ(pixelwise_softmax_xent(s, all_ignored), 0);
}

TEST(SoftmaxXent, OutOfRangeLabelThrows) {
    LabelMap labels(1, 1, 1);
    labels.data = {3};
    EXPECT_THROW(pixelwise_softmax_xent(Tensor(Shape{1, 3, 1, 1}), labels), ArgumentError);
}

TEST(SoftmaxXent, NonNegative) {
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor s = Tensor::normal(Shape{2, 4, 3, 3}, 0, 5, rng);
        LabelMap labels(2, 3, 3);
        for (auto& l : labels.data) l = static_cast<std::uint8_t>(rng() % 4);
        EXPECT_GE(pixelwise_softmax_xent(s, labels), 0);
    }
}

// --- batch normalization --------------------------------------------------

TEST(BatchNorm, TrainOutputIsStandardizedPerChannel) {
    std::mt19937_64 rng(21);
    const Tensor x = Tensor::normal(Shape{4, 3, 2, 5}, 2, 3, rng);
    const Tensor gamma = Tensor::from(Shape{3}, {1, 2, 0.5});
    const Tensor beta = Tensor::from(Shape{3}, {0, -1, 4});
    BatchStats stats;
    const Tensor y = batch_norm_train(x, gamma, beta, 0, &stats);
    for (int c = 0; c < 3; ++c) {
        double m = 0, v = 0, xm = 0, xv = 0;
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 10; ++i) {
                m += y.at(n, c, i / 5, i % 5);
                xm += x.at(n, c, i / 5, i % 5);
            }
        m /= 40;
        xm /= 40;
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 10; ++i) {
                v += std::pow(y.at(n, c, i / 5, i % 5) - m, 2);
                xv += std::pow(x.at(n, c, i / 5, i % 5) - xm, 2);
            }
        EXPECT_NEAR(m, beta[c], 1e-12);
        EXPECT_NEAR(v / 40, gamma[c] * gamma[c], 1e-12);
        EXPECT_NEAR(stats.mean[c], xm, 1e-12);
        EXPECT_NEAR(stats.var[c], xv / 40, 1e-12);
    }
}

TEST(BatchNorm, EvalHandCase) {
    // (3 - 1) / sqrt(3 + 1) = 1, then 2 * 1 + 0.5
    const Tensor y = batch_norm_eval(Tensor::from(Shape{1, 1}, {3}), Tensor::from(Shape{1}, {2}),
                                     Tensor::from(Shape{1}, {0.5}), Tensor::from(Shape{1}, {1}),
                                     Tensor::from(Shape{1}, {3}), 1);
    EXPECT_DOUBLE_EQ(y.item(), 2.5);
}

TEST(BatchNorm, RowsAreFeaturesForRankTwo) {
    const Tensor x = Tensor::from(Shape{2, 2}, {1, 10, 3, 30});
    const Tensor y = batch_norm_train(x, Tensor(Shape{2}, 1.0), Tensor(Shape{2}), 0);
    EXPECT_DOUBLE_EQ(y[0], -1);
    EXPECT_DOUBLE_EQ(y[1], -1);
    EXPECT_DOUBLE_EQ(y[2], 1);
    EXPECT_DOUBLE_EQ(y[3], 1);
}

TEST(BatchNorm, ShapeErrors) {
    EXPECT_THROW(batch_norm_train(Tensor(Shape{2, 3, 2}), Tensor(Shape{3}), Tensor(Shape{3}), 1e-5), ShapeError);
    EXPECT_THROW(batch_norm_train(Tensor(Shape{2, 3}), Tensor(Shape{2}), Tensor(Shape{3}), 1e-5), ShapeError);
    EXPECT_THROW(batch_norm_eval(Tensor(Shape{2, 3}), Tensor(Shape{3}), Tensor(Shape{3}), Tensor(Shape{2}),
                                 Tensor(Shape{3}), 1e-5),
                 ShapeError);
}

TEST(BatchNorm, OpUsesRunningStatisticsOutsideTraining) {
    Tensor mean = Tensor::from(Shape{2}, {1, -1});
    Tensor var = Tensor::from(Shape{2}, {4, 9});
    Tensor gamma(Shape{2}, 1.0), beta(Shape{2});
    Graph g;
    batch_norm(g.input("x", Shape{3, 2}), g.parameter("g", gamma), g.parameter("b", beta), mean, var, false, 0);
    const Tensor x = Tensor::from(Shape{3, 2}, {1, 2, 3, 5, -1, -4});
    const Tensor& y = g.evaluate({{"x", x}});
    const Tensor expect = Tensor::from(Shape{3, 2}, {0, 1, 1, 2, -1, -1});
    EXPECT_LT(max_abs_diff(y, expect), 1e-15);
}

// --- gradient checks for every layer op over 10 seeds ----------------------

class LayerGradients : public ::testing::TestWithParam<int> {};

TEST_P(LayerGradients, PassFiniteDifference) {
    std::mt19937_64 rng(static_cast<unsigned>(GetParam()) + 100);
    constexpr Scalar kEps = 1e-4, kTol = 1e-4;

    {   // conv2d, padded and strided
        Tensor k = Tensor::normal(Shape{3, 3, 2, 3}, 0, 0.5, rng);
        Tensor b = Tensor::normal(Shape{3}, 0, 0.5, rng);
        for (ConvGeometry geo : {ConvGeometry{1, 1}, ConvGeometry{2, 0}}) {
            Graph g;
            conv2d(g.input("x", Shape{2, 2, 5, 5}), g.parameter("k", k), g.parameter("b", b), geo);
            g.evaluate({{"x", Tensor::normal(Shape{2, 2, 5, 5}, 0, 1, rng)}});
            const Tensor seed = Tensor::normal(g.value(g.root()).shape(), 0, 1, rng);
            for (const char* leaf : {"x", "k", "b"}) EXPECT_LT(finite_difference_check(g, leaf, kEps, &seed), kTol) << "conv " << leaf;
        }
    }
    {   // deconv2d
        Tensor k = Tensor::normal(Shape{3, 3, 3, 2}, 0, 0.5, rng);
        Tensor b = Tensor::normal(Shape{2}, 0, 0.5, rng);
        Graph g;
        deconv2d(g.input("x", Shape{2, 3, 4, 4}), g.parameter("k", k), g.parameter("b", b), {1, 1});
        g.evaluate({{"x", Tensor::normal(Shape{2, 3, 4, 4}, 0, 1, rng)}});
        const Tensor seed = Tensor::normal(g.value(g.root()).shape(), 0, 1, rng);
        for (const char* leaf : {"x", "k", "b"}) EXPECT_LT(finite_difference_check(g, leaf, kEps, &seed), kTol) << "deconv " << leaf;
    }
    {   // max_pool followed by unpool through its own mask
        Graph g;
        auto x = g.input("x", Shape{2, 2, 4, 6});
        auto p = max_pool(x);
        unpool(scale(p, 1.5), p);
        g.evaluate({{"x", Tensor::normal(Shape{2, 2, 4, 6}, 0, 1, rng)}});
        const Tensor seed = Tensor::normal(g.value(g.root()).shape(), 0, 1, rng);
        EXPECT_LT(finite_difference_check(g, "x", kEps, &seed), kTol) << "pool/unpool";
    }
    {   // fully connected + relu
        Tensor w = Tensor::normal(Shape{8, 5}, 0, 0.5, rng);
        Tensor b = Tensor::normal(Shape{5}, 0, 0.5, rng);
        Graph g;
        relu(fully_connected(g.input("x", Shape{3, 2, 2, 2}), g.parameter("w", w), g.parameter("b", b)));
        g.evaluate({{"x", Tensor::normal(Shape{3, 2, 2, 2}, 0, 1, rng)}});
        const Tensor seed = Tensor::normal(g.value(g.root()).shape(), 0, 1, rng);
        for (const char* leaf : {"x", "w", "b"}) EXPECT_LT(finite_difference_check(g, leaf, kEps, &seed), kTol) << "fc " << leaf;
    }
    {   // batch normalization: batch statistics (rank 4 and rank 2) and fixed statistics
        const Tensor running_mean = Tensor::normal(Shape{3}, 0, 1, rng);
        const Tensor running_var = Tensor::uniform(Shape{3}, 0.5, 2, rng);
        for (const Shape& shape : {Shape{4, 3, 2, 3}, Shape{6, 3}})
            for (bool training : {true, false}) {
                Tensor gamma = Tensor::uniform(Shape{3}, 0.5, 1.5, rng);
                Tensor beta = Tensor::normal(Shape{3}, 0, 1, rng);
                Graph g;
                batch_norm(g.input("x", shape), g.parameter("g", gamma), g.parameter("b", beta), running_mean,
                           running_var, training);
                g.evaluate({{"x", Tensor::normal(shape, 1, 2, rng)}});
                const Tensor seed = Tensor::normal(g.value(g.root()).shape(), 0, 1, rng);
                for (const char* leaf : {"x", "g", "b"})
                    EXPECT_LT(finite_difference_check(g, leaf, kEps, &seed), kTol)
                        << "batch_norm " << shape.str() << (training ? " train " : " eval ") << leaf;
            }
    }
    {   // softmax cross-entropy
        LabelMap labels(2, 3, 3);
        for (auto& l : labels.data) l = static_cast<std::uint8_t>(rng() % 4);
        labels.data[4] = LabelMap::kIgnore;
        Graph g;
        softmax_xent(g.input("s", Shape{2, 4, 3, 3}), labels);
        g.evaluate({{"s", Tensor::normal(Shape{2, 4, 3, 3}, 0, 2, rng)}});
        EXPECT_LT(finite_difference_check(g, "s", kEps), kTol) << "xent";
    }
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, LayerGradients, ::testing::Range(1, 11));
