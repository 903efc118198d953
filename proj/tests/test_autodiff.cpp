#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mdseg/ops.hpp"

using namespace mdseg;

namespace {

Tensor vec(std::initializer_list<Scalar> v) { return Tensor::from(Shape{static_cast<int>(v.size())}, v); }

} // namespace

TEST(Evaluate, ElementwiseAdd) {
    Graph g;
    auto x = g.input("x", Shape{2});
    auto y = g.input("y", Shape{2});
    add(x, y);
    const Tensor& z = g.evaluate({{"x", vec({1, 2})}, {"y", vec({3, 4})}});
    EXPECT_EQ(z[0], 4);
    EXPECT_EQ(z[1], 6);
}

TEST(Evaluate, Matmul) {
    Graph g;
    auto x = g.input("x", Shape{1, 2});
    auto w = g.input("W", Shape{2, 1});
    matmul(x, w);
    const Tensor& z = g.evaluate({{"x", Tensor::from(Shape{1, 2}, {1, 1})}, {"W", Tensor::from(Shape{2, 1}, {2, 3})}});
    EXPECT_EQ(z.item(), 5);
}

TEST(Evaluate, Relu) {
    Graph g;
    relu(g.input("x", Shape{3}));
    const Tensor& z = g.evaluate({{"x", vec({-1, 0, 2})}});
    EXPECT_EQ(z[0], 0);
    EXPECT_EQ(z[1], 0);
    EXPECT_EQ(z[2], 2);
}

TEST(Evaluate, ShapeMismatchNamesTheNode) {
    Graph g;
    auto x = g.input("x", Shape{2});
    auto y = g.input("y", Shape{3});
    add(x, y, "bad_sum");
    try {
        g.evaluate({{"x", vec({1, 2})}, {"y", vec({1, 2, 3})}});
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("bad_sum"), std::string::npos);
    }
}

TEST(Evaluate, UnboundInputAndWrongShape) {
    Graph g;
    relu(g.input("x", Shape{2}));
    EXPECT_THROW(g.evaluate(Bindings{}), Error);
    EXPECT_THROW(g.evaluate({{"x", vec({1, 2, 3})}}), ShapeError);
}

TEST(Evaluate, NonFiniteValueIsReported) {
    Graph g;
    exp(g.input("x", Shape{1}), "blowup");
    try {
        g.evaluate({{"x", vec({1e6})}});
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("blowup"), std::string::npos);
    }
}

TEST(Evaluate, IsPure) {
    std::mt19937_64 rng(3);
    Tensor w = Tensor::normal(Shape{3, 4}, 0, 1, rng);
    Graph g;
    auto x = g.input("x", Shape{2, 3});
    relu(matmul(x, g.parameter("w", w)));
    Tensor xv = Tensor::normal(Shape{2, 3}, 0, 1, rng);
    const Tensor first = g.evaluate({{"x", xv}});
    const Tensor second = g.evaluate({{"x", xv}});
    EXPECT_TRUE(first.identical(second));
}

TEST(Backprop, PowerRule) {
    Graph g;
    square(g.input("x", Shape{1}));
    g.evaluate({{"x", vec({3})}});
    auto grads = g.backprop(Tensor::scalar(1));
    EXPECT_EQ(grads.at("x").item(), 6);
}

TEST(Backprop, FanOutAccumulates) {
    Graph g;
    auto x = g.input("x", Shape{2});
    sum(add(x, x));
    g.evaluate({{"x", vec({1, 2})}});
    auto grads = g.backprop(Tensor::scalar(1));
    EXPECT_EQ(grads.at("x")[0], 2);
    EXPECT_EQ(grads.at("x")[1], 2);
}

TEST(Backprop, BeforeEvaluateIsAnError) {
    Graph g;
    square(g.input("x", Shape{1}));
    EXPECT_THROW(g.backprop(Tensor::scalar(1)), Error);
}

TEST(Backprop, SeedShapeMustMatchRoot) {
    Graph g;
    square(g.input("x", Shape{2}));
    g.evaluate({{"x", vec({1, 2})}});
    EXPECT_THROW(g.backprop(Tensor::scalar(1)), ShapeError);
}

TEST(Backprop, InputGradientsCanBeDisabled) {
    Tensor w = Tensor::from(Shape{1}, {2});
    Graph g;
    auto x = g.input("x", Shape{1});
    mul(x, g.parameter("w", w));
    g.set_input_gradients(false);
    g.evaluate({{"x", vec({5})}});
    auto grads = g.backprop(Tensor::scalar(1));
    EXPECT_EQ(grads.count("x"), 0u);
    EXPECT_EQ(grads.at("w").item(), 5);
}

// A feature node consumed by an MK-MMD branch and a pixel-loss branch receives the
// sum of the gradients each branch alone would send it.
TEST(Backprop, TwoSourceGradientEqualsSumOfBranches) {
    std::mt19937_64 rng(11);
    Tensor w = Tensor::normal(Shape{5, 4}, 0, 0.5, rng);
    const Tensor xa = Tensor::normal(Shape{4, 5}, 0, 1, rng);
    const Tensor other = Tensor::normal(Shape{4, 4}, 0, 1, rng);
    LabelMap labels(4, 2, 1);
    for (std::size_t i = 0; i < labels.size(); ++i) labels.data[i] = static_cast<std::uint8_t>(i % 2);
    const auto family = KernelFamily::standard();

    enum Branch { kMmd = 1, kPixel = 2 };
    auto feature_grad = [&](int branches) {
        Graph g;
        auto x = g.input("x", Shape{4, 5});
        auto f = matmul(x, g.parameter("w", w), "f");
        auto o = g.input("other", Shape{4, 4});
        std::vector<Var> terms;
        if (branches & kMmd) terms.push_back(mkmmd(f, o, family));
        if (branches & kPixel) terms.push_back(softmax_xent(reshape(f, Shape{4, 2, 2, 1}), labels));
        if (terms.size() == 2)
            add(terms[0], terms[1]);
        g.evaluate({{"x", xa}, {"other", other}});
        g.backprop(Tensor::scalar(1));
        return g.grad(f);
    };

    const Tensor both = feature_grad(kMmd | kPixel);
    const Tensor mmd_only = feature_grad(kMmd);
    const Tensor pixel_only = feature_grad(kPixel);
    for (std::size_t i = 0; i < both.size(); ++i) EXPECT_NEAR(both[i], mmd_only[i] + pixel_only[i], 1e-14);
}

TEST(FiniteDifference, LinearMapIsExact) {
    Graph g;
    scale(g.input("x", Shape{3}), 3);
    g.evaluate({{"x", vec({0.3, -1.2, 4.0})}});
    EXPECT_LT(finite_difference_check(g, "x", 1e-5), 1e-10);
}

TEST(FiniteDifference, ExpAtHalf) {
    Graph g;
    exp(g.input("x", Shape{1}));
    g.evaluate({{"x", vec({0.5})}});
    auto grads = g.backprop(Tensor::scalar(1));
    EXPECT_NEAR(grads.at("x").item(), std::exp(0.5), 1e-15);
    EXPECT_LT(finite_difference_check(g, "x", 1e-4), 1e-6);
}

TEST(FiniteDifference, RejectsNonPositiveEps) {
    Graph g;
    square(g.input("x", Shape{1}));
    g.evaluate({{"x", vec({1})}});
    EXPECT_THROW(finite_difference_check(g, "x", 0), ArgumentError);
}

TEST(FiniteDifference, RestoresLeafExactly) {
    Graph g;
    square(g.input("x", Shape{2}));
    g.evaluate({{"x", vec({0.1, 0.7})}});
    const Tensor before = g.value(g.find_leaf("x"));
    finite_difference_check(g, "x", 1e-4);
    EXPECT_TRUE(g.value(g.find_leaf("x")).identical(before));
}

// Every elementwise / algebraic op under 10 random seeds.
class ElementwiseOpGradients : public ::testing::TestWithParam<int> {};

TEST_P(ElementwiseOpGradients, PassFiniteDifference) {
    std::mt19937_64 rng(static_cast<unsigned>(GetParam()));
    const Tensor av = Tensor::normal(Shape{3, 4}, 0, 1, rng);
    const Tensor bv = Tensor::normal(Shape{3, 4}, 0, 1, rng);
    const Tensor mv = Tensor::normal(Shape{4, 2}, 0, 1, rng);
    const Tensor seed34 = Tensor::normal(Shape{3, 4}, 0, 1, rng);

    auto check = [&](auto build, const Tensor* seed) {
        Graph g;
        auto a = g.input("a", Shape{3, 4});
        auto b = g.input("b", Shape{3, 4});
        auto m = g.input("m", Shape{4, 2});
        build(a, b, m);
        g.evaluate({{"a", av}, {"b", bv}, {"m", mv}});
        for (const char* leaf : {"a", "b", "m"}) {
            const Tensor seed_for_root = seed ? *seed : Tensor(g.value(g.root()).shape(), 1);
            EXPECT_LT(finite_difference_check(g, leaf, 1e-4, &seed_for_root), 1e-4) << g.name(g.root()) << " / " << leaf;
        }
    };

    check([](Var a, Var b, Var) { add(a, b); }, &seed34);
    check([](Var a, Var b, Var) { sub(a, b); }, &seed34);
    check([](Var a, Var b, Var) { mul(a, b); }, &seed34);
    check([](Var a, Var, Var) { scale(a, -2.5); }, &seed34);
    check([](Var a, Var, Var) { square(a); }, &seed34);
    check([](Var a, Var, Var) { exp(a); }, &seed34);
    check([](Var a, Var, Var) { sum(a); }, nullptr);
    check([](Var a, Var, Var m) { sum(square(matmul(a, m))); }, nullptr);
    check([](Var a, Var, Var) { sum(mul(relu(a), a)); }, nullptr);
    check([](Var a, Var b, Var) { sum(square(concat({a, b, a}))); }, nullptr);
    check([](Var a, Var, Var) { sum(square(reshape(a, Shape{2, 6}))); }, nullptr);
    check([](Var a, Var, Var) { sum(square(clamp_max(a, 0.3))); }, nullptr);
    check([](Var a, Var b, Var) { linear_combination({sum(square(a)), sum(b)}, {0.7, -1.3}); }, nullptr);
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, ElementwiseOpGradients, ::testing::Range(1, 11));
