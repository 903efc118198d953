#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mdseg/ops.hpp"
#include "mdseg/two_sample.hpp"

using namespace mdseg;

namespace {

std::vector<Scalar> v3(Scalar a, Scalar b, Scalar c) { return {a, b, c}; }

Tensor gaussian_batch(int n, int d, Scalar mean, std::mt19937_64& rng) {
    return Tensor::normal(Shape{n, d}, mean, 1, rng);
}

// Pair estimator written out with one Gaussian kernel and no shared helpers.
double single_kernel_estimate(const Tensor& a, const Tensor& b, double sigma) {
    const int n = a.dim(0), d = a.dim(1);
    auto k = [&](const Tensor& x, int i, const Tensor& y, int j) {
        double s = 0;
        for (int t = 0; t < d; ++t) s += (x[i * d + t] - y[j * d + t]) * (x[i * d + t] - y[j * d + t]);
        return std::exp(-s / sigma);
    };
    double total = 0;
    for (int i = 0; i < n / 2; ++i)
        total += k(a, 2 * i, a, 2 * i + 1) - k(a, 2 * i, b, 2 * i + 1) + k(b, 2 * i, b, 2 * i + 1) -
                 k(b, 2 * i, a, 2 * i + 1);
    return 2.0 / n * total;
}

} // namespace

TEST(GaussianKernel, ZeroDistanceIsOne) {
    const auto x = v3(0.3, -2, 5);
    for (Scalar s : {0.01, 1.0, 100.0}) EXPECT_EQ(gaussian_kernel(x, x, s), 1);
}

TEST(GaussianKernel, DistanceEqualToSigma) {
    const auto x = v3(0, 0, 0), y = v3(1, 1, 0);
    EXPECT_NEAR(gaussian_kernel(x, y, 2.0), 0.36787944117144233, 1e-15);
}

TEST(GaussianKernel, NonPositiveSigmaThrows) {
    const auto x = v3(0, 0, 0);
    EXPECT_THROW(gaussian_kernel(x, x, 0), ArgumentError);
    EXPECT_THROW(gaussian_kernel(x, x, -1), ArgumentError);
}

TEST(KernelFamily, StandardBandwidths) {
    const auto f = KernelFamily::standard();
    ASSERT_EQ(f.size(), 11u);
    EXPECT_EQ(f.sigmas()[0], 0.03125);
    EXPECT_EQ(f.sigmas()[5], 1.0);
    EXPECT_EQ(f.sigmas()[10], 32.0);
    const std::vector<Scalar> betas{0.02, 0.03, 0.09, 0.12, 0.14, 0.15, 0.15, 0.14, 0.10, 0.05, 0.01};
    for (std::size_t u = 0; u < 11; ++u) EXPECT_NEAR(f.betas()[u], betas[u], 1e-17);
    EXPECT_NEAR(f.total_weight(), 1.0, 1e-15);
}

TEST(KernelFamily, InvalidFamiliesThrow) {
    EXPECT_THROW(KernelFamily({1.0}, {-0.1}), ArgumentError);
    EXPECT_THROW(KernelFamily({1.0, 2.0}, {1.0}), ArgumentError);
    EXPECT_THROW(KernelFamily({0.0}, {1.0}), ArgumentError);
    EXPECT_THROW(KernelFamily({1.0}, {0.0}), ArgumentError);
    EXPECT_THROW(KernelFamily({}, {}), ArgumentError);
}

TEST(CompositeKernel, IdenticalPointsGiveTotalWeight) {
    const auto x = v3(1, 2, 3);
    EXPECT_NEAR(composite_kernel(x, x, KernelFamily::standard()), 1.0, 1e-15);
}

TEST(CompositeKernel, VanishesFarAway) {
    const auto x = v3(0, 0, 0), y = v3(1e3, 0, 0);
    EXPECT_LT(composite_kernel(x, y, KernelFamily::standard()), 1e-300);
}

TEST(CompositeKernel, MatchesElevenTermSum) {
    const auto x = v3(0.2, -0.4, 1.1), y = v3(-0.3, 0.5, 0.7);
    const double d2 = 0.25 + 0.81 + 0.16;
    const double betas[] = {2, 3, 9, 12, 14, 15, 15, 14, 10, 5, 1};
    double expected = 0;
    for (int u = 1; u <= 11; ++u) expected += betas[u - 1] * 1e-2 * std::exp(-d2 / std::pow(2.0, u - 6));
    EXPECT_NEAR(composite_kernel(x, y, KernelFamily::standard()), expected, 1e-15);
}

TEST(Mkmmd, CopiedStreamGivesExactlyZero) {
    std::mt19937_64 rng(1);
    const Tensor a = gaussian_batch(8, 5, 0, rng);
    EXPECT_EQ(mkmmd_unbiased(a, a, KernelFamily::standard()), 0);
}

TEST(Mkmmd, HandCaseScalarFeatures) {
    const Tensor a(Shape{4, 1}, 0.0), b(Shape{4, 1}, 1.0);
    EXPECT_NEAR(mkmmd_unbiased(a, b, KernelFamily::single(1.0)), 2 * (1 - std::exp(-1.0)), 1e-15);
    EXPECT_NEAR(mkmmd_unbiased(a, b, KernelFamily::single(1.0)), 1.2642411, 1e-7);
}

TEST(Mkmmd, OddOrMismatchedBatchesThrow) {
    const auto f = KernelFamily::standard();
    EXPECT_THROW(mkmmd_unbiased(Tensor(Shape{3, 2}), Tensor(Shape{3, 2}), f), ShapeError);
    EXPECT_THROW(mkmmd_unbiased(Tensor(Shape{4, 2}), Tensor(Shape{2, 2}), f), ShapeError);
    EXPECT_THROW(mkmmd_unbiased(Tensor(Shape{4, 2}), Tensor(Shape{4, 3}), f), ShapeError);
}

class MkmmdProperties : public ::testing::TestWithParam<int> {};

TEST_P(MkmmdProperties, LinearSymmetricBounded) {
    std::mt19937_64 rng(static_cast<unsigned>(GetParam()));
    const auto family = KernelFamily::standard();
    const Tensor a = gaussian_batch(10, 3, 0, rng);
    const Tensor b = gaussian_batch(10, 3, 0.7, rng);

    const Scalar d = mkmmd_unbiased(a, b, family);
    double weighted = 0;
    for (std::size_t u = 0; u < family.size(); ++u)
        weighted += family.betas()[u] * single_kernel_estimate(a, b, family.sigmas()[u]);
    EXPECT_NEAR(d, weighted, 1e-12);

    EXPECT_EQ(d, mkmmd_unbiased(b, a, family));
    EXPECT_LE(std::abs(d), 2 * family.total_weight());

    // Extreme separations stay inside the bound too.
    const Tensor far = gaussian_batch(10, 3, 50, rng);
    EXPECT_LE(std::abs(mkmmd_unbiased(a, far, family)), 2 * family.total_weight());
}

TEST_P(MkmmdProperties, GradientPassesFiniteDifference) {
    std::mt19937_64 rng(static_cast<unsigned>(GetParam()) + 50);
    Graph g;
    mkmmd(g.input("a", Shape{6, 4}), g.input("b", Shape{6, 4}), KernelFamily::standard());
    g.evaluate({{"a", Tensor::normal(Shape{6, 4}, 0, 0.3, rng)}, {"b", Tensor::normal(Shape{6, 4}, 0.2, 0.3, rng)}});
    EXPECT_LT(finite_difference_check(g, "a", 1e-4), 1e-4);
    EXPECT_LT(finite_difference_check(g, "b", 1e-4), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, MkmmdProperties, ::testing::Range(1, 11));

TEST(Mkmmd, SameDistributionWithinNullSpreadShiftedBeyondIt) {
    std::mt19937_64 rng(2024);
    const auto family = KernelFamily::standard();
    const Tensor a = gaussian_batch(500, 2, 0, rng);
    const Tensor b = gaussian_batch(500, 2, 0, rng);
    const Tensor c = gaussian_batch(500, 2, 2, rng);

    auto null_percentile = [&](const Tensor& x, const Tensor& y) {
        auto r = mmd_permutation_test(x, y, family, 200, 7);
        std::vector<Scalar> sorted = r.null_estimates;
        std::sort(sorted.begin(), sorted.end());
        return sorted[static_cast<std::size_t>(0.99 * (sorted.size() - 1))];
    };
    EXPECT_LT(std::abs(mkmmd_unbiased(a, b, family)), null_percentile(a, b));
    const auto shifted = mmd_permutation_test(a, c, family, 200, 7);
    EXPECT_GT(shifted.estimate, null_percentile(a, c));
    EXPECT_LT(shifted.p_value, 0.01);
}

TEST(EuclideanMean, Values) {
    std::mt19937_64 rng(3);
    const Tensor a = gaussian_batch(6, 4, 0, rng);
    EXPECT_EQ(pairwise_euclidean_mean(a, a), 0);
    EXPECT_EQ(pairwise_euclidean_mean(Tensor(Shape{2, 1}, 0.0), Tensor(Shape{2, 1}, 2.0)), 4);
}

TEST(EuclideanMean, MatchesScalarLoop) {
    std::mt19937_64 rng(4);
    const Tensor a = gaussian_batch(7, 5, 0, rng), b = gaussian_batch(7, 5, 1, rng);
    double expected = 0;
    for (int i = 0; i < 7; ++i)
        for (int t = 0; t < 5; ++t) expected += std::pow(a[i * 5 + t] - b[i * 5 + t], 2);
    EXPECT_NEAR(pairwise_euclidean_mean(a, b), expected / 7, 1e-12);
}

TEST(EuclideanMean, SizeMismatchThrows) {
    EXPECT_THROW(pairwise_euclidean_mean(Tensor(Shape{3, 2}), Tensor(Shape{4, 2})), ShapeError);
}

TEST(EuclideanMean, GradientPassesFiniteDifference) {
    std::mt19937_64 rng(5);
    Graph g;
    euclidean_mean(g.input("a", Shape{5, 3}), g.input("b", Shape{5, 3}));
    g.evaluate({{"a", gaussian_batch(5, 3, 0, rng)}, {"b", gaussian_batch(5, 3, 1, rng)}});
    EXPECT_LT(finite_difference_check(g, "a", 1e-4), 1e-6);
    EXPECT_LT(finite_difference_check(g, "b", 1e-4), 1e-6);
}

TEST(PermutationTest, IdenticalStreamsGivePValueOne) {
    std::mt19937_64 rng(6);
    const Tensor a = gaussian_batch(20, 3, 0, rng);
    const auto r = mmd_permutation_test(a, a, KernelFamily::standard(), 200, 1);
    EXPECT_EQ(r.estimate, 0);
    EXPECT_GE(r.p_value, 0.9);
    EXPECT_LE(r.p_value, 1.0);
}

TEST(PermutationTest, NullEstimatesBounded) {
    std::mt19937_64 rng(7);
    const auto family = KernelFamily::standard();
    const auto r = mmd_permutation_test(gaussian_batch(30, 2, 0, rng), gaussian_batch(30, 2, 3, rng), family, 150, 2);
    for (Scalar e : r.null_estimates) EXPECT_LE(std::abs(e), 2 * family.total_weight());
}

TEST(PermutationTest, RequiresEnoughPermutationsAndEvenBatch) {
    const auto family = KernelFamily::standard();
    EXPECT_THROW(mmd_permutation_test(Tensor(Shape{4, 1}), Tensor(Shape{4, 1}), family, 50, 1), ArgumentError);
    EXPECT_THROW(mmd_permutation_test(Tensor(Shape{5, 1}), Tensor(Shape{5, 1}), family, 100, 1), ShapeError);
}
