#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mkmmd.hpp"

namespace mdseg {

struct PermutationResult {
    Scalar estimate = 0;
    Scalar p_value = 1;
    std::vector<Scalar> null_estimates;
};

/// Permutation two-sample test on the unbiased MK-MMD estimate.
///
/// Each permutation independently exchanges a_i and b_i with probability 1/2, so the
/// pairing the estimator relies on is preserved. The p-value is the fraction of
/// permuted estimates that are >= the observed one.
inline PermutationResult mmd_permutation_test(const Tensor& a, const Tensor& b, const KernelFamily& family,
                                              int permutations, std::uint64_t seed) {
    if (permutations < 100) throw ArgumentError("mmd_permutation_test: at least 100 permutations required");
    PermutationResult result;
    result.estimate = mkmmd_unbiased(a, b, family);

    const int n = a.dim(0);
    const std::size_t d = static_cast<std::size_t>(a.dim(1));
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution flip(0.5);
    Tensor pa = a, pb = b;
    int at_least = 0;
    result.null_estimates.reserve(static_cast<std::size_t>(permutations));
    for (int p = 0; p < permutations; ++p) {
        for (int i = 0; i < n; ++i) {
            const bool swap = flip(rng);
            const Scalar* src_a = (swap ? b : a).data() + static_cast<std::size_t>(i) * d;
            const Scalar* src_b = (swap ? a : b).data() + static_cast<std::size_t>(i) * d;
            std::copy_n(src_a, d, pa.data() + static_cast<std::size_t>(i) * d);
            std::copy_n(src_b, d, pb.data() + static_cast<std::size_t>(i) * d);
        }
        const Scalar e = mkmmd_unbiased(pa, pb, family);
        result.null_estimates.push_back(e);
        if (e >= result.estimate) ++at_least;
    }
    result.p_value = static_cast<Scalar>(at_least) / static_cast<Scalar>(permutations);
    return result;
}

} // namespace mdseg
