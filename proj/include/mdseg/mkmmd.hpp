#pragma once

// Multiple-kernel maximum mean discrepancy between two paired feature batches.

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace mdseg {

/// Gaussian bandwidths sigma_u and non-negative mixture weights beta_u.
/// The composite kernel is k(x, y) = sum_u beta_u * exp(-|x - y|^2 / sigma_u).
class KernelFamily {
public:
    KernelFamily(std::vector<Scalar> sigmas, std::vector<Scalar> betas)
        : sigmas_(std::move(sigmas)), betas_(std::move(betas)) {
        if (sigmas_.empty() || sigmas_.size() != betas_.size())
            throw ArgumentError("kernel family needs equally many sigmas and betas (and at least one)");
        for (Scalar s : sigmas_)
            if (!(s > 0)) throw ArgumentError("kernel bandwidths must be positive");
        for (Scalar b : betas_)
            if (!(b >= 0)) throw ArgumentError("kernel weights must be non-negative");
        if (!(total_weight() > 0)) throw ArgumentError("kernel weights must sum to a positive value");
    }

    /// Eleven kernels, sigma_u = 2^(u-6) for u = 1..11, with the fixed weights
    /// [2,3,9,12,14,15,15,14,10,5,1] * 1e-2.
    static KernelFamily standard() {
        std::vector<Scalar> sigmas;
        for (int u = 1; u <= 11; ++u) sigmas.push_back(std::ldexp(Scalar(1), u - 6));
        std::vector<Scalar> betas;
        for (int b : {2, 3, 9, 12, 14, 15, 15, 14, 10, 5, 1}) betas.push_back(Scalar(b) * Scalar(1e-2));
        return KernelFamily(std::move(sigmas), std::move(betas));
    }

    static KernelFamily single(Scalar sigma) { return KernelFamily({sigma}, {Scalar(1)}); }

    std::size_t size() const { return sigmas_.size(); }
    const std::vector<Scalar>& sigmas() const { return sigmas_; }
    const std::vector<Scalar>& betas() const { return betas_; }

    /// D = sum of the weights; every kernel value lies in (0, D].
    Scalar total_weight() const { return std::accumulate(betas_.begin(), betas_.end(), Scalar(0)); }

private:
    std::vector<Scalar> sigmas_;
    std::vector<Scalar> betas_;
};

inline Scalar squared_distance(std::span<const Scalar> x, std::span<const Scalar> y) {
    if (x.size() != y.size()) throw ShapeError("vectors of different length");
    Scalar s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const Scalar d = x[i] - y[i];
        s += d * d;
    }
    return s;
}

inline Scalar gaussian_kernel(std::span<const Scalar> x, std::span<const Scalar> y, Scalar sigma) {
    if (!(sigma > 0)) throw ArgumentError("gaussian_kernel: sigma must be positive");
    return std::exp(-squared_distance(x, y) / sigma);
}

inline Scalar composite_kernel(std::span<const Scalar> x, std::span<const Scalar> y, const KernelFamily& family) {
    const Scalar d2 = squared_distance(x, y);
    Scalar k = 0;
    for (std::size_t u = 0; u < family.size(); ++u) k += family.betas()[u] * std::exp(-d2 / family.sigmas()[u]);
    return k;
}

namespace detail {

inline void check_feature_batches(const Tensor& a, const Tensor& b, bool require_even, const char* what) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError(std::string(what) + ": feature batches must be n x dim");
    if (!(a.shape() == b.shape()))
        throw ShapeError(std::string(what) + ": batch shapes differ, " + a.shape().str() + " vs " + b.shape().str());
    if (require_even && a.dim(0) % 2 != 0)
        throw ShapeError(std::string(what) + ": batch size must be even, got " + std::to_string(a.dim(0)));
}

inline std::span<const Scalar> row(const Tensor& t, int i) {
    const std::size_t d = static_cast<std::size_t>(t.dim(1));
    return {t.data() + static_cast<std::size_t>(i) * d, d};
}

// Accumulates scale * dk(x, y)/dx into gx and its negation into gy.
inline void add_kernel_gradient(std::span<const Scalar> x, std::span<const Scalar> y, const KernelFamily& family,
                                Scalar scale, Scalar* gx, Scalar* gy) {
    const Scalar d2 = squared_distance(x, y);
    // dk/dx = -sum_u beta_u * (2 / sigma_u) * k_u * (x - y)
    Scalar coeff = 0;
    for (std::size_t u = 0; u < family.size(); ++u) {
        const Scalar s = family.sigmas()[u];
        coeff -= family.betas()[u] * (Scalar(2) / s) * std::exp(-d2 / s);
    }
    coeff *= scale;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const Scalar g = coeff * (x[i] - y[i]);
        if (gx) gx[i] += g;
        if (gy) gy[i] -= g;
    }
}

} // namespace detail

/// Unbiased pair-streaming estimate
///   d = (2/n) * sum_{i < n/2} [ k(a_{2i}, a_{2i+1}) - k(a_{2i}, b_{2i+1}) + k(b_{2i}, b_{2i+1}) - k(b_{2i}, a_{2i+1}) ]
/// (0-based indices). Terms are summed in index order.
inline Scalar mkmmd_unbiased(const Tensor& a, const Tensor& b, const KernelFamily& family) {
    detail::check_feature_batches(a, b, true, "mkmmd_unbiased");
    const int n = a.dim(0);
    Scalar total = 0;
    for (int i = 0; i + 1 < n; i += 2) {
        const auto a0 = detail::row(a, i), a1 = detail::row(a, i + 1);
        const auto b0 = detail::row(b, i), b1 = detail::row(b, i + 1);
        // Grouped so that swapping a and b gives a bit-identical result.
        const Scalar within = composite_kernel(a0, a1, family) + composite_kernel(b0, b1, family);
        const Scalar across = composite_kernel(a0, b1, family) + composite_kernel(b0, a1, family);
        const Scalar eta = within - across;
        total += eta;
    }
    return Scalar(2) / static_cast<Scalar>(n) * total;
}

/// Accumulates grad_out * d(mkmmd_unbiased)/da and /db into the non-null outputs.
inline void mkmmd_unbiased_backward(const Tensor& a, const Tensor& b, const KernelFamily& family, Scalar grad_out,
                                    Tensor* grad_a, Tensor* grad_b) {
    const int n = a.dim(0);
    const std::size_t d = static_cast<std::size_t>(a.dim(1));
    const Scalar scale = grad_out * Scalar(2) / static_cast<Scalar>(n);
    auto ga = [&](int i) { return grad_a ? grad_a->data() + i * d : nullptr; };
    auto gb = [&](int i) { return grad_b ? grad_b->data() + i * d : nullptr; };
    for (int i = 0; i + 1 < n; i += 2) {
        const auto a0 = detail::row(a, i), a1 = detail::row(a, i + 1);
        const auto b0 = detail::row(b, i), b1 = detail::row(b, i + 1);
        detail::add_kernel_gradient(a0, a1, family, scale, ga(i), ga(i + 1));
        detail::add_kernel_gradient(a0, b1, family, -scale, ga(i), gb(i + 1));
        detail::add_kernel_gradient(b0, b1, family, scale, gb(i), gb(i + 1));
        detail::add_kernel_gradient(b0, a1, family, -scale, gb(i), ga(i + 1));
    }
}

/// (1/n) * sum_i |a_i - b_i|^2 over paired rows.
inline Scalar pairwise_euclidean_mean(const Tensor& a, const Tensor& b) {
    detail::check_feature_batches(a, b, false, "pairwise_euclidean_mean");
    const int n = a.dim(0);
    Scalar total = 0;
    for (int i = 0; i < n; ++i) total += squared_distance(detail::row(a, i), detail::row(b, i));
    return total / static_cast<Scalar>(n);
}

inline void pairwise_euclidean_mean_backward(const Tensor& a, const Tensor& b, Scalar grad_out, Tensor* grad_a,
                                             Tensor* grad_b) {
    const Scalar scale = grad_out * Scalar(2) / static_cast<Scalar>(a.dim(0));
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Scalar g = scale * (a[i] - b[i]);
        if (grad_a) (*grad_a)[i] += g;
        if (grad_b) (*grad_b)[i] -= g;
    }
}

} // namespace mdseg
