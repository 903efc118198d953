#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "error.hpp"

namespace mdseg {

#ifdef MDSEG_USE_FLOAT
using Scalar = float;
#else
using Scalar = double;
#endif

/// Dense shape of rank 1..4, row-major (batch x channel x height x width for images).
class Shape {
public:
    static constexpr int kMaxRank = 4;

    Shape() = default;

    Shape(std::initializer_list<int> dims) { assign(dims.begin(), dims.end()); }

    explicit Shape(std::span<const int> dims) { assign(dims.begin(), dims.end()); }

    int rank() const { return rank_; }
    int operator[](int axis) const { return dims_[static_cast<std::size_t>(axis)]; }

    std::size_t size() const {
        std::size_t n = rank_ == 0 ? 0 : 1;
        for (int i = 0; i < rank_; ++i) n *= static_cast<std::size_t>(dims_[i]);
        return n;
    }

    std::span<const int> dims() const { return {dims_.data(), static_cast<std::size_t>(rank_)}; }

    bool operator==(const Shape& other) const {
        if (rank_ != other.rank_) return false;
        return std::equal(dims_.begin(), dims_.begin() + rank_, other.dims_.begin());
    }

    std::string str() const {
        std::string s = "[";
        for (int i = 0; i < rank_; ++i) {
            if (i) s += "x";
            s += std::to_string(dims_[i]);
        }
        return s + "]";
    }

private:
    template <class It>
    void assign(It first, It last) {
        const auto n = std::distance(first, last);
        if (n < 1 || n > kMaxRank) throw ShapeError("shape rank must be in 1..4, got " + std::to_string(n));
        rank_ = static_cast<int>(n);
        int i = 0;
        for (; first != last; ++first, ++i) {
            if (*first < 1) throw ShapeError("shape dimensions must be >= 1");
            dims_[static_cast<std::size_t>(i)] = *first;
        }
    }

    std::array<int, kMaxRank> dims_{};
    int rank_ = 0;
};

/// Row-major dense array of Scalars. A plain value type; graph nodes own copies.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, Scalar fill = 0) : shape_(shape), data_(shape.size(), fill) {}

    Tensor(Shape shape, const std::vector<Scalar>& data) : shape_(shape), data_(data.begin(), data.end()) {
        if (data_.size() != shape_.size())
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_.str());
    }

    static Tensor scalar(Scalar v) { return Tensor(Shape{1}, std::vector<Scalar>{v}); }

    static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
        return Tensor(shape, std::vector<Scalar>(values));
    }

    template <class Rng>
    static Tensor uniform(Shape shape, Scalar lo, Scalar hi, Rng& rng) {
        std::uniform_real_distribution<Scalar> dist(lo, hi);
        Tensor t(shape);
        for (auto& v : t.data_) v = dist(rng);
        return t;
    }

    template <class Rng>
    static Tensor normal(Shape shape, Scalar mean, Scalar stddev, Rng& rng) {
        std::normal_distribution<Scalar> dist(mean, stddev);
        Tensor t(shape);
        for (auto& v : t.data_) v = dist(rng);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int dim(int axis) const { return shape_[axis]; }
    int rank() const { return shape_.rank(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }
    std::span<Scalar> values() { return data_; }
    std::span<const Scalar> values() const { return data_; }

    Scalar& operator[](std::size_t i) { return data_[i]; }
    Scalar operator[](std::size_t i) const { return data_[i]; }

    Scalar item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_.str());
        return data_[0];
    }

    Scalar& at(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
    Scalar at(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }

    /// Same data, new shape of equal element count.
    Tensor reshaped(Shape shape) const {
        if (shape.size() != data_.size())
            throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
        Tensor t;
        t.shape_ = shape;
        t.data_ = data_;
        return t;
    }

    void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
    }

    /// Bit-level equality of shape and payload.
    bool identical(const Tensor& other) const { return shape_ == other.shape_ && data_ == other.data_; }

    void require_same_shape(const Tensor& other, const char* what) const {
        if (!(shape_ == other.shape_))
            throw ShapeError(std::string(what) + ": shape " + shape_.str() + " vs " + other.shape_.str());
    }

private:
    std::size_t offset(int n, int c, int y, int x) const {
        return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
    }

    Shape shape_;
    // Aligned storage keeps vectorized kernels on the same code path (and hence the same
    // summation order) no matter where the allocator places the buffer.
    std::vector<Scalar, Eigen::aligned_allocator<Scalar>> data_;
};

inline Scalar sum(const Tensor& t) {
    Scalar s = 0;
    for (Scalar v : t.values()) s += v;
    return s;
}

inline Scalar dot(const Tensor& a, const Tensor& b) {
    a.require_same_shape(b, "dot");
    Scalar s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
    a.require_same_shape(b, "max_abs_diff");
    Scalar m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Dense integer label map, batch x height x width. 255 marks ignored pixels.
struct LabelMap {
    static constexpr std::uint8_t kIgnore = 255;

    int batch = 0;
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    LabelMap() = default;
    LabelMap(int n, int h, int w, std::uint8_t fill = 0)
        : batch(n), height(h), width(w), data(static_cast<std::size_t>(n) * h * w, fill) {}

    std::size_t size() const { return data.size(); }
    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

    std::uint8_t& at(int n, int y, int x) { return data[(static_cast<std::size_t>(n) * height + y) * width + x]; }
    std::uint8_t at(int n, int y, int x) const { return data[(static_cast<std::size_t>(n) * height + y) * width + x]; }

    bool operator==(const LabelMap&) const = default;
};

} // namespace mdseg
