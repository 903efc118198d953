#pragma once

// Differentiable graph operations. Each builder appends one node and returns its handle.

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "graph.hpp"
#include "layers.hpp"
#include "mkmmd.hpp"

namespace mdseg {

namespace ops {

class Add final : public Op {
public:
    const char* kind() const override { return "add"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        Tensor out = *in[0];
        out += *in[1];
        return out;
    }
    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        for (Tensor* gi : grads)
            if (gi) *gi += g;
    }
};

class Sub final : public Op {
public:
    const char* kind() const override { return "sub"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        in[0]->require_same_shape(*in[1], "sub");
        Tensor out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= (*in[1])[i];
        return out;
    }
    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        if (grads[0]) *grads[0] += g;
        if (grads[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*grads[1])[i] -= g[i];
    }
};

class Mul final : public Op {
public:
    const char* kind() const override { return "mul"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        in[0]->require_same_shape(*in[1], "mul");
        Tensor out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*in[1])[i];
        return out;
    }
    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (grads[0]) (*grads[0])[i] += g[i] * (*in[1])[i];
            if (grads[1]) (*grads[1])[i] += g[i] * (*in[0])[i];
        }
    }
};

class Scale final : public Op {
public:
    explicit Scale(Scalar factor) : factor_(factor) {}
    const char* kind() const override { return "scale"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        Tensor out = *in[0];
        for (Scalar& v : out.values()) v *= factor_;
        return out;
    }
    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        if (grads[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += factor_ * g[i];
    }

private:
    Scalar factor_;
};

class Square final : public Op {
public:
    const char* kind() const override { return "square"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        Tensor out = *in[0];
        for (Scalar& v : out.values()) v *= v;
        return out;
    }
    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        if (grads[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += 2 * (*in[0])[i] * g[i];
    }
};

class Exp final : public Op {
public:
    const char* kind() const override { return "exp"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        Tensor out = *in[0];
        for (Scalar& v : out.values()) v = std::exp(v);
        return out;
    }
    void backward(std::span<const Tensor* const>, const Tensor& out, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        if (grads[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += out[i] * g[i];
    }
};

class Sum final : public Op {
public:
    const char* kind() const override { return "sum"; }
    Tensor forward(std::span<const Tensor* const> in) override { return Tensor::scalar(mdseg::sum(*in[0])); }
    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        if (grads[0])
            for (Scalar& v : grads[0]->values()) v += g[0];
    }
};

class Matmul final : public Op {
public:
    const char* kind() const override { return "matmul"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        const Tensor& a = *in[0];
        const Tensor& b = *in[1];
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
            throw ShapeError("matmul: cannot multiply " + a.shape().str() + " by " + b.shape().str());
        Tensor out(Shape{a.dim(0), b.dim(1)});
        detail::MatrixMap(out.data(), a.dim(0), b.dim(1)).noalias() =
            detail::ConstMatrixMap(a.data(), a.dim(0), a.dim(1)) * detail::ConstMatrixMap(b.data(), b.dim(0), b.dim(1));
        return out;
    }
    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        const Tensor& a = *in[0];
        const Tensor& b = *in[1];
        detail::ConstMatrixMap am(a.data(), a.dim(0), a.dim(1)), bm(b.data(), b.dim(0), b.dim(1)),
            gm(g.data(), g.dim(0), g.dim(1));
        if (grads[0]) detail::MatrixMap(grads[0]->data(), a.dim(0), a.dim(1)).noalias() += gm * bm.transpose();
        if (grads[1]) detail::MatrixMap(grads[1]->data(), b.dim(0), b.dim(1)).noalias() += am.transpose() * gm;
    }
};

/// Inputs: x, gamma, beta. In training mode the batch statistics are used (and kept for
/// the caller to fold into running averages); otherwise the referenced running statistics.
class BatchNorm final : public Op {
public:
    BatchNorm(const Tensor* running_mean, const Tensor* running_var, bool training, Scalar eps)
        : running_mean_(running_mean), running_var_(running_var), training_(training), eps_(eps) {}
    const char* kind() const override { return "batch_norm"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        if (training_) return batch_norm_train(*in[0], *in[1], *in[2], eps_, &stats_);
        stats_ = {*running_mean_, *running_var_};
        return batch_norm_eval(*in[0], *in[1], *in[2], stats_.mean, stats_.var, eps_);
    }
    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        batch_norm_backward(*in[0], *in[1], stats_, eps_, !training_, g, grads[0], grads[1], grads[2]);
    }

    bool training() const { return training_; }
    const BatchStats& stats() const { return stats_; }

private:
    const Tensor* running_mean_;
    const Tensor* running_var_;
    bool training_;
    Scalar eps_;
    BatchStats stats_;
};

class Relu final : public Op {
public:
    const char* kind() const override { return "relu"; }
    Tensor forward(std::span<const Tensor* const> in) override { return mdseg::relu(*in[0]); }
    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        if (grads[0])
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*in[0])[i] > 0) (*grads[0])[i] += g[i];
    }
};

/// Concatenates rank-2 tensors (n x d_k) along the feature axis.
class Concat final : public Op {
public:
    const char* kind() const override { return "concat"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        const int n = in[0]->dim(0);
        int total = 0;
        for (const Tensor* t : in) {
            if (t->rank() != 2 || t->dim(0) != n) throw ShapeError("concat: inputs must be n x d with equal n");
            total += t->dim(1);
        }
        Tensor out(Shape{n, total});
        int offset = 0;
        for (const Tensor* t : in) {
            const int d = t->dim(1);
            for (int r = 0; r < n; ++r)
                std::copy_n(t->data() + static_cast<std::size_t>(r) * d, d,
                            out.data() + static_cast<std::size_t>(r) * total + offset);
            offset += d;
        }
        return out;
    }
    void backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        const int n = out.dim(0), total = out.dim(1);
        int offset = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
            const int d = in[k]->dim(1);
            if (grads[k])
                for (int r = 0; r < n; ++r)
                    for (int j = 0; j < d; ++j)
                        (*grads[k])[static_cast<std::size_t>(r) * d + j] +=
                            g[static_cast<std::size_t>(r) * total + offset + j];
            offset += d;
        }
    }
};

class Reshape final : public Op {
public:
    explicit Reshape(Shape shape) : shape_(shape) {}
    const char* kind() const override { return "reshape"; }
    Tensor forward(std::span<const Tensor* const> in) override { return in[0]->reshaped(shape_); }
    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        if (grads[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += g[i];
    }

private:
    Shape shape_;
};

/// Inputs: x, kernel, bias.
class Conv2d final : public Op {
public:
    explicit Conv2d(ConvGeometry g) : geometry_(g) {}
    const char* kind() const override { return "conv2d"; }
    Tensor forward(std::span<const Tensor* const> in) override { return mdseg::conv2d(*in[0], *in[1], *in[2], geometry_); }
    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        conv2d_backward(*in[0], *in[1], g, geometry_, grads[0], grads[1], grads[2]);
    }

private:
    ConvGeometry geometry_;
};

/// Inputs: x, kernel, bias.
class Deconv2d final : public Op {
public:
    explicit Deconv2d(ConvGeometry g) : geometry_(g) {}
    const char* kind() const override { return "deconv2d"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        return mdseg::deconv2d(*in[0], *in[1], *in[2], geometry_);
    }
    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        deconv2d_backward(*in[0], *in[1], g, geometry_, grads[0], grads[1], grads[2]);
    }

private:
    ConvGeometry geometry_;
};

class MaxPool final : public Op {
public:
    const char* kind() const override { return "max_pool"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        auto [out, mask] = mdseg::max_pool(*in[0]);
        mask_ = std::move(mask);
        return out;
    }
    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        if (!grads[0]) return;
        const std::size_t in_plane = static_cast<std::size_t>(mask_.input_shape[2]) * mask_.input_shape[3];
        const std::size_t out_plane = static_cast<std::size_t>(mask_.output_shape[2]) * mask_.output_shape[3];
        for (std::size_t cell = 0; cell < g.size(); ++cell)
            (*grads[0])[(cell / out_plane) * in_plane + mask_.index[cell]] += g[cell];
    }

    const PoolingMask& mask() const { return mask_; }

private:
    PoolingMask mask_;
};

/// Optional in-place edit of a mask between pooling and unpooling (diagnostics).
using MaskHook = std::function<void(PoolingMask&)>;

/// Inputs: x, and the pooled output of the MaxPool node whose mask is used.
/// The second input only orders the graph; it receives no gradient.
class Unpool final : public Op {
public:
    explicit Unpool(const MaxPool* source, MaskHook hook = {}) : source_(source), hook_(std::move(hook)) {}
    const char* kind() const override { return "unpool"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        mask_ = source_->mask();
        if (hook_) hook_(mask_);
        return mdseg::unpool(*in[0], mask_);
    }
    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        if (grads[0]) unpool_backward(g, mask_, *grads[0]);
    }

    const PoolingMask& mask() const { return mask_; }

private:
    const MaxPool* source_;
    MaskHook hook_;
    PoolingMask mask_;
};

/// Inputs: x, weight (K x M), bias (M).
class FullyConnected final : public Op {
public:
    const char* kind() const override { return "fully_connected"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        return mdseg::fully_connected(*in[0], *in[1], *in[2]);
    }
    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        fully_connected_backward(*in[0], *in[1], g, grads[0], grads[1], grads[2]);
    }
};

class SoftmaxXent final : public Op {
public:
    explicit SoftmaxXent(LabelMap labels) : labels_(std::move(labels)) {}
    const char* kind() const override { return "softmax_xent"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        return Tensor::scalar(pixelwise_softmax_xent(*in[0], labels_));
    }
    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        if (grads[0]) pixelwise_softmax_xent_backward(*in[0], labels_, g[0], *grads[0]);
    }

private:
    LabelMap labels_;
};

class Mkmmd final : public Op {
public:
    explicit Mkmmd(KernelFamily family) : family_(std::move(family)) {}
    const char* kind() const override { return "mkmmd"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        return Tensor::scalar(mkmmd_unbiased(*in[0], *in[1], family_));
    }
    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        mkmmd_unbiased_backward(*in[0], *in[1], family_, g[0], grads[0], grads[1]);
    }

private:
    KernelFamily family_;
};

class EuclideanMean final : public Op {
public:
    const char* kind() const override { return "euclidean_mean"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        return Tensor::scalar(pairwise_euclidean_mean(*in[0], *in[1]));
    }
    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        pairwise_euclidean_mean_backward(*in[0], *in[1], g[0], grads[0], grads[1]);
    }
};

/// min(x, ceiling) elementwise; gradient passes where x < ceiling.
class ClampMax final : public Op {
public:
    explicit ClampMax(Scalar ceiling) : ceiling_(ceiling) {}
    const char* kind() const override { return "clamp_max"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        Tensor out = *in[0];
        for (Scalar& v : out.values()) v = std::min(v, ceiling_);
        return out;
    }
    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        if (grads[0])
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*in[0])[i] < ceiling_) (*grads[0])[i] += g[i];
    }

    Scalar ceiling() const { return ceiling_; }

private:
    Scalar ceiling_;
};

/// sum_k w_k * x_k over same-shape inputs, accumulated in input order.
class LinearCombination final : public Op {
public:
    explicit LinearCombination(std::vector<Scalar> weights) : weights_(std::move(weights)) {}
    const char* kind() const override { return "linear_combination"; }
    Tensor forward(std::span<const Tensor* const> in) override {
        if (in.size() != weights_.size()) throw ShapeError("linear_combination: weight count mismatch");
        Tensor out(in[0]->shape());
        for (std::size_t k = 0; k < in.size(); ++k) {
            in[k]->require_same_shape(out, "linear_combination");
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights_[k] * (*in[k])[i];
        }
        return out;
    }
    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> grads) override {
        for (std::size_t k = 0; k < grads.size(); ++k)
            if (grads[k])
                for (std::size_t i = 0; i < g.size(); ++i) (*grads[k])[i] += weights_[k] * g[i];
    }

private:
    std::vector<Scalar> weights_;
};

} // namespace ops

// ---------------------------------------------------------------------------
// Builders

inline Var add(Var a, Var b, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::Add>(), {a, b}, std::move(name));
}
inline Var sub(Var a, Var b, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::Sub>(), {a, b}, std::move(name));
}
inline Var mul(Var a, Var b, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::Mul>(), {a, b}, std::move(name));
}
inline Var scale(Var a, Scalar factor, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::Scale>(factor), {a}, std::move(name));
}
inline Var square(Var a, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::Square>(), {a}, std::move(name));
}
inline Var exp(Var a, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::Exp>(), {a}, std::move(name));
}
inline Var sum(Var a, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::Sum>(), {a}, std::move(name));
}
inline Var matmul(Var a, Var b, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::Matmul>(), {a, b}, std::move(name));
}
inline Var relu(Var a, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::Relu>(), {a}, std::move(name));
}
inline Var concat(std::vector<Var> parts, std::string name = {}) {
    Graph* g = parts.at(0).graph;
    return g->apply(std::make_unique<ops::Concat>(), std::move(parts), std::move(name));
}
inline Var reshape(Var a, Shape shape, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::Reshape>(shape), {a}, std::move(name));
}
inline Var conv2d(Var x, Var kernel, Var bias, ConvGeometry g, std::string name = {}) {
    return x.graph->apply(std::make_unique<ops::Conv2d>(g), {x, kernel, bias}, std::move(name));
}
inline Var deconv2d(Var x, Var kernel, Var bias, ConvGeometry g, std::string name = {}) {
    return x.graph->apply(std::make_unique<ops::Deconv2d>(g), {x, kernel, bias}, std::move(name));
}
inline Var max_pool(Var x, std::string name = {}) {
    return x.graph->apply(std::make_unique<ops::MaxPool>(), {x}, std::move(name));
}
/// `pooled` must be a node created by max_pool(); its mask routes the values.
inline Var unpool(Var x, Var pooled, ops::MaskHook hook = {}, std::string name = {}) {
    auto* source = dynamic_cast<const ops::MaxPool*>(pooled.graph->op(pooled));
    if (!source) throw Error("unpool: second argument is not a max_pool node");
    return x.graph->apply(std::make_unique<ops::Unpool>(source, std::move(hook)), {x, pooled}, std::move(name));
}
inline Var batch_norm(Var x, Var gamma, Var beta, const Tensor& running_mean, const Tensor& running_var, bool training,
                      Scalar eps = 1e-5, std::string name = {}) {
    return x.graph->apply(std::make_unique<ops::BatchNorm>(&running_mean, &running_var, training, eps), {x, gamma, beta},
                          std::move(name));
}
inline Var fully_connected(Var x, Var weight, Var bias, std::string name = {}) {
    return x.graph->apply(std::make_unique<ops::FullyConnected>(), {x, weight, bias}, std::move(name));
}
inline Var softmax_xent(Var scores, LabelMap labels, std::string name = {}) {
    return scores.graph->apply(std::make_unique<ops::SoftmaxXent>(std::move(labels)), {scores}, std::move(name));
}
inline Var mkmmd(Var a, Var b, const KernelFamily& family, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::Mkmmd>(family), {a, b}, std::move(name));
}
inline Var euclidean_mean(Var a, Var b, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::EuclideanMean>(), {a, b}, std::move(name));
}
inline Var clamp_max(Var a, Scalar ceiling, std::string name = {}) {
    return a.graph->apply(std::make_unique<ops::ClampMax>(ceiling), {a}, std::move(name));
}
inline Var linear_combination(std::vector<Var> terms, std::vector<Scalar> weights, std::string name = {}) {
    Graph* g = terms.at(0).graph;
    return g->apply(std::make_unique<ops::LinearCombination>(std::move(weights)), std::move(terms), std::move(name));
}

} // namespace mdseg
