#pragma once

// Layer kernels on plain tensors: forward passes and their adjoints.
// The graph ops in ops.hpp wrap these; tests call them directly.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "tensor.hpp"

namespace mdseg {

struct ConvGeometry {
    int stride = 1;
    int padding = 0;
};

/// Kernel is kh x kw x c_in x c_out, bias is c_out.
struct ConvParams {
    Tensor kernel;
    Tensor bias;
    int stride = 1;
    int padding = 0;

    ConvGeometry geometry() const { return {stride, padding}; }
};

/// Argmax locations of a 2x2 / stride-2 max pool.
struct PoolingMask {
    Shape input_shape;            // N x C x H x W
    Shape output_shape;           // N x C x H/2 x W/2
    std::vector<std::uint32_t> index; // per output cell: y * W + x within its input plane

    std::pair<int, int> position(std::size_t cell) const {
        const int w = input_shape[3];
        return {static_cast<int>(index[cell]) / w, static_cast<int>(index[cell]) % w};
    }

    bool operator==(const PoolingMask&) const = default;
};

inline int conv_output_size(int in, int kernel, ConvGeometry g) {
    if (g.stride < 1 || g.padding < 0) throw ArgumentError("conv geometry: stride must be >= 1 and padding >= 0");
    const int span = in + 2 * g.padding - kernel;
    if (span < 0) return 0;
    return span / g.stride + 1;
}

inline int deconv_output_size(int in, int kernel, ConvGeometry g) {
    if (g.stride < 1 || g.padding < 0) throw ArgumentError("deconv geometry: stride must be >= 1 and padding >= 0");
    return (in - 1) * g.stride - 2 * g.padding + kernel;
}

namespace detail {

using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

struct ConvDims {
    int n, cin, h, w;      // input of the forward convolution
    int cout, ho, wo;      // output of the forward convolution
    int kh, kw;
};

inline void check_kernel(const Tensor& kernel, const Tensor& bias, const char* what) {
    if (kernel.rank() != 4) throw ShapeError(std::string(what) + ": kernel must be kh x kw x c_in x c_out");
    if (bias.rank() != 1 || bias.dim(0) != kernel.dim(3))
        throw ShapeError(std::string(what) + ": bias length must equal c_out");
}

// Lowers one C x H x W plane stack to a (kh*kw*C) x (ho*wo) matrix, rows ordered (ky, kx, c).
inline void im2col(const Scalar* src, int c, int h, int w, int kh, int kw, ConvGeometry g, int ho, int wo,
                   Scalar* cols) {
    const int p = ho * wo;
    for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx)
            for (int ci = 0; ci < c; ++ci) {
                Scalar* row = cols + (static_cast<std::size_t>((ky * kw + kx) * c + ci)) * p;
                const Scalar* plane = src + static_cast<std::size_t>(ci) * h * w;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * g.stride + ky - g.padding;
                    Scalar* out = row + oy * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(out, out + wo, Scalar(0));
                        continue;
                    }
                    const Scalar* line = plane + static_cast<std::size_t>(iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * g.stride + kx - g.padding;
                        out[ox] = (ix < 0 || ix >= w) ? Scalar(0) : line[ix];
                    }
                }
            }
}

// Adjoint of im2col: scatters-and-adds the column matrix back onto the planes.
inline void col2im(const Scalar* cols, int c, int h, int w, int kh, int kw, ConvGeometry g, int ho, int wo,
                   Scalar* dst) {
    const int p = ho * wo;
    for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx)
            for (int ci = 0; ci < c; ++ci) {
                const Scalar* row = cols + (static_cast<std::size_t>((ky * kw + kx) * c + ci)) * p;
                Scalar* plane = dst + static_cast<std::size_t>(ci) * h * w;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * g.stride + ky - g.padding;
                    if (iy < 0 || iy >= h) continue;
                    Scalar* line = plane + static_cast<std::size_t>(iy) * w;
                    const Scalar* in = row + oy * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * g.stride + kx - g.padding;
                        if (ix >= 0 && ix < w) line[ix] += in[ox];
                    }
                }
            }
}

// K[ky,kx,ci,co] -> M[(ky,kx,co), ci]
inline RowMatrix transpose_kernel_channels(const Tensor& kernel) {
    const int kh = kernel.dim(0), kw = kernel.dim(1), ci = kernel.dim(2), co = kernel.dim(3);
    RowMatrix m(kh * kw * co, ci);
    for (int k = 0; k < kh * kw; ++k)
        for (int i = 0; i < ci; ++i)
            for (int o = 0; o < co; ++o) m(k * co + o, i) = kernel[(static_cast<std::size_t>(k) * ci + i) * co + o];
    return m;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Convolution (cross-correlation) with zero padding.

inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, ConvGeometry g) {
    detail::check_kernel(kernel, bias, "conv2d");
    if (x.rank() != 4) throw ShapeError("conv2d: input must be N x C x H x W");
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
    if (kernel.dim(2) != cin)
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, kernel expects " +
                         std::to_string(kernel.dim(2)));
    const int ho = conv_output_size(h, kh, g), wo = conv_output_size(w, kw, g);
    if (ho < 1 || wo < 1) throw ShapeError("conv2d: geometry yields an empty output");

    const int k = kh * kw * cin, p = ho * wo;
    Tensor out(Shape{n, cout, ho, wo});
    detail::RowMatrix cols(k, p);
    detail::ConstMatrixMap kmat(kernel.data(), k, cout);
    for (int s = 0; s < n; ++s) {
        detail::im2col(x.data() + static_cast<std::size_t>(s) * cin * h * w, cin, h, w, kh, kw, g, ho, wo, cols.data());
        detail::MatrixMap o(out.data() + static_cast<std::size_t>(s) * cout * p, cout, p);
        o.noalias() = kmat.transpose() * cols;
        for (int c = 0; c < cout; ++c) o.row(c).array() += bias[static_cast<std::size_t>(c)];
    }
    return out;
}

/// Reference convolution by direct loops. Slow; used to validate the lowered path.
inline Tensor conv2d_direct(const Tensor& x, const Tensor& kernel, const Tensor& bias, ConvGeometry g) {
    detail::check_kernel(kernel, bias, "conv2d");
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
    if (kernel.dim(2) != cin) throw ShapeError("conv2d: channel mismatch");
    const int ho = conv_output_size(h, kh, g), wo = conv_output_size(w, kw, g);
    if (ho < 1 || wo < 1) throw ShapeError("conv2d: geometry yields an empty output");
    Tensor out(Shape{n, cout, ho, wo});
    for (int s = 0; s < n; ++s)
        for (int co = 0; co < cout; ++co)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    Scalar acc = bias[static_cast<std::size_t>(co)];
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx)
                            for (int ci = 0; ci < cin; ++ci) {
                                const int iy = oy * g.stride + ky - g.padding, ix = ox * g.stride + kx - g.padding;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += x.at(s, ci, iy, ix) *
                                       kernel[((static_cast<std::size_t>(ky) * kw + kx) * cin + ci) * cout + co];
                            }
                    out.at(s, co, oy, ox) = acc;
                }
    return out;
}

inline Tensor conv2d(const Tensor& x, const ConvParams& p) { return conv2d(x, p.kernel, p.bias, p.geometry()); }

/// Accumulates gradients of conv2d into the non-null outputs.
inline void conv2d_backward(const Tensor& x, const Tensor& kernel, const Tensor& grad_out, ConvGeometry g,
                            Tensor* grad_x, Tensor* grad_kernel, Tensor* grad_bias) {
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
    const int ho = grad_out.dim(2), wo = grad_out.dim(3);
    const int k = kh * kw * cin, p = ho * wo;
    detail::RowMatrix cols(k, p);
    detail::ConstMatrixMap kmat(kernel.data(), k, cout);
    for (int s = 0; s < n; ++s) {
        detail::ConstMatrixMap go(grad_out.data() + static_cast<std::size_t>(s) * cout * p, cout, p);
        if (grad_kernel) {
            detail::im2col(x.data() + static_cast<std::size_t>(s) * cin * h * w, cin, h, w, kh, kw, g, ho, wo,
                           cols.data());
            detail::MatrixMap gk(grad_kernel->data(), k, cout);
            gk.noalias() += cols * go.transpose();
        }
        if (grad_bias)
            for (int c = 0; c < cout; ++c) (*grad_bias)[static_cast<std::size_t>(c)] += go.row(c).sum();
        if (grad_x) {
            cols.noalias() = kmat * go;
            detail::col2im(cols.data(), cin, h, w, kh, kw, g, ho, wo,
                           grad_x->data() + static_cast<std::size_t>(s) * cin * h * w);
        }
    }
}

// ---------------------------------------------------------------------------
// Transposed convolution: every input activation scatters a kernel-shaped patch.
// out[co, y*s - pad + ky, x*s - pad + kx] += in[ci, y, x] * kernel[ky, kx, ci, co]

inline Tensor deconv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, ConvGeometry g) {
    detail::check_kernel(kernel, bias, "deconv2d");
    if (x.rank() != 4) throw ShapeError("deconv2d: input must be N x C x H x W");
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
    if (kernel.dim(2) != cin)
        throw ShapeError("deconv2d: input has " + std::to_string(cin) + " channels, kernel expects " +
                         std::to_string(kernel.dim(2)));
    const int ho = deconv_output_size(h, kh, g), wo = deconv_output_size(w, kw, g);
    if (ho < 1 || wo < 1) throw ShapeError("deconv2d: geometry yields a non-positive output size");
    if (conv_output_size(ho, kh, g) != h || conv_output_size(wo, kw, g) != w)
        throw ShapeError("deconv2d: geometry is not invertible for this input size");

    const int pin = h * w, pout = ho * wo;
    Tensor out(Shape{n, cout, ho, wo});
    const detail::RowMatrix kt = detail::transpose_kernel_channels(kernel);
    detail::RowMatrix cols(kh * kw * cout, pin);
    for (int s = 0; s < n; ++s) {
        detail::ConstMatrixMap xin(x.data() + static_cast<std::size_t>(s) * cin * pin, cin, pin);
        cols.noalias() = kt * xin;
        Scalar* o = out.data() + static_cast<std::size_t>(s) * cout * pout;
        detail::col2im(cols.data(), cout, ho, wo, kh, kw, g, h, w, o);
        for (int c = 0; c < cout; ++c) {
            Scalar* plane = o + static_cast<std::size_t>(c) * pout;
            for (int i = 0; i < pout; ++i) plane[i] += bias[static_cast<std::size_t>(c)];
        }
    }
    return out;
}

inline Tensor deconv2d_direct(const Tensor& x, const Tensor& kernel, const Tensor& bias, ConvGeometry g) {
    detail::check_kernel(kernel, bias, "deconv2d");
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
    if (kernel.dim(2) != cin) throw ShapeError("deconv2d: channel mismatch");
    const int ho = deconv_output_size(h, kh, g), wo = deconv_output_size(w, kw, g);
    if (ho < 1 || wo < 1) throw ShapeError("deconv2d: geometry yields a non-positive output size");
    Tensor out(Shape{n, cout, ho, wo});
    for (int s = 0; s < n; ++s)
        for (int co = 0; co < cout; ++co)
            for (int y = 0; y < ho; ++y)
                for (int xx = 0; xx < wo; ++xx) out.at(s, co, y, xx) = bias[static_cast<std::size_t>(co)];
    for (int s = 0; s < n; ++s)
        for (int ci = 0; ci < cin; ++ci)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const int oy = y * g.stride - g.padding + ky, ox = xx * g.stride - g.padding + kx;
                            if (oy < 0 || oy >= ho || ox < 0 || ox >= wo) continue;
                            for (int co = 0; co < cout; ++co)
                                out.at(s, co, oy, ox) +=
                                    x.at(s, ci, y, xx) *
                                    kernel[((static_cast<std::size_t>(ky) * kw + kx) * cin + ci) * cout + co];
                        }
    return out;
}

inline Tensor deconv2d(const Tensor& x, const ConvParams& p) { return deconv2d(x, p.kernel, p.bias, p.geometry()); }

inline void deconv2d_backward(const Tensor& x, const Tensor& kernel, const Tensor& grad_out, ConvGeometry g,
                              Tensor* grad_x, Tensor* grad_kernel, Tensor* grad_bias) {
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
    const int ho = grad_out.dim(2), wo = grad_out.dim(3);
    const int pin = h * w, pout = ho * wo;
    const detail::RowMatrix kt = detail::transpose_kernel_channels(kernel);
    detail::RowMatrix cols(kh * kw * cout, pin);
    detail::RowMatrix gkt;
    if (grad_kernel) gkt = detail::RowMatrix::Zero(kh * kw * cout, cin);
    for (int s = 0; s < n; ++s) {
        const Scalar* go = grad_out.data() + static_cast<std::size_t>(s) * cout * pout;
        if (grad_bias)
            for (int c = 0; c < cout; ++c) {
                Scalar acc = 0;
                for (int i = 0; i < pout; ++i) acc += go[static_cast<std::size_t>(c) * pout + i];
                (*grad_bias)[static_cast<std::size_t>(c)] += acc;
            }
        if (!grad_x && !grad_kernel) continue;
        detail::im2col(go, cout, ho, wo, kh, kw, g, h, w, cols.data());
        if (grad_x) {
            detail::MatrixMap gx(grad_x->data() + static_cast<std::size_t>(s) * cin * pin, cin, pin);
            gx.noalias() += kt.transpose() * cols;
        }
        if (grad_kernel) {
            detail::ConstMatrixMap xin(x.data() + static_cast<std::size_t>(s) * cin * pin, cin, pin);
            gkt.noalias() += cols * xin.transpose();
        }
    }
    if (grad_kernel)
        for (int k = 0; k < kh * kw; ++k)
            for (int i = 0; i < cin; ++i)
                for (int o = 0; o < cout; ++o)
                    (*grad_kernel)[(static_cast<std::size_t>(k) * cin + i) * cout + o] += gkt(k * cout + o, i);
}

// ---------------------------------------------------------------------------
// 2x2 / stride-2 max pooling with recorded argmax, and the matching unpool.

/// Ties resolve to the first cell in row-major window order.
inline std::pair<Tensor, PoolingMask> max_pool(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("max_pool: input must be N x C x H x W");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("max_pool: spatial dims must be even, got " + x.shape().str());
    const int ho = h / 2, wo = w / 2;
    Tensor out(Shape{n, c, ho, wo});
    PoolingMask mask{x.shape(), out.shape(), std::vector<std::uint32_t>(out.size())};
    std::size_t cell = 0;
    for (int s = 0; s < n; ++s)
        for (int ch = 0; ch < c; ++ch) {
            const Scalar* plane = x.data() + (static_cast<std::size_t>(s) * c + ch) * h * w;
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox, ++cell) {
                    int best = (2 * oy) * w + 2 * ox;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const int idx = (2 * oy + dy) * w + 2 * ox + dx;
                            if (plane[idx] > plane[best]) best = idx;
                        }
                    out[cell] = plane[best];
                    mask.index[cell] = static_cast<std::uint32_t>(best);
                }
        }
    return {std::move(out), std::move(mask)};
}

/// Places each value at its recorded argmax in a zero map of twice the spatial size.
inline Tensor unpool(const Tensor& x, const PoolingMask& mask) {
    if (!(x.shape() == mask.output_shape))
        throw ShapeError("unpool: input shape " + x.shape().str() + " does not match mask shape " +
                         mask.output_shape.str());
    Tensor out(mask.input_shape);
    const std::size_t in_plane = static_cast<std::size_t>(mask.input_shape[2]) * mask.input_shape[3];
    const std::size_t out_plane = static_cast<std::size_t>(mask.output_shape[2]) * mask.output_shape[3];
    for (std::size_t cell = 0; cell < x.size(); ++cell) {
        const std::size_t plane = cell / out_plane;
        out[plane * in_plane + mask.index[cell]] = x[cell];
    }
    return out;
}

/// Gradient of unpool w.r.t. its input: gather at the mask positions.
inline void unpool_backward(const Tensor& grad_out, const PoolingMask& mask, Tensor& grad_x) {
    const std::size_t in_plane = static_cast<std::size_t>(mask.input_shape[2]) * mask.input_shape[3];
    const std::size_t out_plane = static_cast<std::size_t>(mask.output_shape[2]) * mask.output_shape[3];
    for (std::size_t cell = 0; cell < grad_x.size(); ++cell) {
        const std::size_t plane = cell / out_plane;
        grad_x[cell] += grad_out[plane * in_plane + mask.index[cell]];
    }
}

// ---------------------------------------------------------------------------
// Batch normalization over N x C x H x W (per channel) or N x F (per feature).

struct BatchStats {
    Tensor mean;  ///< per channel
    Tensor var;   ///< per channel, biased (divides by the reduction count)
};

namespace detail {

struct ChannelLayout {
    int n = 0;
    int channels = 0;
    std::size_t inner = 1;
};

inline ChannelLayout channel_layout(const Tensor& x, const Tensor& gamma, const Tensor& beta, const char* what) {
    if (x.rank() != 2 && x.rank() != 4) throw ShapeError(std::string(what) + ": input must be N x F or N x C x H x W");
    ChannelLayout l{x.dim(0), x.dim(1), x.rank() == 4 ? static_cast<std::size_t>(x.dim(2)) * x.dim(3) : 1};
    if (gamma.size() != static_cast<std::size_t>(l.channels) || beta.size() != static_cast<std::size_t>(l.channels))
        throw ShapeError(std::string(what) + ": scale/shift need one entry per channel");
    return l;
}

template <class F>
void for_channel(const ChannelLayout& l, int c, F&& f) {
    for (int b = 0; b < l.n; ++b) {
        const std::size_t base = (static_cast<std::size_t>(b) * l.channels + c) * l.inner;
        for (std::size_t i = 0; i < l.inner; ++i) f(base + i);
    }
}

} // namespace detail

/// Normalizes with the batch's own statistics, which are returned through `stats`.
inline Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps,
                               BatchStats* stats = nullptr) {
    const auto l = detail::channel_layout(x, gamma, beta, "batch_norm");
    const Scalar count = static_cast<Scalar>(l.n) * static_cast<Scalar>(l.inner);
    Tensor out(x.shape());
    Tensor mean(Shape{l.channels}), var(Shape{l.channels});
    for (int c = 0; c < l.channels; ++c) {
        Scalar m = 0;
        detail::for_channel(l, c, [&](std::size_t i) { m += x[i]; });
        m /= count;
        Scalar v = 0;
        detail::for_channel(l, c, [&](std::size_t i) { v += (x[i] - m) * (x[i] - m); });
        v /= count;
        const Scalar inv = 1 / std::sqrt(v + eps);
        detail::for_channel(l, c, [&](std::size_t i) { out[i] = gamma[c] * (x[i] - m) * inv + beta[c]; });
        mean[c] = m;
        var[c] = v;
    }
    if (stats) *stats = {std::move(mean), std::move(var)};
    return out;
}

/// Normalizes with fixed (running) statistics; an affine map of x.
inline Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                              const Tensor& var, Scalar eps) {
    const auto l = detail::channel_layout(x, gamma, beta, "batch_norm");
    if (mean.size() != static_cast<std::size_t>(l.channels) || var.size() != mean.size())
        throw ShapeError("batch_norm: running statistics need one entry per channel");
    Tensor out(x.shape());
    for (int c = 0; c < l.channels; ++c) {
        const Scalar inv = 1 / std::sqrt(var[c] + eps);
        detail::for_channel(l, c, [&](std::size_t i) { out[i] = gamma[c] * (x[i] - mean[c]) * inv + beta[c]; });
    }
    return out;
}

/// Gradients of batch_norm_train (batch statistics depend on x) or, when `fixed_stats`
/// is true, of batch_norm_eval with `stats` as the fixed statistics.
inline void batch_norm_backward(const Tensor& x, const Tensor& gamma, const BatchStats& stats, Scalar eps,
                                bool fixed_stats, const Tensor& grad_out, Tensor* grad_x, Tensor* grad_gamma,
                                Tensor* grad_beta) {
    const auto l = detail::channel_layout(x, gamma, gamma, "batch_norm");
    const Scalar count = static_cast<Scalar>(l.n) * static_cast<Scalar>(l.inner);
    for (int c = 0; c < l.channels; ++c) {
        const Scalar m = stats.mean[c];
        const Scalar inv = 1 / std::sqrt(stats.var[c] + eps);
        Scalar sum_g = 0, sum_gx = 0;
        detail::for_channel(l, c, [&](std::size_t i) {
            sum_g += grad_out[i];
            sum_gx += grad_out[i] * (x[i] - m) * inv;
        });
        if (grad_gamma) (*grad_gamma)[c] += sum_gx;
        if (grad_beta) (*grad_beta)[c] += sum_g;
        if (!grad_x) continue;
        const Scalar k = gamma[c] * inv;
        if (fixed_stats) {
            detail::for_channel(l, c, [&](std::size_t i) { (*grad_x)[i] += k * grad_out[i]; });
        } else {
            const Scalar mean_g = sum_g / count, mean_gx = sum_gx / count;
            detail::for_channel(l, c, [&](std::size_t i) {
                (*grad_x)[i] += k * (grad_out[i] - mean_g - (x[i] - m) * inv * mean_gx);
            });
        }
    }
}

// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0 ? x[i] : Scalar(0);
    return out;
}

/// Rows of `x` (leading axis = batch, rest flattened) times W (K x M) plus b (M).
/// A rank-1 x is a single sample and yields a rank-1 result.
inline Tensor fully_connected(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2) throw ShapeError("fully_connected: weight must be K x M");
    const int k = weight.dim(0), m = weight.dim(1);
    if (bias.rank() != 1 || bias.dim(0) != m) throw ShapeError("fully_connected: bias length must equal M");
    const int n = x.rank() == 1 ? 1 : x.dim(0);
    if (x.size() != static_cast<std::size_t>(n) * k)
        throw ShapeError("fully_connected: input " + x.shape().str() + " does not flatten to " + std::to_string(k) +
                         " per sample");
    Tensor out(x.rank() == 1 ? Shape{m} : Shape{n, m});
    detail::ConstMatrixMap xm(x.data(), n, k);
    detail::ConstMatrixMap wm(weight.data(), k, m);
    detail::MatrixMap om(out.data(), n, m);
    om.noalias() = xm * wm;
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < m; ++j) om(r, j) += bias[static_cast<std::size_t>(j)];
    return out;
}

inline void fully_connected_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out, Tensor* grad_x,
                                     Tensor* grad_weight, Tensor* grad_bias) {
    const int k = weight.dim(0), m = weight.dim(1);
    const int n = static_cast<int>(x.size()) / k;
    detail::ConstMatrixMap xm(x.data(), n, k);
    detail::ConstMatrixMap wm(weight.data(), k, m);
    detail::ConstMatrixMap gm(grad_out.data(), n, m);
    if (grad_x) {
        detail::MatrixMap gx(grad_x->data(), n, k);
        gx.noalias() += gm * wm.transpose();
    }
    if (grad_weight) {
        detail::MatrixMap gw(grad_weight->data(), k, m);
        gw.noalias() += xm.transpose() * gm;
    }
    if (grad_bias)
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < m; ++j) (*grad_bias)[static_cast<std::size_t>(j)] += gm(r, j);
}

// ---------------------------------------------------------------------------
// Per-pixel softmax and cross-entropy.

/// Softmax over the channel axis of an N x C x H x W score map.
inline Tensor softmax_channels(const Tensor& scores) {
    if (scores.rank() != 4) throw ShapeError("softmax: scores must be N x C x H x W");
    const int n = scores.dim(0), c = scores.dim(1);
    const std::size_t plane = static_cast<std::size_t>(scores.dim(2)) * scores.dim(3);
    Tensor out(scores.shape());
    for (int s = 0; s < n; ++s)
        for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t base = static_cast<std::size_t>(s) * c * plane + p;
            Scalar mx = scores[base];
            for (int k = 1; k < c; ++k) mx = std::max(mx, scores[base + k * plane]);
            Scalar z = 0;
            for (int k = 0; k < c; ++k) {
                const Scalar e = std::exp(scores[base + k * plane] - mx);
                out[base + k * plane] = e;
                z += e;
            }
            for (int k = 0; k < c; ++k) out[base + k * plane] /= z;
        }
    return out;
}

inline void check_labels(const Tensor& scores, const LabelMap& labels) {
    if (scores.rank() != 4 || labels.batch != scores.dim(0) || labels.height != scores.dim(2) ||
        labels.width != scores.dim(3))
        throw ShapeError("label map " + std::to_string(labels.batch) + "x" + std::to_string(labels.height) + "x" +
                         std::to_string(labels.width) + " does not match scores " + scores.shape().str());
    const int c = scores.dim(1);
    for (std::uint8_t l : labels.data)
        if (l != LabelMap::kIgnore && l >= c)
            throw ArgumentError("label " + std::to_string(l) + " is out of range for " + std::to_string(c) + " classes");
}

/// Mean over non-ignored pixels of -log softmax(scores)[label]. Zero if every pixel is ignored.
inline Scalar pixelwise_softmax_xent(const Tensor& scores, const LabelMap& labels) {
    check_labels(scores, labels);
    const int n = scores.dim(0), c = scores.dim(1);
    const std::size_t plane = labels.plane();
    Scalar total = 0;
    std::size_t count = 0;
    for (int s = 0; s < n; ++s)
        for (std::size_t p = 0; p < plane; ++p) {
            const std::uint8_t l = labels.data[static_cast<std::size_t>(s) * plane + p];
            if (l == LabelMap::kIgnore) continue;
            const std::size_t base = static_cast<std::size_t>(s) * c * plane + p;
            Scalar mx = scores[base];
            for (int k = 1; k < c; ++k) mx = std::max(mx, scores[base + k * plane]);
            Scalar z = 0;
            for (int k = 0; k < c; ++k) z += std::exp(scores[base + k * plane] - mx);
            total += std::log(z) - (scores[base + l * plane] - mx);
            ++count;
        }
    return count ? total / static_cast<Scalar>(count) : Scalar(0);
}

inline void pixelwise_softmax_xent_backward(const Tensor& scores, const LabelMap& labels, Scalar grad_loss,
                                            Tensor& grad_scores) {
    const int n = scores.dim(0), c = scores.dim(1);
    const std::size_t plane = labels.plane();
    std::size_t count = 0;
    for (std::uint8_t l : labels.data) count += l != LabelMap::kIgnore;
    if (count == 0) return;
    const Scalar scale = grad_loss / static_cast<Scalar>(count);
    for (int s = 0; s < n; ++s)
        for (std::size_t p = 0; p < plane; ++p) {
            const std::uint8_t l = labels.data[static_cast<std::size_t>(s) * plane + p];
            if (l == LabelMap::kIgnore) continue;
            const std::size_t base = static_cast<std::size_t>(s) * c * plane + p;
            Scalar mx = scores[base];
            for (int k = 1; k < c; ++k) mx = std::max(mx, scores[base + k * plane]);
            Scalar z = 0;
            for (int k = 0; k < c; ++k) z += std::exp(scores[base + k * plane] - mx);
            for (int k = 0; k < c; ++k) {
                const Scalar prob = std::exp(scores[base + k * plane] - mx) / z;
                grad_scores[base + k * plane] += scale * (prob - (k == l ? Scalar(1) : Scalar(0)));
            }
        }
}

} // namespace mdseg
