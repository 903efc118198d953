#pragma once

// Two-stream encoder/decoder with a shared feature bridge and score fusion.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ops.hpp"

namespace mdseg {

enum class Modality { rgb, depth };

inline const char* modality_name(Modality m) { return m == Modality::rgb ? "rgb" : "depth"; }
inline Modality other(Modality m) { return m == Modality::rgb ? Modality::depth : Modality::rgb; }

struct EncoderBlock {
    int convs = 2;
    int channels = 16;
    bool operator==(const EncoderBlock&) const = default;
};

enum class InitScheme { xavier, he };

inline InitScheme parse_init_scheme(const std::string& s) {
    if (s == "xavier") return InitScheme::xavier;
    if (s == "he") return InitScheme::he;
    throw ArgumentError("unknown init scheme '" + s + "' (expected xavier or he)");
}

inline const char* init_scheme_name(InitScheme s) { return s == InitScheme::xavier ? "xavier" : "he"; }

struct NetworkConfig {
    int height = 32;
    int width = 32;
    int rgb_channels = 3;
    int depth_channels = 1;
    std::vector<EncoderBlock> blocks{{2, 16}, {2, 32}};
    int feature_dim = 64;
    int classes = 4;
    Scalar fusion_weight = 0.5;
    /// Uniform weight init: xavier uses sqrt(6 / (fan_in + fan_out)), he uses sqrt(6 / fan_in).
    InitScheme init = InitScheme::xavier;
    /// Batch normalization after every conv, deconv and fc layer except the bridge (fc1c, fc1s)
    /// and the score heads.
    bool batch_norm = true;

    bool operator==(const NetworkConfig&) const = default;

    void validate() const {
        if (blocks.empty()) throw ArgumentError("network needs at least one encoder block");
        for (const EncoderBlock& b : blocks)
            if (b.convs < 1 || b.channels < 1) throw ArgumentError("encoder blocks need >= 1 conv and >= 1 channel");
        const int div = 1 << blocks.size();
        if (height < div || width < div || height % div != 0 || width % div != 0)
            throw ArgumentError("input size " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not divisible by " + std::to_string(div));
        if (rgb_channels < 1 || depth_channels < 1) throw ArgumentError("input channel counts must be >= 1");
        if (feature_dim < 1) throw ArgumentError("feature_dim must be >= 1");
        if (classes < 2 || classes > 255) throw ArgumentError("classes must be in [2, 255]");
        if (!(fusion_weight >= 0 && fusion_weight <= 1)) throw ArgumentError("fusion_weight must be in [0, 1]");
    }

    int input_channels(Modality m) const { return m == Modality::rgb ? rgb_channels : depth_channels; }
    int block_count() const { return static_cast<int>(blocks.size()); }

    /// Decoder taps: 0 is the projected bottleneck, tap t follows the t-th decoder block.
    /// The last tap is at full input resolution.
    int tap_count() const { return block_count() + 1; }
    int tap_height(int t) const { return height >> (block_count() - t); }
    int tap_width(int t) const { return width >> (block_count() - t); }
    int tap_channels(int t) const {
        if (t == 0) return blocks.back().channels;
        const int b = block_count() - t;  // decoder block t mirrors encoder block b (0-based)
        return blocks[static_cast<std::size_t>(b == 0 ? 0 : b - 1)].channels;
    }
    int tap_for_resolution(int h, int w) const {
        for (int t = 0; t < tap_count(); ++t)
            if (tap_height(t) == h && tap_width(t) == w) return t;
        throw ArgumentError("no decoder stage outputs " + std::to_string(h) + "x" + std::to_string(w));
    }

    std::string blocks_text() const {
        std::string out;
        for (const EncoderBlock& b : blocks) {
            if (!out.empty()) out += ",";
            out += std::to_string(b.convs) + "x" + std::to_string(b.channels);
        }
        return out;
    }

    static std::vector<EncoderBlock> parse_blocks(const std::string& text) {
        std::vector<EncoderBlock> out;
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto x = item.find('x');
            if (x == std::string::npos) throw ArgumentError("encoder block '" + item + "' is not <convs>x<channels>");
            try {
                out.push_back({std::stoi(item.substr(0, x)), std::stoi(item.substr(x + 1))});
            } catch (const std::logic_error&) {
                throw ArgumentError("encoder block '" + item + "' is not <convs>x<channels>");
            }
        }
        if (out.empty()) throw ArgumentError("empty encoder block list");
        return out;
    }
};

/// Parameters of both streams, keyed by "<modality>.<layer>.<w|b>" (plus ".gamma"/".beta" for
/// normalized layers). Running normalization statistics live in separate buffers
/// "<modality>.<layer>.<mean|var>" that the optimizer never touches.
class Model {
public:
    Model(NetworkConfig config, std::uint64_t seed) : config_(std::move(config)) {
        config_.validate();
        std::mt19937_64 rng(seed);
        for (Modality m : {Modality::rgb, Modality::depth}) init_stream(m, rng);
    }

    const NetworkConfig& config() const { return config_; }
    std::map<std::string, Tensor>& parameters() { return params_; }
    const std::map<std::string, Tensor>& parameters() const { return params_; }

    Tensor& param(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ArgumentError("model has no parameter '" + name + "'");
        return it->second;
    }
    const Tensor& param(const std::string& name) const { return const_cast<Model*>(this)->param(name); }

    std::map<std::string, Tensor>& buffers() { return buffers_; }
    const std::map<std::string, Tensor>& buffers() const { return buffers_; }

    Tensor& buffer(const std::string& name) {
        auto it = buffers_.find(name);
        if (it == buffers_.end()) throw ArgumentError("model has no buffer '" + name + "'");
        return it->second;
    }
    const Tensor& buffer(const std::string& name) const { return const_cast<Model*>(this)->buffer(name); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params_) n += t.size();
        return n;
    }

    /// Copies every weight of stream `from` into stream `to`. Needs equal input channels.
    void copy_stream(Modality from, Modality to) {
        if (config_.input_channels(from) != config_.input_channels(to))
            throw ShapeError("copy_stream: streams have different input channel counts");
        const std::string src = std::string(modality_name(from)) + ".";
        const std::string dst = std::string(modality_name(to)) + ".";
        for (auto* store : {&params_, &buffers_})
            for (auto& [name, t] : *store)
                if (name.rfind(src, 0) == 0) store->at(dst + name.substr(src.size())) = t;
    }

    /// Layer names (without modality prefix) of the decoder between tap `from` (exclusive,
    /// -1 for the start of the decoder) and tap `to` (inclusive), including the score head at `to`.
    std::vector<std::string> decoder_layers(int from, int to) const {
        std::vector<std::string> out;
        const int nb = config_.block_count();
        for (int t = from + 1; t <= to; ++t) {
            if (t == 0) {
                out.push_back("project");
            } else {
                const int b = nb - t;
                for (int i = 1; i <= config_.blocks[static_cast<std::size_t>(b)].convs; ++i)
                    out.push_back("deconv" + std::to_string(b + 1) + "_" + std::to_string(i));
            }
        }
        out.push_back("score" + std::to_string(to));
        return out;
    }

    /// Full parameter names (both modalities) for a decoder segment.
    std::vector<std::string> decoder_parameters(int from, int to) const {
        std::vector<std::string> out;
        for (Modality m : {Modality::rgb, Modality::depth})
            for (const std::string& layer : decoder_layers(from, to))
                for (const char* suffix : {".w", ".b", ".gamma", ".beta"}) {
                    std::string name = std::string(modality_name(m)) + "." + layer + suffix;
                    if (params_.count(name)) out.push_back(std::move(name));
                }
        return out;
    }

private:
    void add_layer(const std::string& name, Shape kernel_shape, int bias_size, int fan_in, int fan_out,
                   std::mt19937_64& rng) {
        const int fan = config_.init == InitScheme::xavier ? fan_in + fan_out : fan_in;
        const Scalar limit = std::sqrt(Scalar(6) / Scalar(fan));
        params_.emplace(name + ".w", Tensor::uniform(kernel_shape, -limit, limit, rng));
        params_.emplace(name + ".b", Tensor(Shape{bias_size}));
    }

    void add_norm(const std::string& name, int channels) {
        if (!config_.batch_norm) return;
        params_.emplace(name + ".gamma", Tensor(Shape{channels}, 1.0));
        params_.emplace(name + ".beta", Tensor(Shape{channels}));
        buffers_.emplace(name + ".mean", Tensor(Shape{channels}));
        buffers_.emplace(name + ".var", Tensor(Shape{channels}, 1.0));
    }

    void add_conv(const std::string& name, int kh, int kw, int cin, int cout, std::mt19937_64& rng, bool norm = true) {
        add_layer(name, Shape{kh, kw, cin, cout}, cout, kh * kw * cin, kh * kw * cout, rng);
        if (norm) add_norm(name, cout);
    }

    void add_fc(const std::string& name, int in, int out, std::mt19937_64& rng, bool norm = true) {
        add_layer(name, Shape{in, out}, out, in, out, rng);
        if (norm) add_norm(name, out);
    }

    void init_stream(Modality m, std::mt19937_64& rng) {
        const NetworkConfig& c = config_;
        const std::string p = std::string(modality_name(m)) + ".";
        const int nb = c.block_count();
        const int f = c.feature_dim;

        int channels = c.input_channels(m);
        for (int b = 0; b < nb; ++b) {
            const EncoderBlock& blk = c.blocks[static_cast<std::size_t>(b)];
            for (int i = 1; i <= blk.convs; ++i) {
                add_conv(p + "conv" + std::to_string(b + 1) + "_" + std::to_string(i), 3, 3, channels, blk.channels, rng);
                channels = blk.channels;
            }
        }
        const int bh = c.tap_height(0), bw = c.tap_width(0);
        add_conv(p + "bottleneck", bh, bw, channels, f, rng);
        // The bridge features stay unnormalized: per-stream standardization would match
        // the two streams' moments regardless of what the discrepancy terms ask for.
        add_fc(p + "fc1c", f, f, rng, false);
        add_fc(p + "fc1s", f, f, rng, false);
        add_fc(p + "fc2", 3 * f, f, rng);
        add_fc(p + "project", f, channels * bh * bw, rng);
        add_conv(p + "score0", 1, 1, channels, c.classes, rng, false);

        for (int b = nb - 1; b >= 0; --b) {
            const EncoderBlock& blk = c.blocks[static_cast<std::size_t>(b)];
            const int out_channels = c.blocks[static_cast<std::size_t>(b == 0 ? 0 : b - 1)].channels;
            for (int i = 1; i <= blk.convs; ++i) {
                const int cout = i == blk.convs ? out_channels : blk.channels;
                add_conv(p + "deconv" + std::to_string(b + 1) + "_" + std::to_string(i), 3, 3, blk.channels, cout, rng);
            }
            const int tap = nb - b;
            add_conv(p + "score" + std::to_string(tap), 1, 1, out_channels, c.classes, rng, false);
        }
    }

    NetworkConfig config_;
    std::map<std::string, Tensor> params_;
    std::map<std::string, Tensor> buffers_;
};

/// Which fc2 input slots carry features; disabled slots receive zeros.
struct FeatureSlots {
    bool specific = true;
    bool common_self = true;
    bool common_other = true;
};

struct ForwardOptions {
    int tap = -1;  ///< decoder tap producing the score maps; -1 = full resolution
    FeatureSlots slots;
    ops::MaskHook rgb_mask_hook;    ///< applied to each mask the RGB decoder consumes
    ops::MaskHook depth_mask_hook;  ///< applied to each mask the depth decoder consumes
    bool require_even_batch = true;
    bool training = false;  ///< normalize with batch statistics instead of the running ones
};

/// Graph nodes of one stream.
struct StreamNodes {
    Var input;
    std::vector<Var> pools;  ///< max_pool nodes, encoder order
    std::vector<Var> unpools;  ///< unpool nodes, decoder order
    Var conv_features;
    Var common;
    Var specific;
    Var decoder_input;
    std::vector<Var> taps;
    Var scores;
};

struct BridgeOutputs {
    Tensor c_rgb, c_d, s_rgb, s_d;
    Tensor dec_in_rgb, dec_in_d;
};

/// A built (and usually evaluated) forward graph. Loss terms may be appended to `graph`.
struct ForwardRecord {
    std::unique_ptr<Graph> graph;
    StreamNodes rgb, depth;
    std::vector<std::pair<std::string, Var>> norms;  ///< (layer name, batch_norm node)
    int batch = 0;
    int tap = 0;

    StreamNodes& stream(Modality m) { return m == Modality::rgb ? rgb : depth; }
    const StreamNodes& stream(Modality m) const { return m == Modality::rgb ? rgb : depth; }

    const Tensor& scores(Modality m) const { return graph->value(stream(m).scores); }

    BridgeOutputs bridge() const {
        return {graph->value(rgb.common),   graph->value(depth.common),        graph->value(rgb.specific),
                graph->value(depth.specific), graph->value(rgb.decoder_input), graph->value(depth.decoder_input)};
    }

    /// Pooling masks recorded by a stream's encoder, in encoder order.
    std::vector<PoolingMask> masks(Modality m) const {
        std::vector<PoolingMask> out;
        for (Var v : stream(m).pools) out.push_back(static_cast<const ops::MaxPool*>(graph->op(v))->mask());
        return out;
    }

    /// Masks actually consumed by a stream's decoder (after any hook), in decoder order.
    std::vector<PoolingMask> decoder_masks(Modality m) const {
        std::vector<PoolingMask> out;
        for (Var v : stream(m).unpools) out.push_back(static_cast<const ops::Unpool*>(graph->op(v))->mask());
        return out;
    }
};

namespace detail {

inline Var param(Graph& g, Model& model, const std::string& name) { return g.parameter(name, model.param(name)); }

struct BuildContext {
    Graph& g;
    Model& model;
    bool training;
    std::vector<std::pair<std::string, Var>>& norms;
};

inline Var normalize(BuildContext& cx, Var x, const std::string& name) {
    if (!cx.model.parameters().count(name + ".gamma")) return x;
    Var y = batch_norm(x, param(cx.g, cx.model, name + ".gamma"), param(cx.g, cx.model, name + ".beta"),
                       cx.model.buffer(name + ".mean"), cx.model.buffer(name + ".var"), cx.training, 1e-5, name + ".bn");
    cx.norms.emplace_back(name, y);
    return y;
}

inline Var layer_conv(Graph& g, Model& model, Var x, const std::string& name, ConvGeometry geo) {
    return conv2d(x, param(g, model, name + ".w"), param(g, model, name + ".b"), geo, name);
}

/// conv/deconv/fc followed by normalization (when enabled) and relu.
inline Var conv_block(BuildContext& cx, Var x, const std::string& name, ConvGeometry geo) {
    return relu(normalize(cx, layer_conv(cx.g, cx.model, x, name, geo), name), name + ".relu");
}

inline Var deconv_block(BuildContext& cx, Var x, const std::string& name) {
    Var y = deconv2d(x, param(cx.g, cx.model, name + ".w"), param(cx.g, cx.model, name + ".b"), {1, 1}, name);
    return relu(normalize(cx, y, name), name + ".relu");
}

inline Var fc_block(BuildContext& cx, Var x, const std::string& name, const std::string& out_name) {
    Var y = fully_connected(x, param(cx.g, cx.model, name + ".w"), param(cx.g, cx.model, name + ".b"), name);
    return relu(normalize(cx, y, name), out_name);
}

inline void build_encoder(BuildContext& cx, Modality m, int batch, StreamNodes& s) {
    Graph& g = cx.g;
    const NetworkConfig& c = cx.model.config();
    const std::string p = std::string(modality_name(m)) + ".";
    s.input = g.input(modality_name(m), Shape{batch, c.input_channels(m), c.height, c.width});
    Var x = s.input;
    for (int b = 0; b < c.block_count(); ++b) {
        const EncoderBlock& blk = c.blocks[static_cast<std::size_t>(b)];
        for (int i = 1; i <= blk.convs; ++i) {
            const std::string name = p + "conv" + std::to_string(b + 1) + "_" + std::to_string(i);
            x = conv_block(cx, x, name, {1, 1});
        }
        x = max_pool(x, p + "pool" + std::to_string(b + 1));
        s.pools.push_back(x);
    }
    x = conv_block(cx, x, p + "bottleneck", {1, 0});
    s.conv_features = reshape(x, Shape{batch, c.feature_dim}, p + "xconv");
    s.common = fc_block(cx, s.conv_features, p + "fc1c", p + "c");
    s.specific = fc_block(cx, s.conv_features, p + "fc1s", p + "s");
}

inline void build_decoder(BuildContext& cx, Modality m, int batch, int last_tap, const ops::MaskHook& hook,
                          StreamNodes& s) {
    const NetworkConfig& c = cx.model.config();
    const std::string p = std::string(modality_name(m)) + ".";
    const int nb = c.block_count();
    Var x = fc_block(cx, s.decoder_input, p + "project", p + "project.relu");
    x = reshape(x, Shape{batch, c.tap_channels(0), c.tap_height(0), c.tap_width(0)}, p + "tap0");
    s.taps.push_back(x);
    for (int t = 1; t <= last_tap; ++t) {
        const int b = nb - t;
        x = unpool(x, s.pools[static_cast<std::size_t>(b)], hook, p + "unpool" + std::to_string(b + 1));
        s.unpools.push_back(x);
        for (int i = 1; i <= c.blocks[static_cast<std::size_t>(b)].convs; ++i) {
            const std::string name = p + "deconv" + std::to_string(b + 1) + "_" + std::to_string(i);
            x = deconv_block(cx, x, name);
        }
        s.taps.push_back(x);
    }
    s.scores = layer_conv(cx.g, cx.model, x, p + "score" + std::to_string(last_tap), {1, 0});
}

} // namespace detail

/// Builds the forward graph for a batch without evaluating it. Inputs are named "rgb" and "depth".
inline ForwardRecord build_forward(Model& model, int batch, const ForwardOptions& opt = {}) {
    const NetworkConfig& c = model.config();
    if (batch < 1) throw ShapeError("batch size must be >= 1");
    if (opt.require_even_batch && batch % 2 != 0)
        throw ShapeError("batch size " + std::to_string(batch) + " is odd; paired feature statistics need an even batch");
    const int tap = opt.tap < 0 ? c.tap_count() - 1 : opt.tap;
    if (tap >= c.tap_count()) throw ArgumentError("decoder tap " + std::to_string(tap) + " does not exist");

    ForwardRecord rec;
    rec.graph = std::make_unique<Graph>();
    rec.batch = batch;
    rec.tap = tap;
    Graph& g = *rec.graph;
    g.set_input_gradients(false);

    detail::BuildContext cx{g, model, opt.training, rec.norms};
    detail::build_encoder(cx, Modality::rgb, batch, rec.rgb);
    detail::build_encoder(cx, Modality::depth, batch, rec.depth);

    const Shape feature_shape{batch, c.feature_dim};
    for (Modality m : {Modality::rgb, Modality::depth}) {
        StreamNodes& self = rec.stream(m);
        const StreamNodes& peer = rec.stream(other(m));
        const std::string p = std::string(modality_name(m)) + ".";
        auto slot = [&](bool on, Var v, const char* what) {
            return on ? v : g.constant(Tensor(feature_shape), p + "zero_" + what);
        };
        Var joined = concat({slot(opt.slots.specific, self.specific, "s"), slot(opt.slots.common_self, self.common, "c"),
                             slot(opt.slots.common_other, peer.common, "c_other")},
                            p + "fc2_in");
        self.decoder_input = detail::fc_block(cx, joined, p + "fc2", p + "dec_in");
    }
    detail::build_decoder(cx, Modality::rgb, batch, tap, opt.rgb_mask_hook, rec.rgb);
    detail::build_decoder(cx, Modality::depth, batch, tap, opt.depth_mask_hook, rec.depth);
    return rec;
}

/// Folds the batch statistics of an evaluated training-mode graph into the model's running
/// statistics: r = (1 - momentum) r + momentum b, with the unbiased batch variance.
/// Layers listed in `frozen` (by ".gamma" parameter name) keep their statistics.
inline void update_running_stats(Model& model, const ForwardRecord& rec, Scalar momentum,
                                 const std::set<std::string>& frozen = {}) {
    if (!(momentum >= 0 && momentum <= 1)) throw ArgumentError("running-statistics momentum must be in [0, 1]");
    for (const auto& [name, node] : rec.norms) {
        const auto* op = static_cast<const ops::BatchNorm*>(rec.graph->op(node));
        if (!op->training() || frozen.count(name + ".gamma")) continue;
        const Tensor& x = rec.graph->value(node);
        const Scalar count = static_cast<Scalar>(x.size()) / static_cast<Scalar>(x.dim(1));
        const Scalar correction = count > 1 ? count / (count - 1) : 1;
        Tensor& mean = model.buffer(name + ".mean");
        Tensor& var = model.buffer(name + ".var");
        for (std::size_t c = 0; c < mean.size(); ++c) {
            mean[c] = (1 - momentum) * mean[c] + momentum * op->stats().mean[c];
            var[c] = (1 - momentum) * var[c] + momentum * op->stats().var[c] * correction;
        }
    }
}

/// Builds and evaluates the forward graph. rgb: N x C_rgb x H x W, depth: N x C_d x H x W.
inline ForwardRecord forward_pass(Model& model, const Tensor& rgb, const Tensor& depth, const ForwardOptions& opt = {}) {
    if (rgb.rank() != 4 || depth.rank() != 4 || rgb.dim(0) != depth.dim(0))
        throw ShapeError("forward_pass: rgb " + rgb.shape().str() + " and depth " + depth.shape().str() +
                         " must be N x C x H x W with equal N");
    ForwardRecord rec = build_forward(model, rgb.dim(0), opt);
    rec.graph->evaluate({{"rgb", rgb}, {"depth", depth}});
    return rec;
}

/// w * softmax(score_rgb) + (1 - w) * softmax(score_depth), per pixel.
inline Tensor fuse_scores(const Tensor& score_rgb, const Tensor& score_depth, Scalar w) {
    if (!(w >= 0 && w <= 1)) throw ArgumentError("fusion weight must be in [0, 1]");
    score_rgb.require_same_shape(score_depth, "fuse_scores");
    const Tensor p = softmax_channels(score_rgb);
    const Tensor q = softmax_channels(score_depth);
    Tensor out(p.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w * p[i] + (1 - w) * q[i];
    return out;
}

inline Tensor fuse_scores(const ForwardRecord& rec, Scalar w) {
    return fuse_scores(rec.scores(Modality::rgb), rec.scores(Modality::depth), w);
}

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
inline LabelMap predict_labels(const Tensor& fused) {
    if (fused.rank() != 4) throw ShapeError("predict_labels expects N x C x H x W");
    const int n = fused.dim(0), c = fused.dim(1), h = fused.dim(2), w = fused.dim(3);
    if (c > 255) throw ShapeError("predict_labels: more than 255 classes");
    LabelMap out(n, h, w);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int b = 0; b < n; ++b)
        for (std::size_t i = 0; i < plane; ++i) {
            const Scalar* base = fused.data() + static_cast<std::size_t>(b) * c * plane + i;
            int best = 0;
            for (int k = 1; k < c; ++k)
                if (base[k * plane] > base[best * plane]) best = k;
            out.data[static_cast<std::size_t>(b) * plane + i] = static_cast<std::uint8_t>(best);
        }
    return out;
}

enum class FeatureMode { rgb_specific, depth_specific, common };

inline FeatureMode parse_feature_mode(const std::string& s) {
    if (s == "rgb-specific") return FeatureMode::rgb_specific;
    if (s == "depth-specific") return FeatureMode::depth_specific;
    if (s == "common") return FeatureMode::common;
    throw ArgumentError("unknown feature mode '" + s + "' (expected rgb-specific, depth-specific or common)");
}

/// Mean over channels of the first decoder block's output (half resolution for the
/// default net), with fc2 fed only the slots the mode selects. Single sample.
///
/// rgb-specific: RGB decoder on (s_rgb, 0, 0). depth-specific: depth decoder on
/// (s_d, 0, 0). common: RGB decoder on (0, c_rgb, c_d).
inline Tensor visualize_stream_features(Model& model, const Tensor& rgb, const Tensor& depth, FeatureMode mode) {
    if (rgb.rank() != 4 || rgb.dim(0) != 1) throw ShapeError("visualize_stream_features expects a single sample");
    ForwardOptions opt;
    opt.require_even_batch = false;
    opt.slots = mode == FeatureMode::common ? FeatureSlots{false, true, true} : FeatureSlots{true, false, false};
    opt.tap = std::min(1, model.config().tap_count() - 1);
    ForwardRecord rec = forward_pass(model, rgb, depth, opt);
    const Modality m = mode == FeatureMode::depth_specific ? Modality::depth : Modality::rgb;
    const Tensor& fmap = rec.graph->value(rec.stream(m).taps.back());
    const int c = fmap.dim(1), h = fmap.dim(2), w = fmap.dim(3);
    Tensor out(Shape{h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int k = 0; k < c; ++k)
        for (std::size_t i = 0; i < plane; ++i) out[i] += fmap[k * plane + i];
    for (Scalar& v : out.values()) v /= c;
    return out;
}

/// Fused label prediction for a batch of any size.
inline LabelMap predict(Model& model, const Tensor& rgb, const Tensor& depth, Scalar w) {
    ForwardOptions opt;
    opt.require_even_batch = false;
    return predict_labels(fuse_scores(forward_pass(model, rgb, depth, opt), w));
}

} // namespace mdseg
