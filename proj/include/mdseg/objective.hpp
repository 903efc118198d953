#pragma once

#include <array>
#include <string>

#include "network.hpp"

namespace mdseg {

struct LossWeights {
    Scalar rgb = 1.0;
    Scalar depth = 1.0;
    Scalar common = 0.1;
    Scalar specific = 0.1;

    void validate() const {
        if (!(rgb >= 0 && depth >= 0 && common >= 0 && specific >= 0))
            throw ArgumentError("loss weights must be non-negative");
    }
};

enum class LossVariant { full, unregularized, euclidean };

inline LossVariant parse_loss_variant(const std::string& s) {
    if (s == "full") return LossVariant::full;
    if (s == "unregularized") return LossVariant::unregularized;
    if (s == "euclidean") return LossVariant::euclidean;
    throw ArgumentError("unknown loss variant '" + s + "' (expected full, unregularized or euclidean)");
}

inline const char* loss_variant_name(LossVariant v) {
    switch (v) {
    case LossVariant::full: return "full";
    case LossVariant::unregularized: return "unregularized";
    case LossVariant::euclidean: return "euclidean";
    }
    return "?";
}

struct LossConfig {
    LossWeights weights;
    LossVariant variant = LossVariant::full;
    KernelFamily family = KernelFamily::standard();
    Scalar euclidean_ceiling = 10;  ///< cap on the specific-feature distance in the euclidean variant
};

/// Loss value and its four terms: pixel losses of both decoders and the two feature
/// distances. With an odd batch in the unregularized variant the distances are 0.
struct LossValue {
    Scalar total = 0;
    Scalar l_rgb = 0;
    Scalar l_depth = 0;
    Scalar d_common = 0;
    Scalar d_specific = 0;
    Var root;

    std::array<Scalar, 4> components() const { return {l_rgb, l_depth, d_common, d_specific}; }
};

/// total = a_rgb * l_rgb + a_d * l_d + a_c * d(c_rgb, c_d) - a_s * d(s_rgb, s_d)
///
/// Appends the loss nodes to the record's graph, sets the total as root and evaluates
/// what has not been evaluated yet, so backprop() on the graph yields parameter gradients.
inline LossValue compute_loss(ForwardRecord& rec, const LabelMap& labels, const LossConfig& cfg) {
    cfg.weights.validate();
    Graph& g = *rec.graph;
    const bool even = rec.batch % 2 == 0;
    if (cfg.variant != LossVariant::unregularized && !even)
        throw ShapeError("batch size " + std::to_string(rec.batch) + " is odd; the regularized loss needs pairs");
    if (labels.batch != rec.batch) throw ShapeError("label batch does not match the forward batch");

    Var l_rgb = softmax_xent(rec.rgb.scores, labels, "loss.rgb");
    Var l_depth = softmax_xent(rec.depth.scores, labels, "loss.depth");
    std::vector<Var> terms{l_rgb, l_depth};
    std::vector<Scalar> weights{cfg.weights.rgb, cfg.weights.depth};
    Var d_common, d_specific;
    if (even) {
        if (cfg.variant == LossVariant::euclidean) {
            d_common = euclidean_mean(rec.rgb.common, rec.depth.common, "loss.d_common");
            d_specific = clamp_max(euclidean_mean(rec.rgb.specific, rec.depth.specific), cfg.euclidean_ceiling,
                                   "loss.d_specific");
        } else {
            d_common = mkmmd(rec.rgb.common, rec.depth.common, cfg.family, "loss.d_common");
            d_specific = mkmmd(rec.rgb.specific, rec.depth.specific, cfg.family, "loss.d_specific");
        }
        const bool reg = cfg.variant != LossVariant::unregularized;
        terms.push_back(d_common);
        terms.push_back(d_specific);
        weights.push_back(reg ? cfg.weights.common : 0);
        weights.push_back(reg ? -cfg.weights.specific : -0.0);
    }
    LossValue out;
    out.root = linear_combination(terms, weights, "loss.total");
    g.set_root(out.root);
    out.total = g.evaluate_pending().item();
    out.l_rgb = g.value(l_rgb).item();
    out.l_depth = g.value(l_depth).item();
    if (even) {
        out.d_common = g.value(d_common).item();
        out.d_specific = g.value(d_specific).item();
    }
    return out;
}

} // namespace mdseg
