#pragma once

// SGD with momentum and weight decay, epoch loop, and the staged curriculum
// (coarse-to-fine decoder components, then single-object and multi-object patches).

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "metrics.hpp"
#include "objective.hpp"

namespace mdseg {

struct OptimizerConfig {
    Scalar learning_rate = 0.03;
    Scalar momentum = 0.9;
    Scalar weight_decay = 0.0005;
    int lr_step_epochs = 0;  ///< multiply the rate by lr_gamma every this many epochs; 0 = constant
    Scalar lr_gamma = 0.1;

    void validate() const {
        if (!(learning_rate >= 0)) throw ArgumentError("learning rate must be non-negative");
        if (!(momentum >= 0 && momentum < 1)) throw ArgumentError("momentum must be in [0, 1)");
        if (!(weight_decay >= 0)) throw ArgumentError("weight decay must be non-negative");
        if (lr_step_epochs < 0) throw ArgumentError("lr_step_epochs must be non-negative");
        if (!(lr_gamma > 0)) throw ArgumentError("lr_gamma must be positive");
    }

    Scalar rate_at(int epoch) const {
        if (lr_step_epochs == 0) return learning_rate;
        return learning_rate * std::pow(lr_gamma, epoch / lr_step_epochs);
    }
};

struct OptimizerState {
    OptimizerConfig config;
    Scalar learning_rate = config.learning_rate;  ///< rate used by the next step
    std::map<std::string, Tensor> velocity;

    OptimizerState() = default;
    explicit OptimizerState(OptimizerConfig c) : config(c), learning_rate(c.learning_rate) { config.validate(); }
};

/// v <- momentum * v - lr * (g + decay * p);  p <- p + v
///
/// Parameters without a gradient entry and parameters in `frozen` are left untouched.
inline void sgd_step(std::map<std::string, Tensor>& params, const Gradients& grads, OptimizerState& state,
                     const std::set<std::string>& frozen = {}) {
    const Scalar lr = state.learning_rate, mu = state.config.momentum, decay = state.config.weight_decay;
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw ArgumentError("gradient for unknown parameter '" + name + "'");
        if (frozen.count(name)) continue;
        Tensor& p = it->second;
        if (!(g.shape() == p.shape()))
            throw ShapeError("gradient of '" + name + "' has shape " + g.shape().str() + ", parameter " + p.shape().str());
        auto [vit, inserted] = state.velocity.try_emplace(name, p.shape());
        Tensor& v = vit->second;
        if (!(v.shape() == p.shape())) throw ShapeError("velocity of '" + name + "' does not match the parameter");
        for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = mu * v[i] - lr * (g[i] + decay * p[i]);
            p[i] += v[i];
        }
        if (!p.all_finite()) throw NumericError("parameter '" + name + "' became non-finite");
    }
}

enum class Downsample { majority, nearest };

inline Downsample parse_downsample(const std::string& s) {
    if (s == "majority") return Downsample::majority;
    if (s == "nearest") return Downsample::nearest;
    throw ArgumentError("unknown label downsampling '" + s + "' (expected majority or nearest)");
}

/// Reduces labels to h x w by integer factors. Majority: most frequent non-ignored label
/// per cell (ties to the lowest label; all-ignored cells stay ignored). Nearest: the
/// cell's center pixel.
inline LabelMap downsample_labels(const LabelMap& labels, int h, int w, Downsample mode) {
    if (h < 1 || w < 1 || labels.height % h != 0 || labels.width % w != 0)
        throw ArgumentError("cannot downsample " + std::to_string(labels.height) + "x" + std::to_string(labels.width) +
                            " labels to " + std::to_string(h) + "x" + std::to_string(w));
    const int fy = labels.height / h, fx = labels.width / w;
    if (fy == 1 && fx == 1) return labels;
    LabelMap out(labels.batch, h, w);
    std::vector<int> votes(256);
    for (int n = 0; n < labels.batch; ++n)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (mode == Downsample::nearest) {
                    out.at(n, y, x) = labels.at(n, y * fy + fy / 2, x * fx + fx / 2);
                    continue;
                }
                std::fill(votes.begin(), votes.end(), 0);
                for (int dy = 0; dy < fy; ++dy)
                    for (int dx = 0; dx < fx; ++dx) ++votes[labels.at(n, y * fy + dy, x * fx + dx)];
                int best = LabelMap::kIgnore;
                for (int l = 0; l < LabelMap::kIgnore; ++l)
                    if (votes[static_cast<std::size_t>(l)] > 0 &&
                        (best == LabelMap::kIgnore || votes[static_cast<std::size_t>(l)] > votes[static_cast<std::size_t>(best)]))
                        best = l;
                out.at(n, y, x) = static_cast<std::uint8_t>(best);
            }
    return out;
}

/// What one training phase optimizes: the decoder tap producing the scores and the
/// parameters held fixed (gradients still flow through them).
struct Phase {
    std::string name = "full";
    int tap = -1;
    std::set<std::string> frozen;
};

struct TrainOptions {
    int batch_size = 8;
    std::uint64_t seed = 1;
    LossConfig loss;
    Downsample downsample = Downsample::majority;
    Scalar fusion_weight = 0.5;
    Scalar norm_momentum = 0.1;  ///< running normalization statistics update rate
    /// After the curriculum, recompute the running statistics on the full images (the last
    /// phases see padded patches, whose statistics differ).
    bool recalibrate = true;
};

struct EpochStats {
    Scalar total = 0;
    Scalar l_rgb = 0;
    Scalar l_depth = 0;
    Scalar d_common = 0;
    Scalar d_specific = 0;
    Scalar accuracy = 0;  ///< class-average accuracy of fused training predictions
    int batches = 0;

    bool operator==(const EpochStats&) const = default;
};

/// Shuffled order of one epoch, cut into batches of `batch_size`. A trailing partial
/// batch is kept, minus one sample if its size is odd.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, std::uint64_t seed,
                                                           std::uint64_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedu};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
        std::size_t end = std::min(n, i + static_cast<std::size_t>(batch_size));
        if ((end - i) % 2 == 1) --end;
        if (end > i) out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

/// One pass over `data` in seeded shuffled order. `epoch` selects the shuffle.
inline EpochStats train_epoch(Model& model, const Dataset& data, const Phase& phase, const TrainOptions& opt,
                              OptimizerState& state, std::uint64_t epoch) {
    if (data.empty()) throw ArgumentError("cannot train on an empty dataset");
    if (opt.batch_size < 2 || opt.batch_size % 2 != 0) throw ArgumentError("batch size must be even and >= 2");
    const NetworkConfig& cfg = model.config();
    const int tap = phase.tap < 0 ? cfg.tap_count() - 1 : phase.tap;
    const int th = cfg.tap_height(tap), tw = cfg.tap_width(tap);

    EpochStats stats;
    ConfusionMatrix confusion(cfg.classes);
    ForwardOptions fopt;
    fopt.tap = tap;
    fopt.training = true;
    for (const auto& indices : epoch_batches(data.size(), opt.batch_size, opt.seed, epoch)) {
        const Batch b = data.batch(indices);
        const LabelMap labels = downsample_labels(b.labels, th, tw, opt.downsample);
        ForwardRecord rec = build_forward(model, static_cast<int>(indices.size()), fopt);
        rec.graph->bind({{"rgb", b.rgb}, {"depth", b.depth}});
        const LossValue loss = compute_loss(rec, labels, opt.loss);
        const Gradients grads = rec.graph->backprop(Tensor::scalar(1));
        confusion.add(predict_labels(fuse_scores(rec, opt.fusion_weight)), labels);
        sgd_step(model.parameters(), grads, state, phase.frozen);
        update_running_stats(model, rec, opt.norm_momentum, phase.frozen);

        stats.total += loss.total;
        stats.l_rgb += loss.l_rgb;
        stats.l_depth += loss.l_depth;
        stats.d_common += loss.d_common;
        stats.d_specific += loss.d_specific;
        ++stats.batches;
    }
    if (stats.batches == 0) throw ArgumentError("dataset too small for one even batch");
    for (Scalar* v : {&stats.total, &stats.l_rgb, &stats.l_depth, &stats.d_common, &stats.d_specific})
        *v /= stats.batches;
    stats.accuracy = confusion.report().class_average;
    return stats;
}

/// Replaces the running normalization statistics by their average over training-mode passes
/// on `data` (in order, batches of `batch_size`); parameters are not touched.
inline void recalibrate_norm_stats(Model& model, const Dataset& data, int batch_size = 8) {
    if (!model.config().batch_norm) return;
    if (data.empty()) throw ArgumentError("cannot recalibrate on an empty dataset");
    ForwardOptions fopt;
    fopt.training = true;
    fopt.require_even_batch = false;
    int k = 0;
    for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(data.size(), i + static_cast<std::size_t>(batch_size));
        if (end - i < 2) break;
        std::vector<std::size_t> idx(end - i);
        std::iota(idx.begin(), idx.end(), i);
        const Batch b = data.batch(idx);
        ForwardRecord rec = forward_pass(model, b.rgb, b.depth, fopt);
        update_running_stats(model, rec, Scalar(1) / ++k);
    }
}

struct DecoderComponent {
    int height = 0;
    int width = 0;
    int epochs = 0;
};

struct CurriculumPlan {
    std::vector<DecoderComponent> components;  ///< coarse to fine; the last one is full resolution
    int stage1_epochs = 0;                     ///< single-object patches, full resolution
    int stage2_epochs = 0;                     ///< multi-object patches, full resolution

    /// Two decoder components (H/4, then full resolution) followed by both patch stages.
    static CurriculumPlan defaults(const NetworkConfig& c) {
        CurriculumPlan p;
        p.components = {{c.tap_height(0), c.tap_width(0), 4}, {c.height, c.width, 8}};
        p.stage1_epochs = 4;
        p.stage2_epochs = 14;
        return p;
    }

    /// A single full-resolution component: plain training.
    static CurriculumPlan plain(const NetworkConfig& c, int epochs) {
        CurriculumPlan p;
        p.components = {{c.height, c.width, epochs}};
        return p;
    }

    int total_epochs() const {
        int n = stage1_epochs + stage2_epochs;
        for (const auto& c : components) n += c.epochs;
        return n;
    }

    /// Decoder taps of the components; validates the plan against the network.
    std::vector<int> taps(const NetworkConfig& c) const {
        if (components.empty()) throw ArgumentError("curriculum needs at least one decoder component");
        if (stage1_epochs < 0 || stage2_epochs < 0) throw ArgumentError("epoch counts must be non-negative");
        std::vector<int> out;
        for (const DecoderComponent& comp : components) {
            if (comp.epochs < 0) throw ArgumentError("epoch counts must be non-negative");
            const int t = c.tap_for_resolution(comp.height, comp.width);
            if (!out.empty() && t <= out.back()) throw ArgumentError("decoder components must go from coarse to fine");
            out.push_back(t);
        }
        if (out.back() != c.tap_count() - 1)
            throw ArgumentError("the last decoder component must end at full resolution");
        return out;
    }
};

struct HistoryEntry {
    int epoch = 0;  ///< 1-based, counted over all phases
    std::string phase;
    Scalar learning_rate = 0;
    EpochStats stats;
};

struct CurriculumData {
    const Dataset* full = nullptr;
    const Dataset* stage1 = nullptr;
    const Dataset* stage2 = nullptr;
};

/// Runs decoder components coarse to fine (earlier components frozen, later ones not yet
/// built), then stage 1 and stage 2 on the whole network.
inline std::vector<HistoryEntry> run_curriculum(Model& model, const CurriculumData& data, const CurriculumPlan& plan,
                                                const TrainOptions& opt, OptimizerState& state,
                                                const std::function<void(const HistoryEntry&)>& on_epoch = {}) {
    const std::vector<int> taps = plan.taps(model.config());
    std::vector<std::pair<Phase, const Dataset*>> phases;
    std::vector<int> epochs;
    std::set<std::string> frozen;
    int prev = -1;
    for (std::size_t k = 0; k < taps.size(); ++k) {
        Phase p{"component" + std::to_string(k + 1), taps[k], frozen};
        phases.emplace_back(p, data.full);
        epochs.push_back(plan.components[k].epochs);
        for (const std::string& name : model.decoder_parameters(prev, taps[k])) frozen.insert(name);
        prev = taps[k];
    }
    phases.emplace_back(Phase{"stage1", -1, {}}, data.stage1);
    epochs.push_back(plan.stage1_epochs);
    phases.emplace_back(Phase{"stage2", -1, {}}, data.stage2);
    epochs.push_back(plan.stage2_epochs);

    std::vector<HistoryEntry> history;
    int epoch = 0;
    for (std::size_t k = 0; k < phases.size(); ++k) {
        const auto& [phase, dataset] = phases[k];
        if (epochs[k] > 0 && (!dataset || dataset->empty()))
            throw ArgumentError("phase '" + phase.name + "' has epochs but no data");
        for (int e = 0; e < epochs[k]; ++e) {
            state.learning_rate = state.config.rate_at(epoch);
            HistoryEntry h{epoch + 1, phase.name, state.learning_rate,
                           train_epoch(model, *dataset, phase, opt, state, static_cast<std::uint64_t>(epoch))};
            ++epoch;
            history.push_back(h);
            if (on_epoch) on_epoch(history.back());
        }
    }
    if (opt.recalibrate && data.full) recalibrate_norm_stats(model, *data.full, opt.batch_size);
    return history;
}

/// Fused predictions for every sample, in dataset order.
inline LabelMap predict_dataset(Model& model, const Dataset& data, Scalar fusion_weight, int batch_size = 16) {
    if (data.empty()) throw ArgumentError("empty dataset");
    const Sample& first = data.samples.front();
    LabelMap out(static_cast<int>(data.size()), first.height(), first.width());
    for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch_size)) {
        std::vector<std::size_t> idx;
        for (std::size_t j = i; j < std::min(data.size(), i + static_cast<std::size_t>(batch_size)); ++j) idx.push_back(j);
        const Batch b = data.batch(idx);
        const LabelMap pred = predict(model, b.rgb, b.depth, fusion_weight);
        std::copy(pred.data.begin(), pred.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * out.plane()));
    }
    return out;
}

inline LabelMap dataset_labels(const Dataset& data) {
    const Sample& first = data.samples.at(0);
    LabelMap out(static_cast<int>(data.size()), first.height(), first.width());
    for (std::size_t i = 0; i < data.size(); ++i)
        std::copy(data.samples[i].labels.data.begin(), data.samples[i].labels.data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(i * out.plane()));
    return out;
}

inline MetricsReport evaluate_model(Model& model, const Dataset& data, Scalar fusion_weight) {
    return evaluate_metrics(predict_dataset(model, data, fusion_weight), dataset_labels(data), model.config().classes);
}

/// Mean MK-MMD between the streams' common and specific features over consecutive
/// batches of `batch_size` samples (a trailing partial batch is dropped).
struct Discrepancy {
    Scalar common = 0;
    Scalar specific = 0;
};

inline Discrepancy feature_discrepancy(Model& model, const Dataset& data, const KernelFamily& family, int batch_size = 8) {
    if (batch_size < 2 || batch_size % 2 != 0) throw ArgumentError("batch size must be even and >= 2");
    Discrepancy d;
    int batches = 0;
    for (std::size_t i = 0; i + static_cast<std::size_t>(batch_size) <= data.size(); i += static_cast<std::size_t>(batch_size)) {
        std::vector<std::size_t> idx(static_cast<std::size_t>(batch_size));
        std::iota(idx.begin(), idx.end(), i);
        const Batch b = data.batch(idx);
        const BridgeOutputs br = forward_pass(model, b.rgb, b.depth).bridge();
        d.common += mkmmd_unbiased(br.c_rgb, br.c_d, family);
        d.specific += mkmmd_unbiased(br.s_rgb, br.s_d, family);
        ++batches;
    }
    if (batches == 0) throw ArgumentError("dataset smaller than one batch");
    d.common /= batches;
    d.specific /= batches;
    return d;
}

} // namespace mdseg
