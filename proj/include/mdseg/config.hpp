#pragma once

// Flat key=value run configuration and model checkpoints.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "synth.hpp"
#include "tensor_io.hpp"
#include "trainer.hpp"

namespace mdseg {

/// An unknown key or a value that does not parse.
class ConfigError : public ArgumentError {
public:
    using ArgumentError::ArgumentError;
};

struct RunConfig {
    SceneSpec scene;
    int train_size = 256;
    int test_size = 64;
    PatchOptions patches;

    NetworkConfig network;
    LossConfig loss;
    OptimizerConfig optimizer;
    /// Decoder components as "<divisor>:<epochs>" pairs: divisor 4 trains the H/4 x W/4 output.
    std::vector<std::pair<int, int>> components{{4, 4}, {1, 8}};
    int stage1_epochs = 4;
    int stage2_epochs = 14;

    int batch_size = 8;
    Downsample downsample = Downsample::majority;
    Scalar norm_momentum = 0.1;
    bool recalibrate = true;
    std::uint64_t seed = 1;
    int checkpoint_every = 0;

    std::string data_dir = "data";
    std::string out_dir = "run";

    CurriculumPlan plan() const {
        CurriculumPlan p;
        for (const auto& [div, epochs] : components) {
            if (div < 1 || network.height % div != 0 || network.width % div != 0)
                throw ConfigError("plan.components: divisor " + std::to_string(div) + " does not divide the input size");
            p.components.push_back({network.height / div, network.width / div, epochs});
        }
        p.stage1_epochs = stage1_epochs;
        p.stage2_epochs = stage2_epochs;
        return p;
    }

    TrainOptions train_options() const {
        TrainOptions t;
        t.batch_size = batch_size;
        t.seed = seed;
        t.loss = loss;
        t.downsample = downsample;
        t.fusion_weight = network.fusion_weight;
        t.norm_momentum = norm_momentum;
        t.recalibrate = recalibrate;
        return t;
    }

    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;

    /// Every key with its current value, one "key = value" line each, in table order.
    /// Restricted to keys starting with `prefix` when given.
    std::string to_text(const std::string& prefix = {}) const;

    /// Applies "key = value" lines on top of the current values; '#' starts a comment.
    void apply_text(const std::string& text, const std::string& origin = "config");

    void validate() const {
        scene.validate();
        network.validate();
        loss.weights.validate();
        optimizer.validate();
        (void)plan().taps(network);
        if (batch_size < 2 || batch_size % 2 != 0) throw ConfigError("train.batch_size must be even and >= 2");
        if (train_size < 1 || test_size < 1) throw ConfigError("data sizes must be >= 1");
        if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
        if (!(norm_momentum >= 0 && norm_momentum <= 1)) throw ConfigError("train.norm_momentum must be in [0, 1]");
    }

    static RunConfig from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw FormatError("cannot open config '" + path.string() + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        RunConfig c;
        c.apply_text(ss.str(), path.string());
        return c;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const char* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + v + "'");
    return out;
}

inline std::string format_scalar(Scalar v) {
    // shortest text that reads back to the same value
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, static_cast<double>(v));
        if (static_cast<Scalar>(std::strtod(buf, nullptr)) == v) break;
    }
    return buf;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

inline std::string kinds_text(const SceneSpec& s) {
    if (s.kinds.empty()) return "cycle";
    std::string out;
    for (PatternKind k : s.kinds) out += (out.empty() ? "" : ",") + std::string(pattern_kind_name(k));
    return out;
}

inline std::vector<PatternKind> parse_kinds(const std::string& v) {
    if (v == "cycle") return {};
    std::vector<PatternKind> out;
    for (const std::string& item : split(v, ',')) {
        if (item == "common") out.push_back(PatternKind::common);
        else if (item == "rgb-only") out.push_back(PatternKind::rgb_only);
        else if (item == "depth-only") out.push_back(PatternKind::depth_only);
        else throw ConfigError("scene.kinds: unknown kind '" + item + "'");
    }
    return out;
}

/// "standard", "single:<sigma>" or "<sigma>:<beta>,<sigma>:<beta>,...".
inline KernelFamily parse_family(const std::string& v) {
    if (v == "standard") return KernelFamily::standard();
    if (v.rfind("single:", 0) == 0) return KernelFamily::single(parse_number<double>("kernels", v.substr(7)));
    std::vector<Scalar> sigmas, betas;
    for (const std::string& item : split(v, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("kernels: '" + item + "' is not <sigma>:<beta>");
        sigmas.push_back(parse_number<double>("kernels", item.substr(0, colon)));
        betas.push_back(parse_number<double>("kernels", item.substr(colon + 1)));
    }
    try {
        return KernelFamily(sigmas, betas);
    } catch (const ArgumentError& e) {
        throw ConfigError(std::string("kernels: ") + e.what());
    }
}

inline std::string family_text(const KernelFamily& f) {
    const KernelFamily std_family = KernelFamily::standard();
    if (f.sigmas() == std_family.sigmas() && f.betas() == std_family.betas()) return "standard";
    std::string out;
    for (std::size_t u = 0; u < f.size(); ++u)
        out += (u ? "," : "") + format_scalar(f.sigmas()[u]) + ":" + format_scalar(f.betas()[u]);
    return out;
}

struct ConfigKey {
    const char* key;
    const char* help;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

#define MDSEG_INT_KEY(name, help, member)                                                                       \
    ConfigKey {                                                                                                 \
        name, help, [](const RunConfig& c) { return std::to_string(c.member); },                                \
            [](RunConfig& c, const std::string& v) { c.member = parse_number<decltype(c.member)>(name, v); }     \
    }
#define MDSEG_SCALAR_KEY(name, help, member)                                                                    \
    ConfigKey {                                                                                                 \
        name, help, [](const RunConfig& c) { return format_scalar(c.member); },                                 \
            [](RunConfig& c, const std::string& v) { c.member = parse_number<double>(name, v); }                 \
    }
#define MDSEG_BOOL_KEY(name, help, member)                                                                      \
    ConfigKey {                                                                                                 \
        name, help, [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); },                \
            [](RunConfig& c, const std::string& v) { c.member = parse_bool(name, v); }                          \
    }

inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        MDSEG_INT_KEY("scene.height", "canvas height", scene.height),
        MDSEG_INT_KEY("scene.width", "canvas width", scene.width),
        MDSEG_INT_KEY("scene.classes", "class count including background 0", scene.classes),
        {"scene.kinds", "pattern kind per foreground class (common, rgb-only, depth-only) or 'cycle'",
         [](const RunConfig& c) { return kinds_text(c.scene); },
         [](RunConfig& c, const std::string& v) { c.scene.kinds = parse_kinds(v); }},
        MDSEG_INT_KEY("scene.min_shapes", "fewest shapes per scene", scene.min_shapes),
        MDSEG_INT_KEY("scene.max_shapes", "most shapes per scene", scene.max_shapes),
        MDSEG_SCALAR_KEY("scene.noise", "noise standard deviation", scene.noise),
        MDSEG_INT_KEY("scene.seed", "scene generator seed", scene.seed),
        MDSEG_INT_KEY("data.train_size", "training scenes", train_size),
        MDSEG_INT_KEY("data.test_size", "test scenes", test_size),
        MDSEG_INT_KEY("data.patch_margin", "context pixels around a patch box", patches.margin),
        MDSEG_INT_KEY("data.patch_min_pixels", "smallest instance used for a patch", patches.min_pixels),

        MDSEG_INT_KEY("network.height", "input height", network.height),
        MDSEG_INT_KEY("network.width", "input width", network.width),
        MDSEG_INT_KEY("network.rgb_channels", "rgb input channels", network.rgb_channels),
        MDSEG_INT_KEY("network.depth_channels", "depth input channels", network.depth_channels),
        {"network.blocks", "encoder blocks as <convs>x<channels>, comma separated",
         [](const RunConfig& c) { return c.network.blocks_text(); },
         [](RunConfig& c, const std::string& v) {
             try {
                 c.network.blocks = NetworkConfig::parse_blocks(v);
             } catch (const ArgumentError& e) {
                 throw ConfigError(std::string("network.blocks: ") + e.what());
             }
         }},
        MDSEG_INT_KEY("network.feature_dim", "length of the common and specific feature vectors", network.feature_dim),
        MDSEG_INT_KEY("network.classes", "output classes", network.classes),
        MDSEG_SCALAR_KEY("network.fusion_weight", "weight of the rgb scores in the fused prediction",
                         network.fusion_weight),
        {"network.init", "weight init: xavier or he", [](const RunConfig& c) { return std::string(init_scheme_name(c.network.init)); },
         [](RunConfig& c, const std::string& v) {
             try {
                 c.network.init = parse_init_scheme(v);
             } catch (const ArgumentError& e) {
                 throw ConfigError(std::string("network.init: ") + e.what());
             }
         }},
        MDSEG_BOOL_KEY("network.batch_norm", "batch normalization outside the bridge and score layers",
                       network.batch_norm),

        {"loss.variant", "full, unregularized or euclidean",
         [](const RunConfig& c) { return std::string(loss_variant_name(c.loss.variant)); },
         [](RunConfig& c, const std::string& v) {
             try {
                 c.loss.variant = parse_loss_variant(v);
             } catch (const ArgumentError& e) {
                 throw ConfigError(std::string("loss.variant: ") + e.what());
             }
         }},
        MDSEG_SCALAR_KEY("loss.w_rgb", "weight of the rgb pixel loss", loss.weights.rgb),
        MDSEG_SCALAR_KEY("loss.w_depth", "weight of the depth pixel loss", loss.weights.depth),
        MDSEG_SCALAR_KEY("loss.w_common", "weight of the common-feature discrepancy", loss.weights.common),
        MDSEG_SCALAR_KEY("loss.w_specific", "weight of the specific-feature discrepancy", loss.weights.specific),
        {"loss.kernels", "kernel family: standard, single:<sigma> or <sigma>:<beta>,...",
         [](const RunConfig& c) { return family_text(c.loss.family); },
         [](RunConfig& c, const std::string& v) { c.loss.family = parse_family(v); }},
        MDSEG_SCALAR_KEY("loss.euclidean_ceiling", "cap on the specific distance in the euclidean variant",
                         loss.euclidean_ceiling),

        MDSEG_SCALAR_KEY("optim.learning_rate", "SGD learning rate", optimizer.learning_rate),
        MDSEG_SCALAR_KEY("optim.momentum", "SGD momentum", optimizer.momentum),
        MDSEG_SCALAR_KEY("optim.weight_decay", "L2 weight decay", optimizer.weight_decay),
        MDSEG_INT_KEY("optim.lr_step_epochs", "step decay period in epochs, 0 = constant rate", optimizer.lr_step_epochs),
        MDSEG_SCALAR_KEY("optim.lr_gamma", "step decay factor", optimizer.lr_gamma),

        {"plan.components", "decoder components, coarse to fine, as <divisor>:<epochs>",
         [](const RunConfig& c) {
             std::string out;
             for (const auto& [d, e] : c.components)
                 out += (out.empty() ? "" : ",") + std::to_string(d) + ":" + std::to_string(e);
             return out;
         },
         [](RunConfig& c, const std::string& v) {
             std::vector<std::pair<int, int>> out;
             for (const std::string& item : split(v, ',')) {
                 const auto colon = item.find(':');
                 if (colon == std::string::npos)
                     throw ConfigError("plan.components: '" + item + "' is not <divisor>:<epochs>");
                 out.emplace_back(parse_number<int>("plan.components", item.substr(0, colon)),
                                  parse_number<int>("plan.components", item.substr(colon + 1)));
             }
             if (out.empty()) throw ConfigError("plan.components: empty list");
             c.components = std::move(out);
         }},
        MDSEG_INT_KEY("plan.stage1_epochs", "epochs on single-object patches", stage1_epochs),
        MDSEG_INT_KEY("plan.stage2_epochs", "epochs on multi-object patches", stage2_epochs),

        MDSEG_INT_KEY("train.batch_size", "mini-batch size (even)", batch_size),
        {"train.downsample", "coarse label reduction: majority or nearest",
         [](const RunConfig& c) { return std::string(c.downsample == Downsample::majority ? "majority" : "nearest"); },
         [](RunConfig& c, const std::string& v) {
             try {
                 c.downsample = parse_downsample(v);
             } catch (const ArgumentError& e) {
                 throw ConfigError(std::string("train.downsample: ") + e.what());
             }
         }},
        MDSEG_SCALAR_KEY("train.norm_momentum", "running normalization statistics update rate", norm_momentum),
        MDSEG_BOOL_KEY("train.recalibrate", "recompute normalization statistics on full images after training",
                       recalibrate),
        MDSEG_INT_KEY("train.seed", "weight init and shuffling seed", seed),
        MDSEG_INT_KEY("train.checkpoint_every", "write a checkpoint every this many epochs, 0 = final only",
                      checkpoint_every),

        {"paths.data", "dataset directory", [](const RunConfig& c) { return c.data_dir; },
         [](RunConfig& c, const std::string& v) { c.data_dir = v; }},
        {"paths.out", "output directory", [](const RunConfig& c) { return c.out_dir; },
         [](RunConfig& c, const std::string& v) { c.out_dir = v; }},
    };
    return keys;
}

#undef MDSEG_INT_KEY
#undef MDSEG_SCALAR_KEY
#undef MDSEG_BOOL_KEY

inline const ConfigKey& config_key(const std::string& key) {
    for (const ConfigKey& k : config_keys())
        if (key == k.key) return k;
    throw ConfigError("unknown config key '" + key + "'");
}

} // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
    detail::config_key(key).set(*this, value);
}

inline std::string RunConfig::get(const std::string& key) const { return detail::config_key(key).get(*this); }

inline std::string RunConfig::to_text(const std::string& prefix) const {
    std::string out;
    for (const auto& k : detail::config_keys())
        if (std::string(k.key).rfind(prefix, 0) == 0) out += std::string(k.key) + " = " + k.get(*this) + "\n";
    return out;
}

inline void RunConfig::apply_text(const std::string& text, const std::string& origin) {
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
        try {
            set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

/// "key = default  # help" for every key.
inline std::string config_help() {
    const RunConfig defaults;
    std::string out;
    for (const auto& k : detail::config_keys()) {
        std::string line = std::string(k.key) + " = " + k.get(defaults);
        if (line.size() < 44) line.resize(44, ' ');
        out += "  " + line + "  " + k.help + "\n";
    }
    return out;
}

/// Parameters and normalization buffers under their model names, plus a "config" text
/// entry holding the network keys.
inline TensorFile checkpoint_file(const Model& model) {
    RunConfig c;
    c.network = model.config();
    TensorFile f;
    f.add_text("config", c.to_text("network."));
    for (const auto& [name, t] : model.parameters()) f.add_tensor(name, t);
    for (const auto& [name, t] : model.buffers()) f.add_tensor(name, t);
    return f;
}

inline void save_checkpoint(const Model& model, const std::string& path) { checkpoint_file(model).write(path); }

/// Rebuilds the model from the stored network keys and checks every tensor's shape.
inline Model model_from_checkpoint(const TensorFile& f) {
    RunConfig c;
    try {
        c.apply_text(f.text("config"), "checkpoint config");
        c.network.validate();
    } catch (const ArgumentError& e) {
        throw FormatError(std::string("bad checkpoint header: ") + e.what());
    }
    Model model(c.network, 0);
    std::size_t expected = 1;
    for (auto* store : {&model.parameters(), &model.buffers()})
        for (auto& [name, t] : *store) {
            Tensor stored = f.tensor(name);
            if (!(stored.shape() == t.shape()))
                throw TensorFileError(FormatCode::bad_shape, "checkpoint entry '" + name + "' has shape " +
                                                                 stored.shape().str() + ", expected " + t.shape().str());
            t = std::move(stored);
            ++expected;
        }
    if (f.size() != expected)
        throw TensorFileError(FormatCode::bad_name, "checkpoint has " + std::to_string(f.size() - expected) +
                                                        " entries the network does not use");
    return model;
}

inline Model load_checkpoint(const std::string& path) { return model_from_checkpoint(TensorFile::read(path)); }

} // namespace mdseg
