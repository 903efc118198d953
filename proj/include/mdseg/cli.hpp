#pragma once

// Command-line front end: gen-data, train, eval, infer, dump-features, mmd-test.
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "config.hpp"
#include "image_io.hpp"
#include "two_sample.hpp"

namespace mdseg {

enum ExitCode { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

namespace cli {

namespace fs = std::filesystem;

inline std::string format_value(Scalar v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
    return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write '" + path.string() + "'");
    f << text;
    if (!f) throw FormatError("failed writing '" + path.string() + "'");
}

/// A manifest path, or a directory holding "<split>.tsv".
inline Dataset open_dataset(const fs::path& p, const std::string& split) {
    return load_dataset(fs::is_directory(p) ? p / (split + ".tsv") : p);
}

inline void check_dataset(const Dataset& d, const NetworkConfig& c, const std::string& what) {
    for (const Sample& s : d.samples) {
        if (s.height() != c.height || s.width() != c.width || s.rgb.dim(0) != c.rgb_channels ||
            s.depth.dim(0) != c.depth_channels)
            throw ShapeError(what + ": samples are " + std::to_string(s.rgb.dim(0)) + "+" + std::to_string(s.depth.dim(0)) +
                             " channels of " + std::to_string(s.height()) + "x" + std::to_string(s.width()) +
                             ", the network expects " + std::to_string(c.rgb_channels) + "+" +
                             std::to_string(c.depth_channels) + " of " + std::to_string(c.height) + "x" +
                             std::to_string(c.width));
        for (std::uint8_t l : s.labels.data)
            if (l != LabelMap::kIgnore && l >= c.classes)
                throw ShapeError(what + ": label " + std::to_string(l) + " is outside the network's " +
                                 std::to_string(c.classes) + " classes");
    }
}

inline Sample read_sample(const std::string& path) { return sample_from_file(TensorFile::read(path)); }

inline Tensor with_batch_axis(const Tensor& t) {
    std::vector<int> dims{1};
    for (int d : t.shape().dims()) dims.push_back(d);
    return t.reshaped(Shape(dims));
}

/// Loads a config file (if any) and applies --set overrides in order.
inline RunConfig resolve_config(const std::string& file, const std::vector<std::string>& overrides) {
    RunConfig c = file.empty() ? RunConfig{} : RunConfig::from_file(file);
    for (const std::string& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        c.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    return c;
}

inline std::string log_header() { return "epoch\tphase\tlr\ttotal\tl_rgb\tl_depth\td_common\td_specific\taccuracy"; }

inline std::string log_line(const HistoryEntry& h) {
    const EpochStats& s = h.stats;
    std::string out = std::to_string(h.epoch) + "\t" + h.phase;
    for (Scalar v : {h.learning_rate, s.total, s.l_rgb, s.l_depth, s.d_common, s.d_specific, s.accuracy})
        out += "\t" + format_value(v);
    return out;
}

/// Human table followed by one metric<TAB>value line per metric.
inline std::string format_report(const MetricsReport& r, const Discrepancy* d) {
    std::ostringstream os;
    os << std::left << std::setw(8) << "class" << std::right << std::setw(12) << "pixels" << std::setw(12) << "accuracy"
       << "\n";
    for (int c = 0; c < r.classes; ++c) {
        std::size_t pixels = 0;
        for (int p = 0; p < r.classes; ++p) pixels += r.count(c, p);
        os << std::left << std::setw(8) << c << std::right << std::setw(12) << pixels << std::setw(12);
        if (pixels == 0) os << "-";
        else os << std::fixed << std::setprecision(4) << r.per_class[static_cast<std::size_t>(c)];
        os << "\n";
    }
    os << std::left << std::setw(20) << "class average" << std::right << std::setw(12) << std::fixed
       << std::setprecision(4) << r.class_average << "\n";
    os << std::left << std::setw(20) << "pixel accuracy" << std::right << std::setw(12) << r.pixel_accuracy << "\n";

    std::string lines = "class_average\t" + format_value(r.class_average) + "\n";
    lines += "pixel_accuracy\t" + format_value(r.pixel_accuracy) + "\n";
    for (int c = 0; c < r.classes; ++c) {
        const Scalar v = r.per_class[static_cast<std::size_t>(c)];
        lines += "class_" + std::to_string(c) + "_accuracy\t" + (std::isnan(v) ? "nan" : format_value(v)) + "\n";
    }
    if (d) {
        lines += "d_common\t" + format_value(d->common) + "\n";
        lines += "d_specific\t" + format_value(d->specific) + "\n";
    }
    return os.str() + lines;
}

/// Reads a feature batch: the named entry, or the only floating entry. Rank > 2 is
/// flattened to N x (product of the rest).
inline Tensor read_features(const std::string& path, const std::string& entry) {
    const TensorFile f = TensorFile::read(path);
    std::string name = entry;
    if (name.empty()) {
        for (const TensorEntry& e : f.entries())
            if (e.dtype != DType::u8) {
                if (!name.empty()) throw FormatError("'" + path + "' holds several tensors; pick one with --entry");
                name = e.name;
            }
        if (name.empty()) throw FormatError("'" + path + "' holds no floating-point tensor");
    }
    const TensorEntry& e = f.entry(name);
    Tensor t = f.tensor(name, e.dtype);
    if (t.rank() < 2) throw ShapeError("feature tensor '" + name + "' needs rank >= 2, got " + t.shape().str());
    return t.reshaped(Shape{t.dim(0), static_cast<int>(t.size()) / t.dim(0)});
}

struct Io {
    std::ostream& out;
    std::ostream& err;
};

inline int gen_data(const RunConfig& c, const fs::path& out, Io io) {
    c.scene.validate();
    if (c.train_size < 1 || c.test_size < 1) throw ConfigError("data sizes must be >= 1");
    fs::create_directories(out);
    const Dataset train{generate_dataset(c.scene, c.train_size, 0)};
    const Dataset test{generate_dataset(c.scene, c.test_size, static_cast<std::uint64_t>(c.train_size))};
    save_dataset(train, out, "train");
    save_dataset(test, out, "test");
    write_text(out / "scene.cfg", c.to_text("scene.") + c.to_text("data."));
    io.out << "wrote " << train.size() << " training and " << test.size() << " test scenes to " << out.string() << "\n";
    return kExitOk;
}

inline int train(const RunConfig& c, Io io) {
    c.validate();
    const fs::path out = c.out_dir;
    const Dataset train = open_dataset(c.data_dir, "train");
    check_dataset(train, c.network, "training data");
    const Dataset stage1 = patch_dataset(train, 1, c.patches);
    const Dataset stage2 = patch_dataset(train, 2, c.patches);

    fs::create_directories(out);
    write_text(out / "config.cfg", c.to_text());
    std::ofstream log(out / "train.log", std::ios::binary | std::ios::trunc);
    if (!log) throw FormatError("cannot write '" + (out / "train.log").string() + "'");
    log << log_header() << "\n";
    io.out << log_header() << "\n";

    Model model(c.network, c.seed);
    OptimizerState state(c.optimizer);
    auto on_epoch = [&](const HistoryEntry& h) {
        const std::string line = log_line(h);
        log << line << "\n" << std::flush;
        io.out << line << "\n" << std::flush;
        if (c.checkpoint_every > 0 && h.epoch % c.checkpoint_every == 0) {
            char name[40];
            std::snprintf(name, sizeof name, "checkpoint-e%04d.mdt", h.epoch);
            save_checkpoint(model, (out / name).string());
        }
    };
    run_curriculum(model, {&train, &stage1, &stage2}, c.plan(), c.train_options(), state, on_epoch);
    for (auto* store : {&model.parameters(), &model.buffers()})
        for (const auto& [name, t] : *store)
            if (!t.all_finite()) throw NumericError("non-finite value in '" + name + "' after training");
    save_checkpoint(model, (out / "model.mdt").string());
    io.out << "saved " << (out / "model.mdt").string() << "\n";
    return kExitOk;
}

inline int eval(const std::string& checkpoint, const std::string& data, const std::string& metrics_path,
                const Scalar* fusion_weight, Io io) {
    Model model = load_checkpoint(checkpoint);
    const Dataset d = open_dataset(data, "test");
    check_dataset(d, model.config(), "evaluation data");
    const Scalar w = fusion_weight ? *fusion_weight : model.config().fusion_weight;
    const MetricsReport r = evaluate_model(model, d, w);
    Discrepancy disc;
    const bool have_disc = d.size() >= 8;
    if (have_disc) disc = feature_discrepancy(model, d, KernelFamily::standard());
    const std::string text = format_report(r, have_disc ? &disc : nullptr);
    io.out << text;
    if (!metrics_path.empty()) {
        std::string lines;
        std::istringstream is(text);
        for (std::string line; std::getline(is, line);)
            if (line.find('\t') != std::string::npos) lines += line + "\n";
        write_text(metrics_path, lines);
    }
    return kExitOk;
}

inline int infer(const std::string& checkpoint, const std::string& sample_path, const std::string& out_path, Io io) {
    Model model = load_checkpoint(checkpoint);
    const Sample s = read_sample(sample_path);
    check_dataset(Dataset{{s}}, model.config(), "sample");
    const LabelMap pred = predict(model, with_batch_axis(s.rgb), with_batch_axis(s.depth), model.config().fusion_weight);
    write_label_ppm(pred, 0, out_path);
    io.out << "wrote " << out_path << "\n";
    return kExitOk;
}

inline int dump_features(const std::string& checkpoint, const std::string& sample_path, const std::string& mode,
                         const std::string& out_path, Io io) {
    const FeatureMode m = parse_feature_mode(mode);
    Model model = load_checkpoint(checkpoint);
    const Sample s = read_sample(sample_path);
    check_dataset(Dataset{{s}}, model.config(), "sample");
    write_pgm(visualize_stream_features(model, with_batch_axis(s.rgb), with_batch_axis(s.depth), m), out_path);
    io.out << "wrote " << out_path << "\n";
    return kExitOk;
}

inline int mmd_test(const std::string& a_path, const std::string& b_path, const std::string& entry,
                    const std::string& family_text, int permutations, std::uint64_t seed, Io io) {
    const KernelFamily family = detail::parse_family(family_text);
    const Tensor a = read_features(a_path, entry);
    const Tensor b = read_features(b_path, entry);
    if (!(a.shape() == b.shape()))
        throw ShapeError("feature batches differ in shape: " + a.shape().str() + " vs " + b.shape().str());
    const PermutationResult r = mmd_permutation_test(a, b, family, permutations, seed);
    io.out << "estimate\t" << format_value(r.estimate) << "\n";
    io.out << "p_value\t" << format_value(r.p_value) << "\n";
    io.out << "permutations\t" << permutations << "\n";
    return kExitOk;
}

} // namespace cli

/// Runs one command line (args[0] is the program name) and returns the exit code.
inline int run_command(const std::vector<std::string>& args, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
    CLI::App app{"Paired RGB/depth segmentation with shared and modality-specific features"};
    app.require_subcommand(1);
    app.footer("Config keys (key = default):\n" + config_help());

    std::string config_file, data, out_dir, checkpoint, sample, mode, metrics_path, entry, family = "standard";
    std::vector<std::string> overrides;
    std::uint64_t seed = 1;
    int permutations = 1000;
    double fusion_weight = 0;
    std::vector<std::string> pair;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic train/test dataset");
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--seed", seed, "scene seed (overrides scene.seed)");
    gen->add_option("--config", config_file, "config file");
    gen->add_option("--set", overrides, "key=value override, repeatable");

    auto* train = app.add_subcommand("train", "train a model; writes config.cfg, train.log and model.mdt");
    train->add_option("--config", config_file, "config file");
    train->add_option("--set", overrides, "key=value override, repeatable");
    train->add_option("--data", data, "dataset directory (overrides paths.data)");
    train->add_option("--out", out_dir, "output directory (overrides paths.out)");

    auto* eval = app.add_subcommand("eval", "per-class and class-average accuracy of a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "model file")->required();
    eval->add_option("--data", data, "manifest, or dataset directory (uses test.tsv)")->required();
    eval->add_option("--metrics", metrics_path, "also write the metric lines to this file");
    auto* fw = eval->add_option("--fusion-weight", fusion_weight, "override the stored fusion weight");

    auto* infer = app.add_subcommand("infer", "label map of one sample as a color PPM");
    infer->add_option("--checkpoint", checkpoint, "model file")->required();
    infer->add_option("--sample", sample, "sample tensor file")->required();
    infer->add_option("--out", out_dir, "output PPM")->required();

    auto* dump = app.add_subcommand("dump-features", "first decoder block's mean feature map as a PGM");
    dump->add_option("--checkpoint", checkpoint, "model file")->required();
    dump->add_option("--sample", sample, "sample tensor file")->required();
    dump->add_option("--mode", mode, "rgb-specific, depth-specific or common")->required();
    dump->add_option("--out", out_dir, "output PGM")->required();

    auto* mmd = app.add_subcommand("mmd-test", "MK-MMD estimate and permutation p-value of two paired feature batches");
    mmd->add_option("files", pair, "two tensor files with N x D features")->required()->expected(2);
    mmd->add_option("--entry", entry, "tensor entry name (default: the only floating entry)");
    mmd->add_option("--family", family, "standard, single:<sigma> or <sigma>:<beta>,...");
    mmd->add_option("--permutations", permutations, "number of permutations (>= 100)");
    mmd->add_option("--seed", seed, "permutation seed");

    std::vector<const char*> argv;
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    const cli::Io io{out, err};
    try {
        if (*gen) {
            RunConfig c = cli::resolve_config(config_file, overrides);
            if (gen->count("--seed")) c.scene.seed = seed;
            return cli::gen_data(c, out_dir, io);
        }
        if (*train) {
            RunConfig c = cli::resolve_config(config_file, overrides);
            if (!data.empty()) c.data_dir = data;
            if (!out_dir.empty()) c.out_dir = out_dir;
            return cli::train(c, io);
        }
        if (*eval) {
            const Scalar w = fusion_weight;
            return cli::eval(checkpoint, data, metrics_path, fw->count() ? &w : nullptr, io);
        }
        if (*infer) return cli::infer(checkpoint, sample, out_dir, io);
        if (*dump) return cli::dump_features(checkpoint, sample, mode, out_dir, io);
        if (*mmd) return cli::mmd_test(pair[0], pair[1], entry, family, permutations, seed, io);
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const ArgumentError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}

} // namespace mdseg
