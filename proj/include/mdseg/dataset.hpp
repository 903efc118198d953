#pragma once

// In-memory datasets, batching, and on-disk storage (one tensor file per sample plus a
// tab-separated manifest "index<TAB>relative-path").

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "synth.hpp"
#include "tensor_io.hpp"

namespace mdseg {

struct Batch {
    Tensor rgb;    ///< N x C_rgb x H x W
    Tensor depth;  ///< N x C_d x H x W
    LabelMap labels;
};

struct Dataset {
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }

    Batch batch(std::span<const std::size_t> indices) const {
        if (indices.empty()) throw ArgumentError("empty batch");
        const Sample& first = samples.at(indices[0]);
        const int n = static_cast<int>(indices.size());
        const int cr = first.rgb.dim(0), cd = first.depth.dim(0), h = first.height(), w = first.width();
        Batch b{Tensor(Shape{n, cr, h, w}), Tensor(Shape{n, cd, h, w}), LabelMap(n, h, w)};
        for (int k = 0; k < n; ++k) {
            const Sample& s = samples.at(indices[static_cast<std::size_t>(k)]);
            if (!(s.rgb.shape() == first.rgb.shape()) || !(s.depth.shape() == first.depth.shape()))
                throw ShapeError("samples in a batch must share a shape");
            std::copy(s.rgb.values().begin(), s.rgb.values().end(), b.rgb.data() + k * s.rgb.size());
            std::copy(s.depth.values().begin(), s.depth.values().end(), b.depth.data() + k * s.depth.size());
            std::copy(s.labels.data.begin(), s.labels.data.end(), b.labels.data.begin() + k * static_cast<std::ptrdiff_t>(s.labels.size()));
        }
        return b;
    }

    Batch all() const {
        std::vector<std::size_t> idx(size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        return batch(idx);
    }
};

/// Patches of every sample for one curriculum stage, in sample order.
inline Dataset patch_dataset(const Dataset& source, int stage, const PatchOptions& opt = {}) {
    Dataset out;
    for (const Sample& s : source.samples)
        for (Sample& p : extract_patches(s, stage, opt)) out.samples.push_back(std::move(p));
    return out;
}

inline TensorFile sample_to_file(const Sample& s) {
    TensorFile f;
    f.add_tensor("rgb", s.rgb);
    f.add_tensor("depth", s.depth);
    f.add_bytes("labels", {static_cast<std::uint32_t>(s.height()), static_cast<std::uint32_t>(s.width())}, s.labels.data);
    return f;
}

inline Sample sample_from_file(const TensorFile& f) {
    Sample s;
    s.rgb = f.tensor("rgb");
    s.depth = f.tensor("depth");
    const TensorEntry& l = f.entry("labels");
    if (l.dtype != DType::u8) throw TensorFileError(FormatCode::dtype_mismatch, "labels must be u8");
    if (s.rgb.rank() != 3 || s.depth.rank() != 3 || l.dims.size() != 2 ||
        static_cast<int>(l.dims[0]) != s.rgb.dim(1) || static_cast<int>(l.dims[1]) != s.rgb.dim(2) ||
        s.depth.dim(1) != s.rgb.dim(1) || s.depth.dim(2) != s.rgb.dim(2))
        throw TensorFileError(FormatCode::bad_shape, "sample tensors have inconsistent shapes");
    s.labels = LabelMap(1, static_cast<int>(l.dims[0]), static_cast<int>(l.dims[1]));
    s.labels.data.assign(l.payload.begin(), l.payload.end());
    return s;
}

/// Writes samples as <dir>/<prefix>/NNNNNN.mdt and the manifest <dir>/<prefix>.tsv.
inline void save_dataset(const Dataset& d, const std::filesystem::path& dir, const std::string& prefix) {
    std::filesystem::create_directories(dir / prefix);
    std::ofstream manifest(dir / (prefix + ".tsv"), std::ios::trunc);
    if (!manifest) throw FormatError("cannot write manifest in '" + dir.string() + "'");
    for (std::size_t i = 0; i < d.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%06zu.mdt", i);
        const std::string rel = prefix + "/" + name;
        sample_to_file(d.samples[i]).write((dir / rel).string());
        manifest << i << "\t" << rel << "\n";
    }
    if (!manifest) throw FormatError("failed writing manifest in '" + dir.string() + "'");
}

/// Reads a manifest and the files it lists (paths relative to the manifest's directory).
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw FormatError("cannot open manifest '" + manifest_path.string() + "'");
    Dataset d;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw FormatError(manifest_path.string() + ":" + std::to_string(line_no) + ": expected index<TAB>path");
        std::size_t index = 0;
        try {
            index = std::stoul(line.substr(0, tab));
        } catch (const std::logic_error&) {
            throw FormatError(manifest_path.string() + ":" + std::to_string(line_no) + ": bad index");
        }
        if (index != d.size())
            throw FormatError(manifest_path.string() + ":" + std::to_string(line_no) + ": indices must be 0, 1, 2, ...");
        const auto path = manifest_path.parent_path() / line.substr(tab + 1);
        d.samples.push_back(sample_from_file(TensorFile::read(path.string())));
    }
    if (d.empty()) throw FormatError("manifest '" + manifest_path.string() + "' lists no samples");
    return d;
}

} // namespace mdseg
