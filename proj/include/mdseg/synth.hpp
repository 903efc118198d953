#pragma once

// Seeded paired RGB/depth scenes with classes visible in both modalities, only in
// RGB (texture) or only in depth (shape), plus patch extraction for curriculum stages.

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace mdseg {

enum class PatternKind { common, rgb_only, depth_only };

inline const char* pattern_kind_name(PatternKind k) {
    switch (k) {
    case PatternKind::common: return "common";
    case PatternKind::rgb_only: return "rgb-only";
    case PatternKind::depth_only: return "depth-only";
    }
    return "?";
}

inline constexpr Scalar kBackgroundDepth = 0.25;

struct SceneSpec {
    int height = 32;
    int width = 32;
    int classes = 4;
    /// Kind of each foreground class 1..classes-1; empty means cycle common, rgb-only, depth-only.
    std::vector<PatternKind> kinds;
    int min_shapes = 1;
    int max_shapes = 3;
    Scalar noise = 0.03;
    std::uint64_t seed = 1;

    PatternKind kind(int cls) const {
        if (!kinds.empty()) return kinds.at(static_cast<std::size_t>(cls - 1));
        static constexpr PatternKind cycle[] = {PatternKind::common, PatternKind::rgb_only, PatternKind::depth_only};
        return cycle[(cls - 1) % 3];
    }

    /// Position of class `cls` among the classes of the same kind.
    int kind_index(int cls) const {
        int j = 0;
        for (int k = 1; k < cls; ++k) j += kind(k) == kind(cls);
        return j;
    }

    void validate() const {
        if (classes < 2 || classes > 255) throw ArgumentError("scene needs 2..255 classes");
        if (!kinds.empty() && static_cast<int>(kinds.size()) != classes - 1)
            throw ArgumentError("scene kinds must list one kind per foreground class");
        if (classes >= 4) {
            bool seen[3] = {};
            for (int c = 1; c < classes; ++c) seen[static_cast<int>(kind(c))] = true;
            if (!(seen[0] && seen[1] && seen[2]))
                throw ArgumentError("with 4 or more classes every pattern kind needs at least one class");
        }
        if (height < 8 || width < 8) throw ArgumentError("scene canvas must be at least 8x8");
        if (min_shapes < 1 || max_shapes < min_shapes) throw ArgumentError("invalid shape count range");
        if (!(noise >= 0)) throw ArgumentError("noise level must be non-negative");
    }
};

/// One paired scene: rgb 3 x H x W, depth 1 x H x W (both in [0, 1]), labels 1 x H x W.
struct Sample {
    Tensor rgb;
    Tensor depth;
    LabelMap labels;

    int height() const { return labels.height; }
    int width() const { return labels.width; }
};

namespace detail {

struct ClassLook {
    std::array<Scalar, 3> color{};    ///< common: fill color; rgb-only: first texture color
    std::array<Scalar, 3> color2{};   ///< rgb-only: second texture color
    Scalar depth = kBackgroundDepth;  ///< common / depth-only
    bool stripes = false;             ///< rgb-only: stripes instead of checkerboard
};

inline ClassLook class_look(const SceneSpec& spec, int cls) {
    static constexpr std::array<Scalar, 3> solid[] = {
        {0.90, 0.30, 0.20}, {0.30, 0.80, 0.30}, {0.85, 0.35, 0.85}, {0.95, 0.60, 0.10}};
    static constexpr std::array<Scalar, 3> tex_a[] = {{0.15, 0.30, 0.90}, {0.10, 0.80, 0.85}};
    static constexpr std::array<Scalar, 3> tex_b[] = {{0.95, 0.85, 0.15}, {0.85, 0.15, 0.55}};
    const int j = spec.kind_index(cls);
    ClassLook look;
    switch (spec.kind(cls)) {
    case PatternKind::common:
        look.color = solid[j % 4];
        look.depth = 0.60 + 0.03 * (j % 4);
        break;
    case PatternKind::rgb_only:
        look.color = tex_a[(j / 2) % 2];
        look.color2 = tex_b[(j / 2) % 2];
        look.stripes = j % 2 == 1;
        break;
    case PatternKind::depth_only:
        look.depth = 0.85 + 0.04 * (j % 4);
        break;
    }
    return look;
}

inline std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

} // namespace detail

/// Renders scene `index` of the stream defined by `spec` (pure in (spec, index)).
inline Sample generate_sample(const SceneSpec& spec, std::uint64_t index) {
    spec.validate();
    const int h = spec.height, w = spec.width;
    auto rng = detail::sample_rng(spec.seed, index);

    LabelMap labels(1, h, w, 0);
    std::uniform_int_distribution<int> shape_count(spec.min_shapes, spec.max_shapes);
    std::uniform_int_distribution<int> cls_dist(1, spec.classes - 1);
    std::uniform_int_distribution<int> size_h(std::max(3, h / 5), std::max(4, h * 7 / 16));
    std::uniform_int_distribution<int> size_w(std::max(3, w / 5), std::max(4, w * 7 / 16));
    std::bernoulli_distribution ellipse(0.5);
    const int shapes = shape_count(rng);
    for (int s = 0; s < shapes; ++s) {
        const int cls = cls_dist(rng);
        const int sh = size_h(rng), sw = size_w(rng);
        const int y0 = std::uniform_int_distribution<int>(0, h - sh)(rng);
        const int x0 = std::uniform_int_distribution<int>(0, w - sw)(rng);
        const bool round = ellipse(rng);
        const Scalar cy = y0 + (sh - 1) / 2.0, cx = x0 + (sw - 1) / 2.0;
        const Scalar ry = sh / 2.0, rx = sw / 2.0;
        for (int y = y0; y < y0 + sh; ++y)
            for (int x = x0; x < x0 + sw; ++x) {
                if (round) {
                    const Scalar dy = (y - cy) / ry, dx = (x - cx) / rx;
                    if (dy * dy + dx * dx > 1) continue;
                }
                labels.at(0, y, x) = static_cast<std::uint8_t>(cls);
            }
    }

    // Low-amplitude gray texture everywhere; objects overwrite where visible.
    static constexpr Scalar levels[] = {0.40, 0.45, 0.50, 0.55, 0.60};
    std::uniform_int_distribution<int> level(0, 4);
    Sample out{Tensor(Shape{3, h, w}), Tensor(Shape{1, h, w}, kBackgroundDepth), labels};
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < plane; ++i) {
        const Scalar g = levels[level(rng)];
        for (int c = 0; c < 3; ++c) out.rgb[c * plane + i] = g;
    }

    std::vector<detail::ClassLook> looks(static_cast<std::size_t>(spec.classes));
    for (int c = 1; c < spec.classes; ++c) looks[static_cast<std::size_t>(c)] = detail::class_look(spec, c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int cls = labels.at(0, y, x);
            if (cls == 0) continue;
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            const detail::ClassLook& look = looks[static_cast<std::size_t>(cls)];
            switch (spec.kind(cls)) {
            case PatternKind::common:
                for (int c = 0; c < 3; ++c) out.rgb[c * plane + i] = look.color[static_cast<std::size_t>(c)];
                out.depth[i] = look.depth;
                break;
            case PatternKind::rgb_only: {
                const bool first = look.stripes ? (x / 2) % 2 == 0 : ((x / 2) + (y / 2)) % 2 == 0;
                const auto& col = first ? look.color : look.color2;
                for (int c = 0; c < 3; ++c) out.rgb[c * plane + i] = col[static_cast<std::size_t>(c)];
                break;
            }
            case PatternKind::depth_only:
                out.depth[i] = look.depth;
                break;
            }
        }

    if (spec.noise > 0) {
        std::normal_distribution<Scalar> noise(0, spec.noise);
        for (Tensor* t : {&out.rgb, &out.depth})
            for (Scalar& v : t->values()) v = std::clamp(v + noise(rng), Scalar(0), Scalar(1));
    }
    return out;
}

/// Scenes first_index .. first_index + n - 1.
inline std::vector<Sample> generate_dataset(const SceneSpec& spec, int n, std::uint64_t first_index = 0) {
    if (n < 1) throw ArgumentError("dataset size must be >= 1");
    spec.validate();
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(generate_sample(spec, first_index + static_cast<std::uint64_t>(i)));
    return out;
}

/// A 4-connected region of one foreground class.
struct Instance {
    int label = 0;
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0;  ///< inclusive bounding box
    std::vector<std::size_t> pixels;     ///< flat indices into the sample plane
};

inline std::vector<Instance> find_instances(const LabelMap& labels, int n = 0) {
    const int h = labels.height, w = labels.width;
    std::vector<int> owner(static_cast<std::size_t>(h) * w, -1);
    std::vector<Instance> out;
    std::vector<std::size_t> stack;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int cls = labels.at(n, y, x);
            const std::size_t start = static_cast<std::size_t>(y) * w + x;
            if (cls == 0 || cls == LabelMap::kIgnore || owner[start] >= 0) continue;
            Instance inst{cls, y, x, y, x, {}};
            owner[start] = static_cast<int>(out.size());
            stack.assign(1, start);
            while (!stack.empty()) {
                const std::size_t p = stack.back();
                stack.pop_back();
                inst.pixels.push_back(p);
                const int py = static_cast<int>(p) / w, px = static_cast<int>(p) % w;
                inst.y0 = std::min(inst.y0, py);
                inst.y1 = std::max(inst.y1, py);
                inst.x0 = std::min(inst.x0, px);
                inst.x1 = std::max(inst.x1, px);
                const int ny[] = {py - 1, py + 1, py, py};
                const int nx[] = {px, px, px - 1, px + 1};
                for (int k = 0; k < 4; ++k) {
                    if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
                    const std::size_t q = static_cast<std::size_t>(ny[k]) * w + nx[k];
                    if (owner[q] < 0 && labels.at(n, ny[k], nx[k]) == cls) {
                        owner[q] = static_cast<int>(out.size());
                        stack.push_back(q);
                    }
                }
            }
            std::sort(inst.pixels.begin(), inst.pixels.end());
            out.push_back(std::move(inst));
        }
    return out;
}

struct PatchOptions {
    int margin = 2;          ///< context pixels around the box
    int min_pixels = 4;      ///< smaller instances are skipped
};

namespace detail {

/// Copies the box [y0, y1] x [x0, x1] of `s` into the center of a canvas the size of `s`.
/// Canvas padding has zero input and the ignore label.
inline Sample crop_centered(const Sample& s, int y0, int x0, int y1, int x1) {
    const int h = s.height(), w = s.width();
    const int ch = y1 - y0 + 1, cw = x1 - x0 + 1;
    const int oy = (h - ch) / 2, ox = (w - cw) / 2;
    Sample out{Tensor(s.rgb.shape()), Tensor(s.depth.shape()), LabelMap(1, h, w, LabelMap::kIgnore)};
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) {
            const std::size_t src = static_cast<std::size_t>(y0 + y) * w + (x0 + x);
            const std::size_t dst = static_cast<std::size_t>(oy + y) * w + (ox + x);
            for (int c = 0; c < s.rgb.dim(0); ++c) out.rgb[c * plane + dst] = s.rgb[c * plane + src];
            for (int c = 0; c < s.depth.dim(0); ++c) out.depth[c * plane + dst] = s.depth[c * plane + src];
            out.labels.data[dst] = s.labels.data[src];
        }
    return out;
}

} // namespace detail

/// Stage 1: one patch per instance, other instances relabeled to ignore.
/// Stage 2: one patch per distinct union box of two instances of different classes.
inline std::vector<Sample> extract_patches(const Sample& sample, int stage, const PatchOptions& opt = {}) {
    if (stage != 1 && stage != 2) throw ArgumentError("patch stage must be 1 or 2");
    const int h = sample.height(), w = sample.width();
    std::vector<Instance> instances = find_instances(sample.labels);
    std::erase_if(instances, [&](const Instance& i) { return static_cast<int>(i.pixels.size()) < opt.min_pixels; });
    auto box = [&](int y0, int x0, int y1, int x1) {
        return std::array<int, 4>{std::max(0, y0 - opt.margin), std::max(0, x0 - opt.margin),
                                  std::min(h - 1, y1 + opt.margin), std::min(w - 1, x1 + opt.margin)};
    };
    std::vector<Sample> out;
    if (stage == 1) {
        for (const Instance& inst : instances) {
            const auto b = box(inst.y0, inst.x0, inst.y1, inst.x1);
            Sample masked = sample;
            std::vector<bool> mine(masked.labels.size(), false);
            for (std::size_t p : inst.pixels) mine[p] = true;
            for (std::size_t p = 0; p < masked.labels.size(); ++p)
                if (masked.labels.data[p] != 0 && !mine[p]) masked.labels.data[p] = LabelMap::kIgnore;
            out.push_back(detail::crop_centered(masked, b[0], b[1], b[2], b[3]));
        }
        return out;
    }
    std::vector<std::array<int, 4>> seen;
    for (std::size_t i = 0; i < instances.size(); ++i)
        for (std::size_t j = i + 1; j < instances.size(); ++j) {
            const Instance& a = instances[i];
            const Instance& b = instances[j];
            if (a.label == b.label) continue;
            const auto bx = box(std::min(a.y0, b.y0), std::min(a.x0, b.x0), std::max(a.y1, b.y1), std::max(a.x1, b.x1));
            if (std::find(seen.begin(), seen.end(), bx) != seen.end()) continue;
            seen.push_back(bx);
            out.push_back(detail::crop_centered(sample, bx[0], bx[1], bx[2], bx[3]));
        }
    return out;
}

} // namespace mdseg
