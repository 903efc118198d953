#pragma once

// Binary PGM/PPM export for feature maps and label maps.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace mdseg {

/// Min-max normalization of a 2-D map to 0..255; a constant map becomes 128.
inline std::vector<std::uint8_t> normalize_to_bytes(const Tensor& map) {
    if (!map.all_finite()) throw NumericError("cannot export a map with non-finite values");
    const auto v = map.values();
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    std::vector<std::uint8_t> out(v.size(), 128);
    if (*hi > *lo) {
        const Scalar range = *hi - *lo;
        for (std::size_t i = 0; i < v.size(); ++i)
            out[i] = static_cast<std::uint8_t>(std::lround((v[i] - *lo) / range * 255));
    }
    return out;
}

/// Fixed palette; label i uses entry i % 16, the ignore label is white.
inline std::array<std::uint8_t, 3> label_color(std::uint8_t label) {
    static constexpr std::uint8_t palette[16][3] = {
        {0, 0, 0},     {220, 50, 47},  {38, 139, 210}, {133, 153, 0},  {181, 137, 0},   {211, 54, 130},
        {42, 161, 152}, {108, 113, 196}, {203, 75, 22},  {128, 128, 128}, {255, 160, 122}, {70, 130, 180},
        {154, 205, 50}, {238, 130, 238}, {64, 224, 208}, {160, 82, 45}};
    if (label == LabelMap::kIgnore) return {255, 255, 255};
    const auto* c = palette[label % 16];
    return {c[0], c[1], c[2]};
}

namespace detail {

inline void write_netpbm(const std::string& path, const char* magic, int width, int height,
                         const std::vector<std::uint8_t>& pixels) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path + "' for writing");
    f << magic << "\n" << width << " " << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!f) throw FormatError("failed writing '" + path + "'");
}

} // namespace detail

/// Writes a rank-2 (H x W) map as an 8-bit binary PGM.
inline void write_pgm(const Tensor& map, const std::string& path) {
    if (map.rank() != 2) throw ShapeError("write_pgm expects an H x W map, got " + map.shape().str());
    detail::write_netpbm(path, "P5", map.dim(1), map.dim(0), normalize_to_bytes(map));
}

/// Writes sample `n` of a label map as a palette-colored binary PPM.
inline void write_label_ppm(const LabelMap& labels, int n, const std::string& path) {
    if (n < 0 || n >= labels.batch) throw ArgumentError("label map has no sample " + std::to_string(n));
    std::vector<std::uint8_t> rgb;
    rgb.reserve(labels.plane() * 3);
    for (std::size_t i = 0; i < labels.plane(); ++i) {
        const auto c = label_color(labels.data[static_cast<std::size_t>(n) * labels.plane() + i]);
        rgb.insert(rgb.end(), c.begin(), c.end());
    }
    detail::write_netpbm(path, "P6", labels.width, labels.height, rgb);
}

} // namespace mdseg
