// SPDX-License-Identifier: Apache-2.0
//
// Procedural micrograph-like textures with fixed captions: four material
// classes, four variants each. Used for smoke runs, overfitting checks and
// the command-line demo corpus.
#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "maemi/image.hpp"
#include "maemi/tensor.hpp"

namespace maemi {

struct SyntheticItem {
    std::string name;     // file stem, e.g. "nanowire_2"
    std::string label;    // class word
    std::string caption;  // begins with the class word
    RawImage image;
};

inline constexpr std::array<const char*, 4> kSyntheticClasses = {"nanowire", "nanoparticle", "porous", "layered"};

inline const std::array<std::array<const char*, 4>, 4>& synthetic_captions() {
    static const std::array<std::array<const char*, 4>, 4> captions = {{
        {"nanowire strands aligned horizontally with dense spacing .",
         "nanowire strands crossing diagonally upward on a dark substrate .",
         "nanowire strands standing vertically in a sparse array .",
         "nanowire strands tilted downward with bright contrast ."},
        {"nanoparticle clusters of small uniform spheres .",
         "nanoparticle clusters of medium spheres on a square lattice .",
         "nanoparticle clusters of large bright spheres .",
         "nanoparticle clusters of tiny dense grains ."},
        {"porous film with few wide pores .",
         "porous film with many narrow pores .",
         "porous film showing irregular open cavities .",
         "porous film with a fine honeycomb of voids ."},
        {"layered sheets stacked in thin bands .",
         "layered sheets stacked in thick bands .",
         "layered sheets with alternating bright and dark strata .",
         "layered sheets forming gently curved terraces ."},
    }};
    return captions;
}

namespace detail {

inline RawImage blank_image(std::size_t size) {
    return RawImage{size, size, 3, std::vector<float>(size * size * 3, 0.0f)};
}

inline void put_pixel(RawImage& img, std::size_t y, std::size_t x, double v, const std::array<double, 3>& tint) {
    for (std::size_t c = 0; c < 3; ++c)
        img.values[(y * img.width + x) * 3 + c] = static_cast<float>(std::clamp(v * tint[c], 0.0, 255.0));
}

}  // namespace detail

/// Renders class `cls` (0..3), variant `var` (0..3) at size x size.
inline RawImage render_synthetic(std::size_t cls, std::size_t var, std::size_t size = kImageSize) {
    RawImage img = detail::blank_image(size);
    const double pi = std::acos(-1.0);
    const std::array<double, 3> tint = {1.0 - 0.1 * static_cast<double>(var), 0.9, 0.8 + 0.05 * static_cast<double>(var)};
    Prng noise(1000 + cls * 10 + var);
    const auto n = static_cast<double>(size);
    switch (cls) {
        case 0: {  // oriented sinusoidal strands
            const double angle = pi * static_cast<double>(var) / 4.0;
            const double freq = (var == 0 ? 18.0 : 10.0) * 2.0 * pi / n;
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    const double t = (static_cast<double>(x) * std::sin(angle) + static_cast<double>(y) * std::cos(angle)) * freq;
                    const double base = var == 1 ? 40.0 : 90.0;
                    const double gain = var == 3 ? 160.0 : 110.0;
                    detail::put_pixel(img, y, x, base + gain * (0.5 + 0.5 * std::sin(t)) + 10.0 * noise.uniform(), tint);
                }
            break;
        }
        case 1: {  // spheres on a lattice
            const std::array<double, 4> radius = {5.0, 9.0, 15.0, 3.0};
            const std::array<double, 4> pitch = {18.0, 28.0, 44.0, 10.0};
            const double r = radius[var], p = pitch[var];
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    const double dx = std::fmod(static_cast<double>(x), p) - p / 2.0;
                    const double dy = std::fmod(static_cast<double>(y), p) - p / 2.0;
                    const double d = std::sqrt(dx * dx + dy * dy);
                    const double v = d < r ? 230.0 - 60.0 * d / r : 50.0;
                    detail::put_pixel(img, y, x, v + 12.0 * noise.uniform(), tint);
                }
            break;
        }
        case 2: {  // pores punched into a bright film
            const std::array<int, 4> count = {8, 60, 20, 140};
            const std::array<double, 4> radius = {22.0, 6.0, 14.0, 5.0};
            std::vector<std::array<double, 3>> pores;
            for (int i = 0; i < count[var]; ++i) {
                const double rr = var == 2 ? radius[var] * (0.5 + noise.uniform()) : radius[var];
                pores.push_back({noise.uniform() * n, noise.uniform() * n, rr});
            }
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    double v = 200.0;
                    for (const auto& pr : pores) {
                        const double dx = static_cast<double>(x) - pr[0], dy = static_cast<double>(y) - pr[1];
                        if (dx * dx + dy * dy < pr[2] * pr[2]) {
                            v = 30.0;
                            break;
                        }
                    }
                    detail::put_pixel(img, y, x, v + 15.0 * noise.uniform(), tint);
                }
            break;
        }
        default: {  // stacked bands
            const std::array<double, 4> period = {8.0, 40.0, 20.0, 24.0};
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    double yy = static_cast<double>(y);
                    if (var == 3) yy += 18.0 * std::sin(2.0 * pi * static_cast<double>(x) / n);
                    const int band = static_cast<int>(std::floor(yy / period[var]));
                    double v = (band % 2 == 0) ? 180.0 : 90.0;
                    if (var == 2) v = (band % 2 == 0) ? 245.0 : 20.0;
                    detail::put_pixel(img, y, x, v + 10.0 * noise.uniform(), tint);
                }
            break;
        }
    }
    return img;
}

/// The 16-item corpus in class-major order.
inline std::vector<SyntheticItem> synthetic_corpus(std::size_t size = kImageSize) {
    std::vector<SyntheticItem> out;
    for (std::size_t c = 0; c < kSyntheticClasses.size(); ++c)
        for (std::size_t v = 0; v < 4; ++v)
            out.push_back({std::string(kSyntheticClasses[c]) + "_" + std::to_string(v), kSyntheticClasses[c],
                           synthetic_captions()[c][v], render_synthetic(c, v, size)});
    return out;
}

/// Writes <dir>/<class>/<name>.ppm for every item plus <dir>/captions.tsv
/// ("relative path<TAB>caption").
inline void write_synthetic_corpus(const std::filesystem::path& dir, const std::vector<SyntheticItem>& items) {
    std::filesystem::create_directories(dir);
    std::string index;
    for (const auto& it : items) {
        const auto rel = std::filesystem::path(it.label) / (it.name + ".ppm");
        std::filesystem::create_directories(dir / it.label);
        detail::write_file_bytes(dir / rel, encode_ppm(it.image));
        index += rel.generic_string() + "\t" + it.caption + "\n";
    }
    detail::write_file_bytes(dir / "captions.tsv", std::vector<std::uint8_t>(index.begin(), index.end()));
}

}  // namespace maemi
