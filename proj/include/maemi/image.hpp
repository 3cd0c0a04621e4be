// SPDX-License-Identifier: Apache-2.0
//
// Image ingestion (binary PPM and the MRAW float container), bilinear
// resizing to the encoder resolution, [-1, 1] normalization, and patch
// tokenization.
#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "maemi/error.hpp"
#include "maemi/tensor.hpp"

namespace maemi {

/// Decoded pixels, interleaved HxWxC, values on the 0..255 scale.
struct RawImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<float> values;

    float at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * width + x) * channels + c]; }
};

/// Preprocessed image: HxWx3, values in [-1, 1].
struct ImageTensor {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<float> data;

    float at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * channels + c]; }
    bool operator==(const ImageTensor&) const = default;
};

inline constexpr std::size_t kImageSize = 224;

namespace detail {

inline std::uint32_t read_u32_le(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::IoError, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::IoError, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(Errc::IoError, "short write to " + path.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)

inline RawImage decode_ppm(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto skip_ws = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() -> long {
        skip_ws();
        long v = 0;
        std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
        if (pos == start) fail(Errc::IoError, "malformed PPM header");
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') fail(Errc::IoError, "not a binary PPM (P6)");
    pos = 2;
    const long w = read_int(), h = read_int(), maxval = read_int();
    if (maxval != 255) fail(Errc::IoError, "only maxval 255 PPM is supported");
    ++pos;  // single whitespace byte before the raster
    if (w <= 0 || h <= 0) fail(Errc::EmptyImage, "PPM has zero size");
    RawImage img{static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3, {}};
    const std::size_t n = img.height * img.width * 3;
    if (bytes.size() < pos + n) fail(Errc::IoError, "truncated PPM raster");
    img.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    return img;
}

inline std::vector<std::uint8_t> encode_ppm(const RawImage& img) {
    require(img.channels == 3, Errc::BadChannelCount, "PPM needs 3 channels");
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.values.size());
    for (float v : img.values) out.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)));
    return out;
}

// ---------------------------------------------------------------------------
// MRAW: "MRAW", u32 H, u32 W, u32 C, then H*W*C little-endian f32.

inline RawImage decode_mraw(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), "MRAW", 4) != 0) fail(Errc::IoError, "not an MRAW image");
    RawImage img;
    img.height = detail::read_u32_le(bytes.data() + 4);
    img.width = detail::read_u32_le(bytes.data() + 8);
    img.channels = detail::read_u32_le(bytes.data() + 12);
    const std::size_t n = img.height * img.width * img.channels;
    if (bytes.size() != 16 + 4 * n) fail(Errc::IoError, "MRAW payload size does not match its header");
    img.values.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        img.values[i] = std::bit_cast<float>(detail::read_u32_le(bytes.data() + 16 + 4 * i));
    return img;
}

inline std::vector<std::uint8_t> encode_mraw(const RawImage& img) {
    std::vector<std::uint8_t> out{'M', 'R', 'A', 'W'};
    detail::put_u32_le(out, static_cast<std::uint32_t>(img.height));
    detail::put_u32_le(out, static_cast<std::uint32_t>(img.width));
    detail::put_u32_le(out, static_cast<std::uint32_t>(img.channels));
    for (float v : img.values) detail::put_u32_le(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

inline RawImage decode_image(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), "MRAW", 4) == 0) return decode_mraw(bytes);
    return decode_ppm(bytes);
}

inline RawImage load_image(const std::filesystem::path& path) { return decode_image(detail::read_file_bytes(path)); }

inline bool is_image_file(const std::filesystem::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".ppm" || ext == ".mraw";
}

// ---------------------------------------------------------------------------

/// Bilinear resize (half-pixel centres, not corner aligned) to size x size,
/// then x -> (x/255 - 0.5)/0.5, which maps [0, 255] onto [-1, 1].
inline ImageTensor preprocess(const RawImage& raw, std::size_t size = kImageSize) {
    require(raw.height >= 1 && raw.width >= 1 && !raw.values.empty(), Errc::EmptyImage, "image has no pixels");
    require(raw.channels == 3, Errc::BadChannelCount, "expected 3 channels, got " + std::to_string(raw.channels));
    require(raw.values.size() == raw.height * raw.width * 3, Errc::ShapeMismatch, "pixel buffer size mismatch");
    ImageTensor out{size, size, 3, std::vector<float>(size * size * 3)};
    auto norm = [](double v) { return static_cast<float>((std::clamp(v, 0.0, 255.0) / 255.0 - 0.5) / 0.5); };
    if (raw.height == size && raw.width == size) {
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = norm(raw.values[i]);
        return out;
    }
    const double sy = static_cast<double>(raw.height) / static_cast<double>(size);
    const double sx = static_cast<double>(raw.width) / static_cast<double>(size);
    for (std::size_t y = 0; y < size; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(raw.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, raw.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < size; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(raw.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, raw.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = raw.at(y0, x0, c) * (1 - wx) + raw.at(y0, x1, c) * wx;
                const double bot = raw.at(y1, x0, c) * (1 - wx) + raw.at(y1, x1, c) * wx;
                out.data[(y * size + x) * 3 + c] = norm(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

/// n = (H/P)(W/P) rows in raster order; each row is the patch flattened as
/// (row, col, channel).
template <class T>
Tensor<T> patchify(const ImageTensor& img, std::size_t patch) {
    require(patch > 0 && img.height % patch == 0 && img.width % patch == 0, Errc::NonDivisible,
            "image " + std::to_string(img.height) + "x" + std::to_string(img.width) + " not divisible by patch " +
                std::to_string(patch));
    const std::size_t gh = img.height / patch, gw = img.width / patch, c = img.channels;
    Tensor<T> out({gh * gw, patch * patch * c});
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            auto row = out.row(py * gw + px);
            std::size_t k = 0;
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        row[k++] = static_cast<T>(img.at(py * patch + y, px * patch + x, ch));
        }
    return out;
}

template <class T>
ImageTensor unpatchify(const Tensor<T>& patches, std::size_t height, std::size_t width, std::size_t patch,
                       std::size_t channels = 3) {
    require(height % patch == 0 && width % patch == 0, Errc::NonDivisible, "unpatchify geometry");
    const std::size_t gh = height / patch, gw = width / patch;
    require(patches.rows() == gh * gw && patches.cols() == patch * patch * channels, Errc::ShapeMismatch,
            "unpatchify: patch matrix " + shape_str(patches.shape()));
    ImageTensor img{height, width, channels, std::vector<float>(height * width * channels)};
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            auto row = patches.row(py * gw + px);
            std::size_t k = 0;
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x)
                    for (std::size_t ch = 0; ch < channels; ++ch)
                        img.data[((py * patch + y) * width + px * patch + x) * channels + ch] = static_cast<float>(row[k++]);
        }
    return img;
}

}  // namespace maemi
