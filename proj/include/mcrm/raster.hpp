#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcrm/errors.hpp"

namespace mcrm::raster {

// Multiband raster held as band-planar float samples. Samples carry the
// stored pixel values (0 .. 2^value_depth - 1); quantization to integers
// happens only on save/denormalize.
struct BandImage {
    int width = 0;
    int height = 0;
    int bands = 0;
    int value_depth = 8;            // bits per sample, 8 or 16
    double ground_resolution = 0.0; // meters/pixel, 0 = unknown
    std::vector<float> data;        // [band][row][col]

    BandImage() = default;
    BandImage(int w, int h, int b, int depth)
        : width(w), height(h), bands(b), value_depth(depth),
          data(static_cast<size_t>(w) * h * b, 0.0f) {}

    float& at(int band, int row, int col) {
        return data[(static_cast<size_t>(band) * height + row) * width + col];
    }
    float at(int band, int row, int col) const {
        return data[(static_cast<size_t>(band) * height + row) * width + col];
    }
    float* band_ptr(int band) { return data.data() + static_cast<size_t>(band) * height * width; }
    const float* band_ptr(int band) const {
        return data.data() + static_cast<size_t>(band) * height * width;
    }
    float max_value() const { return static_cast<float>((1u << value_depth) - 1u); }
    size_t pixel_count() const { return static_cast<size_t>(width) * height; }
    bool same_shape(const BandImage& o) const {
        return width == o.width && height == o.height && bands == o.bands;
    }
};

struct Tile {
    std::string scene_id;
    int origin_row = 0;
    int origin_col = 0;
    BandImage image;
};

// Channel-planar float tensor in [-1, 1], the network-facing domain.
struct Planar {
    int width = 0;
    int height = 0;
    int bands = 0;
    std::vector<float> data;
};

// PNG I/O. Grayscale (1 band), RGB (3) and RGBA (4) at 8 or 16 bits are
// supported; palette images are expanded to RGB. Lossless round trip.
BandImage load_image(const std::filesystem::path& path);
void save_image(const BandImage& img, const std::filesystem::path& path);

// Number of fully contained windows along one axis.
inline long window_count(int extent, int side, int stride) {
    if (side > extent) return 0;
    return (extent - side) / stride + 1;
}

// Row-major enumeration of all fully contained side x side windows at the
// given stride. When a validity mask is supplied (1-band, nonzero = valid),
// tiles containing any invalid pixel are dropped.
std::vector<Tile> extract_tiles(const BandImage& scene, int side, int stride,
                                const BandImage* validity = nullptr,
                                const std::string& scene_id = "");

// v -> 2v/(2^depth - 1) - 1 per channel.
Planar normalize(const BandImage& img);
// Rounded inverse of normalize, clamped to the depth range.
BandImage denormalize(const Planar& t, int value_depth);

inline float normalize_sample(float v, int depth) {
    return 2.0f * v / static_cast<float>((1u << depth) - 1u) - 1.0f;
}
inline float denormalize_sample(float t, int depth) {
    const float maxv = static_cast<float>((1u << depth) - 1u);
    float v = (t + 1.0f) * 0.5f * maxv;
    v = std::max(0.0f, std::min(maxv, v));
    return static_cast<float>(std::lround(v));
}

// Bilinear resampling, used by feature extractors with fixed input sizes.
BandImage resize_bilinear(const BandImage& img, int new_width, int new_height);

// Crop a window (must be fully contained).
BandImage crop(const BandImage& img, int row0, int col0, int side);

} // namespace mcrm::raster
