#include "mcrm/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include <png.h>

namespace mcrm::raster {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace

BandImage load_image(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open raster for reading: " + path.string());

    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8) != 0)
        throw IoError("not a PNG file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    std::vector<std::vector<png_byte>> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("corrupt PNG data: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const int color_type = png_get_color_type(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_bit_depth(png, info) == 16) png_set_swap(png); // stored big-endian
    png_read_update_info(png, info);

    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const int depth = png_get_bit_depth(png, info);
    const int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3 && channels != 4) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("unsupported band count " + std::to_string(channels) + ": " +
                        path.string());
    }

    const size_t row_bytes = png_get_rowbytes(png, info);
    rows.assign(height, std::vector<png_byte>(row_bytes));
    std::vector<png_bytep> row_ptrs(height);
    for (int y = 0; y < height; ++y) row_ptrs[y] = rows[y].data();
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    BandImage img(width, height, channels, depth);
    for (int y = 0; y < height; ++y) {
        const png_byte* row = rows[y].data();
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < channels; ++c) {
                float v;
                if (depth == 16) {
                    const uint16_t* p = reinterpret_cast<const uint16_t*>(row);
                    v = static_cast<float>(p[x * channels + c]);
                } else {
                    v = static_cast<float>(row[x * channels + c]);
                }
                img.at(c, y, x) = v;
            }
        }
    }
    return img;
}

void save_image(const BandImage& img, const std::filesystem::path& path) {
    if (img.bands != 1 && img.bands != 3 && img.bands != 4)
        throw DataError("unsupported band count for PNG: " + std::to_string(img.bands));
    if (img.value_depth != 8 && img.value_depth != 16)
        throw DataError("unsupported value depth: " + std::to_string(img.value_depth));

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open raster for writing: " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG write failed: " + path.string());
    }
    png_init_io(png, fp.get());

    int color_type = PNG_COLOR_TYPE_GRAY;
    if (img.bands == 3) color_type = PNG_COLOR_TYPE_RGB;
    if (img.bands == 4) color_type = PNG_COLOR_TYPE_RGB_ALPHA;
    png_set_IHDR(png, info, img.width, img.height, img.value_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (img.value_depth == 16) png_set_swap(png);

    const float maxv = img.max_value();
    const size_t sample_bytes = img.value_depth == 16 ? 2 : 1;
    std::vector<png_byte> row(static_cast<size_t>(img.width) * img.bands * sample_bytes);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < img.bands; ++c) {
                float v = img.at(c, y, x);
                v = std::max(0.0f, std::min(maxv, v));
                const auto q = static_cast<uint32_t>(std::lround(v));
                if (img.value_depth == 16)
                    reinterpret_cast<uint16_t*>(row.data())[x * img.bands + c] =
                        static_cast<uint16_t>(q);
                else
                    row[static_cast<size_t>(x) * img.bands + c] = static_cast<png_byte>(q);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::vector<Tile> extract_tiles(const BandImage& scene, int side, int stride,
                                const BandImage* validity, const std::string& scene_id) {
    if (side <= 0 || stride <= 0) throw DataError("tile side and stride must be positive");
    if (side > scene.width || side > scene.height)
        throw DataError("tile side " + std::to_string(side) + " exceeds scene " +
                        std::to_string(scene.width) + "x" + std::to_string(scene.height));
    if (validity && (validity->width != scene.width || validity->height != scene.height ||
                     validity->bands != 1))
        throw DataError("validity mask must be 1-band and match scene dimensions");

    std::vector<Tile> tiles;
    for (int r = 0; r + side <= scene.height; r += stride) {
        for (int c = 0; c + side <= scene.width; c += stride) {
            if (validity) {
                bool ok = true;
                for (int y = r; ok && y < r + side; ++y)
                    for (int x = c; x < c + side; ++x)
                        if (validity->at(0, y, x) == 0.0f) {
                            ok = false;
                            break;
                        }
                if (!ok) continue;
            }
            Tile t;
            t.scene_id = scene_id;
            t.origin_row = r;
            t.origin_col = c;
            t.image = crop(scene, r, c, side);
            tiles.push_back(std::move(t));
        }
    }
    return tiles;
}

Planar normalize(const BandImage& img) {
    Planar out;
    out.width = img.width;
    out.height = img.height;
    out.bands = img.bands;
    out.data.resize(img.data.size());
    const float maxv = img.max_value();
    for (size_t i = 0; i < img.data.size(); ++i)
        out.data[i] = 2.0f * img.data[i] / maxv - 1.0f;
    return out;
}

BandImage denormalize(const Planar& t, int value_depth) {
    BandImage img(t.width, t.height, t.bands, value_depth);
    for (size_t i = 0; i < t.data.size(); ++i)
        img.data[i] = denormalize_sample(t.data[i], value_depth);
    return img;
}

BandImage resize_bilinear(const BandImage& img, int new_width, int new_height) {
    BandImage out(new_width, new_height, img.bands, img.value_depth);
    out.ground_resolution = img.ground_resolution;
    const float sx = static_cast<float>(img.width) / new_width;
    const float sy = static_cast<float>(img.height) / new_height;
    for (int c = 0; c < img.bands; ++c) {
        for (int y = 0; y < new_height; ++y) {
            const float fy = (y + 0.5f) * sy - 0.5f;
            const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, img.height - 1);
            const int y1 = std::min(y0 + 1, img.height - 1);
            const float wy = std::clamp(fy - y0, 0.0f, 1.0f);
            for (int x = 0; x < new_width; ++x) {
                const float fx = (x + 0.5f) * sx - 0.5f;
                const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, img.width - 1);
                const int x1 = std::min(x0 + 1, img.width - 1);
                const float wx = std::clamp(fx - x0, 0.0f, 1.0f);
                const float top = img.at(c, y0, x0) * (1 - wx) + img.at(c, y0, x1) * wx;
                const float bot = img.at(c, y1, x0) * (1 - wx) + img.at(c, y1, x1) * wx;
                out.at(c, y, x) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

BandImage crop(const BandImage& img, int row0, int col0, int side) {
    if (row0 < 0 || col0 < 0 || row0 + side > img.height || col0 + side > img.width)
        throw DataError("crop window exceeds image bounds");
    BandImage out(side, side, img.bands, img.value_depth);
    out.ground_resolution = img.ground_resolution;
    for (int c = 0; c < img.bands; ++c)
        for (int y = 0; y < side; ++y)
            std::memcpy(&out.at(c, y, 0),
                        img.band_ptr(c) + static_cast<size_t>(row0 + y) * img.width + col0,
                        sizeof(float) * static_cast<size_t>(side));
    return out;
}

} // namespace mcrm::raster
