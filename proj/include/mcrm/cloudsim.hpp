#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mcrm/raster.hpp"

namespace mcrm::cloudsim {

struct NoiseParams {
    uint64_t seed = 0;
    int octaves = 5;
    double base_frequency = 4.0; // cycles per tile side
    double persistence = 0.5;    // amplitude ratio per octave, (0,1]
    double lacunarity = 2.0;     // frequency ratio per octave, > 1

    void validate() const;
};

// 256-entry shuffle duplicated for wraparound, seeded Fisher-Yates.
struct Permutation {
    std::array<uint8_t, 512> p{};
    static Permutation from_seed(uint64_t seed);
};

// Quintic interpolant 6t^5 - 15t^4 + 10t^3.
inline double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

// Improved lattice-gradient noise: hashed gradients, quintic fade, bilinear
// gradient interpolation. Zero at integer lattice points, |value| <= 1.
double perlin2(double x, double y, const Permutation& perm);

// Octave sum normalized by total amplitude so the result stays in [-1, 1].
// (u, v) are tile-normalized coordinates; octave o samples at
// base_frequency * lacunarity^o cycles per unit.
double fbm_at(const NoiseParams& params, double u, double v);

// fbm_at sampled at pixel centers ((x+0.5)/w, (y+0.5)/h), row-major.
std::vector<double> fbm_grid(const NoiseParams& params, int width, int height);

struct CloudField {
    int width = 0;
    int height = 0;
    std::vector<float> alpha; // row-major, each value in [0, 1]
    double threshold_low = 0.0;
    double threshold_high = 0.6;
    NoiseParams params;

    float at(int row, int col) const { return alpha[static_cast<size_t>(row) * width + col]; }
};

// alpha = clamp((noise - t0) / (t1 - t0), 0, 1) elementwise.
CloudField alpha_from_noise(const std::vector<double>& noise, int width, int height, double t0,
                            double t1);

CloudField make_cloud_field(const NoiseParams& params, int width, int height, double t0,
                            double t1);

// out = (1 - alpha) * clean + alpha * cloud_color, per pixel per channel.
// Pixel-domain values; alpha == 0 pixels pass through bit-exactly.
raster::BandImage blend(const raster::BandImage& clean_rgb, const CloudField& field,
                        const std::array<float, 3>& cloud_color);

struct ChannelStats {
    double mean = 0.0;
    double stddev = 0.0;
};

// Percentile-winsorized per-channel statistics (linear-interpolated ranks).
std::vector<ChannelStats> winsorized_stats(const raster::BandImage& img, double clip_low_pct,
                                           double clip_high_pct);

struct ColorCorrectResult {
    raster::BandImage image;
    std::vector<bool> degenerate; // per channel: variance vanished, passed through
};

// Per channel: estimate winsorized mean/std, affine-map the original samples
// to the reference statistics, clamp to the pixel range. Channels whose
// clipped variance vanishes pass through unchanged and are flagged.
ColorCorrectResult color_correct(const raster::BandImage& img,
                                 const std::vector<ChannelStats>& reference,
                                 double clip_low_pct = 2.0, double clip_high_pct = 98.0);

// One training sample. All four rasters share dimensions; the mask holds the
// synthesis alpha scaled to the pixel range.
struct TileGroup {
    std::string group_id;
    raster::Tile target_rgb; // clean, color-corrected
    raster::Tile nir;        // clean, untouched
    raster::Tile cloudy_rgb; // synthesized, color-corrected
    raster::BandImage mask;  // 1-band alpha * max_value
};

struct SynthParams {
    NoiseParams noise;
    double threshold_low = 0.0;
    double threshold_high = 0.6;
    std::array<float, 3> cloud_color = {255.0f, 255.0f, 255.0f};
    std::vector<ChannelStats> reference;
    double clip_low_pct = 2.0;
    double clip_high_pct = 98.0;
};

struct SynthResult {
    TileGroup group;
    raster::BandImage precorrection_cloudy; // blend output before color correction
    CloudField field;
};

// fbm -> alpha -> blend; color-corrects both the cloudy and the target RGB
// against the shared reference; NIR passes through unchanged.
SynthResult synthesize_group(const raster::Tile& clean_rgb, const raster::Tile& nir,
                             const SynthParams& params);

struct DatasetConfig {
    SynthParams synth;
    uint64_t master_seed = 0;
    size_t group_count = 0; // groups to emit; tile pairs are cycled if fewer
};

struct GroupRecord {
    std::string group_id;
    std::string scene_id;
    int origin_row = 0;
    int origin_col = 0;
    std::string target_rgb_path; // relative to dataset root
    std::string nir_path;
    std::string cloudy_rgb_path;
    std::string mask_path;
    uint64_t seed = 0;
};

uint64_t derive_seed(uint64_t master, uint64_t index);

// Writes <root>/<group_id>/{target_rgb,nir,cloudy_rgb,mask}.png for every
// group plus manifest.jsonl. Group directories are staged and renamed so
// concurrent readers never observe partial groups. Returns the records in
// manifest order.
std::vector<GroupRecord> build_dataset(
    const std::vector<std::pair<raster::Tile, raster::Tile>>& tile_pairs,
    const DatasetConfig& config, const std::filesystem::path& root);

std::vector<GroupRecord> read_manifest(const std::filesystem::path& manifest_path);
void write_manifest(const std::vector<GroupRecord>& records,
                    const std::filesystem::path& manifest_path);

TileGroup load_group(const std::filesystem::path& root, const GroupRecord& rec);

} // namespace mcrm::cloudsim
