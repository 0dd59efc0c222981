#include "mcrm/cloudsim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "mcrm/errors.hpp"

using nlohmann::json;

namespace mcrm::cloudsim {

void NoiseParams::validate() const {
    if (octaves < 1) throw ConfigError("noise octaves must be >= 1");
    if (!(persistence > 0.0 && persistence <= 1.0))
        throw ConfigError("noise persistence must be in (0, 1]");
    if (!(lacunarity > 1.0)) throw ConfigError("noise lacunarity must be > 1");
    if (!(base_frequency > 0.0)) throw ConfigError("noise base_frequency must be > 0");
}

Permutation Permutation::from_seed(uint64_t seed) {
    Permutation perm;
    std::array<uint8_t, 256> base{};
    for (int i = 0; i < 256; ++i) base[i] = static_cast<uint8_t>(i);
    // Explicit Fisher-Yates with modulo draws: std::shuffle is not
    // reproducible across standard library implementations.
    std::mt19937_64 rng(seed);
    for (int i = 255; i > 0; --i) {
        const auto j = static_cast<int>(rng() % static_cast<uint64_t>(i + 1));
        std::swap(base[i], base[j]);
    }
    for (int i = 0; i < 512; ++i) perm.p[i] = base[i & 255];
    return perm;
}

namespace {

inline double lerp(double a, double b, double t) { return a + t * (b - a); }

// 8-direction gradient set: diagonals and axes.
inline double grad2(uint8_t hash, double x, double y) {
    switch (hash & 7) {
    case 0: return x + y;
    case 1: return -x + y;
    case 2: return x - y;
    case 3: return -x - y;
    case 4: return x;
    case 5: return -x;
    case 6: return y;
    default: return -y;
    }
}

} // namespace

double perlin2(double x, double y, const Permutation& perm) {
    const auto fx = std::floor(x);
    const auto fy = std::floor(y);
    const int xi = static_cast<int>(static_cast<int64_t>(fx) & 255);
    const int yi = static_cast<int>(static_cast<int64_t>(fy) & 255);
    const double xf = x - fx;
    const double yf = y - fy;
    const double u = fade(xf);
    const double v = fade(yf);

    const auto& p = perm.p;
    const uint8_t aa = p[p[xi] + yi];
    const uint8_t ab = p[p[xi] + yi + 1];
    const uint8_t ba = p[p[xi + 1] + yi];
    const uint8_t bb = p[p[xi + 1] + yi + 1];

    const double n00 = grad2(aa, xf, yf);
    const double n10 = grad2(ba, xf - 1.0, yf);
    const double n01 = grad2(ab, xf, yf - 1.0);
    const double n11 = grad2(bb, xf - 1.0, yf - 1.0);

    return lerp(lerp(n00, n10, u), lerp(n01, n11, u), v);
}

double fbm_at(const NoiseParams& params, double u, double v) {
    const Permutation perm = Permutation::from_seed(params.seed);
    double sum = 0.0, amplitude = 1.0, norm = 0.0;
    double frequency = params.base_frequency;
    for (int o = 0; o < params.octaves; ++o) {
        sum += amplitude * perlin2(frequency * u, frequency * v, perm);
        norm += amplitude;
        amplitude *= params.persistence;
        frequency *= params.lacunarity;
    }
    return sum / norm;
}

std::vector<double> fbm_grid(const NoiseParams& params, int width, int height) {
    params.validate();
    const Permutation perm = Permutation::from_seed(params.seed);
    std::vector<double> grid(static_cast<size_t>(width) * height);
    // Same octave ladder as fbm_at; the permutation is hoisted out of the
    // pixel loop.
    std::vector<double> freqs(params.octaves), amps(params.octaves);
    double amplitude = 1.0, frequency = params.base_frequency, norm = 0.0;
    for (int o = 0; o < params.octaves; ++o) {
        freqs[o] = frequency;
        amps[o] = amplitude;
        norm += amplitude;
        amplitude *= params.persistence;
        frequency *= params.lacunarity;
    }
    for (int y = 0; y < height; ++y) {
        const double v = (y + 0.5) / height;
        for (int x = 0; x < width; ++x) {
            const double u = (x + 0.5) / width;
            double sum = 0.0;
            for (int o = 0; o < params.octaves; ++o)
                sum += amps[o] * perlin2(freqs[o] * u, freqs[o] * v, perm);
            grid[static_cast<size_t>(y) * width + x] = sum / norm;
        }
    }
    return grid;
}

CloudField alpha_from_noise(const std::vector<double>& noise, int width, int height, double t0,
                            double t1) {
    if (!(t0 < t1)) throw ConfigError("alpha thresholds must satisfy t0 < t1");
    if (noise.size() != static_cast<size_t>(width) * height)
        throw DataError("noise grid size does not match dimensions");
    CloudField field;
    field.width = width;
    field.height = height;
    field.threshold_low = t0;
    field.threshold_high = t1;
    field.alpha.resize(noise.size());
    const double inv = 1.0 / (t1 - t0);
    for (size_t i = 0; i < noise.size(); ++i) {
        const double a = (noise[i] - t0) * inv;
        field.alpha[i] = static_cast<float>(std::clamp(a, 0.0, 1.0));
    }
    return field;
}

CloudField make_cloud_field(const NoiseParams& params, int width, int height, double t0,
                            double t1) {
    CloudField field = alpha_from_noise(fbm_grid(params, width, height), width, height, t0, t1);
    field.params = params;
    return field;
}

raster::BandImage blend(const raster::BandImage& clean_rgb, const CloudField& field,
                        const std::array<float, 3>& cloud_color) {
    if (clean_rgb.width != field.width || clean_rgb.height != field.height)
        throw DataError("cloud field dimensions do not match tile");
    if (clean_rgb.bands != 3) throw DataError("blend expects a 3-band RGB tile");
    raster::BandImage out = clean_rgb;
    for (int c = 0; c < 3; ++c) {
        float* plane = out.band_ptr(c);
        const float color = cloud_color[c];
        for (size_t i = 0; i < clean_rgb.pixel_count(); ++i) {
            const float a = field.alpha[i];
            plane[i] = (1.0f - a) * plane[i] + a * color;
        }
    }
    return out;
}

namespace {

double percentile(const std::vector<float>& sorted, double pct) {
    if (sorted.empty()) return 0.0;
    const double rank = pct / 100.0 * (static_cast<double>(sorted.size()) - 1.0);
    const auto lo = static_cast<size_t>(std::floor(rank));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double w = rank - static_cast<double>(lo);
    return (1.0 - w) * sorted[lo] + w * sorted[hi];
}

} // namespace

std::vector<ChannelStats> winsorized_stats(const raster::BandImage& img, double clip_low_pct,
                                           double clip_high_pct) {
    if (!(clip_low_pct < clip_high_pct))
        throw ConfigError("clip percentiles must satisfy low < high");
    if (img.pixel_count() == 0) throw DataError("cannot compute stats of an empty image");
    std::vector<ChannelStats> stats(img.bands);
    std::vector<float> sorted(img.pixel_count());
    for (int c = 0; c < img.bands; ++c) {
        const float* plane = img.band_ptr(c);
        std::copy(plane, plane + img.pixel_count(), sorted.begin());
        std::sort(sorted.begin(), sorted.end());
        const double lo = percentile(sorted, clip_low_pct);
        const double hi = percentile(sorted, clip_high_pct);
        double sum = 0.0;
        for (float v : sorted) sum += std::clamp(static_cast<double>(v), lo, hi);
        const double mean = sum / static_cast<double>(sorted.size());
        double var = 0.0;
        for (float v : sorted) {
            const double d = std::clamp(static_cast<double>(v), lo, hi) - mean;
            var += d * d;
        }
        var /= static_cast<double>(sorted.size());
        stats[c] = {mean, std::sqrt(var)};
    }
    return stats;
}

ColorCorrectResult color_correct(const raster::BandImage& img,
                                 const std::vector<ChannelStats>& reference, double clip_low_pct,
                                 double clip_high_pct) {
    if (static_cast<int>(reference.size()) != img.bands)
        throw DataError("reference stats channel count does not match image");
    const std::vector<ChannelStats> stats = winsorized_stats(img, clip_low_pct, clip_high_pct);
    ColorCorrectResult result;
    result.image = img;
    result.degenerate.assign(img.bands, false);
    const float maxv = img.max_value();
    for (int c = 0; c < img.bands; ++c) {
        if (stats[c].stddev <= 1e-6) {
            result.degenerate[c] = true;
            continue;
        }
        const double scale = reference[c].stddev / stats[c].stddev;
        const double shift = reference[c].mean - stats[c].mean * scale;
        float* plane = result.image.band_ptr(c);
        for (size_t i = 0; i < img.pixel_count(); ++i) {
            const double v = plane[i] * scale + shift;
            plane[i] = static_cast<float>(std::clamp(v, 0.0, static_cast<double>(maxv)));
        }
    }
    return result;
}

SynthResult synthesize_group(const raster::Tile& clean_rgb, const raster::Tile& nir,
                             const SynthParams& params) {
    const auto& rgb = clean_rgb.image;
    if (rgb.bands != 3) throw DataError("clean tile must be RGB");
    if (nir.image.bands != 1) throw DataError("NIR tile must be single-band");
    if (rgb.width != nir.image.width || rgb.height != nir.image.height)
        throw DataError("RGB and NIR tiles must be co-registered");

    SynthResult result;
    result.field = make_cloud_field(params.noise, rgb.width, rgb.height, params.threshold_low,
                                    params.threshold_high);
    result.precorrection_cloudy = blend(rgb, result.field, params.cloud_color);

    result.group.target_rgb = clean_rgb;
    result.group.target_rgb.image =
        color_correct(rgb, params.reference, params.clip_low_pct, params.clip_high_pct).image;
    result.group.cloudy_rgb = clean_rgb;
    result.group.cloudy_rgb.image = color_correct(result.precorrection_cloudy, params.reference,
                                                  params.clip_low_pct, params.clip_high_pct)
                                        .image;
    result.group.nir = nir;

    raster::BandImage mask(rgb.width, rgb.height, 1, rgb.value_depth);
    const float maxv = mask.max_value();
    for (size_t i = 0; i < mask.pixel_count(); ++i) mask.data[i] = result.field.alpha[i] * maxv;
    result.group.mask = std::move(mask);
    return result;
}

uint64_t derive_seed(uint64_t master, uint64_t index) {
    // splitmix64 of (master + index); decorrelates per-group noise fields.
    uint64_t z = master + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

namespace {

std::string group_dir_name(size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "g%06zu", index);
    return buf;
}

} // namespace

std::vector<GroupRecord> build_dataset(
    const std::vector<std::pair<raster::Tile, raster::Tile>>& tile_pairs,
    const DatasetConfig& config, const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    config.synth.noise.validate();
    if (!(config.synth.threshold_low < config.synth.threshold_high))
        throw ConfigError("alpha thresholds must satisfy t0 < t1");
    fs::create_directories(root);

    std::vector<GroupRecord> records;
    if (tile_pairs.empty() || config.group_count == 0) {
        write_manifest(records, root / "manifest.jsonl");
        return records;
    }

    std::set<std::string> seen;
    for (size_t g = 0; g < config.group_count; ++g) {
        const auto& [rgb, nir] = tile_pairs[g % tile_pairs.size()];
        SynthParams sp = config.synth;
        sp.noise.seed = derive_seed(config.master_seed, g);
        SynthResult synth = synthesize_group(rgb, nir, sp);

        GroupRecord rec;
        rec.group_id = group_dir_name(g);
        if (!seen.insert(rec.group_id).second)
            throw DataError("duplicate group id: " + rec.group_id);
        rec.scene_id = rgb.scene_id;
        rec.origin_row = rgb.origin_row;
        rec.origin_col = rgb.origin_col;
        rec.seed = sp.noise.seed;
        rec.target_rgb_path = rec.group_id + "/target_rgb.png";
        rec.nir_path = rec.group_id + "/nir.png";
        rec.cloudy_rgb_path = rec.group_id + "/cloudy_rgb.png";
        rec.mask_path = rec.group_id + "/mask.png";

        // Stage then rename so readers never see a partial group.
        const fs::path staging = root / (".tmp-" + rec.group_id);
        fs::remove_all(staging);
        fs::create_directories(staging);
        raster::save_image(synth.group.target_rgb.image, staging / "target_rgb.png");
        raster::save_image(synth.group.nir.image, staging / "nir.png");
        raster::save_image(synth.group.cloudy_rgb.image, staging / "cloudy_rgb.png");
        raster::save_image(synth.group.mask, staging / "mask.png");
        fs::remove_all(root / rec.group_id);
        fs::rename(staging, root / rec.group_id);

        records.push_back(std::move(rec));
    }
    write_manifest(records, root / "manifest.jsonl");
    return records;
}

void write_manifest(const std::vector<GroupRecord>& records,
                    const std::filesystem::path& manifest_path) {
    if (manifest_path.has_parent_path())
        std::filesystem::create_directories(manifest_path.parent_path());
    std::ofstream out(manifest_path);
    if (!out) throw IoError("cannot write manifest: " + manifest_path.string());
    for (const auto& rec : records) {
        json j;
        j["group_id"] = rec.group_id;
        j["scene_id"] = rec.scene_id;
        j["origin"] = {rec.origin_row, rec.origin_col};
        j["paths"] = {{"target_rgb", rec.target_rgb_path},
                      {"nir", rec.nir_path},
                      {"cloudy_rgb", rec.cloudy_rgb_path},
                      {"mask", rec.mask_path}};
        j["seed"] = rec.seed;
        out << j.dump() << "\n";
    }
}

std::vector<GroupRecord> read_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot read manifest: " + manifest_path.string());
    std::vector<GroupRecord> records;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("manifest parse error at line " + std::to_string(lineno) + ": " +
                            e.what());
        }
        GroupRecord rec;
        rec.group_id = j.at("group_id").get<std::string>();
        rec.scene_id = j.value("scene_id", "");
        if (j.contains("origin")) {
            rec.origin_row = j["origin"][0].get<int>();
            rec.origin_col = j["origin"][1].get<int>();
        }
        const auto& paths = j.at("paths");
        rec.target_rgb_path = paths.at("target_rgb").get<std::string>();
        rec.nir_path = paths.at("nir").get<std::string>();
        rec.cloudy_rgb_path = paths.at("cloudy_rgb").get<std::string>();
        rec.mask_path = paths.at("mask").get<std::string>();
        rec.seed = j.value("seed", 0ULL);
        records.push_back(std::move(rec));
    }
    return records;
}

TileGroup load_group(const std::filesystem::path& root, const GroupRecord& rec) {
    TileGroup group;
    group.group_id = rec.group_id;
    group.target_rgb.scene_id = rec.scene_id;
    group.target_rgb.origin_row = rec.origin_row;
    group.target_rgb.origin_col = rec.origin_col;
    group.target_rgb.image = raster::load_image(root / rec.target_rgb_path);
    group.nir = group.target_rgb;
    group.nir.image = raster::load_image(root / rec.nir_path);
    group.cloudy_rgb = group.target_rgb;
    group.cloudy_rgb.image = raster::load_image(root / rec.cloudy_rgb_path);
    group.mask = raster::load_image(root / rec.mask_path);
    if (!group.target_rgb.image.same_shape(group.cloudy_rgb.image) ||
        group.mask.width != group.target_rgb.image.width ||
        group.mask.height != group.target_rgb.image.height)
        throw DataError("group rasters disagree on dimensions: " + rec.group_id);
    return group;
}

} // namespace mcrm::cloudsim
