#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcrm/cloudsim.hpp"
#include "mcrm/mcgan.hpp"
#include "mcrm/tsne.hpp"

namespace mcrm::cli {

struct SceneEntry {
    std::string id;
    std::string rgb;  // path to 3-band raster
    std::string nir;  // path to 1-band raster
    std::string rgbn; // alternatively one 4-band raster
};

struct PathsConfig {
    std::vector<SceneEntry> scenes;
    std::string dataset_root = "out/dataset";
    std::string sample_dir = "out/sample";
    std::string checkpoint_dir = "out/checkpoints";
    std::string report_dir = "out/reports";
};

struct RasterConfig {
    int tile_side = 256;
    int stride = 256;
};

struct CloudsimConfig {
    uint64_t seed = 0;
    cloudsim::NoiseParams noise;
    double threshold_low = 0.0;
    double threshold_high = 0.6;
    // Unset: pure white at the scene's own depth (the max pixel value).
    std::optional<std::array<float, 3>> cloud_color;
    std::array<double, 2> clip_percentiles = {2.0, 98.0};
    std::string reference_scene; // empty: first scene provides the stats
    size_t group_count = 5000;
};

struct EmbedConfig {
    std::string extractor = "histogram"; // "histogram" or "cnn"
    std::string cnn_weights;
    embed::TsneConfig tsne;
    int grid_size = 45;
    size_t sample_count = 2000;
    uint64_t seed = 0;
};

struct PipelineConfig {
    PathsConfig paths;
    RasterConfig raster;
    CloudsimConfig cloudsim;
    EmbedConfig embed;
    mcgan::TrainConfig train;
    bool train_on_sample_manifest = false;

    static PipelineConfig from_file(const std::filesystem::path& path);
    static PipelineConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    // Validates every section before any side effect.
    void validate() const;

    // Precedence: explicit overrides > MCRM_DATA_ROOT > config file.
    void apply_env();
};

void write_resolved_config(const PipelineConfig& config, const std::filesystem::path& out_dir);

} // namespace mcrm::cli
