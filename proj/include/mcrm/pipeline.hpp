#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mcrm/config.hpp"
#include "mcrm/mcgan.hpp"
#include "mcrm/raster.hpp"

namespace mcrm::cli {

// Subcommand bodies; the CLI binary is a thin argument shim over these.

void cmd_synth(const PipelineConfig& config);

void cmd_sample(const PipelineConfig& config);

struct TrainResult {
    std::filesystem::path last_checkpoint;
    std::filesystem::path metrics_path;
};
TrainResult cmd_train(const PipelineConfig& config, const std::string& resume_checkpoint = "");

struct InferArgs {
    std::string checkpoint;
    std::string rgb;  // cloudy RGB input
    std::string nir;  // co-registered NIR input
    std::string rgbn; // or a single 4-band raster
    std::string baseline_checkpoint; // optional NIR-only model for the panel
    std::string out_dir;
};
void cmd_infer(const PipelineConfig& config, const InferArgs& args);

struct EvalArgs {
    std::string checkpoint;
    std::string split = "all"; // "all" | "holdout" | "train"
    int panels = 4;
};
void cmd_eval(const PipelineConfig& config, const EvalArgs& args);

// ---- shared helpers (also exercised directly by tests) ----

struct ScenePair {
    std::string id;
    raster::BandImage rgb;
    raster::BandImage nir;
};
ScenePair load_scene(const SceneEntry& entry);

// Tensor assembly in the network's [-1, 1] domain.
mcgan::Batch make_batch(const std::vector<cloudsim::TileGroup>& groups,
                        mcgan::InputMode input_mode, int output_channels);

struct Prediction {
    raster::BandImage rgb;  // denormalized to the input depth
    raster::BandImage mask; // alpha in [0, 1] scaled to the pixel range
};
Prediction predict_group(mcgan::Trainer& trainer, const raster::BandImage& cloudy_rgb,
                         const raster::BandImage* nir);

// Derived per-epoch stream: shuffling and dropout depend only on (seed,
// epoch), which keeps resumed runs identical to uninterrupted ones.
std::mt19937_64 epoch_rng(uint64_t seed, long epoch);

} // namespace mcrm::cli
