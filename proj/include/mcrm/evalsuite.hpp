#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mcrm/cloudsim.hpp"
#include "mcrm/raster.hpp"

namespace mcrm::evalsuite {

struct EvalRecord {
    std::string group_id;
    double mae_rgb = 0.0; // pixel units
    double psnr = 0.0;    // dB
    bool psnr_infinite = false;
    double mask_corr = 0.0;
    bool mask_corr_defined = false;
    double mask_iou = 0.0;
};

double mae(const raster::BandImage& reference, const raster::BandImage& candidate);

struct PsnrResult {
    double db = 0.0;
    bool infinite = false;
};

// 10 * log10(MAX^2 / MSE) in the pixel domain.
PsnrResult psnr(const raster::BandImage& reference, const raster::BandImage& candidate);

struct MaskMetrics {
    double corr = 0.0;
    bool corr_defined = false;
    double iou = 0.0; // of the {alpha >= 0.5} sets
};

// Both inputs in [0, 1].
MaskMetrics mask_metrics(std::span<const float> true_alpha, std::span<const float> predicted);

EvalRecord evaluate_group(const cloudsim::TileGroup& group, const raster::BandImage& pred_rgb,
                          const raster::BandImage& pred_mask);

// One JSON record per line plus a trailing summary record with means.
void write_report(const std::vector<EvalRecord>& records, const std::filesystem::path& path);

struct PanelColumn {
    std::string label;
    raster::BandImage image;
};

// Horizontal strip with a label bar above each column; deterministic bytes.
raster::BandImage render_panel(const std::vector<PanelColumn>& columns, int margin = 0);

// Column order of the synthesized-cloud result figures.
raster::BandImage synth_panel(const cloudsim::TileGroup& group,
                              const raster::BandImage& pred_rgb,
                              const raster::BandImage& pred_mask, int margin = 0);

// Real-cloud layout: no ground truth; an NIR-only baseline fills the slot.
raster::BandImage real_panel(const raster::BandImage& cloudy_rgb, const raster::BandImage& nir,
                             const raster::BandImage& pred_rgb,
                             const raster::BandImage& nir2rgb,
                             const raster::BandImage& pred_mask, int margin = 0);

} // namespace mcrm::evalsuite
