#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcrm/raster.hpp"

namespace mcrm::embed {

struct EmbeddingPoint {
    std::string tile_id;
    std::array<double, 2> y{0.0, 0.0};
};

struct GridHistogram {
    int grid_size = 0;
    double min_x = 0.0, min_y = 0.0, max_x = 0.0, max_y = 0.0;
    std::vector<std::vector<std::string>> cells; // row-major [gy * G + gx]
    size_t total = 0;

    size_t count(int gy, int gx) const { return cells[static_cast<size_t>(gy) * grid_size + gx].size(); }
};

// Bounding box split into G x G equal cells; points exactly on an internal
// boundary go to the lower-index cell.
GridHistogram grid_histogram(const std::vector<EmbeddingPoint>& points, int grid_size);

struct SampledTile {
    std::string tile_id;
    int cell_row = 0;
    int cell_col = 0;
};

// Round-robin over non-empty cells in row-major order, one seeded draw per
// visited cell, until k unique tiles are selected.
std::vector<SampledTile> uniform_sample(const GridHistogram& hist, size_t k, uint64_t seed);

// Cell counts on a black->red->yellow->white ramp, scaled by the max count.
raster::BandImage heatmap_image(const GridHistogram& hist, int cell_pixels = 8);
void render_heatmap(const GridHistogram& hist, const std::filesystem::path& path,
                    int cell_pixels = 8);

} // namespace mcrm::embed
