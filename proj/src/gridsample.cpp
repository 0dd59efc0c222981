#include "mcrm/gridsample.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mcrm/errors.hpp"

namespace mcrm::embed {

namespace {

int cell_index(double v, double lo, double hi, int grid) {
    if (hi <= lo) return 0;
    const double t = (v - lo) / (hi - lo) * grid;
    const double f = std::floor(t);
    // Internal boundaries belong to the lower cell; this also folds the
    // maximum into the last cell.
    int idx = (t == f && t > 0.0) ? static_cast<int>(f) - 1 : static_cast<int>(f);
    return std::clamp(idx, 0, grid - 1);
}

} // namespace

GridHistogram grid_histogram(const std::vector<EmbeddingPoint>& points, int grid_size) {
    if (points.empty()) throw DataError("cannot histogram an empty embedding");
    if (grid_size < 1) throw ConfigError("grid size must be >= 1");
    GridHistogram hist;
    hist.grid_size = grid_size;
    hist.min_x = hist.max_x = points[0].y[0];
    hist.min_y = hist.max_y = points[0].y[1];
    for (const auto& p : points) {
        hist.min_x = std::min(hist.min_x, p.y[0]);
        hist.max_x = std::max(hist.max_x, p.y[0]);
        hist.min_y = std::min(hist.min_y, p.y[1]);
        hist.max_y = std::max(hist.max_y, p.y[1]);
    }
    hist.cells.assign(static_cast<size_t>(grid_size) * grid_size, {});
    for (const auto& p : points) {
        const int gx = cell_index(p.y[0], hist.min_x, hist.max_x, grid_size);
        const int gy = cell_index(p.y[1], hist.min_y, hist.max_y, grid_size);
        hist.cells[static_cast<size_t>(gy) * grid_size + gx].push_back(p.tile_id);
    }
    hist.total = points.size();
    return hist;
}

std::vector<SampledTile> uniform_sample(const GridHistogram& hist, size_t k, uint64_t seed) {
    if (k > hist.total)
        throw DataError("requested " + std::to_string(k) + " samples from a population of " +
                        std::to_string(hist.total));
    std::vector<size_t> order;
    for (size_t i = 0; i < hist.cells.size(); ++i)
        if (!hist.cells[i].empty()) order.push_back(i);
    std::vector<std::vector<std::string>> remaining;
    remaining.reserve(order.size());
    for (size_t i : order) remaining.push_back(hist.cells[i]);

    std::mt19937_64 rng(seed);
    std::vector<SampledTile> selected;
    selected.reserve(k);
    while (selected.size() < k) {
        for (size_t c = 0; c < order.size() && selected.size() < k; ++c) {
            auto& pool = remaining[c];
            if (pool.empty()) continue;
            const size_t idx = rng() % pool.size();
            SampledTile s;
            s.tile_id = pool[idx];
            s.cell_row = static_cast<int>(order[c]) / hist.grid_size;
            s.cell_col = static_cast<int>(order[c]) % hist.grid_size;
            selected.push_back(std::move(s));
            pool[idx] = std::move(pool.back());
            pool.pop_back();
        }
    }
    return selected;
}

raster::BandImage heatmap_image(const GridHistogram& hist, int cell_pixels) {
    const int g = hist.grid_size;
    raster::BandImage img(g * cell_pixels, g * cell_pixels, 3, 8);
    size_t max_count = 0;
    for (const auto& cell : hist.cells) max_count = std::max(max_count, cell.size());
    for (int gy = 0; gy < g; ++gy) {
        for (int gx = 0; gx < g; ++gx) {
            const double t =
                max_count == 0
                    ? 0.0
                    : static_cast<double>(hist.count(gy, gx)) / static_cast<double>(max_count);
            const float r = static_cast<float>(std::round(std::clamp(3.0 * t, 0.0, 1.0) * 255.0));
            const float gn =
                static_cast<float>(std::round(std::clamp(3.0 * t - 1.0, 0.0, 1.0) * 255.0));
            const float b =
                static_cast<float>(std::round(std::clamp(3.0 * t - 2.0, 0.0, 1.0) * 255.0));
            for (int y = gy * cell_pixels; y < (gy + 1) * cell_pixels; ++y)
                for (int x = gx * cell_pixels; x < (gx + 1) * cell_pixels; ++x) {
                    img.at(0, y, x) = r;
                    img.at(1, y, x) = gn;
                    img.at(2, y, x) = b;
                }
        }
    }
    return img;
}

void render_heatmap(const GridHistogram& hist, const std::filesystem::path& path,
                    int cell_pixels) {
    raster::save_image(heatmap_image(hist, cell_pixels), path);
}

} // namespace mcrm::embed
