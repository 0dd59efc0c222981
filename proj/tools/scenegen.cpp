// Procedural RGB-NIR scene generator: stands in for real satellite scenes
// when none are at hand. Terrain comes from low-frequency fractal noise,
// colorized into water / vegetation / soil / built-up ramps; NIR follows the
// vegetation response rather than the visible color.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mcrm/cloudsim.hpp"
#include "mcrm/raster.hpp"

using mcrm::cloudsim::NoiseParams;

namespace {

struct Rgb {
    float r, g, b;
};

Rgb terrain_color(double t, double detail) {
    // t in [-1, 1]: water, vegetation, bare soil, built-up.
    if (t < -0.35) return {30 + 20.0f * static_cast<float>(detail), 60, 110};
    if (t < 0.15)
        return {40, 95 + 40.0f * static_cast<float>(detail), 45};
    if (t < 0.55)
        return {145 + 30.0f * static_cast<float>(detail), 120, 80};
    return {170, 170 + 40.0f * static_cast<float>(detail), 175};
}

float nir_response(double t, double detail) {
    if (t < -0.35) return 15; // water absorbs NIR
    if (t < 0.15) return 190 + 40.0f * static_cast<float>(detail); // vegetation is bright
    if (t < 0.55) return 110 + 30.0f * static_cast<float>(detail);
    return 90 + 20.0f * static_cast<float>(detail);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic RGB-NIR scene generator"};
    int width = 512, height = 512;
    uint64_t seed = 1;
    std::string out_prefix = "scene";
    app.add_option("--width", width);
    app.add_option("--height", height);
    app.add_option("--seed", seed);
    app.add_option("--out", out_prefix, "output prefix; writes <out>_rgb.png and <out>_nir.png");
    CLI11_PARSE(app, argc, argv);

    NoiseParams terrain{seed, 4, 3.0, 0.55, 2.0};
    NoiseParams texture{seed + 7, 5, 24.0, 0.5, 2.0};
    const auto base = mcrm::cloudsim::fbm_grid(terrain, width, height);
    const auto fine = mcrm::cloudsim::fbm_grid(texture, width, height);

    mcrm::raster::BandImage rgb(width, height, 3, 8);
    mcrm::raster::BandImage nir(width, height, 1, 8);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const size_t i = static_cast<size_t>(y) * width + x;
            const Rgb c = terrain_color(base[i], fine[i]);
            rgb.at(0, y, x) = std::clamp(c.r + 18.0f * static_cast<float>(fine[i]), 0.0f, 255.0f);
            rgb.at(1, y, x) = std::clamp(c.g + 18.0f * static_cast<float>(fine[i]), 0.0f, 255.0f);
            rgb.at(2, y, x) = std::clamp(c.b + 18.0f * static_cast<float>(fine[i]), 0.0f, 255.0f);
            nir.at(0, y, x) =
                std::clamp(nir_response(base[i], fine[i]), 0.0f, 255.0f);
        }
    }
    mcrm::raster::save_image(rgb, out_prefix + "_rgb.png");
    mcrm::raster::save_image(nir, out_prefix + "_nir.png");
    std::cout << "wrote " << out_prefix << "_rgb.png and " << out_prefix << "_nir.png\n";
    return 0;
}
