#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "mcrm/features.hpp"
#include "mcrm/gridsample.hpp"
#include "mcrm/tsne.hpp"

#include "oracles.hpp"

using namespace mcrm;
using namespace mcrm::embed;
namespace fs = std::filesystem;

namespace {

std::vector<std::vector<double>> random_points(size_t n, size_t dim, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<std::vector<double>> x(n, std::vector<double>(dim));
    for (auto& v : x)
        for (auto& d : v) d = noise(rng);
    return x;
}

// Test-side bandwidth search: independent bisection over beta for one row.
std::vector<double> oracle_conditional_row(const std::vector<std::vector<double>>& x, size_t i,
                                           double perplexity) {
    const size_t n = x.size();
    std::vector<double> d2(n, 0.0);
    for (size_t j = 0; j < n; ++j)
        for (size_t k = 0; k < x[i].size(); ++k)
            d2[j] += (x[i][k] - x[j][k]) * (x[i][k] - x[j][k]);
    const double target = std::log2(perplexity);
    double lo = 0.0, hi = 1e12, beta = 1.0;
    std::vector<double> p(n, 0.0);
    for (int step = 0; step < 400; ++step) {
        double sum = 0.0;
        for (size_t j = 0; j < n; ++j) p[j] = j == i ? 0.0 : std::exp(-beta * d2[j]);
        for (double v : p) sum += v;
        double h = 0.0;
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            p[j] /= sum;
            if (p[j] > 0) h -= p[j] * std::log2(p[j]);
        }
        if (std::abs(h - target) < 1e-12) break;
        if (h > target) lo = beta; else hi = beta;
        beta = hi > 1e11 ? beta * 2.0 : 0.5 * (lo + hi);
    }
    return p;
}

} // namespace

TEST_CASE("two points symmetrize to half each") {
    const auto result = pairwise_affinities(random_points(2, 4, 1), 1.5);
    CHECK(result.p[0 * 2 + 1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(result.p[1 * 2 + 0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(result.p[0] == 0.0);
    CHECK(result.p[3] == 0.0);
}

TEST_CASE("equidistant simplex rows are uniform with exact entropy") {
    // k+1 = 5 vertices of a regular simplex: pairwise distances all equal.
    const size_t k = 4;
    std::vector<std::vector<double>> x;
    for (size_t i = 0; i < k + 1; ++i) {
        std::vector<double> v(k + 1, 0.0);
        v[i] = 1.0;
        x.push_back(v);
    }
    const auto result = pairwise_affinities(x, static_cast<double>(k));
    for (double h : result.row_entropy_bits)
        CHECK(h == doctest::Approx(std::log2(static_cast<double>(k))).epsilon(1e-9));
    const double expected = 1.0 / (static_cast<double>(k) * (k + 1));
    for (size_t i = 0; i <= k; ++i)
        for (size_t j = 0; j <= k; ++j)
            CHECK(result.p[i * (k + 1) + j] ==
                  doctest::Approx(i == j ? 0.0 : expected).epsilon(1e-9));
}

TEST_CASE("row entropies hit the perplexity target on random data") {
    const auto x = random_points(10, 5, 2);
    const auto result = pairwise_affinities(x, 5.0);
    for (double h : result.row_entropy_bits) CHECK(std::abs(h - std::log2(5.0)) < 1e-3);

    // Independent bisection oracle reproduces the symmetrized matrix.
    const size_t n = 10;
    std::vector<std::vector<double>> cond(n);
    for (size_t i = 0; i < n; ++i) cond[i] = oracle_conditional_row(x, i, 5.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            CHECK(result.p[i * n + j] ==
                  doctest::Approx((cond[i][j] + cond[j][i]) / (2.0 * n)).epsilon(1e-6));
}

TEST_CASE("affinity matrix is a symmetric zero-diagonal distribution") {
    const auto result = pairwise_affinities(random_points(24, 8, 3), 8.0);
    const size_t n = result.n;
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
        CHECK(result.p[i * n + i] == 0.0);
        for (size_t j = 0; j < n; ++j) {
            CHECK(result.p[i * n + j] >= 0.0);
            CHECK(result.p[i * n + j] == doctest::Approx(result.p[j * n + i]).epsilon(1e-14));
            total += result.p[i * n + j];
        }
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("affinities reject invalid inputs") {
    CHECK_THROWS_AS(pairwise_affinities(random_points(5, 3, 4), 5.0), ConfigError);
    CHECK_THROWS_AS(pairwise_affinities(random_points(5, 3, 4), 0.5), ConfigError);
    auto x = random_points(5, 3, 5);
    x[2][1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(pairwise_affinities(x, 3.0), DataError);
}

TEST_CASE("two-point embedding has distance-independent Q and zero KL") {
    // With n = 2 the normalized Student-t affinity is fixed by symmetry, so
    // P equals Q at any separation and the objective sits at zero.
    std::vector<double> p = {0.0, 0.5, 0.5, 0.0};
    for (double separation : {0.01, 1.0, 250.0}) {
        const std::vector<std::array<double, 2>> y = {{0.0, 0.0}, {separation, 0.0}};
        CHECK(tsne_kl(p, y) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
        const auto grad = tsne_kl_gradient(p, y);
        for (const auto& g : grad) {
            CHECK(std::abs(g[0]) < 1e-12);
            CHECK(std::abs(g[1]) < 1e-12);
        }
    }
    TsneConfig config;
    config.perplexity = 1.5;
    config.iterations = 50;
    config.exaggeration_duration = 0;
    const auto result = tsne_embed(p, 2, config);
    for (double kl : result.kl_per_iter) CHECK(std::abs(kl) < 1e-10);
}

TEST_CASE("three symmetric points stay equidistant through optimization") {
    std::vector<double> p(9, 0.0);
    for (size_t i = 0; i < 3; ++i)
        for (size_t j = 0; j < 3; ++j)
            if (i != j) p[i * 3 + j] = 1.0 / 6.0;
    TsneConfig config;
    config.perplexity = 1.9;
    config.iterations = 2000;
    config.exaggeration_duration = 0;
    config.learning_rate = 10.0;
    config.seed = 2;
    const auto result = tsne_embed(p, 3, config);
    std::vector<double> d;
    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j)
            d.push_back(std::hypot(result.y[i][0] - result.y[j][0],
                                   result.y[i][1] - result.y[j][1]));
    CHECK(std::abs(d[0] - d[1]) < 1e-2);
    CHECK(std::abs(d[0] - d[2]) < 1e-2);
    CHECK(std::abs(d[1] - d[2]) < 1e-2);
    CHECK(result.kl_per_iter.back() < 1e-8);
}

TEST_CASE("three gaussian clusters embed with high nearest-centroid purity") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<std::vector<double>> x;
    std::vector<int> label;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 30; ++i) {
            std::vector<double> v(10, 0.0);
            for (auto& d : v) d = noise(rng);
            v[c] += 20.0;
            x.push_back(v);
            label.push_back(c);
        }
    const auto aff = pairwise_affinities(x, 15.0);
    TsneConfig config;
    config.perplexity = 15.0;
    config.iterations = 500;
    config.seed = 3;
    const auto result = tsne_embed(aff.p, aff.n, config);

    double cx[3] = {}, cy[3] = {};
    int cnt[3] = {};
    for (size_t i = 0; i < result.y.size(); ++i) {
        cx[label[i]] += result.y[i][0];
        cy[label[i]] += result.y[i][1];
        ++cnt[label[i]];
    }
    for (int c = 0; c < 3; ++c) {
        cx[c] /= cnt[c];
        cy[c] /= cnt[c];
    }
    int correct = 0;
    for (size_t i = 0; i < result.y.size(); ++i) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int c = 0; c < 3; ++c) {
            const double d = std::hypot(result.y[i][0] - cx[c], result.y[i][1] - cy[c]);
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        correct += best == label[i];
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(result.y.size()) >= 0.9);
}

TEST_CASE("KL is non-increasing per 10-iteration window after exaggeration") {
    const auto x = random_points(60, 12, 6);
    const auto aff = pairwise_affinities(x, 12.0);
    TsneConfig config;
    config.perplexity = 12.0;
    config.iterations = 300;
    config.exaggeration_duration = 80;
    config.learning_rate = 20.0; // of order n / exaggeration; 200 overshoots at n = 60
    config.seed = 7;
    const auto result = tsne_embed(aff.p, aff.n, config);
    for (size_t i = config.exaggeration_duration + 10; i + 10 < result.kl_per_iter.size();
         i += 10)
        CHECK(result.kl_per_iter[i + 10] <= result.kl_per_iter[i] + 10.0 * 1e-6);
    CHECK(result.kl_per_iter.back() <
          result.kl_per_iter[static_cast<size_t>(config.exaggeration_duration)]);
}

TEST_CASE("analytic KL gradient matches central finite differences") {
    const auto x = random_points(5, 4, 8);
    const auto aff = pairwise_affinities(x, 2.5);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> init(0.0, 1.0);
    std::vector<std::array<double, 2>> y(5);
    for (auto& pt : y) pt = {init(rng), init(rng)};

    const auto grad = tsne_kl_gradient(aff.p, y);
    const double h = 1e-6;
    double max_rel = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        for (int d = 0; d < 2; ++d) {
            auto yp = y;
            yp[i][d] += h;
            const double up = tsne_kl(aff.p, yp);
            yp[i][d] = y[i][d] - h;
            const double down = tsne_kl(aff.p, yp);
            const double fd = (up - down) / (2.0 * h);
            const double rel =
                std::abs(grad[i][d] - fd) / std::max({std::abs(grad[i][d]), std::abs(fd), 1e-10});
            max_rel = std::max(max_rel, rel);
        }
    }
    CHECK(max_rel < 1e-4);
}

TEST_CASE("embedding is deterministic in the seed") {
    const auto x = random_points(20, 6, 10);
    const auto aff = pairwise_affinities(x, 6.0);
    TsneConfig config;
    config.perplexity = 6.0;
    config.iterations = 120;
    config.exaggeration_duration = 30;
    config.seed = 11;
    const auto a = tsne_embed(aff.p, aff.n, config);
    const auto b = tsne_embed(aff.p, aff.n, config);
    CHECK(a.y == b.y);
    CHECK(a.kl_per_iter == b.kl_per_iter);
}

// ---- grid histogram + sampler ----

TEST_CASE("grid histogram puts a single point in a single cell") {
    const auto hist = grid_histogram({{"only", {0.3, -0.7}}}, 5);
    size_t nonzero = 0;
    for (const auto& cell : hist.cells) nonzero += !cell.empty();
    CHECK(nonzero == 1);
    CHECK(hist.total == 1);
}

TEST_CASE("four corner points land in the four corner cells") {
    const std::vector<EmbeddingPoint> pts = {
        {"a", {0.0, 0.0}}, {"b", {1.0, 0.0}}, {"c", {0.0, 1.0}}, {"d", {1.0, 1.0}}};
    const auto hist = grid_histogram(pts, 2);
    CHECK(hist.count(0, 0) == 1);
    CHECK(hist.count(0, 1) == 1);
    CHECK(hist.count(1, 0) == 1);
    CHECK(hist.count(1, 1) == 1);
}

TEST_CASE("internal boundary points go to the lower-index cell") {
    const std::vector<EmbeddingPoint> pts = {
        {"lo", {0.0, 0.0}}, {"mid", {0.5, 0.0}}, {"hi", {1.0, 0.0}}};
    const auto hist = grid_histogram(pts, 2);
    CHECK(hist.count(0, 0) == 2); // 0.0 and the boundary point 0.5
    CHECK(hist.count(0, 1) == 1);
}

TEST_CASE("histogram counts are conserved for random points") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<EmbeddingPoint> pts;
    for (int i = 0; i < 1000; ++i)
        pts.push_back({"t" + std::to_string(i), {unit(rng), unit(rng)}});
    const auto hist = grid_histogram(pts, 10);
    size_t total = 0;
    for (const auto& cell : hist.cells) total += cell.size();
    CHECK(total == 1000);
    CHECK(hist.total == 1000);
}

namespace {

GridHistogram manual_hist(const std::vector<size_t>& populations) {
    GridHistogram hist;
    hist.grid_size = static_cast<int>(populations.size());
    hist.cells.assign(static_cast<size_t>(hist.grid_size) * hist.grid_size, {});
    hist.total = 0;
    for (size_t c = 0; c < populations.size(); ++c)
        for (size_t i = 0; i < populations[c]; ++i) {
            hist.cells[c].push_back("c" + std::to_string(c) + "_" + std::to_string(i));
            ++hist.total;
        }
    return hist;
}

} // namespace

TEST_CASE("sampler draws nothing for k = 0 and everything for k = total") {
    const auto hist = manual_hist({5, 3, 2});
    CHECK(uniform_sample(hist, 0, 1).empty());
    const auto all = uniform_sample(hist, 10, 1);
    CHECK(all.size() == 10);
    std::set<std::string> ids;
    for (const auto& s : all) ids.insert(s.tile_id);
    CHECK(ids.size() == 10);
}

TEST_CASE("round-robin sampling on the skewed fixture gives (4,4,4,1)") {
    const auto hist = manual_hist({100, 100, 100, 1});
    const auto selected = uniform_sample(hist, 13, 42);
    std::map<int, int> per_cell;
    for (const auto& s : selected) ++per_cell[s.cell_col];
    CHECK(per_cell[0] == 4);
    CHECK(per_cell[1] == 4);
    CHECK(per_cell[2] == 4);
    CHECK(per_cell[3] == 1);
}

TEST_CASE("non-exhausted cells differ by at most one draw") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<size_t> pops(4 + rng() % 6);
        size_t total = 0;
        for (auto& p : pops) {
            p = rng() % 40;
            total += p;
        }
        if (total == 0) continue;
        const auto hist = manual_hist(pops);
        const size_t k = 1 + rng() % total;
        const auto selected = uniform_sample(hist, k, rng());
        CHECK(selected.size() == k);
        std::map<int, size_t> per_cell;
        for (const auto& s : selected) ++per_cell[s.cell_col];
        size_t min_draw = std::numeric_limits<size_t>::max(), max_draw = 0;
        for (size_t c = 0; c < pops.size(); ++c) {
            if (pops[c] == 0) continue;
            const size_t draws =
                per_cell.count(static_cast<int>(c)) ? per_cell[static_cast<int>(c)] : 0;
            if (draws == pops[c]) continue; // exhausted cells are exempt
            min_draw = std::min(min_draw, draws);
            max_draw = std::max(max_draw, draws);
        }
        if (min_draw != std::numeric_limits<size_t>::max()) CHECK(max_draw - min_draw <= 1);
    }
}

TEST_CASE("sampling more than the population is an error") {
    const auto hist = manual_hist({2, 1});
    CHECK_THROWS_AS(uniform_sample(hist, 4, 1), DataError);
}

TEST_CASE("sampler is deterministic in the seed") {
    const auto hist = manual_hist({20, 15, 10});
    const auto a = uniform_sample(hist, 12, 77);
    const auto b = uniform_sample(hist, 12, 77);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].tile_id == b[i].tile_id);
}

TEST_CASE("heatmap rendering: all-zero and single-hot-cell") {
    GridHistogram hist = manual_hist({0, 0, 0});
    const auto black = heatmap_image(hist, 4);
    for (float v : black.data) CHECK(v == 0.0f);

    GridHistogram one = manual_hist({0, 5, 0});
    const auto img = heatmap_image(one, 1); // 3x3 grid, one pixel per cell
    int white = 0, black_px = 0;
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
            const bool is_white =
                img.at(0, y, x) == 255 && img.at(1, y, x) == 255 && img.at(2, y, x) == 255;
            const bool is_black =
                img.at(0, y, x) == 0 && img.at(1, y, x) == 0 && img.at(2, y, x) == 0;
            white += is_white;
            black_px += is_black;
        }
    CHECK(white == 1);
    CHECK(black_px == 8);
}

TEST_CASE("heatmap golden digest for a fixed histogram") {
    const auto hist = manual_hist({1, 3, 0, 7, 2, 5, 0, 4, 6});
    const auto img = heatmap_image(hist, 4);
    CHECK(oracle::fnv1a_vec(img.data) == 0x0d72babf01b78d03ULL);
    const fs::path path = fs::temp_directory_path() / "mcrm_heatmap.png";
    render_heatmap(hist, path, 4);
    const auto reloaded = raster::load_image(path);
    CHECK(reloaded.data == img.data);
}

// ---- feature extractors ----

namespace {

raster::BandImage feature_tile(uint64_t seed) {
    raster::BandImage img(48, 48, 3, 8);
    std::mt19937_64 rng(seed);
    for (auto& v : img.data) v = static_cast<float>(rng() % 256);
    return img;
}

} // namespace

TEST_CASE("histogram extractor: dimension, determinism, degenerate tile") {
    HistogramExtractor extractor;
    CHECK(extractor.dim() == 3 * 64 + 36);
    const auto tile = feature_tile(1);
    const auto a = extractor.extract(tile);
    const auto b = extractor.extract(tile);
    CHECK(a == b);
    CHECK(static_cast<int>(a.size()) == extractor.dim());
    for (float v : a) CHECK(std::isfinite(v));

    raster::BandImage flat(16, 16, 3, 8);
    for (auto& v : flat.data) v = 77.0f;
    const auto f = extractor.extract(flat);
    for (int c = 0; c < 3; ++c) {
        float mass = 0.0f, peak = 0.0f;
        for (int b = 0; b < 64; ++b) {
            mass += f[c * 64 + b];
            peak = std::max(peak, f[c * 64 + b]);
        }
        CHECK(mass == doctest::Approx(1.0f));
        CHECK(peak == doctest::Approx(1.0f)); // all mass in one bin
    }
}

TEST_CASE("cnn extractor loads weights and declares its dimension") {
    nlohmann::json spec;
    spec["name"] = "tiny-cnn";
    spec["input_side"] = 32;
    spec["input_channels"] = 3;
    spec["layers"] = nlohmann::json::array({
        nlohmann::json{{"op", "conv"}, {"filters", 8}, {"kernel", 3}, {"stride", 1}, {"pad", 1}},
        nlohmann::json{{"op", "relu"}},
        nlohmann::json{{"op", "maxpool"}, {"kernel", 2}, {"stride", 2}},
        nlohmann::json{{"op", "dense"}, {"units", 4096}},
        nlohmann::json{{"op", "relu"}},
    });
    CHECK(feature_net_output_dim(spec) == 4096);

    const fs::path path = fs::temp_directory_path() / "mcrm_tiny_cnn.mcfn";
    CnnFeatureExtractor::save_random(spec, path, 5);
    CnnFeatureExtractor extractor(path);
    CHECK(extractor.dim() == 4096);
    CHECK(extractor.id() == "tiny-cnn");

    const auto tile = feature_tile(2);
    const auto a = extractor.extract(tile);
    CHECK(a.size() == 4096);
    CHECK(a == extractor.extract(tile));
    for (float v : a) CHECK(std::isfinite(v));
}

TEST_CASE("the canned deep extractor declares 4096 features") {
    CHECK(feature_net_output_dim(alexnet_fc7_spec()) == 4096);
}

TEST_CASE("feature cache round trip") {
    std::vector<FeatureVector> features;
    std::mt19937_64 rng(14);
    for (int i = 0; i < 7; ++i) {
        FeatureVector f;
        f.tile_id = "g" + std::to_string(i);
        f.values.resize(12);
        for (auto& v : f.values) v = static_cast<float>(rng() % 100) / 10.0f;
        features.push_back(std::move(f));
    }
    const fs::path dir = fs::temp_directory_path() / "mcrm_feature_cache";
    fs::remove_all(dir);
    write_feature_cache(dir, "histogram-v1", 12, features);
    const auto cache = read_feature_cache(dir);
    CHECK(cache.extractor_id == "histogram-v1");
    CHECK(cache.dim == 12);
    REQUIRE(cache.tile_ids.size() == 7);
    CHECK(cache.tile_ids[3] == "g3");
    for (int i = 0; i < 7; ++i)
        for (int d = 0; d < 12; ++d) CHECK(cache.data[i * 12 + d] == features[i].values[d]);
}
