#include "mcrm/tsne.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

namespace mcrm::embed {

namespace {

constexpr double kQFloor = 1e-12;

std::vector<double> squared_distances(const std::vector<std::vector<double>>& x) {
    const size_t n = x.size();
    std::vector<double> d2(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (size_t k = 0; k < x[i].size(); ++k) {
                const double d = x[i][k] - x[j][k];
                s += d * d;
            }
            d2[i * n + j] = s;
            d2[j * n + i] = s;
        }
    }
    return d2;
}

// Row entropy (bits) and conditional probabilities for a given precision
// beta = 1 / (2 sigma^2).
double row_entropy_bits(const std::vector<double>& d2, size_t n, size_t i, double beta,
                        std::vector<double>& p_row) {
    double min_d2 = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < n; ++j)
        if (j != i) min_d2 = std::min(min_d2, d2[i * n + j]);
    double sum = 0.0;
    for (size_t j = 0; j < n; ++j) {
        if (j == i) {
            p_row[j] = 0.0;
            continue;
        }
        p_row[j] = std::exp(-beta * (d2[i * n + j] - min_d2));
        sum += p_row[j];
    }
    double h = 0.0;
    for (size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        p_row[j] /= sum;
        if (p_row[j] > 0.0) h -= p_row[j] * std::log2(p_row[j]);
    }
    return h;
}

} // namespace

void TsneConfig::validate(size_t point_count) const {
    if (!(perplexity > 1.0)) throw ConfigError("perplexity must be > 1");
    if (point_count > 0 && !(perplexity < static_cast<double>(point_count)))
        throw ConfigError("perplexity must be < point count");
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (exaggeration_duration < 0 || exaggeration_duration >= iterations)
        throw ConfigError("exaggeration duration must be < iterations");
    if (exaggeration_factor < 1.0) throw ConfigError("exaggeration factor must be >= 1");
}

AffinityResult pairwise_affinities(const std::vector<std::vector<double>>& points,
                                   double perplexity) {
    const size_t n = points.size();
    if (n < 2) throw DataError("need at least 2 points for affinities");
    if (!(perplexity > 1.0) || !(perplexity < static_cast<double>(n)))
        throw ConfigError("perplexity must satisfy 1 < perplexity < n");
    const size_t dim = points[0].size();
    for (const auto& v : points) {
        if (v.size() != dim) throw DataError("feature vectors disagree on dimension");
        for (double x : v)
            if (!std::isfinite(x)) throw DataError("non-finite feature value");
    }

    const std::vector<double> d2 = squared_distances(points);
    const double target = std::log2(perplexity);

    AffinityResult result;
    result.n = n;
    result.p.assign(n * n, 0.0);
    result.row_entropy_bits.assign(n, 0.0);

    std::vector<double> cond(n * n, 0.0);
    std::vector<double> p_row(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        double beta = 1.0;
        double beta_lo = 0.0;
        double beta_hi = std::numeric_limits<double>::infinity();
        double h = row_entropy_bits(d2, n, i, beta, p_row);
        int step = 0;
        const int max_steps = 200;
        double first_h = h;
        bool flat = false;
        for (; step < max_steps && std::abs(h - target) > 1e-9; ++step) {
            if (h > target) {
                beta_lo = beta;
                beta = std::isinf(beta_hi) ? beta * 2.0 : 0.5 * (beta + beta_hi);
            } else {
                beta_hi = beta;
                beta = beta_lo == 0.0 ? beta * 0.5 : 0.5 * (beta + beta_lo);
            }
            h = row_entropy_bits(d2, n, i, beta, p_row);
            // Rows whose entropy does not respond to beta (all neighbors
            // equidistant, or a single neighbor) have a forced distribution.
            if (step == 24 && std::abs(h - first_h) < 1e-12) {
                flat = true;
                break;
            }
        }
        if (!flat && std::abs(h - target) > 1e-3 &&
            !(beta_hi - beta_lo < 1e-12 * std::max(1.0, beta_lo)))
            throw NumericError("perplexity bisection did not converge at row " +
                               std::to_string(i));
        result.row_entropy_bits[i] = h;
        for (size_t j = 0; j < n; ++j) cond[i * n + j] = p_row[j];
    }

    const double inv = 1.0 / (2.0 * static_cast<double>(n));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            result.p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) * inv;
    return result;
}

double tsne_kl(const std::vector<double>& p, const std::vector<std::array<double, 2>>& y) {
    const size_t n = y.size();
    double sum_w = 0.0;
    std::vector<double> w(n * n, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            const double dx = y[i][0] - y[j][0];
            const double dy = y[i][1] - y[j][1];
            const double wij = 1.0 / (1.0 + dx * dx + dy * dy);
            w[i * n + j] = wij;
            w[j * n + i] = wij;
            sum_w += 2.0 * wij;
        }
    double kl = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double pij = p[i * n + j];
            if (pij <= 0.0) continue;
            const double qij = std::max(w[i * n + j] / sum_w, kQFloor);
            kl += pij * std::log(pij / qij);
        }
    return kl;
}

std::vector<std::array<double, 2>> tsne_kl_gradient(const std::vector<double>& p,
                                                    const std::vector<std::array<double, 2>>& y) {
    const size_t n = y.size();
    std::vector<double> w(n * n, 0.0);
    double sum_w = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            const double dx = y[i][0] - y[j][0];
            const double dy = y[i][1] - y[j][1];
            const double wij = 1.0 / (1.0 + dx * dx + dy * dy);
            w[i * n + j] = wij;
            w[j * n + i] = wij;
            sum_w += 2.0 * wij;
        }
    std::vector<std::array<double, 2>> grad(n, {0.0, 0.0});
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double wij = w[i * n + j];
            const double qij = std::max(wij / sum_w, kQFloor);
            const double mult = 4.0 * (p[i * n + j] - qij) * wij;
            grad[i][0] += mult * (y[i][0] - y[j][0]);
            grad[i][1] += mult * (y[i][1] - y[j][1]);
        }
    }
    return grad;
}

TsneResult tsne_embed(const std::vector<double>& p, size_t n, const TsneConfig& config) {
    config.validate(n);
    if (n < 2) throw DataError("need at least 2 points to embed");
    if (p.size() != n * n) throw DataError("affinity matrix size mismatch");

    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> init(0.0, 1e-4);
    std::vector<std::array<double, 2>> y(n);
    for (auto& pt : y) pt = {init(rng), init(rng)};

    std::vector<std::array<double, 2>> velocity(n, {0.0, 0.0});
    std::vector<std::array<double, 2>> gains(n, {1.0, 1.0});
    std::vector<double> p_eff(n * n);

    TsneResult result;
    result.kl_per_iter.reserve(config.iterations);

    for (int iter = 0; iter < config.iterations; ++iter) {
        const bool exaggerate = iter < config.exaggeration_duration;
        const double factor = exaggerate ? config.exaggeration_factor : 1.0;
        for (size_t i = 0; i < p.size(); ++i) p_eff[i] = p[i] * factor;

        const auto grad = tsne_kl_gradient(p_eff, y);
        const double momentum =
            iter < config.momentum_switch ? config.momentum_initial : config.momentum_final;
        for (size_t i = 0; i < n; ++i) {
            for (int d = 0; d < 2; ++d) {
                // Per-coordinate gains from the reference optimizer: grow
                // while descent direction is consistent, shrink on flips.
                const bool same_sign = (grad[i][d] > 0.0) == (velocity[i][d] > 0.0);
                gains[i][d] = same_sign ? std::max(gains[i][d] * 0.8, 0.01)
                                        : gains[i][d] + 0.2;
                velocity[i][d] =
                    momentum * velocity[i][d] - config.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += velocity[i][d];
            }
        }
        double mean_x = 0.0, mean_y = 0.0;
        for (const auto& pt : y) {
            mean_x += pt[0];
            mean_y += pt[1];
        }
        mean_x /= static_cast<double>(n);
        mean_y /= static_cast<double>(n);
        for (auto& pt : y) {
            pt[0] -= mean_x;
            pt[1] -= mean_y;
        }
        result.kl_per_iter.push_back(tsne_kl(p, y));
    }
    result.y = std::move(y);
    return result;
}

} // namespace mcrm::embed
