#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mcrm/errors.hpp"

namespace mcrm::embed {

struct TsneConfig {
    double perplexity = 30.0;
    int iterations = 1000;
    double learning_rate = 200.0;
    double exaggeration_factor = 4.0;
    int exaggeration_duration = 100;
    double momentum_initial = 0.5;
    double momentum_final = 0.8;
    int momentum_switch = 250;
    uint64_t seed = 0;

    void validate(size_t point_count) const;
};

struct AffinityResult {
    size_t n = 0;
    std::vector<double> p;                // n*n symmetric, zero diagonal, sums to 1
    std::vector<double> row_entropy_bits; // conditional entropy per row after calibration
};

// Conditional Gaussian affinities with per-point bandwidths calibrated by
// bisection so each row's entropy matches log2(perplexity) bits, then
// symmetrized: p_ij = (p_{j|i} + p_{i|j}) / (2n).
AffinityResult pairwise_affinities(const std::vector<std::vector<double>>& points,
                                   double perplexity);

struct TsneResult {
    std::vector<std::array<double, 2>> y;
    std::vector<double> kl_per_iter; // KL against the unexaggerated P
};

// Student-t heavy-tailed low-dimensional affinities, KL objective, gradient
// descent with momentum, per-coordinate gains and early exaggeration.
TsneResult tsne_embed(const std::vector<double>& p, size_t n, const TsneConfig& config);

// Objective and its analytic gradient, exposed for direct evaluation.
double tsne_kl(const std::vector<double>& p, const std::vector<std::array<double, 2>>& y);
std::vector<std::array<double, 2>> tsne_kl_gradient(const std::vector<double>& p,
                                                    const std::vector<std::array<double, 2>>& y);

} // namespace mcrm::embed
