#pragma once

// Shared fixtures for unit and acceptance tests.

#include <cmath>
#include <vector>

#include "crowd/mldl.hpp"
#include "crowd/rng.hpp"
#include "crowd/tensor.hpp"

namespace crowd::testing {

inline std::vector<double> random_unit(std::size_t dim, Rng& rng) {
    std::vector<double> v(dim);
    double n2 = 0.0;
    for (auto& x : v) {
        x = rng.normal();
        n2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (auto& x : v) x *= inv;
    return v;
}

// Rotate `axis` by angle theta toward a random orthogonal direction.
inline std::vector<double> perturb_on_sphere(const std::vector<double>& axis, double theta,
                                             Rng& rng) {
    const std::size_t dim = axis.size();
    std::vector<double> t = random_unit(dim, rng);
    double dot = 0.0;
    for (std::size_t i = 0; i < dim; ++i) dot += t[i] * axis[i];
    double n2 = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        t[i] -= dot * axis[i];
        n2 += t[i] * t[i];
    }
    const double inv = 1.0 / std::sqrt(n2);
    std::vector<double> out(dim);
    for (std::size_t i = 0; i < dim; ++i)
        out[i] = std::cos(theta) * axis[i] + std::sin(theta) * inv * t[i];
    return out;
}

struct SphericalClusters {
    std::vector<std::vector<double>> generators; // one unit axis per cluster
    SupportDensityFeature sdf;                   // columns scaled by cluster band
    std::vector<std::size_t> labels;
};

// n_samples unit vectors around k generators with Gaussian angular noise.
// Cluster 0 gets the largest column scales (the "high density" stratum),
// matching how density strata drive prototype fitting in the pipeline.
inline SphericalClusters make_spherical_clusters(std::size_t k, std::size_t dim,
                                                 std::size_t n_samples, double noise_deg,
                                                 Rng& rng) {
    SphericalClusters out;
    for (std::size_t c = 0; c < k; ++c) out.generators.push_back(random_unit(dim, rng));

    std::size_t grid_w = 1;
    while (grid_w * grid_w < n_samples) ++grid_w;
    const std::size_t grid_h = (n_samples + grid_w - 1) / grid_w;
    out.sdf.data = Tensor::zeros(Shape{dim, grid_h, grid_w});
    out.sdf.density = Tensor::zeros(Shape{1, grid_h, grid_w});

    const double noise_rad = noise_deg * 3.14159265358979323846 / 180.0;
    for (std::size_t i = 0; i < n_samples; ++i) {
        const std::size_t label = rng.uniform_index(k);
        out.labels.push_back(label);
        const double theta = rng.normal(0.0, noise_rad);
        std::vector<double> s = perturb_on_sphere(out.generators[label], theta, rng);
        const double base = 1.0 + static_cast<double>(k - 1 - label);
        const double scl = rng.uniform(base - 0.3, base + 0.3);
        const std::size_t hw = grid_h * grid_w;
        for (std::size_t d = 0; d < dim; ++d) out.sdf.data.data()[d * hw + i] = scl * s[d];
        out.sdf.density.data()[i] = scl;
    }
    return out;
}

// best-match cosine of each generator against the fitted prototypes,
// requiring the assignment to be a permutation
inline double recovery_cosine(const SphericalClusters& clusters, const PrototypeSet& protos) {
    const std::size_t k = clusters.generators.size(), dim = clusters.generators[0].size();
    std::vector<bool> used(protos.count(), false);
    double worst = 1.0;
    for (std::size_t g = 0; g < k; ++g) {
        double best = -2.0;
        std::size_t best_v = 0;
        for (std::size_t v = 0; v < protos.count(); ++v) {
            if (used[v]) continue;
            double dot = 0.0;
            for (std::size_t d = 0; d < dim; ++d)
                dot += clusters.generators[g][d] * protos.mu.data()[v * dim + d];
            if (dot > best) {
                best = dot;
                best_v = v;
            }
        }
        used[best_v] = true;
        worst = std::min(worst, best);
    }
    return worst;
}

} // namespace crowd::testing
