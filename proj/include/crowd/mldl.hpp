#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "crowd/backbone.hpp"
#include "crowd/density.hpp"
#include "crowd/errors.hpp"
#include "crowd/tensor.hpp"

namespace crowd {

// Support features weighted by the ground-truth density map; the raw
// material both prototype fitting and the global token are derived from.
struct SupportDensityFeature {
    Tensor data;    // (C,h,w); participates in gradients through the features
    Tensor density; // (1,h,w) count-preserving downsampled GT, constant
};

struct PrototypeSet {
    Tensor mu = Tensor::zeros(Shape{0, 0}); // (V,C), rows unit L2 norm
    double concentration = 10.0;            // r

    std::size_t count() const { return mu.dim(0); }
    std::size_t feature_dim() const { return mu.dim(1); }
};

struct Responsibilities {
    Tensor e; // (I,V), rows sum to 1
};

struct LocalDensitySimilarityMatrix {
    Tensor delta; // (V,h,w), values in [-1,1]
};

// Unit-normalized feature columns that carry crowd evidence. `weights` are
// the original column norms; `density` the per-cell GT mass; `cells` the
// flat spatial index each sample came from.
struct SampleSet {
    Tensor samples; // (I,C)
    std::vector<double> weights;
    std::vector<double> density;
    std::vector<std::size_t> cells;

    std::size_t count() const { return samples.dim(0); }
    std::size_t feature_dim() const { return samples.dim(1); }
};

inline SupportDensityFeature build_support_density_feature(const FeatureMap& support_feat,
                                                           const DensityMap& gt,
                                                           std::size_t factor) {
    if (gt.height() != support_feat.height() * factor ||
        gt.width() != support_feat.width() * factor)
        throw ShapeMismatch("build_support_density_feature: GT " + shape_str(gt.grid.shape()) +
                            " does not match features " + shape_str(support_feat.data.shape()) +
                            " at factor " + std::to_string(factor));
    DensityMap down = downsample_preserving_count(gt, factor);
    SupportDensityFeature sdf;
    sdf.density = down.grid;                       // constant, no grad
    sdf.data = mul(support_feat.data, down.grid);  // (C,h,w) * (1,h,w) broadcast
    return sdf;
}

// Cells whose downsampled density carries no crowd evidence are excluded,
// as are columns too small to normalize.
inline SampleSet prepare_samples(const SupportDensityFeature& sdf) {
    const std::size_t c = sdf.data.dim(0);
    const std::size_t hw = sdf.data.dim(1) * sdf.data.dim(2);
    const double* v = sdf.data.data();
    const double* rho = sdf.density.data();

    std::vector<std::size_t> kept;
    std::vector<double> norms;
    for (std::size_t i = 0; i < hw; ++i) {
        if (rho[i] < 1e-12) continue;
        double n2 = 0.0;
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double x = v[ci * hw + i];
            n2 += x * x;
        }
        const double n = std::sqrt(n2);
        if (n < 1e-8) continue;
        kept.push_back(i);
        norms.push_back(n);
    }
    if (kept.empty())
        throw AllSamplesDegenerate("prepare_samples: no usable crowd evidence in support");

    SampleSet out;
    out.samples = Tensor(Shape{kept.size(), c});
    out.weights = norms;
    out.cells = kept;
    out.density.resize(kept.size());
    for (std::size_t j = 0; j < kept.size(); ++j) {
        const std::size_t i = kept[j];
        out.density[j] = rho[i];
        const double inv = 1.0 / norms[j];
        for (std::size_t ci = 0; ci < c; ++ci)
            out.samples.data()[j * c + ci] = v[ci * hw + i] * inv;
    }
    return out;
}

// E-step: responsibilities are a concentration-scaled softmax over prototype
// cosines; the shared vMF normalizer cancels in the ratio.
inline Responsibilities em_step_e(const Tensor& samples, const Tensor& mu, double r) {
    if (!(r > 0.0)) throw InvalidHyperparameter("em_step_e: concentration must be positive");
    if (samples.dim(1) != mu.dim(1))
        throw ShapeMismatch("em_step_e: feature dims " + shape_str(samples.shape()) + " vs " +
                            shape_str(mu.shape()));
    const std::size_t n = samples.dim(0), c = samples.dim(1), v = mu.dim(0);
    Responsibilities resp;
    resp.e = Tensor(Shape{n, v});
    std::vector<double> logits(v);
    for (std::size_t i = 0; i < n; ++i) {
        const double* s = samples.data() + i * c;
        double mx = -1e300;
        for (std::size_t vi = 0; vi < v; ++vi) {
            const double* m = mu.data() + vi * c;
            double dot = 0.0;
            for (std::size_t ci = 0; ci < c; ++ci) dot += m[ci] * s[ci];
            logits[vi] = r * dot;
            mx = std::max(mx, logits[vi]);
        }
        double denom = 0.0;
        for (std::size_t vi = 0; vi < v; ++vi) {
            logits[vi] = std::exp(logits[vi] - mx);
            denom += logits[vi];
        }
        for (std::size_t vi = 0; vi < v; ++vi) resp.e.data()[i * v + vi] = logits[vi] / denom;
    }
    return resp;
}

// M-step: responsibility-weighted mean direction, re-projected to the unit
// sphere (the constrained maximizer; the plain weighted mean leaves it).
// A row whose mean collapses numerically keeps its previous direction.
inline Tensor em_step_m(const Tensor& samples, const Responsibilities& resp,
                        const Tensor& prev_mu, const std::vector<double>* sample_weights = nullptr) {
    const std::size_t n = samples.dim(0), c = samples.dim(1), v = resp.e.dim(1);
    if (resp.e.dim(0) != n)
        throw ShapeMismatch("em_step_m: responsibilities " + shape_str(resp.e.shape()) +
                            " vs samples " + shape_str(samples.shape()));
    Tensor mu = Tensor::zeros(Shape{v, c});
    for (std::size_t i = 0; i < n; ++i) {
        const double* s = samples.data() + i * c;
        const double w = sample_weights ? (*sample_weights)[i] : 1.0;
        for (std::size_t vi = 0; vi < v; ++vi) {
            const double e = resp.e.data()[i * v + vi] * w;
            if (e == 0.0) continue;
            double* m = mu.data() + vi * c;
            for (std::size_t ci = 0; ci < c; ++ci) m[ci] += e * s[ci];
        }
    }
    for (std::size_t vi = 0; vi < v; ++vi) {
        double* m = mu.data() + vi * c;
        double n2 = 0.0;
        for (std::size_t ci = 0; ci < c; ++ci) n2 += m[ci] * m[ci];
        const double nrm = std::sqrt(n2);
        if (nrm < 1e-12) {
            for (std::size_t ci = 0; ci < c; ++ci) m[ci] = prev_mu.data()[vi * c + ci];
        } else {
            const double inv = 1.0 / nrm;
            for (std::size_t ci = 0; ci < c; ++ci) m[ci] *= inv;
        }
    }
    return mu;
}

struct EmOptions {
    std::size_t num_prototypes = 3; // V
    double concentration = 10.0;    // r
    std::size_t max_iter = 50;
    double tol = 1e-6;              // mean (1 - cos) movement
    bool weighted = false;          // weight M-step by sample norms
};

struct FitResult {
    PrototypeSet prototypes;
    std::vector<double> objective; // surrogate after each iteration
    std::size_t iterations = 0;
    std::size_t reseeds = 0;
    SampleSet samples;
    Responsibilities final_resp; // one E-step on the returned prototypes
};

namespace detail {

// sum_i w_i * logsumexp_v(r * mu_v . s_i)
inline double em_objective(const Tensor& samples, const Tensor& mu, double r,
                           const std::vector<double>* w) {
    const std::size_t n = samples.dim(0), c = samples.dim(1), v = mu.dim(0);
    double total = 0.0;
    std::vector<double> logits(v);
    for (std::size_t i = 0; i < n; ++i) {
        const double* s = samples.data() + i * c;
        double mx = -1e300;
        for (std::size_t vi = 0; vi < v; ++vi) {
            double dot = 0.0;
            const double* m = mu.data() + vi * c;
            for (std::size_t ci = 0; ci < c; ++ci) dot += m[ci] * s[ci];
            logits[vi] = r * dot;
            mx = std::max(mx, logits[vi]);
        }
        double acc = 0.0;
        for (std::size_t vi = 0; vi < v; ++vi) acc += std::exp(logits[vi] - mx);
        total += (w ? (*w)[i] : 1.0) * (mx + std::log(acc));
    }
    return total;
}

// Deterministic density-quantile init: prototype 0 at the highest-density
// sample, the last at the lowest, the rest at evenly spaced quantiles. Ties
// break on spatial index.
inline Tensor init_prototypes(const SampleSet& set, std::size_t v) {
    const std::size_t n = set.count(), c = set.feature_dim();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (set.density[a] != set.density[b]) return set.density[a] > set.density[b];
        return a < b;
    });
    Tensor mu(Shape{v, c});
    for (std::size_t vi = 0; vi < v; ++vi) {
        const std::size_t pos =
            v == 1 ? 0 : (vi * (n - 1) + (v - 1) / 2) / (v - 1); // round(vi*(n-1)/(v-1))
        const std::size_t src = order[std::min(pos, n - 1)];
        std::copy(set.samples.data() + src * c, set.samples.data() + (src + 1) * c,
                  mu.data() + vi * c);
    }
    return mu;
}

} // namespace detail

inline FitResult fit_prototypes(const SupportDensityFeature& sdf, const EmOptions& opt) {
    if (opt.num_prototypes < 1)
        throw InvalidHyperparameter("fit_prototypes: need at least one prototype");
    if (opt.max_iter < 1) throw InvalidHyperparameter("fit_prototypes: max_iter must be >= 1");
    if (!(opt.concentration > 0.0))
        throw InvalidHyperparameter("fit_prototypes: concentration must be positive");

    FitResult res;
    res.samples = prepare_samples(sdf);
    const SampleSet& set = res.samples;
    const std::size_t n = set.count(), c = set.feature_dim(), v = opt.num_prototypes;
    const std::vector<double>* wts = opt.weighted ? &set.weights : nullptr;

    Tensor mu = detail::init_prototypes(set, v);
    for (std::size_t iter = 0; iter < opt.max_iter; ++iter) {
        Responsibilities resp = em_step_e(set.samples, mu, opt.concentration);
        Tensor next = em_step_m(set.samples, resp, mu, wts);

        // degeneracy repair: a starved component restarts at the sample the
        // current prototypes cover worst
        for (std::size_t vi = 0; vi < v; ++vi) {
            double mass = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                mass += resp.e.data()[i * v + vi] * (wts ? (*wts)[i] : 1.0);
            if (mass >= 1e-8) continue;
            std::size_t worst = 0;
            double worst_cov = 2.0;
            for (std::size_t i = 0; i < n; ++i) {
                double cov = -2.0;
                for (std::size_t vj = 0; vj < v; ++vj) {
                    double dot = 0.0;
                    for (std::size_t ci = 0; ci < c; ++ci)
                        dot += next.data()[vj * c + ci] * set.samples.data()[i * c + ci];
                    cov = std::max(cov, dot);
                }
                if (cov < worst_cov) {
                    worst_cov = cov;
                    worst = i;
                }
            }
            std::copy(set.samples.data() + worst * c, set.samples.data() + (worst + 1) * c,
                      next.data() + vi * c);
            ++res.reseeds;
        }

        double movement = 0.0;
        for (std::size_t vi = 0; vi < v; ++vi) {
            double dot = 0.0;
            for (std::size_t ci = 0; ci < c; ++ci)
                dot += mu.data()[vi * c + ci] * next.data()[vi * c + ci];
            movement += 1.0 - dot;
        }
        movement /= static_cast<double>(v);

        mu = std::move(next);
        res.objective.push_back(detail::em_objective(set.samples, mu, opt.concentration, wts));
        res.iterations = iter + 1;
        if (movement < opt.tol) break;
    }

    res.prototypes.mu = std::move(mu);
    res.prototypes.concentration = opt.concentration;
    res.final_resp = em_step_e(set.samples, res.prototypes.mu, opt.concentration);
    return res;
}

// Mean GT-density level each prototype is responsible for; with three
// prototypes these should come out ordered high/middle/low.
inline std::vector<double> density_levels(const SampleSet& set, const Responsibilities& resp) {
    const std::size_t n = set.count(), v = resp.e.dim(1);
    std::vector<double> level(v, 0.0), mass(v, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t vi = 0; vi < v; ++vi) {
            const double e = resp.e.data()[i * v + vi];
            level[vi] += e * set.density[i];
            mass[vi] += e;
        }
    for (std::size_t vi = 0; vi < v; ++vi) level[vi] = mass[vi] > 0.0 ? level[vi] / mass[vi] : 0.0;
    return level;
}

// Per-prototype cosine-similarity planes against the query feature columns.
// Differentiable through the query branch; prototypes are EM constants.
inline LocalDensitySimilarityMatrix encode_similarity(const PrototypeSet& protos,
                                                      const FeatureMap& query) {
    if (protos.feature_dim() != query.channels())
        throw ShapeMismatch("encode_similarity: prototype dim " +
                            std::to_string(protos.feature_dim()) + " vs query channels " +
                            std::to_string(query.channels()));
    LocalDensitySimilarityMatrix out;
    out.delta = cosine_map(protos.mu, query.data);
    return out;
}

} // namespace crowd
