#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "crowd/backbone.hpp"
#include "crowd/checkpoint.hpp"
#include "crowd/errors.hpp"
#include "crowd/mldl.hpp"
#include "crowd/rng.hpp"
#include "crowd/tensor.hpp"

namespace crowd {

struct GlobalDensityToken {
    Tensor q; // (1,C)
};

struct GuidanceBundle {
    LocalDensitySimilarityMatrix ldsm;
    GlobalDensityToken global_token;
};

// Architecture knobs for the full model; training hyperparameters live in
// TrainConfig.
struct ModelConfig {
    BackboneConfig backbone;
    std::size_t num_prototypes = 3;
    double concentration = 10.0;
    std::size_t em_max_iter = 50;
    double em_tol = 1e-6;
    bool weighted_em = false;
    int dilation_rate = 2; // third guidance conv
    bool use_ldg = true;
    bool use_gdg = true;
    bool tile_q = false;             // tile the token per cell instead of broadcast-adding O
    bool shared_branch_convs = false;
    std::size_t attention_dim = 0;   // 0 -> feature_dim

    std::size_t effective_attention_dim() const {
        return attention_dim == 0 ? backbone.feature_dim() : attention_dim;
    }
    std::size_t branch_count() const { return shared_branch_convs ? 1 : num_prototypes; }

    EmOptions em_options() const {
        return EmOptions{num_prototypes, concentration, em_max_iter, em_tol, weighted_em};
    }

    void validate() const {
        backbone.validate();
        if (num_prototypes < 1) throw InvalidHyperparameter("model: need at least one prototype");
        if (dilation_rate < 1) throw InvalidHyperparameter("model: dilation rate must be >= 1");
        if (!(concentration > 0.0))
            throw InvalidHyperparameter("model: concentration must be positive");
    }
};

inline Tensor linear_init(Shape shape, Rng& rng) {
    const double stddev = std::sqrt(1.0 / static_cast<double>(shape[0]));
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, stddev);
    return t;
}

inline void init_guidance_params(ParamStore& params, const ModelConfig& cfg, Rng& rng) {
    const std::size_t c = cfg.backbone.feature_dim();
    for (std::size_t b = 0; b < cfg.branch_count(); ++b) {
        const std::string base = "ldg.branch" + std::to_string(b);
        params.add(base + ".conv1.w", kaiming_conv(Shape{c, c + 1, 3, 3}, rng));
        params.add(base + ".conv1.b", Tensor::zeros(Shape{c, 1, 1}));
        params.add(base + ".conv2.w", kaiming_conv(Shape{c, c, 3, 3}, rng));
        params.add(base + ".conv2.b", Tensor::zeros(Shape{c, 1, 1}));
        params.add(base + ".conv3.w", kaiming_conv(Shape{c, c, 3, 3}, rng));
        params.add(base + ".conv3.b", Tensor::zeros(Shape{c, 1, 1}));
    }
    const std::size_t da = cfg.effective_attention_dim();
    params.add("gdg.wq", linear_init(Shape{c, da}, rng));
    params.add("gdg.wk", linear_init(Shape{c, da}, rng));
    params.add("gdg.wv", linear_init(Shape{c, da}, rng));
    params.add("gdg.psi.w", linear_init(Shape{da, c}, rng));
    params.add("gdg.psi.b", Tensor::zeros(Shape{1, c}));
}

inline ParamStore init_model(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ParamStore params;
    init_backbone_params(params, cfg.backbone, rng);
    init_head_params(params, cfg.backbone, rng);
    init_guidance_params(params, cfg, rng);
    return params;
}

// Channel-wise spatial sum of the density-weighted support features.
inline GlobalDensityToken encode_global_token(const SupportDensityFeature& sdf) {
    GlobalDensityToken token;
    token.q = sum_spatial(sdf.data);
    return token;
}

// One guidance branch: similarity plane stacked onto the query features,
// then conv-ReLU-conv-ReLU-conv with the third conv dilated.
inline Tensor local_guide(const Tensor& ldsm_plane, const FeatureMap& query,
                          const ParamStore& params, const std::string& branch,
                          int dilation_rate) {
    if (ldsm_plane.rank() != 3 || ldsm_plane.dim(0) != 1 ||
        ldsm_plane.dim(1) != query.height() || ldsm_plane.dim(2) != query.width())
        throw ShapeMismatch("local_guide: plane " + shape_str(ldsm_plane.shape()) +
                            " vs query " + shape_str(query.data.shape()));
    Tensor x = concat_channels(ldsm_plane, query.data);
    x = conv2d(x, params.at(branch + ".conv1.w"), {1, 1, 1});
    x = relu(add(x, params.at(branch + ".conv1.b")));
    x = conv2d(x, params.at(branch + ".conv2.w"), {1, 1, 1});
    x = relu(add(x, params.at(branch + ".conv2.b")));
    x = conv2d(x, params.at(branch + ".conv3.w"), {1, dilation_rate, dilation_rate});
    x = add(x, params.at(branch + ".conv3.b"));
    return x;
}

// Single-token cross-attention: the support token queries the flattened
// local-activated cells, and the residual output is injected back into the
// map (broadcast by default, per-cell rows with tile_q).
inline Tensor global_guide(const GlobalDensityToken& token, const Tensor& local_activated,
                           const ParamStore& params, const ModelConfig& cfg) {
    const std::size_t c = local_activated.dim(0);
    const std::size_t h = local_activated.dim(1), w = local_activated.dim(2);
    if (token.q.rank() != 2 || token.q.dim(0) != 1 || token.q.dim(1) != c)
        throw ShapeMismatch("global_guide: token " + shape_str(token.q.shape()) +
                            " vs features " + shape_str(local_activated.shape()));
    const double inv_sqrt_da =
        1.0 / std::sqrt(static_cast<double>(cfg.effective_attention_dim()));
    Tensor rows = spatial_rows(local_activated); // (N,C)
    Tensor kp = matmul(rows, params.at("gdg.wk")); // (N,da)
    Tensor vp = matmul(rows, params.at("gdg.wv")); // (N,da)
    if (!cfg.tile_q) {
        Tensor qp = matmul(token.q, params.at("gdg.wq"));              // (1,da)
        Tensor scores = scale(matmul(qp, transpose2(kp)), inv_sqrt_da); // (1,N)
        Tensor weights = softmax(scores, 1);
        Tensor attended = matmul(weights, vp); // (1,da)
        Tensor o = add(token.q, add(matmul(attended, params.at("gdg.psi.w")),
                                    params.at("gdg.psi.b"))); // (1,C)
        return add(local_activated, reshape(o, Shape{c, 1, 1}));
    }
    Tensor qm = tile_rows(token.q, h * w);                          // (N,C)
    Tensor qp = matmul(qm, params.at("gdg.wq"));                    // (N,da)
    Tensor scores = scale(matmul(qp, transpose2(kp)), inv_sqrt_da); // (N,N)
    Tensor weights = softmax(scores, 1);
    Tensor attended = matmul(weights, vp); // (N,da)
    Tensor o = add(qm, add(matmul(attended, params.at("gdg.psi.w")), params.at("gdg.psi.b")));
    return add(local_activated, rows_to_spatial(o, h, w));
}

struct ForwardOptions {
    const PrototypeSet* fixed_prototypes = nullptr; // reuse a prior EM fit
    std::string episode_label;
};

struct ForwardResult {
    Tensor prediction; // (1,h,w), feature resolution, nonnegative
    PrototypeSet prototypes;
    GlobalDensityToken token;
    Tensor ldsm; // (V,h,w) when local guidance ran
    std::size_t em_iterations = 0;
};

// Full episode pass. Prototype fitting is a constant-producing subroutine:
// gradients flow through features, similarities, token and attention, but
// never into the EM iterates.
inline ForwardResult forward_query(const ParamStore& params, const ModelConfig& cfg,
                                   const Tensor& query_image, const Tensor& support_image,
                                   const DensityMap& gt_support,
                                   const ForwardOptions& opt = {}) {
    cfg.validate();
    FeatureMap support_feat =
        extract_features(params, cfg.backbone, support_image, BranchSource::support);
    FeatureMap query_feat =
        extract_features(params, cfg.backbone, query_image, BranchSource::query);
    SupportDensityFeature sdf =
        build_support_density_feature(support_feat, gt_support, cfg.backbone.downsample_factor);

    ForwardResult res;
    if (opt.fixed_prototypes) {
        res.prototypes = *opt.fixed_prototypes;
    } else {
        try {
            FitResult fit = fit_prototypes(sdf, cfg.em_options());
            res.prototypes = std::move(fit.prototypes);
            res.em_iterations = fit.iterations;
        } catch (const AllSamplesDegenerate& e) {
            const std::string label =
                opt.episode_label.empty() ? "<unnamed support>" : opt.episode_label;
            throw AllSamplesDegenerate("episode with support '" + label + "': " + e.what());
        }
    }

    Tensor local_activated;
    if (cfg.use_ldg) {
        LocalDensitySimilarityMatrix sim = encode_similarity(res.prototypes, query_feat);
        res.ldsm = sim.delta;
        const std::size_t v = res.prototypes.count();
        for (std::size_t vi = 0; vi < v; ++vi) {
            const std::string branch =
                "ldg.branch" + std::to_string(cfg.shared_branch_convs ? 0 : vi);
            Tensor plane = slice_channels(sim.delta, vi, vi + 1);
            Tensor fused = local_guide(plane, query_feat, params, branch, cfg.dilation_rate);
            local_activated = vi == 0 ? std::move(fused) : add(local_activated, fused);
        }
    } else {
        local_activated = query_feat.data;
    }

    Tensor guided;
    if (cfg.use_gdg) {
        res.token = encode_global_token(sdf);
        guided = global_guide(res.token, local_activated, params, cfg);
    } else {
        guided = local_activated;
    }

    FeatureMap guided_map;
    guided_map.data = std::move(guided);
    guided_map.source = BranchSource::query;
    guided_map.downsample_factor = cfg.backbone.downsample_factor;
    res.prediction = decode_density(params, guided_map);
    return res;
}

} // namespace crowd
