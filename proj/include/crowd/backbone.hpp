#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "crowd/checkpoint.hpp"
#include "crowd/errors.hpp"
#include "crowd/rng.hpp"
#include "crowd/tensor.hpp"

namespace crowd {

// Small trainable stack: per stage conv(k,k)+bias+ReLU, with a 2x2 max-pool
// after every stage but the last. The final stage's channel count is the
// feature dimension shared by prototype fitting and guidance.
struct BackboneConfig {
    std::vector<std::size_t> channels{16, 32, 32};
    std::size_t kernel = 3;
    std::size_t downsample_factor = 4;

    std::size_t feature_dim() const { return channels.back(); }

    void validate() const {
        if (channels.empty()) throw InvalidHyperparameter("backbone: need at least one stage");
        if (kernel % 2 == 0) throw InvalidHyperparameter("backbone: kernel must be odd");
        std::size_t f = 1;
        for (std::size_t i = 0; i + 1 < channels.size(); ++i) f *= 2;
        if (f != downsample_factor)
            throw InvalidHyperparameter(
                "backbone: downsample_factor " + std::to_string(downsample_factor) +
                " inconsistent with " + std::to_string(channels.size()) + " stages");
    }
};

enum class BranchSource { support, query };

struct FeatureMap {
    Tensor data; // (C,h,w)
    BranchSource source = BranchSource::support;
    std::size_t downsample_factor = 1;

    std::size_t channels() const { return data.dim(0); }
    std::size_t height() const { return data.dim(1); }
    std::size_t width() const { return data.dim(2); }
};

inline Tensor kaiming_conv(Shape shape, Rng& rng) {
    // fan-in scaled normal init for ReLU stacks
    const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
    const double stddev = std::sqrt(2.0 / fan_in);
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, stddev);
    return t;
}

inline void init_backbone_params(ParamStore& params, const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    std::size_t cin = 3;
    for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
        const std::size_t cout = cfg.channels[s];
        const std::string base = "backbone.stage" + std::to_string(s + 1);
        params.add(base + ".w", kaiming_conv(Shape{cout, cin, cfg.kernel, cfg.kernel}, rng));
        params.add(base + ".b", Tensor::zeros(Shape{cout, 1, 1}));
        cin = cout;
    }
}

inline void init_head_params(ParamStore& params, const BackboneConfig& cfg, Rng& rng) {
    const std::size_t c = cfg.feature_dim();
    const std::size_t mid = std::max<std::size_t>(1, c / 2);
    params.add("head.conv1.w", kaiming_conv(Shape{mid, c, 3, 3}, rng));
    params.add("head.conv1.b", Tensor::zeros(Shape{mid, 1, 1}));
    params.add("head.conv2.w", kaiming_conv(Shape{1, mid, 3, 3}, rng));
    params.add("head.conv2.b", Tensor::zeros(Shape{1, 1, 1}));
}

// One parameter set serves both branches; support and query features come
// from the identical weights.
inline FeatureMap extract_features(const ParamStore& params, const BackboneConfig& cfg,
                                   const Tensor& image, BranchSource source) {
    cfg.validate();
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeMismatch("extract_features: expected (3,H,W), got " + shape_str(image.shape()));
    if (image.dim(1) % cfg.downsample_factor || image.dim(2) % cfg.downsample_factor)
        throw IndivisibleShape("extract_features: " + shape_str(image.shape()) +
                               " not divisible by factor " +
                               std::to_string(cfg.downsample_factor));
    const int pad = static_cast<int>(cfg.kernel / 2);
    Tensor x = image;
    for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
        const std::string base = "backbone.stage" + std::to_string(s + 1);
        x = conv2d(x, params.at(base + ".w"), {1, pad, 1});
        x = add(x, params.at(base + ".b"));
        x = relu(x);
        if (s + 1 < cfg.channels.size()) x = maxpool2(x);
    }
    FeatureMap fm;
    fm.data = std::move(x);
    fm.source = source;
    fm.downsample_factor = cfg.downsample_factor;
    return fm;
}

// Density regression head: conv-ReLU-conv with a softplus output so the
// map stays nonnegative while gradients survive near zero.
inline Tensor decode_density(const ParamStore& params, const FeatureMap& guided) {
    const Tensor& w1 = params.at("head.conv1.w");
    if (guided.channels() != w1.dim(1))
        throw ShapeMismatch("decode_density: feature channels " +
                            std::to_string(guided.channels()) + " vs head expecting " +
                            std::to_string(w1.dim(1)));
    Tensor x = conv2d(guided.data, w1, {1, 1, 1});
    x = add(x, params.at("head.conv1.b"));
    x = relu(x);
    x = conv2d(x, params.at("head.conv2.w"), {1, 1, 1});
    x = add(x, params.at("head.conv2.b"));
    return softplus(x); // (1,h,w)
}

} // namespace crowd
