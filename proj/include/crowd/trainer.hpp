#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "crowd/episodes.hpp"
#include "crowd/guidance.hpp"

namespace crowd {

struct TrainConfig {
    ModelConfig model;
    double lr = 1e-3;
    std::size_t batch = 4;
    std::size_t iterations = 2000;
    double poly_power = 0.9;
    AugmentConfig augment;
    double sigma = 4.0;       // GT kernel width at image resolution
    double clip_norm = 5.0;   // global-norm gradient clip, 0 disables
    std::size_t checkpoint_every = 0; // 0: final checkpoint only
    std::size_t threads = 1;

    void validate() const {
        model.validate();
        if (!(lr > 0.0)) throw InvalidHyperparameter("train: lr must be positive");
        if (batch < 1) throw InvalidHyperparameter("train: batch must be >= 1");
        if (!(sigma > 0.0)) throw NonPositiveSigma("train: sigma must be positive");
        if (threads < 1) throw InvalidHyperparameter("train: threads must be >= 1");
    }
};

// 0.5 * sum((pred - gt)^2); batch averaging happens in the loop.
inline Tensor euclidean_loss(const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape())
        throw ShapeMismatch("euclidean_loss: " + shape_str(pred.shape()) + " vs " +
                            shape_str(gt.shape()));
    Tensor diff = sub(pred, gt);
    return scale(sum_all(mul(diff, diff)), 0.5);
}

inline double euclidean_loss(const DensityMap& pred, const DensityMap& gt) {
    if (pred.grid.shape() != gt.grid.shape())
        throw ShapeMismatch("euclidean_loss: " + shape_str(pred.grid.shape()) + " vs " +
                            shape_str(gt.grid.shape()));
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.grid.size(); ++i) {
        const double d = pred.grid.data()[i] - gt.grid.data()[i];
        acc += d * d;
    }
    return 0.5 * acc;
}

inline double poly_lr(std::size_t step, std::size_t total, double base_lr, double power) {
    if (total == 0) throw InvalidHyperparameter("poly_lr: total must be positive");
    if (step > total) throw InvalidHyperparameter("poly_lr: step beyond total");
    return base_lr * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

// Adam with bias correction; moment buffers mirror parameter order.
class AdamOptimizer {
public:
    explicit AdamOptimizer(const ParamStore& params, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& [name, t] : params) {
            m_.emplace_back(t.size(), 0.0);
            v_.emplace_back(t.size(), 0.0);
        }
    }

    void step(ParamStore& params, const std::vector<std::vector<double>>& grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        std::size_t k = 0;
        for (auto& [name, p] : params) {
            const std::vector<double>& g = grads[k];
            std::vector<double>& m = m_[k];
            std::vector<double>& v = v_[k];
            double* pv = p.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                pv[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
            ++k;
        }
    }

    std::size_t step_count() const { return t_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }

private:
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

inline double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (double x : g) sq += x * x;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& g : grads)
            for (double& x : g) x *= s;
    }
    return norm;
}

struct TraceRow {
    std::size_t iter = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::size_t skipped = 0;
};

inline void write_loss_csv(const std::string& path, const std::vector<TraceRow>& trace) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "iter,loss,lr,skipped\n";
    char buf[96];
    for (const auto& row : trace) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%zu", row.iter, row.loss, row.lr,
                      row.skipped);
        os << buf << "\n";
    }
    if (!os) throw IoError("write failed: " + path);
}

struct TrainResult {
    ParamStore params;
    std::vector<TraceRow> trace;
    std::size_t skipped_episodes = 0;
};

namespace detail {

struct EpisodeDraw {
    Image support_img;
    PointAnnotation support_ann;
    Image query_img;
    PointAnnotation query_ann;
    std::string label;
};

struct EpisodeOutcome {
    bool skipped = false;
    double loss = 0.0;
    std::vector<std::vector<double>> grads; // per parameter, parameter order
};

inline EpisodeOutcome run_training_episode(ParamStore& params, const TrainConfig& cfg,
                                           const EpisodeDraw& draw) {
    EpisodeOutcome out;
    const std::size_t factor = cfg.model.backbone.downsample_factor;
    DensityMap gt_support =
        encode_density(draw.support_ann, cfg.sigma, draw.support_img.height,
                       draw.support_img.width);
    DensityMap gt_query = encode_density(draw.query_ann, cfg.sigma, draw.query_img.height,
                                         draw.query_img.width);
    DensityMap gt_query_down = downsample_preserving_count(gt_query, factor);

    params.zero_grads();
    try {
        GradTape tape;
        ForwardOptions fo;
        fo.episode_label = draw.label;
        ForwardResult fr = forward_query(params, cfg.model, draw.query_img.to_tensor(),
                                         draw.support_img.to_tensor(), gt_support, fo);
        Tensor loss = scale(euclidean_loss(fr.prediction, gt_query_down.grid),
                            1.0 / static_cast<double>(cfg.batch));
        if (!std::isfinite(loss.item()))
            throw Error("training loss is not finite in episode " + draw.label);
        tape.backward(loss);
        out.loss = loss.item();
    } catch (const AllSamplesDegenerate&) {
        out.skipped = true;
        params.zero_grads();
        return out;
    }
    out.grads.reserve(params.size());
    for (auto& [name, p] : params) {
        if (const std::vector<double>* g = p.grad_if())
            out.grads.push_back(*g);
        else
            out.grads.emplace_back(p.size(), 0.0);
    }
    params.zero_grads();
    return out;
}

} // namespace detail

// Phase-one learning: gradient descent on the base model with prototype
// fitting run per episode as a constant-producing subroutine. Episode
// sampling and augmentation draw from the RNG on the main thread in batch
// order, and per-episode gradients reduce in batch order, so results are
// bit-identical for any thread count.
inline TrainResult train_base(const std::vector<Scene>& scenes, const TrainConfig& cfg,
                              std::uint64_t seed,
                              const std::string& checkpoint_prefix = std::string()) {
    cfg.validate();
    if (scenes.empty()) throw EmptyInput("train_base: no scenes");

    Rng root(seed);
    Rng init_rng = root.fork(1);
    Rng data_rng = root.fork(2);

    TrainResult result;
    result.params = init_model(cfg.model, init_rng);
    AdamOptimizer adam(result.params);
    const std::size_t nthreads = std::min<std::size_t>(cfg.threads, cfg.batch);

    std::vector<ParamStore> replicas;
    for (std::size_t t = 1; t < nthreads; ++t) replicas.push_back(result.params.clone());

    for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
        const double lr = poly_lr(iter, cfg.iterations, cfg.lr, cfg.poly_power);

        std::vector<detail::EpisodeDraw> draws;
        draws.reserve(cfg.batch);
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const Scene& scene = scenes[data_rng.uniform_index(scenes.size())];
            Episode ep = sample_episode(scene, data_rng);
            const std::size_t qi = data_rng.uniform_index(ep.queries.size());
            detail::EpisodeDraw draw;
            std::tie(draw.support_img, draw.support_ann) =
                augment(ep.support_image, ep.support_ann, data_rng, cfg.augment);
            std::tie(draw.query_img, draw.query_ann) =
                augment(ep.queries[qi].first, ep.queries[qi].second, data_rng, cfg.augment);
            draw.label = scene.scene_id + "#iter" + std::to_string(iter);
            draws.push_back(std::move(draw));
        }

        std::vector<detail::EpisodeOutcome> outcomes(cfg.batch);
        if (nthreads <= 1) {
            for (std::size_t b = 0; b < cfg.batch; ++b)
                outcomes[b] = detail::run_training_episode(result.params, cfg, draws[b]);
        } else {
            for (auto& r : replicas) r.copy_values_from(result.params);
            std::vector<std::thread> pool;
            std::vector<std::exception_ptr> errors(nthreads);
            for (std::size_t t = 0; t < nthreads; ++t) {
                ParamStore& store = t == 0 ? result.params : replicas[t - 1];
                pool.emplace_back([&, t]() {
                    try {
                        for (std::size_t b = t; b < cfg.batch; b += nthreads)
                            outcomes[b] = detail::run_training_episode(store, cfg, draws[b]);
                    } catch (...) {
                        errors[t] = std::current_exception();
                    }
                });
            }
            for (auto& th : pool) th.join();
            for (auto& e : errors)
                if (e) std::rethrow_exception(e);
        }

        std::vector<std::vector<double>> total;
        total.reserve(result.params.size());
        for (const auto& [name, p] : result.params) total.emplace_back(p.size(), 0.0);
        double loss_sum = 0.0;
        std::size_t skipped = 0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            if (outcomes[b].skipped) {
                ++skipped;
                continue;
            }
            loss_sum += outcomes[b].loss;
            for (std::size_t k = 0; k < total.size(); ++k) {
                const std::vector<double>& g = outcomes[b].grads[k];
                for (std::size_t i = 0; i < g.size(); ++i) total[k][i] += g[i];
            }
        }
        result.skipped_episodes += skipped;

        if (skipped < cfg.batch) {
            clip_global_norm(total, cfg.clip_norm);
            adam.step(result.params, total, lr);
        }
        result.trace.push_back(TraceRow{iter, loss_sum, lr, skipped});

        if (cfg.checkpoint_every && !checkpoint_prefix.empty() &&
            (iter + 1) % cfg.checkpoint_every == 0)
            save_checkpoint(checkpoint_prefix + ".iter" + std::to_string(iter + 1), result.params);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Phase-two / test-time adaptation: parameters stay frozen, prototypes are
// fit once on the one-shot support, every query reuses them.

struct AdaptResult {
    std::vector<DensityMap> maps;
    std::vector<double> counts;
    PrototypeSet prototypes;
    std::size_t em_iterations = 0;
};

namespace detail {

inline Tensor masked_image_tensor(const Image& img, const std::optional<RoiMask>& roi) {
    Tensor t = img.to_tensor();
    if (roi) {
        if (roi->mask.dim(1) != img.height || roi->mask.dim(2) != img.width)
            throw ShapeMismatch("ROI mask does not match image size");
        const std::size_t hw = img.height * img.width;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < hw; ++i) t.data()[c * hw + i] *= roi->mask.data()[i];
    }
    return t;
}

inline Tensor feature_roi_mask(const RoiMask& roi, std::size_t factor) {
    DensityMap as_map;
    as_map.grid = roi.mask;
    DensityMap down = downsample_preserving_count(as_map, factor);
    Tensor out(down.grid.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = down.grid.data()[i] > 0.0 ? 1.0 : 0.0;
    return out;
}

} // namespace detail

inline AdaptResult adapt_and_predict(const ParamStore& params, const ModelConfig& cfg,
                                     double sigma, const Image& support_img,
                                     const PointAnnotation& support_ann,
                                     const std::vector<Image>& queries,
                                     const std::optional<RoiMask>& roi = std::nullopt) {
    cfg.validate();
    support_ann.validate();
    const std::size_t factor = cfg.backbone.downsample_factor;

    DensityMap gt = encode_density(support_ann, sigma, support_img.height, support_img.width);
    if (roi) gt = apply_mask(gt, *roi);
    Tensor support_t = detail::masked_image_tensor(support_img, roi);

    AdaptResult out;
    {
        FeatureMap sfeat = extract_features(params, cfg.backbone, support_t, BranchSource::support);
        SupportDensityFeature sdf = build_support_density_feature(sfeat, gt, factor);
        try {
            FitResult fit = fit_prototypes(sdf, cfg.em_options());
            out.prototypes = std::move(fit.prototypes);
            out.em_iterations = fit.iterations;
        } catch (const AllSamplesDegenerate& e) {
            throw AllSamplesDegenerate(
                std::string("one-shot support has no crowd evidence; adaptation requires an "
                            "annotated crowd in the support image (") +
                e.what() + ")");
        }
    }

    ForwardOptions fo;
    fo.fixed_prototypes = &out.prototypes;
    for (const Image& q : queries) {
        Tensor query_t = detail::masked_image_tensor(q, roi);
        ForwardResult fr = forward_query(params, cfg, query_t, support_t, gt, fo);
        DensityMap dm;
        dm.sigma = sigma;
        dm.grid = fr.prediction.detach();
        if (roi) {
            Tensor fmask = detail::feature_roi_mask(*roi, factor);
            if (fmask.shape() == dm.grid.shape())
                for (std::size_t i = 0; i < dm.grid.size(); ++i)
                    dm.grid.data()[i] *= fmask.data()[i];
        }
        out.counts.push_back(integrate_count(dm));
        out.maps.push_back(std::move(dm));
    }
    return out;
}

} // namespace crowd
