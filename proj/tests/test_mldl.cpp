#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "crowd/backbone.hpp"
#include "crowd/episodes.hpp"
#include "crowd/mldl.hpp"
#include "crowd/rng.hpp"
#include "helpers.hpp"

using namespace crowd;
using crowd::testing::make_spherical_clusters;
using crowd::testing::recovery_cosine;

namespace {

SupportDensityFeature random_sdf(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
    SupportDensityFeature sdf;
    sdf.data = Tensor(Shape{c, h, w});
    sdf.density = Tensor(Shape{1, h, w});
    for (std::size_t i = 0; i < h * w; ++i) sdf.density.data()[i] = rng.uniform(0.1, 3.0);
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t i = 0; i < h * w; ++i)
            sdf.data.data()[ci * h * w + i] = rng.normal() * sdf.density.data()[i];
    return sdf;
}

} // namespace

TEST_CASE("build_support_density_feature", "[mldl]") {
    Rng rng(41);
    FeatureMap feat;
    feat.data = Tensor(Shape{4, 3, 3});
    for (std::size_t i = 0; i < feat.data.size(); ++i) feat.data.data()[i] = rng.normal();
    feat.downsample_factor = 2;

    DensityMap zero_gt;
    zero_gt.grid = Tensor::zeros(Shape{1, 6, 6});
    SupportDensityFeature z = build_support_density_feature(feat, zero_gt, 2);
    for (std::size_t i = 0; i < z.data.size(); ++i) CHECK(z.data.data()[i] == 0.0);

    // uniform gt of value c scales features by the pooled value
    DensityMap uni;
    uni.grid = Tensor(Shape{1, 6, 6}, std::vector<double>(36, 0.5));
    SupportDensityFeature u = build_support_density_feature(feat, uni, 2);
    for (std::size_t ci = 0; ci < 4; ++ci)
        for (std::size_t i = 0; i < 9; ++i)
            CHECK(u.data.data()[ci * 9 + i] ==
                  Catch::Approx(feat.data.data()[ci * 9 + i] * 2.0)); // 4 cells * 0.5

    // random case against an explicit loop oracle
    DensityMap gt;
    gt.grid = Tensor(Shape{1, 6, 6});
    for (std::size_t i = 0; i < 36; ++i) gt.grid.data()[i] = rng.uniform();
    SupportDensityFeature sdf = build_support_density_feature(feat, gt, 2);
    for (std::size_t ci = 0; ci < 4; ++ci)
        for (std::size_t y = 0; y < 3; ++y)
            for (std::size_t x = 0; x < 3; ++x) {
                double pooled = 0.0;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx)
                        pooled += gt.grid.data()[(2 * y + dy) * 6 + (2 * x + dx)];
                const double expect = feat.data.data()[(ci * 3 + y) * 3 + x] * pooled;
                REQUIRE(std::abs(sdf.data.data()[(ci * 3 + y) * 3 + x] - expect) < 1e-12);
            }

    CHECK_THROWS_AS(build_support_density_feature(feat, gt, 3), ShapeMismatch);
}

TEST_CASE("prepare_samples normalization and exclusions", "[mldl]") {
    SupportDensityFeature sdf;
    sdf.data = Tensor(Shape{2, 1, 3}, {3.0, 0.0, 1e-10, 4.0, 0.0, 1e-10});
    sdf.density = Tensor(Shape{1, 1, 3}, {1.0, 1.0, 1.0});
    SampleSet set = prepare_samples(sdf);
    REQUIRE(set.count() == 1); // zero column and sub-threshold column excluded
    CHECK(set.samples.data()[0] == Catch::Approx(0.6));
    CHECK(set.samples.data()[1] == Catch::Approx(0.8));
    CHECK(set.weights[0] == Catch::Approx(5.0));
    CHECK(set.cells[0] == 0);

    // zero-density cells are excluded even when features are large
    SupportDensityFeature zd;
    zd.data = Tensor(Shape{2, 1, 2}, {5.0, 7.0, 5.0, 7.0});
    zd.density = Tensor(Shape{1, 1, 2}, {0.0, 1.0});
    CHECK(prepare_samples(zd).count() == 1);

    SupportDensityFeature all_zero;
    all_zero.data = Tensor::zeros(Shape{2, 2, 2});
    all_zero.density = Tensor::zeros(Shape{1, 2, 2});
    CHECK_THROWS_AS(prepare_samples(all_zero), AllSamplesDegenerate);

    Rng rng(42);
    SampleSet rs = prepare_samples(random_sdf(8, 5, 5, rng));
    for (std::size_t i = 0; i < rs.count(); ++i) {
        double n2 = 0.0;
        for (std::size_t c = 0; c < 8; ++c) {
            const double v = rs.samples.data()[i * 8 + c];
            n2 += v * v;
        }
        REQUIRE(std::abs(std::sqrt(n2) - 1.0) < 1e-12);
    }
}

TEST_CASE("em_step_e responsibilities", "[mldl]") {
    // single component: every responsibility is 1
    Tensor samples(Shape{4, 3});
    Rng rng(43);
    for (std::size_t i = 0; i < samples.size(); ++i) samples.data()[i] = rng.normal();
    Tensor mu1(Shape{1, 3}, {1.0, 0.0, 0.0});
    Responsibilities r1 = em_step_e(samples, mu1, 10.0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r1.e.data()[i] == Catch::Approx(1.0));

    // equidistant sample: uniform responsibilities
    Tensor mu3(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const double inv_sqrt3 = 1.0 / std::sqrt(3.0);
    Tensor s(Shape{1, 3}, {inv_sqrt3, inv_sqrt3, inv_sqrt3});
    Responsibilities r3 = em_step_e(s, mu3, 7.0);
    for (std::size_t v = 0; v < 3; ++v) CHECK(r3.e.data()[v] == Catch::Approx(1.0 / 3.0));

    // direct exponent-ratio oracle
    Tensor ss(Shape{5, 4});
    for (std::size_t i = 0; i < ss.size(); ++i) ss.data()[i] = rng.normal();
    Tensor mm(Shape{3, 4});
    for (std::size_t i = 0; i < mm.size(); ++i) mm.data()[i] = rng.normal();
    const double r = 3.0;
    Responsibilities resp = em_step_e(ss, mm, r);
    for (std::size_t i = 0; i < 5; ++i) {
        double denom = 0.0;
        std::vector<double> num(3);
        for (std::size_t v = 0; v < 3; ++v) {
            double dot = 0.0;
            for (std::size_t c = 0; c < 4; ++c) dot += mm.data()[v * 4 + c] * ss.data()[i * 4 + c];
            num[v] = std::exp(r * dot);
            denom += num[v];
        }
        for (std::size_t v = 0; v < 3; ++v)
            REQUIRE(std::abs(resp.e.data()[i * 3 + v] - num[v] / denom) < 1e-12);
    }

    CHECK_THROWS_AS(em_step_e(ss, mm, 0.0), InvalidHyperparameter);
    CHECK_THROWS_AS(em_step_e(ss, Tensor::zeros(Shape{3, 5}), 1.0), ShapeMismatch);
}

TEST_CASE("em_step_m collapse and mean direction", "[mldl]") {
    // all samples equal to a unit vector: every row collapses onto it
    const double u[3] = {0.6, 0.0, 0.8};
    Tensor samples(Shape{5, 3});
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t c = 0; c < 3; ++c) samples.data()[i * 3 + c] = u[c];
    Responsibilities resp;
    resp.e = Tensor(Shape{5, 2}, std::vector<double>(10, 0.5));
    Tensor prev(Shape{2, 3}, {1, 0, 0, 0, 1, 0});
    Tensor mu = em_step_m(samples, resp, prev);
    for (std::size_t v = 0; v < 2; ++v)
        for (std::size_t c = 0; c < 3; ++c) CHECK(mu.data()[v * 3 + c] == Catch::Approx(u[c]));

    // V=1: normalized mean direction
    Rng rng(44);
    Tensor rs(Shape{20, 6});
    for (std::size_t i = 0; i < rs.size(); ++i) rs.data()[i] = rng.normal();
    Responsibilities ones;
    ones.e = Tensor(Shape{20, 1}, std::vector<double>(20, 1.0));
    Tensor prev1(Shape{1, 6}, {1, 0, 0, 0, 0, 0});
    Tensor m1 = em_step_m(rs, ones, prev1);
    std::vector<double> mean(6, 0.0);
    for (std::size_t i = 0; i < 20; ++i)
        for (std::size_t c = 0; c < 6; ++c) mean[c] += rs.data()[i * 6 + c];
    double n2 = 0.0;
    for (double x : mean) n2 += x * x;
    for (std::size_t c = 0; c < 6; ++c)
        REQUIRE(std::abs(m1.data()[c] - mean[c] / std::sqrt(n2)) < 1e-12);

    // rows stay unit after the M-step
    double rn = 0.0;
    for (std::size_t c = 0; c < 3; ++c) rn += mu.data()[c] * mu.data()[c];
    CHECK(std::abs(std::sqrt(rn) - 1.0) < 1e-9);
}

TEST_CASE("fit_prototypes recovers synthetic spherical clusters", "[mldl]") {
    Rng rng(45);
    for (int rep = 0; rep < 4; ++rep) {
        Rng crng = rng.fork(rep);
        auto clusters = make_spherical_clusters(3, 16, 300, 10.0, crng);
        EmOptions opt;
        FitResult fit = fit_prototypes(clusters.sdf, opt);
        CHECK(fit.iterations <= 50);
        REQUIRE(recovery_cosine(clusters, fit.prototypes) > 0.99);
        for (std::size_t i = 1; i < fit.objective.size(); ++i)
            REQUIRE(fit.objective[i] >= fit.objective[i - 1] - 1e-9);
    }
}

TEST_CASE("fit_prototypes single component converges immediately", "[mldl]") {
    Rng rng(46);
    SupportDensityFeature sdf = random_sdf(8, 6, 6, rng);
    EmOptions opt;
    opt.num_prototypes = 1;
    FitResult fit = fit_prototypes(sdf, opt);
    CHECK(fit.iterations <= 2);
    CHECK(fit.prototypes.count() == 1);
}

TEST_CASE("fit objective is monotone over random seeds", "[mldl]") {
    Rng rng(47);
    for (int rep = 0; rep < 100; ++rep) {
        Rng crng = rng.fork(rep);
        SupportDensityFeature sdf = random_sdf(6, 5, 5, crng);
        EmOptions opt;
        opt.num_prototypes = 1 + crng.uniform_index(4);
        FitResult fit = fit_prototypes(sdf, opt);
        for (std::size_t i = 1; i < fit.objective.size(); ++i)
            REQUIRE(fit.objective[i] >= fit.objective[i - 1] - 1e-9);
        // prototype rows stay unit norm
        for (std::size_t v = 0; v < fit.prototypes.count(); ++v) {
            double n2 = 0.0;
            for (std::size_t c = 0; c < 6; ++c) {
                const double x = fit.prototypes.mu.data()[v * 6 + c];
                n2 += x * x;
            }
            REQUIRE(std::abs(std::sqrt(n2) - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("fit is invariant to sample order and to positive scaling", "[mldl]") {
    Rng rng(48);
    SupportDensityFeature sdf = random_sdf(8, 6, 6, rng);
    EmOptions opt;
    FitResult base = fit_prototypes(sdf, opt);

    // spatial permutation of the columns
    std::vector<std::size_t> perm(36);
    for (std::size_t i = 0; i < 36; ++i) perm[i] = i;
    for (std::size_t i = 35; i > 0; --i) std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
    SupportDensityFeature shuffled;
    shuffled.data = Tensor(Shape{8, 6, 6});
    shuffled.density = Tensor(Shape{1, 6, 6});
    for (std::size_t i = 0; i < 36; ++i) {
        shuffled.density.data()[perm[i]] = sdf.density.data()[i];
        for (std::size_t c = 0; c < 8; ++c)
            shuffled.data.data()[c * 36 + perm[i]] = sdf.data.data()[c * 36 + i];
    }
    FitResult shuffled_fit = fit_prototypes(shuffled, opt);
    for (std::size_t i = 0; i < base.prototypes.mu.size(); ++i)
        REQUIRE(std::abs(base.prototypes.mu.data()[i] - shuffled_fit.prototypes.mu.data()[i]) <
                1e-9);

    // positive scaling of the density feature
    SupportDensityFeature scaled;
    scaled.data = Tensor(Shape{8, 6, 6});
    scaled.density = Tensor(Shape{1, 6, 6});
    for (std::size_t i = 0; i < 36; ++i) scaled.density.data()[i] = 17.0 * sdf.density.data()[i];
    for (std::size_t i = 0; i < sdf.data.size(); ++i)
        scaled.data.data()[i] = 17.0 * sdf.data.data()[i];
    FitResult scaled_fit = fit_prototypes(scaled, opt);
    for (std::size_t i = 0; i < base.prototypes.mu.size(); ++i)
        REQUIRE(std::abs(base.prototypes.mu.data()[i] - scaled_fit.prototypes.mu.data()[i]) <
                1e-9);
}

TEST_CASE("encode_similarity values and bounds", "[mldl]") {
    Rng rng(49);
    PrototypeSet protos;
    protos.mu = Tensor(Shape{2, 4});
    auto unit = crowd::testing::random_unit(4, rng);
    for (std::size_t c = 0; c < 4; ++c) protos.mu.data()[c] = unit[c];
    // second prototype orthogonal to the first
    std::vector<double> other = crowd::testing::perturb_on_sphere(unit, std::acos(0.0), rng);
    for (std::size_t c = 0; c < 4; ++c) protos.mu.data()[4 + c] = other[c];

    FeatureMap query;
    query.data = Tensor::zeros(Shape{4, 1, 3});
    for (std::size_t c = 0; c < 4; ++c) {
        query.data.data()[c * 3 + 0] = 2.5 * unit[c];  // aligned with prototype 0
        query.data.data()[c * 3 + 1] = 1.5 * other[c]; // orthogonal to prototype 0
        query.data.data()[c * 3 + 2] = 0.0;            // zero column
    }
    LocalDensitySimilarityMatrix sim = encode_similarity(protos, query);
    CHECK(sim.delta.data()[0] == Catch::Approx(1.0));          // self similarity
    CHECK(std::abs(sim.delta.data()[1]) < 1e-9);               // orthogonal
    CHECK(sim.delta.data()[2] == 0.0);                         // zero-norm convention
    CHECK(sim.delta.data()[3 + 1] == Catch::Approx(1.0));      // prototype 1 vs its column

    // random case matches the per-cell dot/norm oracle; bounds hold
    PrototypeSet rp;
    rp.mu = Tensor(Shape{3, 6});
    for (std::size_t v = 0; v < 3; ++v) {
        auto row = crowd::testing::random_unit(6, rng);
        for (std::size_t c = 0; c < 6; ++c) rp.mu.data()[v * 6 + c] = row[c];
    }
    FeatureMap rq;
    rq.data = Tensor(Shape{6, 4, 4});
    for (std::size_t i = 0; i < rq.data.size(); ++i) rq.data.data()[i] = rng.normal();
    LocalDensitySimilarityMatrix rs = encode_similarity(rp, rq);
    for (std::size_t v = 0; v < 3; ++v)
        for (std::size_t i = 0; i < 16; ++i) {
            double dot = 0.0, n2 = 0.0;
            for (std::size_t c = 0; c < 6; ++c) {
                dot += rp.mu.data()[v * 6 + c] * rq.data.data()[c * 16 + i];
                n2 += rq.data.data()[c * 16 + i] * rq.data.data()[c * 16 + i];
            }
            const double expect = dot / std::sqrt(n2);
            REQUIRE(std::abs(rs.delta.data()[v * 16 + i] - expect) < 1e-12);
            REQUIRE(std::abs(rs.delta.data()[v * 16 + i]) <= 1.0 + 1e-9);
        }

    PrototypeSet wrong;
    wrong.mu = Tensor(Shape{2, 5});
    CHECK_THROWS_AS(encode_similarity(wrong, rq), ShapeMismatch);
}

TEST_CASE("responsibility rows sum to one over random inputs", "[mldl]") {
    Rng rng(50);
    for (int rep = 0; rep < 200; ++rep) {
        const std::size_t n = 1 + rng.uniform_index(20);
        const std::size_t c = 2 + rng.uniform_index(8);
        const std::size_t v = 1 + rng.uniform_index(5);
        Tensor samples(Shape{n, c});
        for (std::size_t i = 0; i < samples.size(); ++i) samples.data()[i] = rng.normal();
        Tensor mu(Shape{v, c});
        for (std::size_t i = 0; i < mu.size(); ++i) mu.data()[i] = rng.normal();
        Responsibilities resp = em_step_e(samples, mu, rng.uniform(0.1, 60.0));
        for (std::size_t i = 0; i < n; ++i) {
            double row = 0.0;
            for (std::size_t vi = 0; vi < v; ++vi) {
                const double e = resp.e.data()[i * v + vi];
                REQUIRE(e >= 0.0);
                REQUIRE(e <= 1.0);
                row += e;
            }
            REQUIRE(std::abs(row - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("prototypes capture ordered density strata on a synthetic scene", "[mldl]") {
    Rng rng(51);
    SyntheticSceneSpec spec = make_scene_spec("strata", 64, 64, rng);
    Scene scene = generate_synthetic_scene(spec, 2, rng);

    BackboneConfig bcfg;
    Rng init(7);
    ParamStore params;
    init_backbone_params(params, bcfg, init);

    FeatureMap feat = extract_features(params, bcfg, scene.images[0].first.to_tensor(),
                                       BranchSource::support);
    DensityMap gt = encode_density(scene.images[0].second, 4.0, 64, 64);
    SupportDensityFeature sdf = build_support_density_feature(feat, gt, 4);
    FitResult fit = fit_prototypes(sdf, EmOptions{});
    std::vector<double> levels = density_levels(fit.samples, fit.final_resp);
    REQUIRE(levels.size() == 3);
    CHECK(levels[0] > levels[1]);
    CHECK(levels[1] > levels[2]);
}

TEST_CASE("weighted M-step variant stays valid", "[mldl]") {
    Rng rng(52);
    SupportDensityFeature sdf = random_sdf(8, 6, 6, rng);
    EmOptions opt;
    opt.weighted = true;
    FitResult fit = fit_prototypes(sdf, opt);
    for (std::size_t i = 1; i < fit.objective.size(); ++i)
        REQUIRE(fit.objective[i] >= fit.objective[i - 1] - 1e-9);
    for (std::size_t v = 0; v < fit.prototypes.count(); ++v) {
        double n2 = 0.0;
        for (std::size_t c = 0; c < 8; ++c) {
            const double x = fit.prototypes.mu.data()[v * 8 + c];
            n2 += x * x;
        }
        REQUIRE(std::abs(std::sqrt(n2) - 1.0) < 1e-9);
    }
}
