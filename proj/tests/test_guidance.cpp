#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "crowd/guidance.hpp"
#include "crowd/rng.hpp"
#include "helpers.hpp"

using namespace crowd;

namespace {

SupportDensityFeature random_sdf(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
    SupportDensityFeature sdf;
    sdf.data = Tensor(Shape{c, h, w});
    sdf.density = Tensor(Shape{1, h, w});
    for (std::size_t i = 0; i < h * w; ++i) sdf.density.data()[i] = rng.uniform(0.1, 2.0);
    for (std::size_t i = 0; i < sdf.data.size(); ++i) sdf.data.data()[i] = rng.normal();
    return sdf;
}

Tensor random_image(std::size_t h, std::size_t w, Rng& rng) {
    Tensor t(Shape{3, h, w});
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform();
    return t;
}

DensityMap random_gt(std::size_t h, std::size_t w, std::size_t n_points, Rng& rng) {
    PointAnnotation ann;
    ann.height = h;
    ann.width = w;
    for (std::size_t i = 0; i < n_points; ++i)
        ann.points.push_back({rng.uniform(0.0, w - 0.01), rng.uniform(0.0, h - 0.01)});
    return encode_density(ann, 3.0, h, w);
}

} // namespace

TEST_CASE("encode_global_token is the channelwise spatial sum", "[guidance]") {
    Rng rng(61);
    SupportDensityFeature zero;
    zero.data = Tensor::zeros(Shape{5, 3, 3});
    zero.density = Tensor::zeros(Shape{1, 3, 3});
    GlobalDensityToken zt = encode_global_token(zero);
    REQUIRE(zt.q.shape() == Shape{1, 5});
    for (std::size_t i = 0; i < 5; ++i) CHECK(zt.q.data()[i] == 0.0);

    // single nonzero cell: the token is that cell's channel column
    SupportDensityFeature single;
    single.data = Tensor::zeros(Shape{4, 2, 2});
    single.density = Tensor::zeros(Shape{1, 2, 2});
    for (std::size_t c = 0; c < 4; ++c) single.data.data()[c * 4 + 3] = 0.5 + c;
    GlobalDensityToken st = encode_global_token(single);
    for (std::size_t c = 0; c < 4; ++c) CHECK(st.q.data()[c] == Catch::Approx(0.5 + c));

    SupportDensityFeature rnd = random_sdf(6, 4, 5, rng);
    GlobalDensityToken rt = encode_global_token(rnd);
    for (std::size_t c = 0; c < 6; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < 20; ++i) acc += rnd.data.data()[c * 20 + i];
        REQUIRE(std::abs(rt.q.data()[c] - acc) < 1e-12);
    }
}

TEST_CASE("local_guide masking, shape, and LDSM gradients", "[guidance]") {
    Rng rng(62);
    ModelConfig cfg;
    Rng irng(5);
    ParamStore params = init_model(cfg, irng);

    FeatureMap query;
    query.data = Tensor(Shape{32, 6, 6});
    for (std::size_t i = 0; i < query.data.size(); ++i) query.data.data()[i] = rng.normal();

    // zero out conv1's weights on the similarity input channel: the output
    // must not depend on the plane at all
    Tensor& w1 = params.at("ldg.branch0.conv1.w"); // (32, 33, 3, 3)
    for (std::size_t oc = 0; oc < 32; ++oc)
        for (std::size_t k = 0; k < 9; ++k) w1.data()[(oc * 33 + 0) * 9 + k] = 0.0;
    Tensor plane_a = Tensor::zeros(Shape{1, 6, 6});
    Tensor plane_b(Shape{1, 6, 6});
    for (std::size_t i = 0; i < 36; ++i) plane_b.data()[i] = rng.uniform(-1.0, 1.0);
    Tensor out_a = local_guide(plane_a, query, params, "ldg.branch0", 2);
    Tensor out_b = local_guide(plane_b, query, params, "ldg.branch0", 2);
    for (std::size_t i = 0; i < out_a.size(); ++i) REQUIRE(out_a.data()[i] == out_b.data()[i]);

    // matched padding keeps spatial dims for every dilation rate
    Rng irng2(6);
    ParamStore fresh = init_model(cfg, irng2);
    for (int dr : {1, 2, 3}) {
        Tensor out = local_guide(plane_b, query, fresh, "ldg.branch1", dr);
        REQUIRE(out.shape() == Shape{32, 6, 6});
    }

    // finite differences through the similarity plane
    Tensor plane = plane_b.clone();
    plane.set_requires_grad();
    std::vector<double> analytic;
    {
        GradTape tape;
        Tensor loss = sum_all(local_guide(plane, query, fresh, "ldg.branch0", 2));
        tape.backward(loss);
        analytic = plane.grad();
        plane.zero_grad();
    }
    const double eps = 1e-5;
    for (int c = 0; c < 8; ++c) {
        const std::size_t i = rng.uniform_index(plane.size());
        const double orig = plane.data()[i];
        plane.data()[i] = orig + eps;
        const double lp = sum_all(local_guide(plane, query, fresh, "ldg.branch0", 2)).item();
        plane.data()[i] = orig - eps;
        const double lm = sum_all(local_guide(plane, query, fresh, "ldg.branch0", 2)).item();
        plane.data()[i] = orig;
        const double fd = (lp - lm) / (2.0 * eps);
        const double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-8});
        REQUIRE(std::abs(fd - analytic[i]) / denom < 1e-4);
    }
}

TEST_CASE("global_guide single location and uniform cells", "[guidance]") {
    ModelConfig cfg;
    Rng irng(8);
    ParamStore params = init_model(cfg, irng);
    Rng rng(63);

    // one spatial cell: the only softmax weight is exactly 1
    Tensor la1(Shape{32, 1, 1});
    for (std::size_t i = 0; i < 32; ++i) la1.data()[i] = rng.normal();
    GlobalDensityToken token;
    token.q = Tensor(Shape{1, 32});
    for (std::size_t i = 0; i < 32; ++i) token.q.data()[i] = rng.normal();
    Tensor out1 = global_guide(token, la1, params, cfg);
    // oracle: O = Q + psi(v_row * Wv) with weight exactly 1
    Tensor rows = spatial_rows(la1);
    Tensor vp = matmul(rows, params.at("gdg.wv"));
    Tensor o = add(token.q, add(matmul(vp, params.at("gdg.psi.w")), params.at("gdg.psi.b")));
    for (std::size_t c = 0; c < 32; ++c)
        REQUIRE(out1.data()[c] == Catch::Approx(la1.data()[c] + o.data()[c]).margin(1e-12));

    // all cells identical: O must be independent of the weight distribution
    Tensor la_same(Shape{32, 3, 3});
    for (std::size_t c = 0; c < 32; ++c)
        for (std::size_t i = 0; i < 9; ++i) la_same.data()[c * 9 + i] = la1.data()[c];
    Tensor out_same = global_guide(token, la_same, params, cfg);
    for (std::size_t c = 0; c < 32; ++c)
        for (std::size_t i = 0; i < 9; ++i)
            REQUIRE(out_same.data()[c * 9 + i] ==
                    Catch::Approx(la1.data()[c] + o.data()[c]).margin(1e-10));
}

TEST_CASE("global_guide matches an explicit loop attention oracle", "[guidance]") {
    ModelConfig cfg;
    Rng irng(9);
    ParamStore params = init_model(cfg, irng);
    Rng rng(64);
    const std::size_t C = 32, h = 4, w = 5, N = h * w, da = cfg.effective_attention_dim();

    Tensor la(Shape{C, h, w});
    for (std::size_t i = 0; i < la.size(); ++i) la.data()[i] = rng.normal();
    GlobalDensityToken token;
    token.q = Tensor(Shape{1, C});
    for (std::size_t i = 0; i < C; ++i) token.q.data()[i] = rng.normal();

    Tensor out = global_guide(token, la, params, cfg);

    // explicit loops
    const double* wq = params.at("gdg.wq").data();
    const double* wk = params.at("gdg.wk").data();
    const double* wv = params.at("gdg.wv").data();
    const double* pw = params.at("gdg.psi.w").data();
    const double* pb = params.at("gdg.psi.b").data();
    std::vector<double> qp(da, 0.0);
    for (std::size_t d = 0; d < da; ++d)
        for (std::size_t c = 0; c < C; ++c) qp[d] += token.q.data()[c] * wq[c * da + d];
    std::vector<double> scores(N, 0.0);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t d = 0; d < da; ++d) {
            double kp = 0.0;
            for (std::size_t c = 0; c < C; ++c) kp += la.data()[c * N + i] * wk[c * da + d];
            scores[i] += qp[d] * kp;
        }
    const double inv = 1.0 / std::sqrt(static_cast<double>(da));
    double mx = -1e300;
    for (double& s : scores) {
        s *= inv;
        mx = std::max(mx, s);
    }
    double denom = 0.0;
    std::vector<double> weights(N);
    for (std::size_t i = 0; i < N; ++i) {
        weights[i] = std::exp(scores[i] - mx);
        denom += weights[i];
    }
    double wsum = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        weights[i] /= denom;
        wsum += weights[i];
    }
    REQUIRE(std::abs(wsum - 1.0) < 1e-12);
    std::vector<double> attended(da, 0.0);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t d = 0; d < da; ++d) {
            double vp = 0.0;
            for (std::size_t c = 0; c < C; ++c) vp += la.data()[c * N + i] * wv[c * da + d];
            attended[d] += weights[i] * vp;
        }
    std::vector<double> o(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        o[c] = token.q.data()[c] + pb[c];
        for (std::size_t d = 0; d < da; ++d) o[c] += attended[d] * pw[d * C + c];
    }
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < N; ++i)
            REQUIRE(std::abs(out.data()[c * N + i] - (la.data()[c * N + i] + o[c])) < 1e-10);
}

TEST_CASE("residual identity with zeroed psi", "[guidance]") {
    ModelConfig cfg;
    Rng irng(10);
    ParamStore params = init_model(cfg, irng);
    Tensor& pw = params.at("gdg.psi.w");
    Tensor& pb = params.at("gdg.psi.b");
    for (std::size_t i = 0; i < pw.size(); ++i) pw.data()[i] = 0.0;
    for (std::size_t i = 0; i < pb.size(); ++i) pb.data()[i] = 0.0;

    Rng rng(65);
    Tensor la(Shape{32, 3, 4});
    for (std::size_t i = 0; i < la.size(); ++i) la.data()[i] = rng.normal();
    GlobalDensityToken token;
    token.q = Tensor(Shape{1, 32});
    for (std::size_t i = 0; i < 32; ++i) token.q.data()[i] = rng.normal();

    Tensor out = global_guide(token, la, params, cfg);
    for (std::size_t c = 0; c < 32; ++c)
        for (std::size_t i = 0; i < 12; ++i)
            REQUIRE(out.data()[c * 12 + i] == la.data()[c * 12 + i] + token.q.data()[c]);
}

TEST_CASE("attention pooling is permutation invariant", "[guidance]") {
    ModelConfig cfg;
    Rng irng(11);
    ParamStore params = init_model(cfg, irng);
    Rng rng(66);
    const std::size_t C = 32, h = 3, w = 4, N = h * w;

    Tensor la(Shape{C, h, w});
    for (std::size_t i = 0; i < la.size(); ++i) la.data()[i] = rng.normal();
    GlobalDensityToken token;
    token.q = Tensor(Shape{1, C});
    for (std::size_t i = 0; i < C; ++i) token.q.data()[i] = rng.normal();

    std::vector<std::size_t> perm(N);
    for (std::size_t i = 0; i < N; ++i) perm[i] = i;
    for (std::size_t i = N - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
    Tensor la_perm(Shape{C, h, w});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < N; ++i)
            la_perm.data()[c * N + perm[i]] = la.data()[c * N + i];

    Tensor out = global_guide(token, la, params, cfg);
    Tensor out_perm = global_guide(token, la_perm, params, cfg);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < N; ++i)
            REQUIRE(std::abs(out_perm.data()[c * N + perm[i]] - out.data()[c * N + i]) < 1e-10);
}

TEST_CASE("forward_query determinism and degenerate support", "[guidance]") {
    ModelConfig cfg;
    Rng irng(12);
    ParamStore params = init_model(cfg, irng);
    Rng rng(67);

    Tensor support = random_image(32, 32, rng);
    Tensor query = random_image(32, 32, rng);
    DensityMap gt = random_gt(32, 32, 12, rng);

    ForwardResult a = forward_query(params, cfg, query, support, gt);
    ForwardResult b = forward_query(params, cfg, query, support, gt);
    REQUIRE(a.prediction.shape() == Shape{1, 8, 8});
    for (std::size_t i = 0; i < a.prediction.size(); ++i)
        REQUIRE(a.prediction.data()[i] == b.prediction.data()[i]);

    DensityMap empty_gt;
    empty_gt.grid = Tensor::zeros(Shape{1, 32, 32});
    ForwardOptions fo;
    fo.episode_label = "scene3_support7";
    try {
        forward_query(params, cfg, query, support, empty_gt, fo);
        FAIL("expected AllSamplesDegenerate");
    } catch (const AllSamplesDegenerate& e) {
        CHECK(std::string(e.what()).find("scene3_support7") != std::string::npos);
    }
}

TEST_CASE("EM outputs are gradient constants", "[guidance]") {
    ModelConfig cfg;
    Rng irng(13);
    ParamStore params = init_model(cfg, irng);
    Rng rng(68);
    Tensor support = random_image(32, 32, rng);
    Tensor query = random_image(32, 32, rng);
    DensityMap gt = random_gt(32, 32, 10, rng);

    GradTape tape;
    ForwardResult fr = forward_query(params, cfg, query, support, gt);
    Tensor loss = sum_all(fr.prediction);
    tape.backward(loss);
    // prototypes never join the graph
    CHECK_FALSE(fr.prototypes.mu.requires_grad());
    CHECK(fr.prototypes.mu.grad_if() == nullptr);
    // but model parameters do receive gradients
    double total = 0.0;
    for (const auto& [name, p] : params)
        if (const auto* g = p.grad_if())
            for (double x : *g) total += std::abs(x);
    CHECK(total > 0.0);
}

TEST_CASE("forward_query config variants run and differ", "[guidance]") {
    Rng rng(69);
    Tensor support = random_image(32, 32, rng);
    Tensor query = random_image(32, 32, rng);
    DensityMap gt = random_gt(32, 32, 14, rng);

    auto run = [&](ModelConfig cfg, std::uint64_t seed) {
        Rng irng(seed);
        ParamStore params = init_model(cfg, irng);
        return forward_query(params, cfg, query, support, gt);
    };

    ModelConfig base;
    ForwardResult full = run(base, 99);

    ModelConfig no_ldg = base;
    no_ldg.use_ldg = false;
    ForwardResult wo_ldg = run(no_ldg, 99);
    CHECK_FALSE(wo_ldg.ldsm.defined());

    ModelConfig no_gdg = base;
    no_gdg.use_gdg = false;
    ForwardResult wo_gdg = run(no_gdg, 99);

    ModelConfig tile = base;
    tile.tile_q = true;
    ForwardResult tiled = run(tile, 99);

    ModelConfig shared = base;
    shared.shared_branch_convs = true;
    ForwardResult sh = run(shared, 99);

    ModelConfig v1 = base;
    v1.num_prototypes = 1;
    ForwardResult one = run(v1, 99);

    double d_ldg = 0.0, d_gdg = 0.0, d_tile = 0.0, d_v = 0.0;
    for (std::size_t i = 0; i < full.prediction.size(); ++i) {
        d_ldg += std::abs(full.prediction.data()[i] - wo_ldg.prediction.data()[i]);
        d_gdg += std::abs(full.prediction.data()[i] - wo_gdg.prediction.data()[i]);
        d_tile += std::abs(full.prediction.data()[i] - tiled.prediction.data()[i]);
        d_v += std::abs(full.prediction.data()[i] - one.prediction.data()[i]);
    }
    CHECK(d_ldg > 1e-9);
    CHECK(d_gdg > 1e-9);
    CHECK(d_tile > 1e-9);
    CHECK(d_v > 1e-9);
    CHECK(sh.prediction.size() == full.prediction.size());
}

TEST_CASE("fixed prototypes skip refitting", "[guidance]") {
    ModelConfig cfg;
    Rng irng(14);
    ParamStore params = init_model(cfg, irng);
    Rng rng(70);
    Tensor support = random_image(32, 32, rng);
    Tensor query = random_image(32, 32, rng);
    DensityMap gt = random_gt(32, 32, 9, rng);

    ForwardResult first = forward_query(params, cfg, query, support, gt);
    ForwardOptions fo;
    fo.fixed_prototypes = &first.prototypes;
    ForwardResult second = forward_query(params, cfg, query, support, gt, fo);
    CHECK(second.em_iterations == 0);
    for (std::size_t i = 0; i < first.prediction.size(); ++i)
        REQUIRE(first.prediction.data()[i] == second.prediction.data()[i]);
}
