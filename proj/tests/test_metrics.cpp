#include <catch2/catch_amalgamated.hpp>

#include "dq/eval.hpp"

using namespace dq;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.base = 8;
    c.img = 8;
    c.classes = 3;
    c.sin_dim = 8;
    c.emb_dim = 8;
    c.time_hidden = 16;
    c.gn_groups = 4;
    return c;
}

DenoiserModel lively_model(uint64_t seed) {
    Rng rng(seed);
    DenoiserModel m(tiny_cfg(), false, rng);
    m.find_param("out_conv.w")->w.fill_normal(rng, 0.2f);
    m.find_param("out_conv.b")->w.fill_normal(rng, 0.05f);
    return m;
}

FeatureExtractor quick_fx(const DataSet& data, int classes) {
    FxTrainConfig c;
    c.iters = 200;
    return train_feature_extractor(data, classes, c);
}

// Two-pass SSIM with explicit per-window mean/variance passes: an independent
// check on the production single-pass accumulation.
double oracle_ssim(const Tensor& a, const Tensor& b, int win = 7) {
    int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    double total = 0;
    int64_t cnt = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y + win <= H; ++y)
                for (int x = 0; x + win <= W; ++x) {
                    double ma = 0, mb = 0;
                    for (int dy = 0; dy < win; ++dy)
                        for (int dx = 0; dx < win; ++dx) {
                            ma += a.at4(n, c, y + dy, x + dx);
                            mb += b.at4(n, c, y + dy, x + dx);
                        }
                    ma /= win * win;
                    mb /= win * win;
                    double va = 0, vb = 0, cov = 0;
                    for (int dy = 0; dy < win; ++dy)
                        for (int dx = 0; dx < win; ++dx) {
                            double da = a.at4(n, c, y + dy, x + dx) - ma;
                            double db = b.at4(n, c, y + dy, x + dx) - mb;
                            va += da * da;
                            vb += db * db;
                            cov += da * db;
                        }
                    va /= win * win;
                    vb /= win * win;
                    cov /= win * win;
                    const double c1 = 1e-4, c2 = 9e-4;
                    total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                             ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    ++cnt;
                }
    return total / static_cast<double>(cnt);
}

// Closed-form Fréchet distance for 2-d features: for 2x2 SPD products,
// tr(sqrt(A)) = sqrt(tr A + 2 sqrt(det A)), so no eigensolver is needed.
double oracle_fd_2d(const Tensor& fa, const Tensor& fb) {
    auto fit = [](const Tensor& f, double mu[2], double s[3]) {
        int n = f.dim(0);
        mu[0] = mu[1] = 0;
        for (int i = 0; i < n; ++i) {
            mu[0] += f.v[static_cast<size_t>(i) * 2];
            mu[1] += f.v[static_cast<size_t>(i) * 2 + 1];
        }
        mu[0] /= n;
        mu[1] /= n;
        s[0] = s[1] = s[2] = 0;  // xx, yy, xy
        for (int i = 0; i < n; ++i) {
            double dx = f.v[static_cast<size_t>(i) * 2] - mu[0];
            double dy = f.v[static_cast<size_t>(i) * 2 + 1] - mu[1];
            s[0] += dx * dx;
            s[1] += dy * dy;
            s[2] += dx * dy;
        }
        s[0] = s[0] / (n - 1) + 1e-6;
        s[1] = s[1] / (n - 1) + 1e-6;
        s[2] /= n - 1;
    };
    double m1[2], m2[2], s1[3], s2[3];
    fit(fa, m1, s1);
    fit(fb, m2, s2);
    // A = S1*S2; tr A and det A from the 2x2 entries.
    double a00 = s1[0] * s2[0] + s1[2] * s2[2];
    double a11 = s1[2] * s2[2] + s1[1] * s2[1];
    double tr_a = a00 + a11;
    double det_a = (s1[0] * s1[1] - s1[2] * s1[2]) * (s2[0] * s2[1] - s2[2] * s2[2]);
    double tr_sqrt = std::sqrt(tr_a + 2.0 * std::sqrt(std::max(0.0, det_a)));
    double dmu = (m1[0] - m2[0]) * (m1[0] - m2[0]) + (m1[1] - m2[1]) * (m1[1] - m2[1]);
    return dmu + s1[0] + s1[1] + s2[0] + s2[1] - 2.0 * tr_sqrt;
}

}  // namespace

TEST_CASE("metrics: ssim identity, constants, and reference oracle", "[metrics]") {
    Rng rng(1);
    Tensor a({1, 1, 12, 12});
    for (auto& v : a.v) v = static_cast<float>(rng.uniform());
    REQUIRE(ssim(a, a) == Catch::Approx(1.0).margin(1e-12));

    Tensor c1({1, 1, 8, 8}), c2({1, 1, 8, 8});
    c1.fill(0.37f);
    c2.fill(0.37f);
    REQUIRE(ssim(c1, c2) == Catch::Approx(1.0).margin(1e-12));

    // Binary image against its inverse, checked against the two-pass oracle.
    Tensor bin({1, 1, 10, 10}), inv({1, 1, 10, 10});
    for (size_t i = 0; i < bin.v.size(); ++i) {
        bin.v[i] = (rng.uniform() < 0.5) ? 0.0f : 1.0f;
        inv.v[i] = 1.0f - bin.v[i];
    }
    REQUIRE(ssim(bin, inv) == Catch::Approx(oracle_ssim(bin, inv)).margin(1e-6));
    REQUIRE(ssim(bin, inv) < 0.0);  // anticorrelated windows go negative

    // Random pairs: oracle match, symmetry, bounds.
    for (int rep = 0; rep < 10; ++rep) {
        Tensor x({2, 1, 9, 9}), y({2, 1, 9, 9});
        for (auto& v : x.v) v = static_cast<float>(rng.uniform());
        for (auto& v : y.v) v = static_cast<float>(rng.uniform());
        double s = ssim(x, y);
        REQUIRE(s == Catch::Approx(oracle_ssim(x, y)).margin(1e-6));
        REQUIRE(ssim(y, x) == Catch::Approx(s).margin(1e-12));
        REQUIRE(s >= -1.0);
        REQUIRE(s <= 1.0);
    }

    Tensor small({1, 1, 5, 5});
    REQUIRE_THROWS_AS(ssim(small, small), Error);
    Tensor other({1, 1, 12, 13});
    REQUIRE_THROWS_AS(ssim(a, other), Error);
}

TEST_CASE("metrics: frechet distance identity, symmetry, closed forms", "[metrics]") {
    Rng rng(2);
    Tensor f({64, 8});
    f.fill_normal(rng);
    REQUIRE(frechet_distance(f, f) <= 1e-6);

    Tensor g({48, 8});
    g.fill_normal(rng);
    for (auto& v : g.v) v = 0.7f * v + 0.3f;
    double ab = frechet_distance(f, g);
    double ba = frechet_distance(g, f);
    REQUIRE(ab > 0.0);
    REQUIRE(ab == Catch::Approx(ba).epsilon(1e-8));

    // 2-d case against the eigensolver-free closed form.
    for (int rep = 0; rep < 8; ++rep) {
        Tensor p({40, 2}), q({30, 2});
        p.fill_normal(rng);
        q.fill_normal(rng);
        for (size_t i = 0; i < q.v.size(); i += 2) q.v[i] = 1.6f * q.v[i] - 0.8f;
        REQUIRE(frechet_distance(p, q) ==
                Catch::Approx(oracle_fd_2d(p, q)).margin(1e-8).epsilon(1e-8));
    }

    // Unit Gaussian clouds with mean offset d: fd -> d^2 for large n.
    const double d = 1.5;
    Tensor u({4000, 4}), w({4000, 4});
    u.fill_normal(rng);
    w.fill_normal(rng);
    for (size_t i = 0; i < w.v.size(); i += 4) w.v[i] += static_cast<float>(d);
    REQUIRE(frechet_distance(u, w) == Catch::Approx(d * d).epsilon(0.05));

    Tensor lone({1, 4});
    REQUIRE_THROWS_AS(frechet_distance(lone, u), Error);
    Tensor wrong({10, 3});
    REQUIRE_THROWS_AS(frechet_distance(u, wrong), Error);
}

TEST_CASE("metrics: feature extractor trains deterministically and separates classes",
          "[metrics]") {
    DataSet data = make_synthetic_set(96, 3, 16, 21);
    FeatureExtractor fx = quick_fx(data, 3);
    FeatureExtractor fx2 = quick_fx(data, 3);
    REQUIRE(fx.fingerprint() == fx2.fingerprint());

    // Training accuracy well above the 1/3 chance level.
    int hit = 0;
    for (size_t i = 0; i < data.size(); ++i) {
        FeatureMaps fm = fx.features(data.imgs[i]);
        Tensor logits = fx.head.forward(fm.pooled, fx.head.w.w, false);
        int best = 0;
        for (int c = 1; c < 3; ++c)
            if (logits.v[static_cast<size_t>(c)] > logits.v[static_cast<size_t>(best)]) best = c;
        hit += (best == data.labels[i]) ? 1 : 0;
    }
    REQUIRE(hit > static_cast<int>(data.size()) / 2);

    FeatureMaps fm = fx.features(stack_batch(data, {0, 1, 2, 3}));
    REQUIRE(fm.pooled.dims == std::vector<int>{4, 32});
    REQUIRE(fm.pooled.all_finite());
    REQUIRE(fm.f1.dim(2) == 8);  // stride-2 halving from 16
    REQUIRE(fm.f2.dim(2) == 4);
}

TEST_CASE("metrics: perceptual distance identity, symmetry, monotonicity", "[metrics]") {
    DataSet data = make_synthetic_set(96, 3, 16, 22);
    FeatureExtractor fx = quick_fx(data, 3);

    Tensor a = data.imgs[5];
    REQUIRE(perceptual_feature_distance(fx, a, a) == 0.0);

    Tensor b = data.imgs[40];
    double ab = perceptual_feature_distance(fx, a, b);
    REQUIRE(ab > 0.0);
    REQUIRE(perceptual_feature_distance(fx, b, a) == Catch::Approx(ab).margin(1e-15));

    // Fixed noise direction scaled up: distance never decreases.
    Rng rng(3);
    Tensor dir(a.dims);
    dir.fill_normal(rng);
    double prev = 0.0;
    for (double sigma : {0.0, 0.05, 0.1, 0.2, 0.4, 0.8}) {
        Tensor noisy(a.dims);
        for (size_t i = 0; i < a.v.size(); ++i)
            noisy.v[i] = a.v[i] + static_cast<float>(sigma) * dir.v[i];
        double p = perceptual_feature_distance(fx, a, noisy);
        REQUIRE(p >= prev - 1e-9);
        prev = p;
    }
    REQUIRE(prev > 0.0);

    Tensor wrong({1, 1, 8, 8});
    REQUIRE_THROWS_AS(perceptual_feature_distance(fx, a, wrong), Error);
}

TEST_CASE("metrics: paired evaluation on identical models is a perfect score", "[metrics]") {
    DenoiserModel m = lively_model(23);
    auto sched = build_schedule(8, 1e-4, 0.2);
    DataSet data = make_synthetic_set(48, 3, 8, 24);
    FeatureExtractor fx = quick_fx(data, 3);

    EvalConfig ec;
    ec.images = 6;
    ec.seed = 300;
    MetricReport rep = evaluate_models(m, nullptr, m, nullptr, sched, fx, &data, ec);
    REQUIRE(rep.fd_fp <= 1e-6);
    REQUIRE(rep.ssim_mean == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(rep.pfd_mean <= 1e-9);
    REQUIRE(rep.fd_data >= 0.0);
    REQUIRE(rep.data_images == 48);
    int n = 0;
    for (const auto& c : rep.per_cond) n += c.count;
    REQUIRE(n == 6);

    // The substitution notice and identifying fingerprints are in the text.
    std::string txt = rep.text();
    REQUIRE(txt.find("NOTE:") != std::string::npos);
    REQUIRE(txt.find("feature") != std::string::npos);
    REQUIRE(txt.find("extractor") != std::string::npos);
    REQUIRE(txt.find(strfmt("%016llx", static_cast<unsigned long long>(fx.fingerprint()))) !=
            std::string::npos);

    // Determinism: identical numbers on rerun.
    MetricReport rep2 = evaluate_models(m, nullptr, m, nullptr, sched, fx, &data, ec);
    REQUIRE(rep2.fd_fp == rep.fd_fp);
    REQUIRE(rep2.ssim_mean == rep.ssim_mean);
    REQUIRE(rep2.pfd_mean == rep.pfd_mean);
    REQUIRE(rep2.fd_data == rep.fd_data);
}

TEST_CASE("metrics: paired evaluation of a quantized model", "[metrics]") {
    DenoiserModel m = lively_model(25);
    auto sched = build_schedule(8, 1e-4, 0.2);
    DataSet data = make_synthetic_set(48, 3, 8, 26);
    FeatureExtractor fx = quick_fx(data, 3);

    QuantConfig qc;
    QuantizedModel qm = attach_quantizers(m, qc, 8);
    {
        // observe full trajectories so every timestep entry is calibrated
        qm.begin_observe();
        EpsFn eps = qmodel_eps(qm);
        sample_batch(eps, sched, 1, 8, {0, 1, 2, 0, 1, 2}, {1, 2, 3, 4, 5, 6});
        qm.end_observe();
    }

    EvalConfig ec;
    ec.images = 6;
    ec.seed = 400;
    MetricReport rep = evaluate_pair(qm, nullptr, m, nullptr, sched, fx, nullptr, ec);
    REQUIRE(rep.fd_fp >= 0.0);
    REQUIRE(rep.ssim_mean < 1.0);  // 4-bit weights leave a visible footprint
    REQUIRE(rep.pfd_mean >= 0.0);
    REQUIRE(rep.fd_data == -1.0);
    REQUIRE(rep.q_fp == qm.net.fingerprint());
    REQUIRE(rep.ref_fp == m.fingerprint());

    // Schedule linkage errors surface through the cache compatibility check.
    TimeCache tc = build_time_cache(m, sched);
    auto sched2 = build_schedule(8, 1e-4, 0.19);
    DenoiserModel stripped = strip_time_layers(m);
    REQUIRE_THROWS_AS(evaluate_models(stripped, &tc, m, nullptr, sched2, fx, nullptr, ec), Error);

    EvalConfig bad = ec;
    bad.images = 1;
    REQUIRE_THROWS_AS(evaluate_pair(qm, nullptr, m, nullptr, sched, fx, nullptr, bad), Error);
}
