#include <catch2/catch_amalgamated.hpp>

#include "dq/nn.hpp"

using namespace dq;

namespace {

// Direct convolution oracle, no im2col.
Tensor conv_naive(const Tensor& x, const Tensor& w, const Tensor& b, int cout, int k, int stride,
                  int pad) {
    int N = x.dim(0), cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    int ho = (H + 2 * pad - k) / stride + 1, wo = (W + 2 * pad - k) / stride + 1;
    Tensor out({N, cout, ho, wo});
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < cout; ++co)
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow) {
                    double s = b.v[static_cast<size_t>(co)];
                    for (int ci = 0; ci < cin; ++ci)
                        for (int kh = 0; kh < k; ++kh)
                            for (int kw = 0; kw < k; ++kw) {
                                int h = oh * stride - pad + kh, ww = ow * stride - pad + kw;
                                if (h < 0 || h >= H || ww < 0 || ww >= W) continue;
                                s += static_cast<double>(x.at4(n, ci, h, ww)) *
                                     w.v[static_cast<size_t>((co * cin + ci) * k * k + kh * k + kw)];
                            }
                    out.at4(n, co, oh, ow) = static_cast<float>(s);
                }
    return out;
}

double weighted_sum(const Tensor& y, const Tensor& c) {
    double s = 0;
    for (size_t i = 0; i < y.v.size(); ++i) s += static_cast<double>(y.v[i]) * c.v[i];
    return s;
}

}  // namespace

TEST_CASE("conv2d: matches direct convolution", "[nn]") {
    Rng rng(1);
    for (auto [cin, cout, k, stride, pad, hw] :
         {std::tuple{3, 5, 3, 1, 1, 6}, {2, 4, 3, 2, 1, 8}, {4, 2, 1, 1, 0, 5}}) {
        Conv2d c;
        c.init("c", Role::other, cin, cout, k, stride, pad, rng);
        c.b.w.fill_normal(rng, 0.5f);
        Tensor x({2, cin, hw, hw});
        x.fill_normal(rng);
        Tensor got = c.forward(x, c.w.w, false);
        Tensor want = conv_naive(x, c.w.w, c.b.w, cout, k, stride, pad);
        REQUIRE(got.same_shape(want));
        REQUIRE(max_abs_diff(got, want) < 1e-4);
    }
}

TEST_CASE("conv2d: gradients match finite differences", "[nn]") {
    Rng rng(2);
    Conv2d c;
    c.init("c", Role::other, 2, 3, 3, 2, 1, rng);
    c.b.w.fill_normal(rng, 0.3f);
    Tensor x({2, 2, 6, 6});
    x.fill_normal(rng);
    Tensor y = c.forward(x, c.w.w, true);
    Tensor cw(y.dims);
    cw.fill_normal(rng);

    Tensor gw;
    c.b.g.zero();
    Tensor gx = c.backward(cw, gw);

    const double h = 1e-2;
    auto loss = [&](const Tensor& xx) { return weighted_sum(c.forward(xx, c.w.w, false), cw); };
    for (int64_t i : {0l, 7l, 23l, 100l, x.numel() - 1}) {
        Tensor xp = x, xm = x;
        xp.at(i) += h;
        xm.at(i) -= h;
        double fd = (loss(xp) - loss(xm)) / (2 * h);
        REQUIRE(gx.at(i) == Catch::Approx(fd).margin(1e-3).epsilon(2e-2));
    }
    for (int64_t i : {0l, 5l, 17l, c.w.w.numel() - 1}) {
        Tensor save = c.w.w;
        c.w.w.at(i) += h;
        double lp = weighted_sum(c.forward(x, c.w.w, false), cw);
        c.w.w = save;
        c.w.w.at(i) -= h;
        double lm = weighted_sum(c.forward(x, c.w.w, false), cw);
        c.w.w = save;
        REQUIRE(gw.at(i) == Catch::Approx((lp - lm) / (2 * h)).margin(1e-3).epsilon(2e-2));
    }
    for (int64_t i : {0l, 2l}) {
        Tensor save = c.b.w;
        c.b.w.at(i) += h;
        double lp = weighted_sum(c.forward(x, c.w.w, false), cw);
        c.b.w = save;
        c.b.w.at(i) -= h;
        double lm = weighted_sum(c.forward(x, c.w.w, false), cw);
        c.b.w = save;
        REQUIRE(c.b.g.at(i) == Catch::Approx((lp - lm) / (2 * h)).margin(1e-3).epsilon(2e-2));
    }
}

TEST_CASE("linear: hand oracle and row-batch invariance", "[nn]") {
    Rng rng(3);
    Linear l;
    l.init("l", Role::other, 2, 2, rng);
    l.w.w.v = {1.0f, 2.0f, -0.5f, 0.25f};  // [[1,2],[-0.5,0.25]]
    l.b.w.v = {0.1f, -0.1f};
    Tensor x({1, 2});
    x.v = {3.0f, -1.0f};
    Tensor y = l.forward(x, l.w.w, false);
    REQUIRE(y.v[0] == Catch::Approx(1 * 3 + 2 * -1 + 0.1));
    REQUIRE(y.v[1] == Catch::Approx(-0.5 * 3 + 0.25 * -1 - 0.1));

    // Each row's bits must not depend on what else is in the batch.
    Linear big;
    big.init("b", Role::other, 32, 512, rng);
    Tensor rows({3, 32});
    rows.fill_normal(rng);
    Tensor batch = big.forward(rows, big.w.w, false);
    for (int i = 0; i < 3; ++i) {
        Tensor one({1, 32});
        std::copy_n(rows.data() + i * 32, 32, one.data());
        Tensor yi = big.forward(one, big.w.w, false);
        for (int j = 0; j < 512; ++j)
            REQUIRE(yi.v[static_cast<size_t>(j)] == batch.v[static_cast<size_t>(i) * 512 + j]);
    }
}

TEST_CASE("linear: gradients match finite differences", "[nn]") {
    Rng rng(4);
    Linear l;
    l.init("l", Role::other, 5, 4, rng);
    Tensor x({3, 5});
    x.fill_normal(rng);
    Tensor y = l.forward(x, l.w.w, true);
    Tensor cw(y.dims);
    cw.fill_normal(rng);
    Tensor gw;
    l.b.g.zero();
    Tensor gx = l.backward(cw, gw);
    const double h = 1e-2;
    for (int64_t i : {0l, 7l, 14l}) {
        Tensor xp = x, xm = x;
        xp.at(i) += h;
        xm.at(i) -= h;
        double fd = (weighted_sum(l.forward(xp, l.w.w, false), cw) -
                     weighted_sum(l.forward(xm, l.w.w, false), cw)) / (2 * h);
        REQUIRE(gx.at(i) == Catch::Approx(fd).margin(1e-3).epsilon(2e-2));
    }
    for (int64_t i : {0l, 9l, 19l}) {
        Tensor save = l.w.w;
        l.w.w.at(i) += h;
        double lp = weighted_sum(l.forward(x, l.w.w, false), cw);
        l.w.w = save;
        l.w.w.at(i) -= h;
        double lm = weighted_sum(l.forward(x, l.w.w, false), cw);
        l.w.w = save;
        REQUIRE(gw.at(i) == Catch::Approx((lp - lm) / (2 * h)).margin(1e-3).epsilon(2e-2));
    }
}

TEST_CASE("groupnorm: normalizes per group and matches finite differences", "[nn]") {
    Rng rng(5);
    GroupNorm gn;
    gn.init("gn", Role::other, 6, 2);
    Tensor x({2, 6, 4, 4});
    x.fill_normal(rng, 2.0f);
    x.v[0] += 5.0f;
    Tensor y = gn.forward(x, true);
    for (int n = 0; n < 2; ++n)
        for (int g = 0; g < 2; ++g) {
            double s = 0, s2 = 0;
            for (int c = g * 3; c < (g + 1) * 3; ++c)
                for (int i = 0; i < 16; ++i) {
                    float v = y.at4(n, c, i / 4, i % 4);
                    s += v;
                    s2 += static_cast<double>(v) * v;
                }
            double m = s / 48, var = s2 / 48 - m * m;
            REQUIRE(std::fabs(m) < 1e-4);
            REQUIRE(var == Catch::Approx(1.0).epsilon(2e-3));
        }

    Tensor cw(y.dims);
    cw.fill_normal(rng);
    gn.gamma.g.zero();
    gn.beta.g.zero();
    Tensor gx = gn.backward(cw);
    const double h = 1e-2;
    for (int64_t i : {0l, 33l, 95l, x.numel() - 1}) {
        Tensor xp = x, xm = x;
        xp.at(i) += h;
        xm.at(i) -= h;
        double fd = (weighted_sum(gn.forward(xp, false), cw) -
                     weighted_sum(gn.forward(xm, false), cw)) / (2 * h);
        REQUIRE(gx.at(i) == Catch::Approx(fd).margin(2e-3).epsilon(3e-2));
    }
    for (int64_t i : {0l, 3l, 5l}) {
        Tensor save = gn.gamma.w;
        gn.gamma.w.at(i) += h;
        double lp = weighted_sum(gn.forward(x, false), cw);
        gn.gamma.w = save;
        gn.gamma.w.at(i) -= h;
        double lm = weighted_sum(gn.forward(x, false), cw);
        gn.gamma.w = save;
        REQUIRE(gn.gamma.g.at(i) == Catch::Approx((lp - lm) / (2 * h)).margin(2e-3).epsilon(3e-2));
    }
}

TEST_CASE("silu: derivative matches finite differences", "[nn]") {
    SiLU s;
    Tensor x({1, 8});
    x.v = {-3.0f, -1.0f, -0.1f, 0.0f, 0.1f, 1.0f, 3.0f, 10.0f};
    Tensor y = s.forward(x, true);
    REQUIRE(y.v[3] == 0.0f);
    REQUIRE(y.v[5] == Catch::Approx(1.0 / (1 + std::exp(-1.0))));
    Tensor ones(y.dims);
    ones.fill(1.0f);
    Tensor g = s.backward(ones);
    const double h = 1e-3;
    for (int64_t i = 0; i < 8; ++i) {
        Tensor xp = x, xm = x;
        xp.at(i) += h;
        xm.at(i) -= h;
        double fd = (s.forward(xp, false).v[static_cast<size_t>(i)] -
                     s.forward(xm, false).v[static_cast<size_t>(i)]) / (2 * h);
        REQUIRE(g.at(i) == Catch::Approx(fd).margin(1e-3));
    }
}

TEST_CASE("embedding: lookup and scatter-add gradient", "[nn]") {
    Rng rng(6);
    Embedding e;
    e.init("e", Role::other, 4, 3, rng);
    Tensor y = e.forward({2, 0, 2}, true);
    for (int j = 0; j < 3; ++j) {
        REQUIRE(y.v[static_cast<size_t>(j)] == e.table.w.v[static_cast<size_t>(2 * 3 + j)]);
        REQUIRE(y.v[static_cast<size_t>(6 + j)] == e.table.w.v[static_cast<size_t>(2 * 3 + j)]);
    }
    Tensor g({3, 3});
    for (size_t i = 0; i < 9; ++i) g.v[i] = static_cast<float>(i + 1);
    e.table.g.zero();
    e.backward(g);
    // row 2 receives rows 0 and 2 of g; row 0 receives row 1; others zero.
    REQUIRE(e.table.g.v[6] == Catch::Approx(1 + 7));
    REQUIRE(e.table.g.v[0] == Catch::Approx(4));
    REQUIRE(e.table.g.v[9] == 0.0f);
    REQUIRE_THROWS_AS(e.forward({4}, false), Error);
}

TEST_CASE("upsample and concat: forward oracle and adjoint backward", "[nn]") {
    Rng rng(7);
    Tensor x({1, 2, 3, 3});
    x.fill_normal(rng);
    Tensor y = upsample_nearest2x(x);
    REQUIRE(y.at4(0, 1, 5, 4) == x.at4(0, 1, 2, 2));
    REQUIRE(y.at4(0, 0, 0, 1) == x.at4(0, 0, 0, 0));
    Tensor gy(y.dims);
    gy.fill_normal(rng);
    Tensor gx = upsample_nearest2x_backward(gy);
    double lhs = 0, rhs = 0;
    for (size_t i = 0; i < gy.v.size(); ++i) lhs += static_cast<double>(gy.v[i]) * y.v[i];
    for (size_t i = 0; i < gx.v.size(); ++i) rhs += static_cast<double>(gx.v[i]) * x.v[i];
    REQUIRE(lhs == Catch::Approx(rhs).epsilon(1e-5));

    Tensor a({2, 2, 3, 3}), b({2, 3, 3, 3});
    a.fill_normal(rng);
    b.fill_normal(rng);
    Tensor cat = concat_channels(a, b);
    REQUIRE(cat.at4(1, 4, 2, 2) == b.at4(1, 2, 2, 2));
    Tensor ga, gb;
    split_channels_backward(cat, 2, ga, gb);
    REQUIRE(max_abs_diff(ga, a) == 0.0);
    REQUIRE(max_abs_diff(gb, b) == 0.0);
}

TEST_CASE("adam: two dense steps match hand computation", "[nn]") {
    float w = 1.0f, g = 0.0f;
    Adam opt;
    opt.add_dense(&w, &g, 1, 0.1);
    double m = 0, v = 0, wd = 1.0;
    int t = 0;
    for (double gi : {0.5, -0.3}) {
        g = static_cast<float>(gi);
        opt.step();
        m = 0.9 * m + 0.1 * gi;
        v = 0.999 * v + 0.001 * gi * gi;
        ++t;
        double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
        wd -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        REQUIRE(w == Catch::Approx(wd).epsilon(1e-5));
    }
}

TEST_CASE("adam: sparse slots only update touched entries, with per-entry correction", "[nn]") {
    std::vector<float> w = {1.0f, 1.0f}, g = {0.5f, 0.5f};
    std::vector<uint8_t> touched = {1, 0};
    Adam sparse;
    sparse.add_sparse(w.data(), g.data(), 2, 0.1, touched.data());
    sparse.step();
    REQUIRE(w[1] == 1.0f);
    REQUIRE(w[0] < 1.0f);

    // The touched entry must evolve exactly like a dense scalar seeing the
    // same gradient sequence.
    float wd = 1.0f, gd = 0.5f;
    Adam dense;
    dense.add_dense(&wd, &gd, 1, 0.1);
    dense.step();
    REQUIRE(w[0] == Catch::Approx(wd));

    // Second step touches the other entry: its bias correction starts at t=1.
    touched = {0, 1};
    sparse.step();
    REQUIRE(w[1] == Catch::Approx(wd));
}

TEST_CASE("adam: frozen elements are skipped entirely", "[nn]") {
    std::vector<float> w = {1.0f, 1.0f}, g = {0.7f, 0.7f};
    std::vector<uint8_t> frozen = {0, 1};
    Adam opt;
    opt.add_dense(w.data(), g.data(), 2, 0.1, frozen.data());
    opt.step();
    opt.step();
    REQUIRE(w[0] != 1.0f);
    REQUIRE(w[1] == 1.0f);
}

TEST_CASE("sinusoidal embedding: unit circle per frequency, distinct timesteps", "[nn]") {
    const int dim = 16;
    Tensor a = sinusoidal_embed_batch({0, 1, 50, 99}, dim);
    for (int r = 0; r < 4; ++r)
        for (int i = 0; i < dim / 2; ++i) {
            float s = a.v[static_cast<size_t>(r) * dim + i];
            float c = a.v[static_cast<size_t>(r) * dim + dim / 2 + i];
            REQUIRE(s * s + c * c == Catch::Approx(1.0).epsilon(1e-5));
        }
    for (int r = 1; r < 4; ++r) {
        double d = 0;
        for (int j = 0; j < dim; ++j)
            d = std::max(d, std::fabs(static_cast<double>(a.v[static_cast<size_t>(r) * dim + j]) - a.v[static_cast<size_t>(j)]));
        REQUIRE(d > 1e-3);
    }
}
