#pragma once

#include <cmath>
#include <vector>

#include "dq/data.hpp"
#include "dq/nn.hpp"

namespace dq {

// Small convolutional classifier used as the shared feature space for the
// fidelity metrics. Trained once on the synthetic set with a fixed seed,
// then frozen; its fingerprint is recorded in every metric report so numbers
// are only ever compared within the same feature space.
struct FeatureMaps {
    Tensor f1, f2, f3;  // post-activation maps, coarse to coarser
    Tensor pooled;      // [N, feat_dim] global average pool of f3
};

inline Tensor global_avg_pool(const Tensor& x) {
    check(x.ndim() == 4, "global_avg_pool: want NCHW");
    int N = x.dim(0), C = x.dim(1);
    int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
    Tensor out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* p = x.data() + x.idx4(n, c, 0, 0);
            double s = 0;
            for (int64_t i = 0; i < hw; ++i) s += p[i];
            out.v[static_cast<size_t>(n) * C + c] = static_cast<float>(s / static_cast<double>(hw));
        }
    return out;
}

struct FeatureExtractor {
    static constexpr int kFeatDim = 32;
    int img_ch = 1;
    int classes = 0;
    Conv2d c1, c2, c3;
    Linear head;  // classification head, used only while training the extractor

    void build(int img_ch_, int classes_, Rng& rng) {
        img_ch = img_ch_;
        classes = classes_;
        c1.init("fx.c1", Role::other, img_ch, 16, 3, 2, 1, rng);
        c2.init("fx.c2", Role::other, 16, kFeatDim, 3, 2, 1, rng);
        c3.init("fx.c3", Role::other, kFeatDim, kFeatDim, 3, 1, 1, rng);
        head.init("fx.head", Role::other, kFeatDim, classes, rng);
    }

    uint64_t fingerprint() const {
        Fingerprint fp;
        for (const Param* p : {&c1.w, &c1.b, &c2.w, &c2.b, &c3.w, &c3.b, &head.w, &head.b})
            fp.update_vec(p->w.v);
        return fp.value();
    }

    // train=false everywhere: the extractor is frozen at metric time, and the
    // shared SiLU instances would otherwise hold per-call cache state.
    FeatureMaps features(const Tensor& x) {
        check(x.ndim() == 4 && x.dim(1) == img_ch, "feature extractor: bad input shape");
        SiLU a;
        FeatureMaps fm;
        fm.f1 = a.forward(c1.forward(x, c1.w.w, false), false);
        fm.f2 = a.forward(c2.forward(fm.f1, c2.w.w, false), false);
        fm.f3 = a.forward(c3.forward(fm.f2, c3.w.w, false), false);
        fm.pooled = global_avg_pool(fm.f3);
        return fm;
    }

    Tensor logits_train(const Tensor& x, SiLU& a1, SiLU& a2, SiLU& a3) {
        Tensor h = a1.forward(c1.forward(x, c1.w.w, true), true);
        h = a2.forward(c2.forward(h, c2.w.w, true), true);
        h = a3.forward(c3.forward(h, c3.w.w, true), true);
        pool_cache = h.dims;
        return head.forward(global_avg_pool(h), head.w.w, true);
    }

    std::vector<int> pool_cache;  // f3 shape, to spread the pooled grad back out
};

// Mean softmax cross-entropy; fills dlogits.
inline double cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                            Tensor& dlogits) {
    int N = logits.dim(0), C = logits.dim(1);
    check(static_cast<int>(labels.size()) == N, "cross_entropy: label count mismatch");
    dlogits = Tensor(logits.dims);
    double loss = 0;
    for (int i = 0; i < N; ++i) {
        const float* row = logits.data() + static_cast<int64_t>(i) * C;
        float mx = row[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        double z = 0;
        for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
        loss -= static_cast<double>(row[labels[static_cast<size_t>(i)]]) - mx - std::log(z);
        for (int c = 0; c < C; ++c) {
            double p = std::exp(static_cast<double>(row[c]) - mx) / z;
            double y = (c == labels[static_cast<size_t>(i)]) ? 1.0 : 0.0;
            dlogits.v[static_cast<size_t>(i) * C + c] = static_cast<float>((p - y) / N);
        }
    }
    return loss / N;
}

struct FxTrainConfig {
    int iters = 300;
    int batch = 16;
    double lr = 1e-3;
    uint64_t seed = 19;
};

inline void save_extractor(const FeatureExtractor& fx, const std::string& path) {
    BinWriter w(path);
    w.raw("DQFEXT01", 8);
    w.u32(1);  // version
    w.u32(static_cast<uint32_t>(fx.img_ch));
    w.u32(static_cast<uint32_t>(fx.classes));
    for (const Param* p : {&fx.c1.w, &fx.c1.b, &fx.c2.w, &fx.c2.b, &fx.c3.w, &fx.c3.b, &fx.head.w,
                           &fx.head.b})
        w.f32s(p->w.v);
    w.finish_with_fingerprint();
}

inline FeatureExtractor load_extractor(const std::string& path) {
    BinReader r(path);
    r.expect_magic("DQFEXT01");
    uint32_t ver = r.u32();
    check(ver == 1, strfmt("extractor %s: unsupported version %u", path.c_str(), ver));
    int img_ch = static_cast<int>(r.u32());
    int classes = static_cast<int>(r.u32());
    Rng rng(0);
    FeatureExtractor fx;
    fx.build(img_ch, classes, rng);
    for (Param* p : {&fx.c1.w, &fx.c1.b, &fx.c2.w, &fx.c2.b, &fx.c3.w, &fx.c3.b, &fx.head.w,
                     &fx.head.b}) {
        auto v = r.f32s();
        check(v.size() == p->w.v.size(), "extractor: tensor size mismatch at " + p->name);
        p->w.v = v;
    }
    r.verify_fingerprint();
    return fx;
}

// Activation backward, conv backward, accumulate the weight grad; returns dx.
inline Tensor conv_silu_backward(Conv2d& conv, SiLU& act, const Tensor& g) {
    Tensor gw;
    Tensor dx = conv.backward(act.backward(g), gw);
    conv.w.g += gw;
    return dx;
}

inline FeatureExtractor train_feature_extractor(const DataSet& data, int classes,
                                                const FxTrainConfig& cfg) {
    check(!data.imgs.empty(), "feature extractor: empty data set");
    Rng rng(cfg.seed);
    FeatureExtractor fx;
    fx.build(data.imgs[0].dim(1), classes, rng);

    Adam opt;
    for (Param* p : {&fx.c1.w, &fx.c1.b, &fx.c2.w, &fx.c2.b, &fx.c3.w, &fx.c3.b, &fx.head.w,
                     &fx.head.b})
        opt.add_dense(p->w.data(), p->g.data(), p->w.numel(), cfg.lr);

    int64_t per = data.imgs[0].numel();
    SiLU a1, a2, a3;
    for (int it = 0; it < cfg.iters; ++it) {
        Tensor x({cfg.batch, fx.img_ch, data.imgs[0].dim(2), data.imgs[0].dim(3)});
        std::vector<int> labels(static_cast<size_t>(cfg.batch));
        for (int i = 0; i < cfg.batch; ++i) {
            size_t idx = static_cast<size_t>(rng.below(data.imgs.size()));
            std::copy_n(data.imgs[idx].data(), per, x.data() + i * per);
            labels[static_cast<size_t>(i)] = data.labels[idx];
        }
        Tensor logits = fx.logits_train(x, a1, a2, a3);
        Tensor dlogits;
        double loss = cross_entropy(logits, labels, dlogits);
        check(std::isfinite(loss), strfmt("feature extractor: loss diverged at iter %d", it));

        for (Param* p : {&fx.c1.w, &fx.c1.b, &fx.c2.w, &fx.c2.b, &fx.c3.w, &fx.c3.b, &fx.head.w,
                         &fx.head.b})
            p->g.fill(0.0f);
        Tensor gw;
        Tensor gpool = fx.head.backward(dlogits, gw);
        fx.head.w.g += gw;
        // Undo the average pool: each spatial site gets grad / (H*W).
        Tensor g3(fx.pool_cache);
        int C = g3.dim(1);
        int64_t hw = static_cast<int64_t>(g3.dim(2)) * g3.dim(3);
        float inv = 1.0f / static_cast<float>(hw);
        for (int n = 0; n < g3.dim(0); ++n)
            for (int c = 0; c < C; ++c) {
                float g = gpool.v[static_cast<size_t>(n) * C + c] * inv;
                float* dst = g3.data() + g3.idx4(n, c, 0, 0);
                for (int64_t i = 0; i < hw; ++i) dst[i] = g;
            }
        Tensor d = conv_silu_backward(fx.c3, a3, g3);
        d = conv_silu_backward(fx.c2, a2, d);
        conv_silu_backward(fx.c1, a1, d);
        opt.step();
    }
    return fx;
}

}  // namespace dq
