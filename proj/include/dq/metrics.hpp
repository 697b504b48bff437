#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "dq/features.hpp"

namespace dq {

// Structural similarity with a uniform window over valid positions only,
// standard stabilization constants, pixel range [0,1] (L = 1), and biased
// (moment) variance inside each window.
inline double ssim(const Tensor& a, const Tensor& b, int window = 7) {
    check(a.same_shape(b), "ssim: shape mismatch");
    check(a.ndim() == 4, "ssim: want NCHW images");
    int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    check(H >= window && W >= window, "ssim: image smaller than the window");
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const double inv = 1.0 / static_cast<double>(window * window);
    double total = 0;
    int64_t count = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y + window <= H; ++y)
                for (int x = 0; x + window <= W; ++x) {
                    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                    for (int dy = 0; dy < window; ++dy) {
                        const float* pa = a.data() + a.idx4(n, c, y + dy, x);
                        const float* pb = b.data() + b.idx4(n, c, y + dy, x);
                        for (int dx = 0; dx < window; ++dx) {
                            double va = pa[dx], vb = pb[dx];
                            sa += va;
                            sb += vb;
                            saa += va * va;
                            sbb += vb * vb;
                            sab += va * vb;
                        }
                    }
                    double ma = sa * inv, mb = sb * inv;
                    double va = saa * inv - ma * ma;
                    double vb = sbb * inv - mb * mb;
                    double cov = sab * inv - ma * mb;
                    total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                             ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    ++count;
                }
    return total / static_cast<double>(count);
}

// Fréchet distance between two Gaussian fits of feature rows [N, D]:
// |mu1-mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)), with diagonal shrinkage before
// the matrix square root to keep small-sample covariances well conditioned.
inline double frechet_distance(const Tensor& fa, const Tensor& fb, double shrink = 1e-6) {
    check(fa.ndim() == 2 && fb.ndim() == 2, "frechet: want [N, D] feature matrices");
    check(fa.dim(1) == fb.dim(1), "frechet: feature dimension mismatch");
    check(fa.dim(0) >= 2 && fb.dim(0) >= 2, "frechet: need at least two samples per side");
    const int d = fa.dim(1);

    auto fit = [d](const Tensor& f, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
        const int n = f.dim(0);
        Eigen::MatrixXd x(n, d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) x(i, j) = f.v[static_cast<size_t>(i) * d + j];
        mu = x.colwise().mean();
        Eigen::MatrixXd xc = x.rowwise() - mu.transpose();
        cov = (xc.transpose() * xc) / static_cast<double>(n - 1);
    };
    Eigen::VectorXd mu1, mu2;
    Eigen::MatrixXd s1, s2;
    fit(fa, mu1, s1);
    fit(fb, mu2, s2);
    s1.diagonal().array() += shrink;
    s2.diagonal().array() += shrink;

    // tr((S1 S2)^1/2) via the symmetric form (S1^1/2 S2 S1^1/2)^1/2.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(s1);
    Eigen::VectorXd ev1 = es1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Eigen::MatrixXd s1h = es1.eigenvectors() * ev1.asDiagonal() * es1.eigenvectors().transpose();
    Eigen::MatrixXd m = s1h * s2 * s1h;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> esm(m);
    Eigen::VectorXd lam = esm.eigenvalues();
    double tol = 1e-9 * std::max(1.0, lam.cwiseAbs().maxCoeff());
    check(lam.minCoeff() > -tol, "frechet: product matrix not PSD after regularization");
    double tr_sqrt = lam.cwiseMax(0.0).cwiseSqrt().sum();

    double fd = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, fd);
}

// Pooled features for a stacked image batch, evaluated in chunks.
inline Tensor features_batch(FeatureExtractor& fx, const Tensor& imgs, int chunk = 64) {
    check(imgs.ndim() == 4, "features_batch: want NCHW");
    int n = imgs.dim(0);
    check(n >= 1, "features_batch: empty batch");
    int64_t per = imgs.numel() / n;
    Tensor out({n, FeatureExtractor::kFeatDim});
    for (int i0 = 0; i0 < n; i0 += chunk) {
        int nb = std::min(chunk, n - i0);
        Tensor x({nb, imgs.dim(1), imgs.dim(2), imgs.dim(3)});
        std::copy_n(imgs.data() + static_cast<int64_t>(i0) * per, static_cast<int64_t>(nb) * per,
                    x.data());
        FeatureMaps fm = fx.features(x);
        std::copy_n(fm.pooled.data(), static_cast<int64_t>(nb) * FeatureExtractor::kFeatDim,
                    out.data() + static_cast<int64_t>(i0) * FeatureExtractor::kFeatDim);
    }
    return out;
}

inline double frechet_feature_distance(FeatureExtractor& fx, const Tensor& imgs_a,
                                       const Tensor& imgs_b) {
    Tensor fa = features_batch(fx, imgs_a);
    Tensor fb = features_batch(fx, imgs_b);
    return frechet_distance(fa, fb);
}

// Mean over extractor layers of the squared distance between channel-unit-
// normalized feature maps, averaged over spatial positions (and samples).
inline double perceptual_feature_distance(FeatureExtractor& fx, const Tensor& a,
                                          const Tensor& b) {
    check(a.same_shape(b), "pfd: shape mismatch");
    FeatureMaps fa = fx.features(a);
    FeatureMaps fb = fx.features(b);
    const Tensor* la[] = {&fa.f1, &fa.f2, &fa.f3};
    const Tensor* lb[] = {&fb.f1, &fb.f2, &fb.f3};
    double total = 0;
    for (int l = 0; l < 3; ++l) {
        const Tensor& u = *la[l];
        const Tensor& w = *lb[l];
        int N = u.dim(0), C = u.dim(1), H = u.dim(2), W = u.dim(3);
        double layer = 0;
        for (int n = 0; n < N; ++n)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    double na = 0, nb = 0;
                    for (int c = 0; c < C; ++c) {
                        double va = u.at4(n, c, y, x), vb = w.at4(n, c, y, x);
                        na += va * va;
                        nb += vb * vb;
                    }
                    na = std::sqrt(na) + 1e-10;
                    nb = std::sqrt(nb) + 1e-10;
                    for (int c = 0; c < C; ++c) {
                        double dvc = u.at4(n, c, y, x) / na - w.at4(n, c, y, x) / nb;
                        layer += dvc * dvc;
                    }
                }
        total += layer / (static_cast<double>(N) * H * W);
    }
    return total / 3.0;
}

// Shifts model-space pixels (approximately [-1,1]) into the [0,1] range the
// similarity constants assume.
inline Tensor to_unit_range(const Tensor& x) {
    Tensor out(x.dims);
    for (size_t i = 0; i < x.v.size(); ++i) out.v[i] = 0.5f * (x.v[i] + 1.0f);
    return out;
}

}  // namespace dq
