#pragma once

#include <vector>

#include "dq/rng.hpp"
#include "dq/tensor.hpp"

namespace dq {

// Synthetic class-conditional images in [-1, 1]: classes 0-4 are soft discs,
// 5-9 soft squares, with size growing within each family and jittered
// placement per sample. Edges are smoothed so the images look like samples
// from a continuous distribution instead of binary masks.
inline Tensor synth_image(int cls, int img, Rng& rng) {
    Tensor x({1, 1, img, img});
    bool square = cls >= 5;
    int level = cls % 5;
    double r = 0.17 * img + 0.05 * img * level * 0.45;
    double cx = 0.5 * img + rng.uniform(-0.18, 0.18) * img;
    double cy = 0.5 * img + rng.uniform(-0.18, 0.18) * img;
    double amp = 0.75 + 0.1 * rng.uniform();
    double sharp = 1.1 + 0.3 * rng.uniform();
    for (int h = 0; h < img; ++h)
        for (int w = 0; w < img; ++w) {
            double dy = h + 0.5 - cy, dx = w + 0.5 - cx;
            double d = square ? std::max(std::fabs(dx), std::fabs(dy))
                              : std::sqrt(dx * dx + dy * dy);
            double v = amp * std::tanh(sharp * (r - d));
            x.at4(0, 0, h, w) = static_cast<float>(v);
        }
    return x;
}

struct DataSet {
    std::vector<Tensor> imgs;   // each [1, 1, img, img]
    std::vector<int> labels;
    size_t size() const { return imgs.size(); }
};

inline DataSet make_synthetic_set(int n, int classes, int img, uint64_t seed) {
    DataSet d;
    d.imgs.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
        int cls = i % classes;
        d.imgs.push_back(synth_image(cls, img, rng));
        d.labels.push_back(cls);
    }
    return d;
}

// Stacks selected samples into one batch tensor.
inline Tensor stack_batch(const DataSet& d, const std::vector<size_t>& idx) {
    check(!idx.empty(), "stack_batch: empty index list");
    const Tensor& first = d.imgs[idx[0]];
    Tensor out({static_cast<int>(idx.size()), first.dim(1), first.dim(2), first.dim(3)});
    int64_t per = first.numel();
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(d.imgs[idx[i]].data(), per, out.data() + static_cast<int64_t>(i) * per);
    return out;
}

}  // namespace dq
