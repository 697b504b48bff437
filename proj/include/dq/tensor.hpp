#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "dq/common.hpp"
#include "dq/rng.hpp"

namespace dq {

// Dense float32 tensor, row-major, up to 4 dims. Activations use the
// (N, C, H, W) convention; weights use whatever layout their layer documents.
struct Tensor {
    std::vector<int> dims;
    std::vector<float> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> d) : dims(std::move(d)) {
        v.assign(static_cast<size_t>(numel_of(dims)), 0.0f);
    }

    static int64_t numel_of(const std::vector<int>& d) {
        int64_t n = 1;
        for (int x : d) {
            check(x >= 0, "negative tensor dim");
            n *= x;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int dim(int i) const { return dims.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(dims.size()); }
    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    float* data() { return v.data(); }
    const float* data() const { return v.data(); }

    float& at(int64_t i) { return v[static_cast<size_t>(i)]; }
    float at(int64_t i) const { return v[static_cast<size_t>(i)]; }

    // 4D accessor for (N, C, H, W) tensors.
    int64_t idx4(int n, int c, int h, int w) const {
        return ((static_cast<int64_t>(n) * dims[1] + c) * dims[2] + h) * dims[3] + w;
    }
    float& at4(int n, int c, int h, int w) { return v[static_cast<size_t>(idx4(n, c, h, w))]; }
    float at4(int n, int c, int h, int w) const { return v[static_cast<size_t>(idx4(n, c, h, w))]; }

    void zero() { std::fill(v.begin(), v.end(), 0.0f); }
    void fill(float x) { std::fill(v.begin(), v.end(), x); }

    void fill_normal(Rng& rng, float stddev = 1.0f) {
        for (auto& x : v) x = stddev * rng.normalf();
    }

    Tensor& operator+=(const Tensor& o) {
        check(same_shape(o), "shape mismatch in +=");
        for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        check(same_shape(o), "shape mismatch in -=");
        for (size_t i = 0; i < v.size(); ++i) v[i] -= o.v[i];
        return *this;
    }
    Tensor& scale(float a) {
        for (auto& x : v) x *= a;
        return *this;
    }

    bool all_finite() const {
        for (float x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double sum() const {
        double s = 0;
        for (float x : v) s += x;
        return s;
    }
    double mean() const { return v.empty() ? 0.0 : sum() / static_cast<double>(v.size()); }
    double sq_norm() const {
        double s = 0;
        for (float x : v) s += static_cast<double>(x) * x;
        return s;
    }
    float max_abs() const {
        float m = 0;
        for (float x : v) m = std::max(m, std::fabs(x));
        return m;
    }
};

inline double mse(const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), "shape mismatch in mse");
    double s = 0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        double d = static_cast<double>(a.v[i]) - b.v[i];
        s += d * d;
    }
    return a.v.empty() ? 0.0 : s / static_cast<double>(a.v.size());
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), "shape mismatch in max_abs_diff");
    double m = 0;
    for (size_t i = 0; i < a.v.size(); ++i)
        m = std::max(m, std::fabs(static_cast<double>(a.v[i]) - b.v[i]));
    return m;
}

}  // namespace dq
