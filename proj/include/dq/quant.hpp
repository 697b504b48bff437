#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "dq/common.hpp"
#include "dq/tensor.hpp"

namespace dq {

struct QuantConfig {
    int w_bits = 4;
    int a_bits = 8;
    bool per_channel_w = true;    // weights: per-output-channel symmetric signed
    bool multi_timestep = true;   // activations: one quantizer entry per timestep
    bool interpolate_missing = true;
    bool train_w_scales = true;
    bool train_a_scales = true;
};

inline void check_bits(int bits) {
    check(bits >= 2 && bits <= 16, strfmt("bit-width %d outside [2,16]", bits));
}

inline int32_t qmin_of(int bits, bool symmetric) {
    return symmetric ? -(1 << (bits - 1)) : 0;
}
inline int32_t qmax_of(int bits, bool symmetric) {
    return symmetric ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
}

// One affine quantizer: symmetric signed for weights (zero_point always 0),
// asymmetric unsigned for activations. Scales are trainable; zero points are
// frozen after calibration.
struct QuantParams {
    float scale = 1.0f;
    int32_t zero_point = 0;
    int bits = 8;
    bool symmetric = false;
};

constexpr float kScaleFloor = 1e-8f;

// Round-half-to-even, the tie-breaking the whole pipeline standardizes on.
inline double round_half_even(double x) { return std::nearbyint(x); }

inline int32_t quantize(float x, const QuantParams& p) {
    check(std::isfinite(x), "quantize: non-finite input");
    check(p.scale > 0.0f, "quantize: non-positive scale");
    int32_t lo = qmin_of(p.bits, p.symmetric), hi = qmax_of(p.bits, p.symmetric);
    double code = round_half_even(static_cast<double>(x) / p.scale) + p.zero_point;
    if (code < lo) return lo;
    if (code > hi) return hi;
    return static_cast<int32_t>(code);
}

inline float dequantize(int32_t q, const QuantParams& p) {
    check(q >= qmin_of(p.bits, p.symmetric) && q <= qmax_of(p.bits, p.symmetric),
          strfmt("dequantize: code %d outside %d-bit range", q, p.bits));
    return static_cast<float>(q - p.zero_point) * p.scale;
}

inline float fake_quant_value(float x, const QuantParams& p) {
    return dequantize(quantize(x, p), p);
}

// Per-element backward state for straight-through / learned-scale gradients:
//   input grad : g                      if the pre-clip code was in range, else 0
//   scale grad : g * (xhat - x)/s       in range
//                g * (qmin - z)         clipped low
//                g * (qmax - z)         clipped high
struct FqCache {
    std::vector<uint8_t> in_range;
    std::vector<float> dscale;
    void resize(size_t n) {
        in_range.assign(n, 0);
        dscale.assign(n, 0.0f);
    }
};

// Fake-quantizes n values with one parameter set; records backward state and
// optionally the integer codes (used for oscillation tracking and freezing).
inline void fake_quant_run(const float* x, float* out, size_t n, const QuantParams& p,
                           FqCache* cache, size_t cache_off = 0, int32_t* codes = nullptr) {
    check(p.scale > 0.0f, "fake_quant: non-positive scale");
    const int32_t lo = qmin_of(p.bits, p.symmetric), hi = qmax_of(p.bits, p.symmetric);
    const double scale = p.scale;  // same division as quantize(): codes must agree
    for (size_t i = 0; i < n; ++i) {
        check(std::isfinite(x[i]), "fake_quant: non-finite input");
        double code = round_half_even(x[i] / scale) + p.zero_point;
        bool in = code >= lo && code <= hi;
        int32_t q = in ? static_cast<int32_t>(code) : (code < lo ? lo : hi);
        float xh = static_cast<float>(q - p.zero_point) * p.scale;
        out[i] = xh;
        if (codes) codes[i] = q;
        if (cache) {
            cache->in_range[cache_off + i] = in ? 1 : 0;
            cache->dscale[cache_off + i] =
                in ? (xh - x[i]) / p.scale : static_cast<float>(q - p.zero_point);
        }
    }
}

// Symmetric per-channel weight calibration: scale_c = maxabs_c / qmax.
inline std::vector<QuantParams> calibrate_weight(const Tensor& w, int bits, bool per_channel) {
    check_bits(bits);
    check(w.ndim() == 2, "calibrate_weight: expected [channels, k] layout");
    int rows = per_channel ? w.dim(0) : 1;
    int64_t cols = per_channel ? w.dim(1) : w.numel();
    float qmax = static_cast<float>(qmax_of(bits, true));
    std::vector<QuantParams> out(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        float amax = 0;
        const float* p = w.data() + static_cast<int64_t>(r) * cols;
        for (int64_t i = 0; i < cols; ++i) {
            check(std::isfinite(p[i]), "calibrate_weight: non-finite weight");
            amax = std::max(amax, std::fabs(p[i]));
        }
        QuantParams q;
        q.bits = bits;
        q.symmetric = true;
        q.zero_point = 0;
        q.scale = std::max(amax / qmax, kScaleFloor);
        out[static_cast<size_t>(r)] = q;
    }
    return out;
}

// Streaming per-tensor min/max for activation calibration.
struct MinMax {
    float mn = std::numeric_limits<float>::infinity();
    float mx = -std::numeric_limits<float>::infinity();
    int64_t count = 0;

    void add(const float* x, size_t n) {
        for (size_t i = 0; i < n; ++i) {
            check(std::isfinite(x[i]), "calibration: non-finite activation");
            mn = std::min(mn, x[i]);
            mx = std::max(mx, x[i]);
        }
        count += static_cast<int64_t>(n);
    }
};

// Asymmetric unsigned activation calibration. The observed range is expanded
// to include zero so that zero is exactly representable.
inline QuantParams calibrate_act(const MinMax& mm, int bits) {
    check_bits(bits);
    check(mm.count > 0, "calibrate_act: no samples observed");
    float lo = std::min(0.0f, mm.mn), hi = std::max(0.0f, mm.mx);
    QuantParams p;
    p.bits = bits;
    p.symmetric = false;
    int32_t qmax = qmax_of(bits, false);
    float scale = (hi - lo) / static_cast<float>(qmax);
    if (scale < kScaleFloor) {
        p.scale = kScaleFloor;
        p.zero_point = 0;
        return p;
    }
    p.scale = scale;
    double z = round_half_even(-static_cast<double>(lo) / scale);
    p.zero_point = static_cast<int32_t>(std::min<double>(std::max<double>(z, 0), qmax));
    return p;
}

}  // namespace dq
