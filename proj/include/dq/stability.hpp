#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dq/qmodel.hpp"

namespace dq {

// Tracks, per layer, an exponential moving average of the "this weight's
// integer code changed since last step" indicator. Updated once per optimizer
// step from the post-update codes.
struct OscillationTracker {
    double momentum = 0.1;

    struct LayerState {
        std::vector<int32_t> prev;
        std::vector<float> ema;
        bool primed = false;
    };
    std::map<std::string, LayerState> layers;

    void track(const std::string& layer) { layers[layer]; }

    void update(const std::string& layer, const std::vector<int32_t>& codes) {
        auto it = layers.find(layer);
        check(it != layers.end(), "oscillation tracker: untracked layer " + layer);
        auto& st = it->second;
        if (!st.primed) {
            st.prev = codes;
            st.ema.assign(codes.size(), 0.0f);
            st.primed = true;
            return;
        }
        check(codes.size() == st.prev.size(), "oscillation tracker: size change for " + layer);
        const float m = static_cast<float>(momentum);
        for (size_t i = 0; i < codes.size(); ++i) {
            float flip = (codes[i] != st.prev[i]) ? 1.0f : 0.0f;
            st.ema[i] = m * flip + (1.0f - m) * st.ema[i];
        }
        st.prev = codes;
    }

    // Percentage of tracked weights whose flip EMA exceeds the threshold.
    double oscillation_percent(double threshold) const {
        int64_t n = 0, hot = 0;
        for (const auto& [k, st] : layers) {
            n += static_cast<int64_t>(st.ema.size());
            for (float e : st.ema) hot += (e > threshold) ? 1 : 0;
        }
        if (n == 0) return 0.0;
        return 100.0 * static_cast<double>(hot) / static_cast<double>(n);
    }

    double layer_percent(const std::string& layer, double threshold) const {
        const auto& st = layers.at(layer);
        if (st.ema.empty()) return 0.0;
        int64_t hot = 0;
        for (float e : st.ema) hot += (e > threshold) ? 1 : 0;
        return 100.0 * static_cast<double>(hot) / static_cast<double>(st.ema.size());
    }
};

// Every `every` iterations (1-based), pins the integer codes of tracked
// weights whose flip EMA exceeds the threshold. Returns how many elements
// were newly frozen. Freezing is monotone and scoped to the tracked layers.
inline int64_t apply_selective_freeze(QuantizedModel& qm, const OscillationTracker& tracker,
                                      int iteration, int every, double threshold) {
    check(every > 0, "selective freeze: interval must be positive");
    if (iteration <= 0 || iteration % every != 0) return 0;
    int64_t before = qm.frozen_count();
    for (const auto& [layer, st] : tracker.layers) {
        if (!st.primed) continue;
        std::vector<uint8_t> mask(st.ema.size(), 0);
        bool any = false;
        for (size_t i = 0; i < st.ema.size(); ++i) {
            if (st.ema[i] > threshold) {
                mask[i] = 1;
                any = true;
            }
        }
        if (any) qm.freeze_elements(layer, mask);
    }
    return qm.frozen_count() - before;
}

// Per-layer gradient statistics: L2 norm, component sign-flip rate against
// the previous step, and the mean gradient whose sign sequence feeds the
// oscillation index.
struct GradStats {
    struct Entry {
        double l2 = 0;
        double flip_rate = 0;
        double mean = 0;
    };
    struct LayerState {
        std::vector<int8_t> prev_sign;
        bool primed = false;
        std::vector<Entry> hist;
    };
    std::map<std::string, LayerState> layers;

    static int8_t sign_of(float x) { return x > 0 ? 1 : (x < 0 ? -1 : 0); }

    void observe(const std::string& layer, const Tensor& g) {
        auto& st = layers[layer];
        Entry e;
        double sum = 0, sq = 0;
        int64_t flips = 0;
        if (st.primed) check(st.prev_sign.size() == g.v.size(), "grad stats: size change");
        else st.prev_sign.assign(g.v.size(), 0);
        for (size_t i = 0; i < g.v.size(); ++i) {
            double x = g.v[i];
            sum += x;
            sq += x * x;
            int8_t s = sign_of(g.v[i]);
            if (st.primed && s != 0 && st.prev_sign[i] != 0 && s != st.prev_sign[i]) ++flips;
            st.prev_sign[i] = s;
        }
        e.l2 = std::sqrt(sq);
        e.mean = sum / static_cast<double>(g.v.size());
        e.flip_rate = st.primed ? static_cast<double>(flips) / static_cast<double>(g.v.size()) : 0.0;
        check(std::isfinite(e.l2) && std::isfinite(e.mean), "grad stats: non-finite gradient");
        st.primed = true;
        st.hist.push_back(e);
    }

    // Sign-flip rate of the layer's mean-gradient sequence over the trailing
    // window: the scalar used to compare pipeline gradient stability.
    double oscillation_index(const std::string& layer, int window) const {
        const auto& st = layers.at(layer);
        check(window >= 2, "oscillation index: window must be >= 2");
        check(static_cast<int>(st.hist.size()) >= window,
              strfmt("oscillation index: need %d iterations, have %zu", window, st.hist.size()));
        size_t start = st.hist.size() - static_cast<size_t>(window);
        int flips = 0;
        for (size_t i = start + 1; i < st.hist.size(); ++i) {
            int8_t a = sign_of(static_cast<float>(st.hist[i - 1].mean));
            int8_t b = sign_of(static_cast<float>(st.hist[i].mean));
            if (a != 0 && b != 0 && a != b) ++flips;
        }
        return static_cast<double>(flips) / static_cast<double>(window - 1);
    }

    double overall_index(int window) const {
        check(!layers.empty(), "oscillation index: no layers observed");
        double sum = 0;
        for (const auto& [k, st] : layers) sum += oscillation_index(k, window);
        return sum / static_cast<double>(layers.size());
    }
};

}  // namespace dq
