#pragma once

#include <string>
#include <vector>

#include "dq/quant.hpp"

namespace dq {

// Activation quantizer bank for one site: either a single shared entry or one
// entry per timestep. Scales are trainable (updated sparsely: an entry's
// optimizer state only advances on iterations whose batch touched it);
// zero points stay fixed after calibration.
struct TimestepBank {
    std::string site;
    int bits = 8;
    int entries = 1;
    std::vector<float> scales;
    std::vector<int32_t> zps;
    std::vector<uint8_t> calibrated;  // observed directly (1) vs interpolated (0)

    // training state
    std::vector<uint8_t> touched;
    std::vector<float> sgrad;

    int entry_for(int t) const {
        if (entries == 1) return 0;
        check(t >= 0 && t < entries, strfmt("bank %s: timestep %d out of range", site.c_str(), t));
        return t;
    }
    QuantParams params(int entry) const {
        QuantParams p;
        p.bits = bits;
        p.symmetric = false;
        p.scale = scales[static_cast<size_t>(entry)];
        p.zero_point = zps[static_cast<size_t>(entry)];
        return p;
    }
    int64_t param_count() const { return static_cast<int64_t>(entries) * 2; }
};

// Builds a bank from per-entry observed ranges. Timesteps never observed get
// parameters linearly interpolated from the nearest calibrated neighbors
// (clamped at the ends); with interpolation disabled, gaps are an error.
inline TimestepBank bank_calibrate(const std::string& site, const std::vector<MinMax>& obs,
                                   int bits, bool interpolate) {
    check(!obs.empty(), "bank_calibrate: no entries");
    TimestepBank b;
    b.site = site;
    b.bits = bits;
    b.entries = static_cast<int>(obs.size());
    b.scales.assign(obs.size(), 0.0f);
    b.zps.assign(obs.size(), 0);
    b.calibrated.assign(obs.size(), 0);
    b.touched.assign(obs.size(), 0);
    b.sgrad.assign(obs.size(), 0.0f);

    std::vector<int> have;
    for (size_t t = 0; t < obs.size(); ++t)
        if (obs[t].count > 0) {
            QuantParams p = calibrate_act(obs[t], bits);
            b.scales[t] = p.scale;
            b.zps[t] = p.zero_point;
            b.calibrated[t] = 1;
            have.push_back(static_cast<int>(t));
        }
    check(!have.empty(), "bank_calibrate: site " + site + " has no observations at all");
    if (static_cast<int>(have.size()) == b.entries) return b;
    if (!interpolate) {
        int missing = b.entries - static_cast<int>(have.size());
        throw Error(strfmt("bank_calibrate: site %s missing %d of %d timesteps "
                           "(interpolation disabled)", site.c_str(), missing, b.entries));
    }
    for (int t = 0; t < b.entries; ++t) {
        if (b.calibrated[static_cast<size_t>(t)]) continue;
        auto it = std::lower_bound(have.begin(), have.end(), t);
        int hi = (it == have.end()) ? -1 : *it;
        int lo = (it == have.begin()) ? -1 : *(it - 1);
        if (lo < 0) {
            b.scales[static_cast<size_t>(t)] = b.scales[static_cast<size_t>(hi)];
            b.zps[static_cast<size_t>(t)] = b.zps[static_cast<size_t>(hi)];
        } else if (hi < 0) {
            b.scales[static_cast<size_t>(t)] = b.scales[static_cast<size_t>(lo)];
            b.zps[static_cast<size_t>(t)] = b.zps[static_cast<size_t>(lo)];
        } else {
            double f = static_cast<double>(t - lo) / (hi - lo);
            b.scales[static_cast<size_t>(t)] = static_cast<float>(
                (1 - f) * b.scales[static_cast<size_t>(lo)] + f * b.scales[static_cast<size_t>(hi)]);
            b.zps[static_cast<size_t>(t)] = static_cast<int32_t>(round_half_even(
                (1 - f) * b.zps[static_cast<size_t>(lo)] + f * b.zps[static_cast<size_t>(hi)]));
        }
    }
    return b;
}

}  // namespace dq
