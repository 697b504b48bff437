#pragma once

#include <cmath>
#include <vector>

#include "dq/common.hpp"
#include "dq/tensor.hpp"

namespace dq {

// DDPM-style variance schedule. Arrays are double precision so the cumulative
// product and the closed-form noising identities hold to tight tolerances;
// latents themselves stay float32.
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0, beta_end = 0;
    std::vector<double> betas;       // beta_t
    std::vector<double> alphas;      // 1 - beta_t
    std::vector<double> alpha_bars;  // prod_{s<=t} alpha_s
    std::vector<double> sigmas;      // sqrt(beta_t)

    uint64_t fingerprint() const {
        Fingerprint fp;
        fp.update_u64(static_cast<uint64_t>(T));
        fp.update(&beta_start, sizeof beta_start);
        fp.update(&beta_end, sizeof beta_end);
        return fp.value();
    }
};

inline NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
    check(T >= 1, "schedule: T must be >= 1");
    check(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.resize(static_cast<size_t>(T));
    s.alphas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    s.sigmas.resize(static_cast<size_t>(T));
    double run = 1.0;
    for (int t = 0; t < T; ++t) {
        double frac = (T == 1) ? 0.0 : static_cast<double>(t) / (T - 1);
        double b = beta_start + (beta_end - beta_start) * frac;
        s.betas[t] = b;
        s.alphas[t] = 1.0 - b;
        run *= s.alphas[t];
        s.alpha_bars[t] = run;
        s.sigmas[t] = std::sqrt(b);
        check(s.alpha_bars[t] > 0.0 && s.alpha_bars[t] < 1.0, "schedule: alpha_bar left (0,1)");
        if (t > 0) check(s.alpha_bars[t] < s.alpha_bars[t - 1], "schedule: alpha_bar not decreasing");
    }
    return s;
}

inline void check_timestep(const NoiseSchedule& s, int t) {
    check(t >= 0 && t < s.T, strfmt("timestep %d out of range [0,%d)", t, s.T));
}

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps. The double-precision overload is
// the contract carrier (exact inversion); the Tensor overload casts its result
// to float32 storage and is what trajectory code uses.
inline std::vector<double> forward_noise(const std::vector<double>& x0,
                                         const std::vector<double>& eps, int t,
                                         const NoiseSchedule& s) {
    check_timestep(s, t);
    check(x0.size() == eps.size(), "forward_noise: x0/eps size mismatch");
    double a = std::sqrt(s.alpha_bars[t]);
    double b = std::sqrt(1.0 - s.alpha_bars[t]);
    std::vector<double> out(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

inline std::vector<double> invert_forward_noise(const std::vector<double>& xt,
                                                const std::vector<double>& eps, int t,
                                                const NoiseSchedule& s) {
    check_timestep(s, t);
    check(xt.size() == eps.size(), "invert_forward_noise: size mismatch");
    double a = std::sqrt(s.alpha_bars[t]);
    double b = std::sqrt(1.0 - s.alpha_bars[t]);
    std::vector<double> out(xt.size());
    for (size_t i = 0; i < xt.size(); ++i) out[i] = (xt[i] - b * eps[i]) / a;
    return out;
}

inline Tensor forward_noise(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& s) {
    check_timestep(s, t);
    check(x0.same_shape(eps), "forward_noise: x0/eps shape mismatch");
    double a = std::sqrt(s.alpha_bars[t]);
    double b = std::sqrt(1.0 - s.alpha_bars[t]);
    Tensor out(x0.dims);
    for (size_t i = 0; i < x0.v.size(); ++i)
        out.v[i] = static_cast<float>(a * x0.v[i] + b * eps.v[i]);
    return out;
}

inline Tensor invert_forward_noise(const Tensor& xt, const Tensor& eps, int t,
                                   const NoiseSchedule& s) {
    check_timestep(s, t);
    check(xt.same_shape(eps), "invert_forward_noise: shape mismatch");
    double a = std::sqrt(s.alpha_bars[t]);
    double b = std::sqrt(1.0 - s.alpha_bars[t]);
    Tensor out(xt.dims);
    for (size_t i = 0; i < xt.v.size(); ++i)
        out.v[i] = static_cast<float>((xt.v[i] - b * eps.v[i]) / a);
    return out;
}

// One ancestral step: x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t)
// + sigma_t z, with the noise term dropped at t = 0.
inline Tensor reverse_step(const Tensor& xt, const Tensor& eps_hat, int t, const Tensor* z,
                           const NoiseSchedule& s) {
    check_timestep(s, t);
    check(xt.same_shape(eps_hat), "reverse_step: shape mismatch");
    ++instr::reverse_step_calls();
    double inv_sqrt_alpha = 1.0 / std::sqrt(s.alphas[t]);
    double coef = s.betas[t] / std::sqrt(1.0 - s.alpha_bars[t]);
    double sig = (t == 0) ? 0.0 : s.sigmas[t];
    Tensor out(xt.dims);
    for (size_t i = 0; i < xt.v.size(); ++i) {
        double m = inv_sqrt_alpha * (xt.v[i] - coef * eps_hat.v[i]);
        if (sig != 0.0) {
            check(z != nullptr && z->same_shape(xt), "reverse_step: missing noise tensor");
            m += sig * z->v[i];
        }
        out.v[i] = static_cast<float>(m);
    }
    return out;
}

}  // namespace dq
