#pragma once

#include <functional>
#include <vector>

#include "dq/model.hpp"
#include "dq/schedule.hpp"

namespace dq {

// Batched noise predictor: maps (x_t, per-sample timesteps, per-sample class
// ids) to predicted noise. Implementations wrap the FP model, the quantized
// model, or a guided combination.
using EpsFn = std::function<Tensor(const Tensor&, const std::vector<int>&, const std::vector<int>&)>;

struct TrajPoint {
    int t;
    Tensor x;  // the model input tagged with this timestep
};

// Ancestral sampling for a batch of trajectories advanced in lockstep. Each
// trajectory draws its initial latent and per-step noise from its own seeded
// stream, so a trajectory's noise sequence does not depend on what else is in
// the batch. Returns final x0 estimates [N, C, H, W]; optionally records every
// model input per trajectory.
inline Tensor sample_batch(EpsFn eps_fn, const NoiseSchedule& sched, int img_ch, int img,
                           const std::vector<int>& conds, const std::vector<uint64_t>& seeds,
                           std::vector<std::vector<TrajPoint>>* trajs = nullptr) {
    check(conds.size() == seeds.size(), "sample_batch: conds/seeds size mismatch");
    int N = static_cast<int>(conds.size());
    std::vector<Rng> rngs;
    rngs.reserve(static_cast<size_t>(N));
    for (auto s : seeds) rngs.emplace_back(s);

    Tensor x({N, img_ch, img, img});
    int64_t per = static_cast<int64_t>(img_ch) * img * img;
    for (int i = 0; i < N; ++i)
        for (int64_t j = 0; j < per; ++j) x.v[static_cast<size_t>(i * per + j)] = rngs[static_cast<size_t>(i)].normalf();

    if (trajs) trajs->assign(static_cast<size_t>(N), {});
    Tensor z({N, img_ch, img, img});
    for (int t = sched.T - 1; t >= 0; --t) {
        if (trajs)
            for (int i = 0; i < N; ++i) {
                Tensor xi({1, img_ch, img, img});
                std::copy_n(x.data() + i * per, per, xi.data());
                (*trajs)[static_cast<size_t>(i)].push_back({t, std::move(xi)});
            }
        std::vector<int> ts(static_cast<size_t>(N), t);
        Tensor eps = eps_fn(x, ts, conds);
        if (t > 0)
            for (int i = 0; i < N; ++i)
                for (int64_t j = 0; j < per; ++j) z.v[static_cast<size_t>(i * per + j)] = rngs[static_cast<size_t>(i)].normalf();
        x = reverse_step(x, eps, t, t > 0 ? &z : nullptr, sched);
    }
    return x;
}

// Classifier-free-guidance wrapper: eps_u + g (eps_c - eps_u) with the null
// class for the unconditional pass. g == 1 short-circuits to the conditional
// pass alone, making it bit-identical to unguided sampling.
inline EpsFn guided_eps(EpsFn raw, double g, int null_id) {
    if (g == 1.0) return raw;
    return [raw, g, null_id](const Tensor& x, const std::vector<int>& ts,
                             const std::vector<int>& conds) {
        Tensor eps_c = raw(x, ts, conds);
        std::vector<int> null_conds(conds.size(), null_id);
        Tensor eps_u = raw(x, ts, null_conds);
        Tensor out(eps_c.dims);
        for (size_t i = 0; i < out.v.size(); ++i)
            out.v[i] = static_cast<float>(eps_u.v[i] + g * (eps_c.v[i] - eps_u.v[i]));
        return out;
    };
}

// Plain FP-model predictor (inference mode, optional cache for stripped).
inline EpsFn model_eps(DenoiserModel& m, const TimeCache* tc = nullptr) {
    return [&m, tc](const Tensor& x, const std::vector<int>& ts, const std::vector<int>& conds) {
        Ctx ctx;
        return m.forward(x, ts, conds, ctx, tc);
    };
}

}  // namespace dq
