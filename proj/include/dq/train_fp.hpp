#pragma once

#include <ostream>

#include "dq/data.hpp"
#include "dq/model.hpp"
#include "dq/schedule.hpp"

namespace dq {

struct FPTrainConfig {
    int iters = 1500;
    int batch = 16;
    double lr = 2e-3;
    double cond_dropout = 0.1;  // fraction of samples trained with the null class
    uint64_t seed = 1;
    int log_every = 50;
};

// Standard denoising objective: predict the injected noise at a uniformly
// drawn timestep. A fraction of samples swap their class for the null id so
// classifier-free guidance has an unconditional mode to lean on.
inline double train_fp(DenoiserModel& m, const DataSet& data, const NoiseSchedule& sched,
                       const FPTrainConfig& cfg, std::ostream* log = nullptr) {
    check(!m.stripped, "train_fp expects the full model");
    check(!data.imgs.empty(), "train_fp: empty dataset");
    Rng rng(cfg.seed);
    Adam opt;
    for (auto* p : m.params)
        opt.add_dense(p->w.data(), p->g.data(), p->w.numel(), cfg.lr);

    int64_t per = data.imgs[0].numel();
    double last_loss = 0;
    for (int it = 0; it < cfg.iters; ++it) {
        Tensor x0({cfg.batch, m.cfg.img_ch, m.cfg.img, m.cfg.img});
        Tensor eps(x0.dims);
        std::vector<int> ts(static_cast<size_t>(cfg.batch));
        std::vector<int> conds(static_cast<size_t>(cfg.batch));
        Tensor xt(x0.dims);
        for (int i = 0; i < cfg.batch; ++i) {
            size_t idx = static_cast<size_t>(rng.below(data.imgs.size()));
            std::copy_n(data.imgs[idx].data(), per, x0.data() + i * per);
            conds[static_cast<size_t>(i)] =
                (rng.uniform() < cfg.cond_dropout) ? m.cfg.classes : data.labels[idx];
            ts[static_cast<size_t>(i)] = static_cast<int>(rng.below(static_cast<uint64_t>(sched.T)));
            double a = std::sqrt(sched.alpha_bars[ts[static_cast<size_t>(i)]]);
            double b = std::sqrt(1.0 - sched.alpha_bars[ts[static_cast<size_t>(i)]]);
            for (int64_t j = 0; j < per; ++j) {
                float e = rng.normalf();
                eps.v[static_cast<size_t>(i * per + j)] = e;
                xt.v[static_cast<size_t>(i * per + j)] =
                    static_cast<float>(a * x0.v[static_cast<size_t>(i * per + j)] + b * e);
            }
        }
        Ctx ctx;
        ctx.train = true;
        Tensor out = m.forward(xt, ts, conds, ctx);
        double loss = mse(out, eps);
        check(std::isfinite(loss), strfmt("train_fp: loss diverged at iter %d", it));
        Tensor gout(out.dims);
        float scale = 2.0f / static_cast<float>(out.numel());
        for (size_t i = 0; i < gout.v.size(); ++i) gout.v[i] = scale * (out.v[i] - eps.v[i]);
        m.zero_grads();
        m.backward(gout, ctx);
        opt.step();
        last_loss = loss;
        if (log && ((cfg.log_every > 0 && it % cfg.log_every == 0) || it + 1 == cfg.iters))
            (*log) << strfmt("{\"iter\":%d,\"loss\":%.6f}\n", it, loss);
    }
    return last_loss;
}

}  // namespace dq
