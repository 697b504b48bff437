#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dq/data.hpp"
#include "dq/dataset.hpp"
#include "dq/distill.hpp"
#include "dq/qmodel.hpp"
#include "dq/sampler.hpp"
#include "dq/stability.hpp"

namespace dq {

enum class PipelineMode { serial, parallel, serial_to_parallel };

inline const char* mode_name(PipelineMode m) {
    switch (m) {
        case PipelineMode::serial: return "serial";
        case PipelineMode::parallel: return "parallel";
        case PipelineMode::serial_to_parallel: return "s2p";
    }
    return "?";
}

inline PipelineMode mode_from_string(const std::string& s) {
    if (s == "serial") return PipelineMode::serial;
    if (s == "parallel") return PipelineMode::parallel;
    if (s == "s2p" || s == "serial_to_parallel") return PipelineMode::serial_to_parallel;
    throw Error("unknown pipeline mode: " + s + " (want serial|parallel|s2p)");
}

// ---------------------------------------------------------------------------
// Serial dataset generation: run full FP inference per condition and keep
// `steps_per_prompt` intermediate latents at timesteps drawn uniformly
// without replacement.
// ---------------------------------------------------------------------------
struct SerialGenConfig {
    int conditions = 2000;
    int steps_per_prompt = 1;
    uint64_t seed = 11;
    double guidance = 1.0;
    int batch = 16;  // trajectories advanced in lockstep per group
};

inline LatentDataset generate_serial_dataset(DenoiserModel& fp, const TimeCache* tc,
                                             const NoiseSchedule& sched,
                                             const SerialGenConfig& g) {
    check(g.conditions >= 1, "gen-dataset: need at least one condition");
    check(g.steps_per_prompt >= 1 && g.steps_per_prompt <= sched.T,
          strfmt("gen-dataset: steps_per_prompt must be in [1, %d]", sched.T));
    const ModelConfig& mc = fp.cfg;
    LatentDataset d;
    d.T = static_cast<uint16_t>(sched.T);
    d.c = static_cast<uint16_t>(mc.img_ch);
    d.h = static_cast<uint16_t>(mc.img);
    d.w = static_cast<uint16_t>(mc.img);
    d.model_fp = fp.fingerprint();
    d.sched_fp = sched.fingerprint();
    d.policy = {"serial-trajectory", static_cast<uint32_t>(g.conditions),
                static_cast<uint16_t>(g.steps_per_prompt), g.guidance, g.seed};

    EpsFn eps = guided_eps(model_eps(fp, tc), g.guidance, mc.classes);
    size_t plen = d.payload_len();
    for (int c0 = 0; c0 < g.conditions; c0 += g.batch) {
        int nb = std::min(g.batch, g.conditions - c0);
        std::vector<int> conds;
        std::vector<uint64_t> seeds;
        for (int i = 0; i < nb; ++i) {
            conds.push_back((c0 + i) % mc.classes);
            seeds.push_back(mix_seed(g.seed, static_cast<uint64_t>(c0 + i)));
        }
        std::vector<std::vector<TrajPoint>> trajs;
        sample_batch(eps, sched, mc.img_ch, mc.img, conds, seeds, &trajs);
        for (int i = 0; i < nb; ++i) {
            // Pick this condition's timesteps: uniform without replacement.
            Rng sel(mix_seed(mix_seed(g.seed, 0x5e1ec7), static_cast<uint64_t>(c0 + i)));
            std::vector<int> all_t(static_cast<size_t>(sched.T));
            for (int t = 0; t < sched.T; ++t) all_t[static_cast<size_t>(t)] = t;
            sel.shuffle(all_t);
            std::vector<int> chosen(all_t.begin(), all_t.begin() + g.steps_per_prompt);
            std::sort(chosen.rbegin(), chosen.rend());  // trajectory order (descending t)
            for (int t : chosen) {
                const auto& tp = trajs[static_cast<size_t>(i)][static_cast<size_t>(sched.T - 1 - t)];
                check(tp.t == t, "gen-dataset: trajectory indexing is off");
                LatentRecord r;
                r.t = static_cast<uint16_t>(t);
                r.cond_id = static_cast<uint16_t>(conds[static_cast<size_t>(i)]);
                r.seed = seeds[static_cast<size_t>(i)];
                r.x.assign(tp.x.v.begin(), tp.x.v.end());
                check(r.x.size() == plen, "gen-dataset: bad payload length");
                d.records.push_back(std::move(r));
            }
        }
    }
    return d;
}

// ---------------------------------------------------------------------------
// Parallel-baseline batches: data images forward-noised to random timesteps.
// ---------------------------------------------------------------------------
struct ParallelBatch {
    Tensor x;
    std::vector<int> ts;
    std::vector<int> conds;
};

inline ParallelBatch generate_parallel_batch(const DataSet& data, const NoiseSchedule& sched,
                                             Rng& rng, int batch) {
    check(data.size() > 0, "parallel batch: empty data set");
    check(batch >= 1, "parallel batch: bad batch size");
    const Tensor& first = data.imgs[0];
    ParallelBatch pb;
    pb.x = Tensor({batch, first.dim(1), first.dim(2), first.dim(3)});
    int64_t per = first.numel();
    Tensor eps(first.dims);
    for (int i = 0; i < batch; ++i) {
        size_t idx = rng.below(data.size());
        int t = static_cast<int>(rng.below(static_cast<uint64_t>(sched.T)));
        eps.fill_normal(rng);
        Tensor xt = forward_noise(data.imgs[idx], eps, t, sched);
        std::copy_n(xt.data(), per, pb.x.data() + static_cast<int64_t>(i) * per);
        pb.ts.push_back(t);
        pb.conds.push_back(data.labels[idx]);
    }
    return pb;
}

// ---------------------------------------------------------------------------
// Calibration drivers. Observation mode leaves the forward pass numerically
// FP-exact, so each driver feeds the same latent distribution the mode later
// trains on.
// ---------------------------------------------------------------------------
inline void calibrate_from_dataset(QuantizedModel& qm, const TimeCache* tc,
                                   const LatentDataset& d, int batch = 32,
                                   size_t max_records = 0) {
    check(!d.records.empty(), "calibrate: empty dataset");
    size_t n = d.records.size();
    if (max_records > 0) n = std::min(n, max_records);
    int64_t per = static_cast<int64_t>(d.payload_len());
    qm.begin_observe();
    for (size_t i0 = 0; i0 < n; i0 += static_cast<size_t>(batch)) {
        size_t nb = std::min(static_cast<size_t>(batch), n - i0);
        Tensor x({static_cast<int>(nb), d.c, d.h, d.w});
        std::vector<int> ts, conds;
        for (size_t i = 0; i < nb; ++i) {
            const auto& r = d.records[i0 + i];
            std::copy_n(r.x.data(), per, x.data() + static_cast<int64_t>(i) * per);
            ts.push_back(r.t);
            conds.push_back(r.cond_id);
        }
        qm.forward(x, ts, conds, tc, false);
    }
    qm.end_observe();
}

inline void calibrate_parallel(QuantizedModel& qm, const TimeCache* tc, const DataSet& data,
                               const NoiseSchedule& sched, int batches, int batch,
                               uint64_t seed) {
    Rng rng(mix_seed(seed, 0xca11b));
    qm.begin_observe();
    for (int b = 0; b < batches; ++b) {
        ParallelBatch pb = generate_parallel_batch(data, sched, rng, batch);
        qm.forward(pb.x, pb.ts, pb.conds, tc, false);
    }
    qm.end_observe();
}

inline void calibrate_serial(QuantizedModel& qm, const TimeCache* tc, const NoiseSchedule& sched,
                             int trajectories, uint64_t seed) {
    check(trajectories >= 1, "calibrate: need at least one trajectory");
    const ModelConfig& mc = qm.net.cfg;
    qm.begin_observe();
    EpsFn eps = qmodel_eps(qm, tc);
    for (int c0 = 0; c0 < trajectories; c0 += 8) {
        int nb = std::min(8, trajectories - c0);
        std::vector<int> conds;
        std::vector<uint64_t> seeds;
        for (int i = 0; i < nb; ++i) {
            conds.push_back((c0 + i) % mc.classes);
            seeds.push_back(mix_seed(seed, static_cast<uint64_t>(c0 + i)));
        }
        sample_batch(eps, sched, mc.img_ch, mc.img, conds, seeds);
    }
    qm.end_observe();
}

// ---------------------------------------------------------------------------
// Quantization-aware training. One loss structure for all three modes; only
// the batch source differs.
// ---------------------------------------------------------------------------
struct QatConfig {
    PipelineMode mode = PipelineMode::serial_to_parallel;
    int iters = 300;
    int batch = 8;
    double lr = 1e-4;
    double scale_lr = 1e-4;
    uint64_t seed = 3;
    bool distill = true;  // inter-layer feature distillation on sensitive layers
    std::string sensitive_profile = "default";
    bool freeze = false;
    int freeze_every = 500;
    double freeze_threshold = 0.1;
    double osc_momentum = 0.1;
    bool track_all_layers = false;  // oscillation tracking beyond sensitive layers
    int val_every = 0;              // 0 disables validation
    int val_records = 64;
    int log_every = 0;  // 0 disables console lines; log entries always recorded
};

struct IterLog {
    int iter = 0;
    double l_out = 0;
    double l_sen = 0;
    double osc_percent = 0;
    int64_t frozen = 0;
};

struct TrainResult {
    std::vector<IterLog> log;
    GradStats grads;
    OscillationTracker tracker;
    std::vector<std::string> tracked_layers;
    uint64_t sampler_steps = 0;    // reverse-step calls made during training
    double stability_seconds = 0;  // time inside tracking + freezing bookkeeping
    double total_seconds = 0;
    std::vector<std::pair<int, double>> val_losses;
    double final_l_out = 0;  // mean output loss over the last tenth of training
    double final_val = -1;
    int64_t frozen_final = 0;
};

// Mean output-MSE of the student against the teacher over held-out records.
inline double validation_loss(QuantizedModel& qm, DenoiserModel& teacher, const TimeCache* tc,
                              const LatentDataset& val, int max_records, int batch = 32) {
    check(!val.records.empty(), "validation: empty dataset");
    check(max_records >= 1, "validation: need at least one record");
    size_t n = std::min(val.records.size(), static_cast<size_t>(max_records));
    int64_t per = static_cast<int64_t>(val.payload_len());
    double sum = 0;
    int64_t count = 0;
    for (size_t i0 = 0; i0 < n; i0 += static_cast<size_t>(batch)) {
        size_t nb = std::min(static_cast<size_t>(batch), n - i0);
        Tensor x({static_cast<int>(nb), val.c, val.h, val.w});
        std::vector<int> ts, conds;
        for (size_t i = 0; i < nb; ++i) {
            const auto& r = val.records[i0 + i];
            std::copy_n(r.x.data(), per, x.data() + static_cast<int64_t>(i) * per);
            ts.push_back(r.t);
            conds.push_back(r.cond_id);
        }
        Ctx tctx;
        Tensor ref = teacher.forward(x, ts, conds, tctx, tc);
        Tensor out = qm.forward(x, ts, conds, tc, false);
        sum += loss_output(out, ref) * static_cast<double>(nb);
        count += static_cast<int64_t>(nb);
    }
    return sum / static_cast<double>(count);
}

// A dataset matches the teacher either directly (same fingerprint) or through
// the time cache linking the full generator model to its stripped twin.
inline void check_dataset_model(const LatentDataset& d, const DenoiserModel& teacher,
                                const TimeCache* tc) {
    uint64_t tfp = teacher.fingerprint();
    if (tc != nullptr) {
        check(d.model_fp == tc->model_fp || d.model_fp == tc->stripped_fp,
              "dataset was generated by a model the time cache does not know");
        check(tfp == tc->model_fp || tfp == tc->stripped_fp,
              "teacher does not match the time cache");
    } else {
        check(d.model_fp == tfp, "dataset was generated by a different model");
    }
}

inline TrainResult train_qat(QuantizedModel& qm, DenoiserModel& teacher, const TimeCache* tc,
                             const NoiseSchedule& sched, const QatConfig& cfg,
                             const LatentDataset* dataset, const DataSet* data,
                             const LatentDataset* val = nullptr) {
    using clock = std::chrono::steady_clock;
    auto t_start = clock::now();
    check(qm.calibrated(), "train-qat: quantizers are not calibrated");
    check(qm.net.cfg.img == teacher.cfg.img && qm.net.cfg.img_ch == teacher.cfg.img_ch,
          "train-qat: student/teacher shape mismatch");
    if (tc != nullptr && qm.net.stripped) check_cache_compat(*tc, qm.base_fp, sched);
    if (cfg.mode == PipelineMode::serial_to_parallel) {
        check(dataset != nullptr, "train-qat: s2p mode needs a latent dataset");
        check(dataset->sched_fp == sched.fingerprint(), "train-qat: dataset/schedule mismatch");
        check_dataset_model(*dataset, teacher, tc);
        check(dataset->records.size() >= static_cast<size_t>(cfg.batch),
              "train-qat: dataset smaller than one batch");
        check(dataset->missing_timesteps().empty(),
              "train-qat: dataset does not cover every timestep: " + dataset->coverage_report());
    }
    if (cfg.mode == PipelineMode::parallel)
        check(data != nullptr, "train-qat: parallel mode needs a data set");
    if (val != nullptr) check_dataset_model(*val, teacher, tc);

    TrainResult res;
    if (cfg.iters == 0) return res;

    // Sensitive layers: distillation targets and default tracking scope.
    std::vector<std::string> sensitive = select_sensitive_layers(qm.net, cfg.sensitive_profile);
    res.tracked_layers = cfg.track_all_layers ? qm.net.quantized_layers() : sensitive;
    res.tracker.momentum = cfg.osc_momentum;
    for (const auto& l : res.tracked_layers) res.tracker.track(l);
    std::set<std::string> capture_set(sensitive.begin(), sensitive.end());

    // Optimizer: model parameters densely (frozen elements masked per layer),
    // weight scales densely, bank scales sparsely by touched entry.
    Adam opt;
    for (auto* p : qm.net.params) {
        const uint8_t* frozen = nullptr;
        if (p->name.ends_with(".w")) {
            auto it = qm.wq.find(p->name.substr(0, p->name.size() - 2));
            if (it != qm.wq.end()) frozen = it->second.freeze_mask.data();
        }
        opt.add_dense(p->w.data(), p->g.data(), p->w.numel(), cfg.lr, frozen);
    }
    if (qm.qcfg.train_w_scales)
        for (auto& [k, w] : qm.wq)
            opt.add_dense(w.scales.data(), w.sgrad.data(), static_cast<int64_t>(w.scales.size()),
                          cfg.scale_lr);
    if (qm.qcfg.train_a_scales)
        for (auto& [k, a] : qm.aq)
            opt.add_sparse(a.bank.scales.data(), a.bank.sgrad.data(), a.bank.entries,
                           cfg.scale_lr, a.bank.touched.data());

    Rng rng(mix_seed(cfg.seed, 0x7a7));
    uint64_t sampler_before = instr::reverse_step_calls();

    // Mode state.
    std::vector<size_t> order;  // s2p: epoch permutation over records
    size_t cursor = 0;
    Tensor ser_x;  // serial: current lockstep trajectory batch
    std::vector<int> ser_conds;
    std::vector<Rng> ser_rngs;
    int ser_t = -1;

    const ModelConfig& mc = qm.net.cfg;
    int64_t per = static_cast<int64_t>(mc.img_ch) * mc.img * mc.img;
    double stability = 0;

    for (int it = 0; it < cfg.iters; ++it) {
        // ---- assemble the batch --------------------------------------------
        Tensor x;
        std::vector<int> ts, conds;
        if (cfg.mode == PipelineMode::serial_to_parallel) {
            if (cursor + static_cast<size_t>(cfg.batch) > order.size()) {
                order.resize(dataset->records.size());
                for (size_t i = 0; i < order.size(); ++i) order[i] = i;
                rng.shuffle(order);
                cursor = 0;
            }
            x = Tensor({cfg.batch, mc.img_ch, mc.img, mc.img});
            for (int i = 0; i < cfg.batch; ++i) {
                const auto& r = dataset->records[order[cursor++]];
                std::copy_n(r.x.data(), per, x.data() + static_cast<int64_t>(i) * per);
                ts.push_back(r.t);
                conds.push_back(r.cond_id);
            }
        } else if (cfg.mode == PipelineMode::parallel) {
            ParallelBatch pb = generate_parallel_batch(*data, sched, rng, cfg.batch);
            x = std::move(pb.x);
            ts = std::move(pb.ts);
            conds = std::move(pb.conds);
        } else {  // serial: follow teacher trajectories step by step
            if (ser_t < 0) {
                ser_x = Tensor({cfg.batch, mc.img_ch, mc.img, mc.img});
                ser_conds.clear();
                ser_rngs.clear();
                for (int i = 0; i < cfg.batch; ++i) {
                    ser_conds.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(mc.classes))));
                    ser_rngs.emplace_back(mix_seed(cfg.seed, rng.below(1ull << 62)));
                    for (int64_t j = 0; j < per; ++j)
                        ser_x.v[static_cast<size_t>(i * per + j)] = ser_rngs.back().normalf();
                }
                ser_t = sched.T - 1;
            }
            x = ser_x;
            ts.assign(static_cast<size_t>(cfg.batch), ser_t);
            conds = ser_conds;
        }

        // ---- teacher pass (loss targets + sensitive features) --------------
        Ctx tctx;
        std::map<std::string, Tensor> tcaps;
        tctx.capture_names = cfg.distill ? &capture_set : nullptr;
        tctx.captures = cfg.distill ? &tcaps : nullptr;
        Tensor ref = teacher.forward(x, ts, conds, tctx, tc);

        // ---- student pass + losses ------------------------------------------
        qm.net.zero_grads();
        qm.zero_quant_grads();
        std::map<std::string, Tensor> scaps;
        Tensor out = qm.forward(x, ts, conds, tc, true, cfg.distill ? &capture_set : nullptr,
                                cfg.distill ? &scaps : nullptr);
        IterLog lg;
        lg.iter = it + 1;
        Tensor gout;
        lg.l_out = loss_output(out, ref, &gout);
        std::map<std::string, Tensor> gsen;
        if (cfg.distill) lg.l_sen = loss_sensitive(scaps, tcaps, sensitive, &gsen);
        check(std::isfinite(lg.l_out + lg.l_sen),
              strfmt("train-qat: non-finite loss at iteration %d", it + 1));
        qm.backward(gout, cfg.distill ? &gsen : nullptr);

        // ---- gradient statistics (before the step consumes them) -----------
        auto s0 = clock::now();
        for (const auto& l : res.tracked_layers)
            res.grads.observe(l, qm.net.layer_weight(l)->g);
        stability += std::chrono::duration<double>(clock::now() - s0).count();

        opt.step();

        // ---- oscillation tracking + selective freezing ----------------------
        s0 = clock::now();
        for (const auto& l : res.tracked_layers) res.tracker.update(l, qm.effective_codes(l));
        if (cfg.freeze)
            apply_selective_freeze(qm, res.tracker, it + 1, cfg.freeze_every,
                                   cfg.freeze_threshold);
        lg.osc_percent = res.tracker.oscillation_percent(cfg.freeze_threshold);
        lg.frozen = qm.frozen_count();
        stability += std::chrono::duration<double>(clock::now() - s0).count();

        // ---- serial mode: advance the trajectories one denoising step ------
        if (cfg.mode == PipelineMode::serial) {
            Tensor z(ser_x.dims);
            if (ser_t > 0)
                for (int i = 0; i < cfg.batch; ++i)
                    for (int64_t j = 0; j < per; ++j)
                        z.v[static_cast<size_t>(i * per + j)] =
                            ser_rngs[static_cast<size_t>(i)].normalf();
            ser_x = reverse_step(ser_x, ref, ser_t, ser_t > 0 ? &z : nullptr, sched);
            --ser_t;  // at -1 the next iteration starts fresh trajectories
        }

        if (val && cfg.val_every > 0 && ((it + 1) % cfg.val_every == 0 || it + 1 == cfg.iters))
            res.val_losses.emplace_back(it + 1,
                                        validation_loss(qm, teacher, tc, *val, cfg.val_records));

        if (cfg.log_every > 0 && ((it + 1) % cfg.log_every == 0 || it == 0))
            std::fprintf(stderr, "[%s] iter %d/%d  l_out %.5f  l_sen %.5f  osc %.2f%%  frozen %lld\n",
                         mode_name(cfg.mode), it + 1, cfg.iters, lg.l_out, lg.l_sen,
                         lg.osc_percent, static_cast<long long>(lg.frozen));
        res.log.push_back(lg);
    }

    res.sampler_steps = instr::reverse_step_calls() - sampler_before;
    res.stability_seconds = stability;
    res.total_seconds = std::chrono::duration<double>(clock::now() - t_start).count();
    res.frozen_final = qm.frozen_count();
    size_t tail = std::max<size_t>(1, res.log.size() / 10);
    double acc = 0;
    for (size_t i = res.log.size() - tail; i < res.log.size(); ++i) acc += res.log[i].l_out;
    res.final_l_out = acc / static_cast<double>(tail);
    if (!res.val_losses.empty()) res.final_val = res.val_losses.back().second;
    return res;
}

// ---------------------------------------------------------------------------
// Latent-range mismatch analysis: per-timestep spread of forward-noised
// latents vs FP inference-trajectory latents from matched initial noise.
// ---------------------------------------------------------------------------
struct RangeRow {
    int t = 0;
    double fwd_min = 0, fwd_max = 0, fwd_std = 0;
    double traj_min = 0, traj_max = 0, traj_std = 0;
    double delta = 0;  // |fwd_std - traj_std| / traj_std
};

struct RangeReport {
    std::vector<RangeRow> rows;
    double max_delta = 0;
    int argmax_t = 0;
    bool low_confidence = false;  // model output is ~zero (untrained)

    std::string text() const {
        std::string s = "t  fwd[min max std]  traj[min max std]  delta\n";
        for (const auto& r : rows)
            s += strfmt("%3d  %+.3f %+.3f %.4f  %+.3f %+.3f %.4f  %.4f\n", r.t, r.fwd_min,
                        r.fwd_max, r.fwd_std, r.traj_min, r.traj_max, r.traj_std, r.delta);
        s += strfmt("max delta %.4f at t=%d%s\n", max_delta, argmax_t,
                    low_confidence ? "  [low confidence: untrained model]" : "");
        return s;
    }
};

inline RangeReport latent_range_report(DenoiserModel& fp, const TimeCache* tc,
                                       const NoiseSchedule& sched, const DataSet& data,
                                       int n, uint64_t seed) {
    check(n >= 2, "range report: need at least two trajectories");
    check(data.size() > 0, "range report: empty data set");
    const ModelConfig& mc = fp.cfg;
    int64_t per = static_cast<int64_t>(mc.img_ch) * mc.img * mc.img;

    // Accumulators per timestep for both populations.
    struct Acc {
        double sum = 0, sq = 0, mn = 1e300, mx = -1e300;
        int64_t n = 0;
        void add(float v) {
            sum += v;
            sq += static_cast<double>(v) * v;
            mn = std::min(mn, static_cast<double>(v));
            mx = std::max(mx, static_cast<double>(v));
            ++n;
        }
        double stdev() const {
            double m = sum / static_cast<double>(n);
            return std::sqrt(std::max(0.0, sq / static_cast<double>(n) - m * m));
        }
    };
    std::vector<Acc> fwd(static_cast<size_t>(sched.T)), traj(static_cast<size_t>(sched.T));

    EpsFn eps = model_eps(fp, tc);
    double out_mag = 0;
    int64_t out_n = 0;
    for (int c0 = 0; c0 < n; c0 += 8) {
        int nb = std::min(8, n - c0);
        std::vector<int> conds;
        std::vector<uint64_t> seeds;
        for (int i = 0; i < nb; ++i) {
            conds.push_back((c0 + i) % mc.classes);
            seeds.push_back(mix_seed(seed, static_cast<uint64_t>(c0 + i)));
        }
        std::vector<std::vector<TrajPoint>> trajs;
        sample_batch(eps, sched, mc.img_ch, mc.img, conds, seeds, &trajs);
        for (int i = 0; i < nb; ++i) {
            // Matched construction: the trajectory's own initial latent is the
            // noise in the forward-noising closed form.
            const Tensor& eps0 = trajs[static_cast<size_t>(i)][0].x;
            const Tensor& x0 = data.imgs[static_cast<size_t>(c0 + i) % data.size()];
            for (const auto& tp : trajs[static_cast<size_t>(i)]) {
                for (int64_t j = 0; j < per; ++j)
                    traj[static_cast<size_t>(tp.t)].add(tp.x.v[static_cast<size_t>(j)]);
                Tensor xf = forward_noise(x0, eps0, tp.t, sched);
                for (int64_t j = 0; j < per; ++j)
                    fwd[static_cast<size_t>(tp.t)].add(xf.v[static_cast<size_t>(j)]);
            }
            // Probe for the untrained-model flag: magnitude of the prediction.
            std::vector<int> pts = {0};
            std::vector<int> pcs = {conds[static_cast<size_t>(i)]};
            Tensor pred = eps(trajs[static_cast<size_t>(i)].back().x, pts, pcs);
            for (float v : pred.v) out_mag += std::fabs(v);
            out_n += static_cast<int64_t>(pred.v.size());
        }
    }

    RangeReport rep;
    rep.low_confidence = (out_mag / static_cast<double>(out_n)) < 1e-6;
    for (int t = 0; t < sched.T; ++t) {
        const auto& a = fwd[static_cast<size_t>(t)];
        const auto& b = traj[static_cast<size_t>(t)];
        RangeRow r;
        r.t = t;
        r.fwd_min = a.mn;
        r.fwd_max = a.mx;
        r.fwd_std = a.stdev();
        r.traj_min = b.mn;
        r.traj_max = b.mx;
        r.traj_std = b.stdev();
        r.delta = std::fabs(r.fwd_std - r.traj_std) / std::max(1e-12, r.traj_std);
        if (r.delta > rep.max_delta) {
            rep.max_delta = r.delta;
            rep.argmax_t = t;
        }
        rep.rows.push_back(r);
    }
    return rep;
}

}  // namespace dq
