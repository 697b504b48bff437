#pragma once

#include <chrono>
#include <exception>
#include <string>
#include <vector>

#include "dq/eval.hpp"
#include "dq/pipeline.hpp"

namespace dq {

// ---------------------------------------------------------------------------
// Experiment drivers: the three pipelines at matched budget, the cumulative
// ablation grid, and the dataset shape tradeoff. All share one leg runner so
// identical configs give identical numbers across drivers.
// ---------------------------------------------------------------------------

struct CalibConfig {
    int trajectories = 8;  // serial mode: full sampled trajectories
    int batches = 16;      // parallel mode: independently noised batches
    int batch = 16;
    uint64_t seed = 7;
};

inline void calibrate_for_mode(QuantizedModel& qm, const TimeCache* tc, PipelineMode mode,
                               const NoiseSchedule& sched, const DataSet& data,
                               const LatentDataset* dataset, const CalibConfig& cc) {
    switch (mode) {
        case PipelineMode::serial:
            calibrate_serial(qm, tc, sched, cc.trajectories, cc.seed);
            break;
        case PipelineMode::parallel:
            calibrate_parallel(qm, tc, data, sched, cc.batches, cc.batch, cc.seed);
            break;
        case PipelineMode::serial_to_parallel:
            check(dataset != nullptr, "calibrate: s2p mode needs a latent dataset");
            calibrate_from_dataset(qm, tc, *dataset);
            break;
    }
}

struct RunOutcome {
    TrainResult train;
    MetricReport rep;
};

// Attach, calibrate in the mode's own style, train, score against the
// teacher. The student is attached from the teacher, so a stripped teacher
// (time precalculation on) yields a stripped student sharing its cache.
inline RunOutcome run_quantized_training(DenoiserModel& teacher, const TimeCache* tc,
                                         const NoiseSchedule& sched, FeatureExtractor& fx,
                                         const DataSet& data, const LatentDataset* dataset,
                                         const QuantConfig& quant, const QatConfig& qat,
                                         const CalibConfig& calib, const EvalConfig& eval) {
    QuantizedModel qm = attach_quantizers(teacher, quant, sched.T);
    calibrate_for_mode(qm, tc, qat.mode, sched, data, dataset, calib);
    RunOutcome out;
    out.train = train_qat(qm, teacher, tc, sched, qat,
                          qat.mode == PipelineMode::serial_to_parallel ? dataset : nullptr,
                          qat.mode == PipelineMode::parallel ? &data : nullptr);
    out.rep = evaluate_pair(qm, tc, teacher, tc, sched, fx, &data, eval);
    return out;
}

// ---------------------------------------------------------------------------
// Pipeline comparison at matched budget: same optimizer steps, batch size,
// calibration effort and evaluation images for all three modes.
// ---------------------------------------------------------------------------
struct CompareConfig {
    QuantConfig quant;
    QatConfig qat;        // `mode` is overridden per leg
    SerialGenConfig gen;  // dataset built for the s2p leg
    EvalConfig eval;
    CalibConfig calib;
    double osc_threshold = 0.1;  // flip-EMA level that counts a weight as oscillating
    int osc_window = 16;         // trailing window for the gradient oscillation index
};

struct LegResult {
    PipelineMode mode = PipelineMode::serial;
    bool ok = false;
    std::string error;  // failure annotation when !ok
    double fd_fp = 0;
    double fd_data = -1;
    double ssim = 0;
    double pfd = 0;
    double osc_percent = 0;     // share of tracked weights with hot flip EMA
    double grad_osc_index = 0;  // mean-gradient sign-flip rate over the window
    double final_l_out = 0;
    uint64_t sampler_steps = 0;  // reverse steps taken during training
    double seconds = 0;          // train wall time; kept out of text() rows
};

struct CompareResult {
    std::vector<LegResult> legs;  // serial, parallel, s2p
    int iters = 0, batch = 0, images = 0;

    const LegResult& leg(PipelineMode m) const {
        for (const auto& l : legs)
            if (l.mode == m) return l;
        throw Error("comparison: no such leg");
    }

    // Wall time stays out of the table so identical seeds give identical text.
    std::string text() const {
        std::string s = strfmt("pipeline comparison  (matched budget: %d iters, batch %d, "
                               "%d eval images per leg)\n",
                               iters, batch, images);
        s += "  mode      fd_fp      fd_data    ssim      pfd        osc%      gosc      "
             "l_out      steps\n";
        for (const auto& l : legs) {
            if (!l.ok) {
                s += strfmt("  %-8s  FAILED: %s\n", mode_name(l.mode), l.error.c_str());
                continue;
            }
            s += strfmt("  %-8s  %-9.4f  %-9.4f  %-8.4f  %-9.5f  %-8.3f  %-8.4f  %-9.5f  %llu\n",
                        mode_name(l.mode), l.fd_fp, l.fd_data, l.ssim, l.pfd, l.osc_percent,
                        l.grad_osc_index, l.final_l_out,
                        static_cast<unsigned long long>(l.sampler_steps));
        }
        return s;
    }
};

inline LegResult run_pipeline_leg(DenoiserModel& fp, const NoiseSchedule& sched,
                                  FeatureExtractor& fx, const DataSet& data,
                                  const LatentDataset* dataset, PipelineMode mode,
                                  const CompareConfig& cfg) {
    LegResult r;
    r.mode = mode;
    try {
        LatentDataset local;
        if (mode == PipelineMode::serial_to_parallel && dataset == nullptr) {
            local = generate_serial_dataset(fp, nullptr, sched, cfg.gen);
            dataset = &local;
        }
        QatConfig qc = cfg.qat;
        qc.mode = mode;
        RunOutcome out = run_quantized_training(fp, nullptr, sched, fx, data, dataset, cfg.quant,
                                                qc, cfg.calib, cfg.eval);
        r.fd_fp = out.rep.fd_fp;
        r.fd_data = out.rep.fd_data;
        r.ssim = out.rep.ssim_mean;
        r.pfd = out.rep.pfd_mean;
        r.osc_percent = out.train.tracker.oscillation_percent(cfg.osc_threshold);
        r.grad_osc_index = out.train.grads.overall_index(std::min(cfg.osc_window, qc.iters));
        r.final_l_out = out.train.final_l_out;
        r.sampler_steps = out.train.sampler_steps;
        r.seconds = out.train.total_seconds;
        r.ok = true;
    } catch (const std::exception& e) {
        r.error = e.what();
    }
    return r;
}

inline CompareResult compare_pipelines(DenoiserModel& fp, const NoiseSchedule& sched,
                                       FeatureExtractor& fx, const DataSet& data,
                                       const CompareConfig& cfg) {
    check(cfg.qat.iters >= 2, "comparison: need at least two iterations");
    CompareResult res;
    res.iters = cfg.qat.iters;
    res.batch = cfg.qat.batch;
    res.images = cfg.eval.images;
    for (PipelineMode m :
         {PipelineMode::serial, PipelineMode::parallel, PipelineMode::serial_to_parallel})
        res.legs.push_back(run_pipeline_leg(fp, sched, fx, data, nullptr, m, cfg));
    return res;
}

// ---------------------------------------------------------------------------
// Cumulative ablation. Each step toggles one feature on top of the previous
// row; the standard grid walks from the plain serial pipeline to the full
// stack. Rows share seeds, the dataset and the time cache.
// ---------------------------------------------------------------------------
struct AblationStep {
    std::string name;
    bool s2p = false;
    bool time_cache = false;
    bool mstep = false;  // per-timestep activation quantizer bank
    bool distill = false;
    bool freeze = false;
};

inline std::vector<AblationStep> standard_ablation_steps() {
    return {
        {"base", false, false, false, false, false},
        {"+s2p", true, false, false, false, false},
        {"+time", true, true, false, false, false},
        {"+mstep", true, true, true, false, false},
        {"+distill", true, true, true, true, false},
        {"+freeze", true, true, true, true, true},
    };
}

struct AblationConfig {
    QuantConfig quant;    // multi_timestep is driven by each row's mstep flag
    QatConfig qat;        // mode / distill / freeze driven per row
    SerialGenConfig gen;  // shared dataset for the s2p rows
    EvalConfig eval;
    CalibConfig calib;
};

struct AblationRow {
    AblationStep step;
    double fd_fp = 0;
    double fd_data = -1;
    double ssim = 0;
    double pfd = 0;
    double final_l_out = 0;
    int64_t frozen = 0;
    bool flagged = false;  // questionable combination, run anyway
    std::string note;
};

struct AblationResult {
    std::vector<AblationRow> rows;

    std::string text() const {
        std::string s = "cumulative ablation\n";
        s += "  row       s2p time mstep dist frz  fd_fp      fd_data    ssim      pfd        "
             "l_out      frozen\n";
        for (const auto& r : rows) {
            const auto& st = r.step;
            s += strfmt("  %-8s  %-3s %-4s %-5s %-4s %-3s  %-9.4f  %-9.4f  %-8.4f  %-9.5f  "
                        "%-9.5f  %lld%s%s\n",
                        st.name.c_str(), st.s2p ? "on" : "-", st.time_cache ? "on" : "-",
                        st.mstep ? "on" : "-", st.distill ? "on" : "-", st.freeze ? "on" : "-",
                        r.fd_fp, r.fd_data, r.ssim, r.pfd, r.final_l_out,
                        static_cast<long long>(r.frozen), r.note.empty() ? "" : "  ! ",
                        r.note.c_str());
        }
        return s;
    }
};

inline AblationResult run_ablation(DenoiserModel& fp, const NoiseSchedule& sched,
                                   FeatureExtractor& fx, const DataSet& data,
                                   const std::vector<AblationStep>& steps,
                                   const AblationConfig& cfg) {
    check(!steps.empty(), "ablation: empty grid");
    AblationResult res;

    // Shared artifacts, built once when first needed: the latent dataset comes
    // from the full model, so rows with and without the cache can use it.
    LatentDataset ds;
    bool have_ds = false;
    TimeCache tc;
    DenoiserModel stripped;
    bool have_tc = false;

    for (const auto& st : steps) {
        if (st.s2p && !have_ds) {
            ds = generate_serial_dataset(fp, nullptr, sched, cfg.gen);
            have_ds = true;
        }
        if (st.time_cache && !have_tc) {
            tc = build_time_cache(fp, sched);
            stripped = strip_time_layers(fp);
            have_tc = true;
        }
        QuantConfig q = cfg.quant;
        q.multi_timestep = st.mstep;
        QatConfig qc = cfg.qat;
        qc.mode = st.s2p ? PipelineMode::serial_to_parallel : PipelineMode::serial;
        qc.distill = st.distill;
        qc.freeze = st.freeze;
        DenoiserModel& teacher = st.time_cache ? stripped : fp;
        const TimeCache* tcp = st.time_cache ? &tc : nullptr;
        RunOutcome out = run_quantized_training(teacher, tcp, sched, fx, data,
                                                st.s2p ? &ds : nullptr, q, qc, cfg.calib,
                                                cfg.eval);
        AblationRow row;
        row.step = st;
        row.fd_fp = out.rep.fd_fp;
        row.fd_data = out.rep.fd_data;
        row.ssim = out.rep.ssim_mean;
        row.pfd = out.rep.pfd_mean;
        row.final_l_out = out.train.final_l_out;
        row.frozen = out.train.frozen_final;
        if (st.freeze && !st.distill) {
            row.flagged = true;
            row.note = "freezing without distillation";
        }
        res.rows.push_back(row);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Dataset shape tradeoff: few conditions contributing many records each vs
// many conditions contributing one record each, at a matched record count.
// Both legs train identically; the dataset is the only difference.
// ---------------------------------------------------------------------------
struct TradeoffConfig {
    QuantConfig quant;
    QatConfig qat;  // mode forced to s2p; validation forced on
    EvalConfig eval;
    int conditions = 40;        // few-conditions leg
    int steps_per_prompt = 10;  // records per condition in that leg
    int val_conditions = 64;    // held-out validation set size
    uint64_t gen_seed = 11;
    double guidance = 1.0;
    int gen_batch = 16;
};

struct TradeoffLeg {
    std::string name;
    int conditions = 0;
    int steps = 0;
    size_t records = 0;
    int64_t bytes = 0;       // serialized dataset size
    double gen_seconds = 0;  // dataset generation wall time
    double train_loss = 0;   // mean output loss over the last tenth of training
    double val_loss = 0;     // held-out validation loss at the end
    double gap = 0;          // val_loss - train_loss
    double fd_fp = 0;
    double ssim = 0;
};

struct TradeoffResult {
    TradeoffLeg few_many;
    TradeoffLeg many_one;

    // with_timing=false drops the wall-clock column so the text is exactly
    // reproducible across reruns.
    std::string text(bool with_timing = true) const {
        std::string s = "dataset shape tradeoff  (matched record count)\n";
        s += "  leg        conds  steps  records  bytes    ";
        if (with_timing) s += "  gen_sec ";
        s += "  train_l    val_l      gap        fd_fp     ssim\n";
        for (const TradeoffLeg* l : {&few_many, &many_one}) {
            s += strfmt("  %-9s  %-5d  %-5d  %-7zu  %-9lld", l->name.c_str(), l->conditions,
                        l->steps, l->records, static_cast<long long>(l->bytes));
            if (with_timing) s += strfmt("  %-8.2f", l->gen_seconds);
            s += strfmt("  %-9.5f  %-9.5f  %-9.5f  %-8.4f  %.4f\n", l->train_loss, l->val_loss,
                        l->gap, l->fd_fp, l->ssim);
        }
        return s;
    }
};

inline TradeoffLeg run_tradeoff_leg(const std::string& name, DenoiserModel& fp,
                                    const NoiseSchedule& sched, FeatureExtractor& fx,
                                    const DataSet& data, const SerialGenConfig& gen,
                                    const LatentDataset& val, const TradeoffConfig& cfg) {
    using clock = std::chrono::steady_clock;
    TradeoffLeg leg;
    leg.name = name;
    leg.conditions = gen.conditions;
    leg.steps = gen.steps_per_prompt;

    auto t0 = clock::now();
    LatentDataset ds = generate_serial_dataset(fp, nullptr, sched, gen);
    leg.gen_seconds = std::chrono::duration<double>(clock::now() - t0).count();
    leg.records = ds.records.size();
    leg.bytes = ds.byte_size();

    QuantizedModel qm = attach_quantizers(fp, cfg.quant, sched.T);
    calibrate_from_dataset(qm, nullptr, ds);
    QatConfig qc = cfg.qat;
    qc.mode = PipelineMode::serial_to_parallel;
    if (qc.val_every <= 0) qc.val_every = qc.iters;
    TrainResult tr = train_qat(qm, fp, nullptr, sched, qc, &ds, nullptr, &val);
    leg.train_loss = tr.final_l_out;
    leg.val_loss = tr.final_val;
    leg.gap = leg.val_loss - leg.train_loss;

    MetricReport rep = evaluate_pair(qm, nullptr, fp, nullptr, sched, fx, &data, cfg.eval);
    leg.fd_fp = rep.fd_fp;
    leg.ssim = rep.ssim_mean;
    return leg;
}

inline TradeoffResult dataset_tradeoff_experiment(DenoiserModel& fp, const NoiseSchedule& sched,
                                                  FeatureExtractor& fx, const DataSet& data,
                                                  const TradeoffConfig& cfg) {
    check(cfg.conditions >= 1 && cfg.steps_per_prompt >= 1, "tradeoff: bad dataset shape");
    check(cfg.qat.iters >= 1, "tradeoff: need training iterations");

    SerialGenConfig few;
    few.conditions = cfg.conditions;
    few.steps_per_prompt = cfg.steps_per_prompt;
    few.seed = cfg.gen_seed;
    few.guidance = cfg.guidance;
    few.batch = cfg.gen_batch;

    SerialGenConfig many = few;
    many.conditions = cfg.conditions * cfg.steps_per_prompt;
    many.steps_per_prompt = 1;

    SerialGenConfig vg = few;
    vg.conditions = cfg.val_conditions;
    vg.steps_per_prompt = 1;
    vg.seed = mix_seed(cfg.gen_seed, 0x7e57);
    LatentDataset val = generate_serial_dataset(fp, nullptr, sched, vg);

    TradeoffResult res;
    res.few_many = run_tradeoff_leg("few_many", fp, sched, fx, data, few, val, cfg);
    res.many_one = run_tradeoff_leg("many_one", fp, sched, fx, data, many, val, cfg);
    return res;
}

}  // namespace dq
