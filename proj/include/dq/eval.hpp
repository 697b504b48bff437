#pragma once

#include <string>
#include <vector>

#include "dq/metrics.hpp"
#include "dq/qmodel.hpp"
#include "dq/sampler.hpp"
#include "dq/timecache.hpp"

namespace dq {

struct EvalConfig {
    int images = 512;  // generated per side; recorded in the report
    double guidance = 1.0;
    uint64_t seed = 101;
    int batch = 16;
};

struct CondStat {
    int cond = 0;
    int count = 0;
    double ssim = 0;
    double pfd = 0;
};

// Every metric travels with its sample counts, the seed derivation, and the
// fingerprints of everything that could change the numbers. The substitution
// notice is part of the report text itself, never optional.
struct MetricReport {
    double fd_fp = 0;
    double fd_data = -1;  // -1: no data set supplied
    double ssim_mean = 0;
    double pfd_mean = 0;
    std::vector<CondStat> per_cond;
    int images = 0;
    int data_images = 0;
    int classes = 0;
    double guidance = 1;
    uint64_t base_seed = 0;
    uint64_t q_fp = 0, ref_fp = 0, sched_fp = 0, fx_fp = 0;

    std::string text() const {
        std::string s = "fidelity report\n";
        s += strfmt("  images %d per side  classes %d  guidance %.3f\n", images, classes,
                    guidance);
        s += strfmt("  seeds: image i uses mix(base=%llu, i), i in [0,%d)\n",
                    static_cast<unsigned long long>(base_seed), images);
        s += strfmt("  fingerprints: quantized %016llx  reference %016llx  schedule %016llx  "
                    "extractor %016llx\n",
                    static_cast<unsigned long long>(q_fp), static_cast<unsigned long long>(ref_fp),
                    static_cast<unsigned long long>(sched_fp),
                    static_cast<unsigned long long>(fx_fp));
        s += "  NOTE: fd_fp, fd_data and pfd use this repository's small seeded feature\n"
             "  extractor instead of standard pretrained metric networks; ssim uses a 7x7\n"
             "  uniform window on [0,1]-normalized pixels. Values are comparable only across\n"
             "  runs sharing the extractor fingerprint above.\n";
        s += strfmt("  fd_fp   %.6f  (%d vs %d images)\n", fd_fp, images, images);
        if (fd_data >= 0)
            s += strfmt("  fd_data %.6f  (%d images vs %d data images)\n", fd_data, images,
                        data_images);
        s += strfmt("  ssim    %.6f  (%d aligned pairs)\n", ssim_mean, images);
        s += strfmt("  pfd     %.6f  (%d aligned pairs)\n", pfd_mean, images);
        for (const auto& c : per_cond)
            s += strfmt("  cond %d: n %d  ssim %.6f  pfd %.6f\n", c.cond, c.count, c.ssim, c.pfd);
        return s;
    }
};

// Samples both sides with identical (condition, seed) pairs so images align,
// then scores similarity per pair and distribution distance per set.
inline MetricReport evaluate_eps(EpsFn q_eps, uint64_t q_fp, EpsFn ref_eps, uint64_t ref_fp,
                                 const NoiseSchedule& sched, FeatureExtractor& fx,
                                 const DataSet* data, int img_ch, int img, int classes,
                                 const EvalConfig& cfg) {
    check(cfg.images >= 2, "evaluate: need at least two images");
    check(cfg.batch >= 1, "evaluate: bad batch size");
    MetricReport rep;
    rep.images = cfg.images;
    rep.classes = classes;
    rep.guidance = cfg.guidance;
    rep.base_seed = cfg.seed;
    rep.q_fp = q_fp;
    rep.ref_fp = ref_fp;
    rep.sched_fp = sched.fingerprint();
    rep.fx_fp = fx.fingerprint();

    int64_t per = static_cast<int64_t>(img_ch) * img * img;
    Tensor q_imgs({cfg.images, img_ch, img, img});
    Tensor ref_imgs({cfg.images, img_ch, img, img});
    for (int i0 = 0; i0 < cfg.images; i0 += cfg.batch) {
        int nb = std::min(cfg.batch, cfg.images - i0);
        std::vector<int> conds;
        std::vector<uint64_t> seeds;
        for (int i = 0; i < nb; ++i) {
            conds.push_back((i0 + i) % classes);
            seeds.push_back(mix_seed(cfg.seed, static_cast<uint64_t>(i0 + i)));
        }
        Tensor bq = sample_batch(q_eps, sched, img_ch, img, conds, seeds);
        Tensor br = sample_batch(ref_eps, sched, img_ch, img, conds, seeds);
        std::copy_n(bq.data(), static_cast<int64_t>(nb) * per,
                    q_imgs.data() + static_cast<int64_t>(i0) * per);
        std::copy_n(br.data(), static_cast<int64_t>(nb) * per,
                    ref_imgs.data() + static_cast<int64_t>(i0) * per);
    }

    // Pairwise similarity; ssim in [0,1] pixel space, pfd in the extractor's
    // native model space.
    std::vector<CondStat> stats(static_cast<size_t>(classes));
    double ssim_sum = 0, pfd_sum = 0;
    for (int i = 0; i < cfg.images; ++i) {
        Tensor qi({1, img_ch, img, img}), ri({1, img_ch, img, img});
        std::copy_n(q_imgs.data() + static_cast<int64_t>(i) * per, per, qi.data());
        std::copy_n(ref_imgs.data() + static_cast<int64_t>(i) * per, per, ri.data());
        double s = ssim(to_unit_range(qi), to_unit_range(ri));
        double p = perceptual_feature_distance(fx, qi, ri);
        ssim_sum += s;
        pfd_sum += p;
        auto& cs = stats[static_cast<size_t>(i % classes)];
        cs.cond = i % classes;
        ++cs.count;
        cs.ssim += s;
        cs.pfd += p;
    }
    rep.ssim_mean = ssim_sum / cfg.images;
    rep.pfd_mean = pfd_sum / cfg.images;
    for (auto& cs : stats) {
        if (cs.count > 0) {
            cs.ssim /= cs.count;
            cs.pfd /= cs.count;
        }
        rep.per_cond.push_back(cs);
    }

    Tensor qf = features_batch(fx, q_imgs);
    Tensor rf = features_batch(fx, ref_imgs);
    rep.fd_fp = frechet_distance(qf, rf);
    if (data != nullptr) {
        check(data->size() >= 2, "evaluate: data set too small for a feature fit");
        Tensor dimgs({static_cast<int>(data->size()), img_ch, img, img});
        for (size_t i = 0; i < data->size(); ++i)
            std::copy_n(data->imgs[i].data(), per, dimgs.data() + static_cast<int64_t>(i) * per);
        rep.fd_data = frechet_distance(qf, features_batch(fx, dimgs));
        rep.data_images = static_cast<int>(data->size());
    }
    return rep;
}

inline MetricReport evaluate_pair(QuantizedModel& qm, const TimeCache* qtc, DenoiserModel& ref,
                                  const TimeCache* rtc, const NoiseSchedule& sched,
                                  FeatureExtractor& fx, const DataSet* data,
                                  const EvalConfig& cfg) {
    check(qm.calibrated(), "evaluate: quantizers are not calibrated");
    check(qm.T == sched.T, "evaluate: quantized model built for a different timestep count");
    check(qm.net.cfg.img == ref.cfg.img && qm.net.cfg.img_ch == ref.cfg.img_ch &&
              qm.net.cfg.classes == ref.cfg.classes,
          "evaluate: model shape mismatch");
    // The student's weights move during training, so its cache is checked
    // against the fingerprint captured at attach time.
    if (qtc != nullptr) check_cache_compat(*qtc, qm.base_fp, sched);
    if (rtc != nullptr) check_cache_compat(*rtc, ref.fingerprint(), sched);
    const ModelConfig& mc = ref.cfg;
    EpsFn q = guided_eps(qmodel_eps(qm, qtc), cfg.guidance, mc.classes);
    EpsFn r = guided_eps(model_eps(ref, rtc), cfg.guidance, mc.classes);
    return evaluate_eps(q, qm.net.fingerprint(), r, ref.fingerprint(), sched, fx, data,
                        mc.img_ch, mc.img, mc.classes, cfg);
}

// Reference-vs-reference evaluation (identity and near-identity checks).
inline MetricReport evaluate_models(DenoiserModel& a, const TimeCache* atc, DenoiserModel& b,
                                    const TimeCache* btc, const NoiseSchedule& sched,
                                    FeatureExtractor& fx, const DataSet* data,
                                    const EvalConfig& cfg) {
    if (atc != nullptr) check_cache_compat(*atc, a.fingerprint(), sched);
    if (btc != nullptr) check_cache_compat(*btc, b.fingerprint(), sched);
    check(a.cfg.img == b.cfg.img && a.cfg.img_ch == b.cfg.img_ch && a.cfg.classes == b.cfg.classes,
          "evaluate: model shape mismatch");
    const ModelConfig& mc = a.cfg;
    EpsFn ea = guided_eps(model_eps(a, atc), cfg.guidance, mc.classes);
    EpsFn eb = guided_eps(model_eps(b, btc), cfg.guidance, mc.classes);
    return evaluate_eps(ea, a.fingerprint(), eb, b.fingerprint(), sched, fx, data, mc.img_ch,
                        mc.img, mc.classes, cfg);
}

}  // namespace dq
