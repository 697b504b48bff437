#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "dq/qmodel.hpp"
#include "dq/sampler.hpp"

using namespace dq;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.base = 8;
    c.img = 8;
    c.classes = 3;
    c.sin_dim = 8;
    c.emb_dim = 8;
    c.time_hidden = 16;
    c.gn_groups = 4;
    return c;
}

// Fresh models predict zero noise by design (zero-initialized output conv),
// which would make closeness tests vacuous; give the output layer real values.
DenoiserModel lively_model(uint64_t seed, const ModelConfig& cfg) {
    Rng rng(seed);
    DenoiserModel m(cfg, false, rng);
    m.find_param("out_conv.w")->w.fill_normal(rng, 0.2f);
    m.find_param("out_conv.b")->w.fill_normal(rng, 0.05f);
    return m;
}

// Runs one forward per timestep bucket so every bank entry gets observed.
void observe_all_t(QuantizedModel& qm, int T, uint64_t seed) {
    Rng rng(seed);
    const auto& c = qm.net.cfg;
    qm.begin_observe();
    for (int t0 = 0; t0 < T; t0 += 4) {
        int nb = std::min(4, T - t0);
        Tensor x({nb, c.img_ch, c.img, c.img});
        x.fill_normal(rng);
        std::vector<int> ts, conds;
        for (int i = 0; i < nb; ++i) {
            ts.push_back(t0 + i);
            conds.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(c.classes))));
        }
        qm.forward(x, ts, conds, nullptr, false);
    }
    qm.end_observe();
}

}  // namespace

TEST_CASE("qmodel: attach covers every layer and site", "[qmodel]") {
    int T = 12;
    DenoiserModel m = lively_model(3, tiny_cfg());
    QuantConfig qc;
    QuantizedModel qm = attach_quantizers(m, qc, T);

    auto layers = qm.net.quantized_layers();
    auto sites = qm.net.act_sites();
    REQUIRE(qm.wq.size() == layers.size());
    REQUIRE(qm.aq.size() == sites.size());
    for (const auto& l : layers) REQUIRE(qm.wq.count(l) == 1);
    for (const auto& s : sites) REQUIRE(qm.aq.count(s) == 1);
    for (const auto& [k, a] : qm.aq) REQUIRE(a.bank.entries == T);
    REQUIRE(qm.bank_param_count() == static_cast<int64_t>(sites.size()) * T * 2);
    REQUIRE_FALSE(qm.calibrated());

    // The wrapped copy starts from the same parameters as the source model.
    REQUIRE(qm.net.fingerprint() == m.fingerprint());

    // Forward before calibration is an error, not silent FP execution.
    Tensor x({1, 1, 8, 8});
    REQUIRE_THROWS_AS(qm.forward(x, {0}, {0}, nullptr, false), Error);
}

TEST_CASE("qmodel: single-entry banks when multi-timestep is off", "[qmodel]") {
    DenoiserModel m = lively_model(4, tiny_cfg());
    QuantConfig qc;
    qc.multi_timestep = false;
    QuantizedModel qm = attach_quantizers(m, qc, 12);
    for (const auto& [k, a] : qm.aq) REQUIRE(a.bank.entries == 1);
    observe_all_t(qm, 12, 7);
    REQUIRE(qm.calibrated());
    for (const auto& [k, a] : qm.aq) REQUIRE(a.bank.calibrated[0] == 1);
}

TEST_CASE("qmodel: 16-bit quantization tracks the FP forward closely", "[qmodel]") {
    int T = 12;
    DenoiserModel m = lively_model(5, tiny_cfg());
    QuantConfig qc;
    qc.w_bits = 16;
    qc.a_bits = 16;
    QuantizedModel qm = attach_quantizers(m, qc, T);

    // Tight calibration: observe the very batches the comparison will run on,
    // so no activation falls outside its calibrated range. (Range clipping is
    // a property of min-max calibration, not of the bitwidth.)
    Rng rng(31);
    std::vector<Tensor> xs;
    std::vector<std::vector<int>> tss;
    std::vector<std::vector<int>> condss;
    for (int rep = 0; rep < 5; ++rep) {
        Tensor x({3, 1, 8, 8});
        x.fill_normal(rng);
        xs.push_back(x);
        tss.push_back({static_cast<int>(rng.below(12)), static_cast<int>(rng.below(12)),
                       static_cast<int>(rng.below(12))});
        condss.push_back({0, 1, 2});
    }
    qm.begin_observe();
    for (int rep = 0; rep < 5; ++rep)
        qm.forward(xs[static_cast<size_t>(rep)], tss[static_cast<size_t>(rep)],
                   condss[static_cast<size_t>(rep)], nullptr, false);
    qm.end_observe();
    REQUIRE(qm.calibrated());

    double worst = 0, ref_mag = 0;
    for (int rep = 0; rep < 5; ++rep) {
        Ctx ctx;
        Tensor fp = m.forward(xs[static_cast<size_t>(rep)], tss[static_cast<size_t>(rep)],
                              condss[static_cast<size_t>(rep)], ctx);
        Tensor q = qm.forward(xs[static_cast<size_t>(rep)], tss[static_cast<size_t>(rep)],
                              condss[static_cast<size_t>(rep)], nullptr, false);
        worst = std::max(worst, max_abs_diff(fp, q));
        ref_mag = std::max(ref_mag, static_cast<double>(fp.max_abs()));
    }
    REQUIRE(ref_mag > 0.01);  // the comparison is not vacuous
    REQUIRE(worst < 1e-3);
}

TEST_CASE("qmodel: 4-bit weights distort more than 16-bit", "[qmodel]") {
    int T = 8;
    DenoiserModel m = lively_model(6, tiny_cfg());
    QuantConfig hi, lo;
    hi.w_bits = 16;
    hi.a_bits = 16;
    lo.w_bits = 4;
    lo.a_bits = 8;
    QuantizedModel qhi = attach_quantizers(m, hi, T);
    QuantizedModel qlo = attach_quantizers(m, lo, T);
    observe_all_t(qhi, T, 9);
    observe_all_t(qlo, T, 9);

    Rng rng(32);
    Tensor x({2, 1, 8, 8});
    x.fill_normal(rng);
    Ctx ctx;
    Tensor fp = m.forward(x, {1, 6}, {0, 1}, ctx);
    double ehi = max_abs_diff(fp, qhi.forward(x, {1, 6}, {0, 1}, nullptr, false));
    double elo = max_abs_diff(fp, qlo.forward(x, {1, 6}, {0, 1}, nullptr, false));
    REQUIRE(ehi < elo);
    REQUIRE(elo > 1e-3);
}

TEST_CASE("qmodel: timestep tag routes to its own bank entry", "[qmodel]") {
    int T = 12;
    DenoiserModel m = lively_model(7, tiny_cfg());
    QuantConfig qc;
    QuantizedModel qm = attach_quantizers(m, qc, T);
    observe_all_t(qm, T, 11);

    Rng rng(41);
    Tensor x({2, 1, 8, 8});
    x.fill_normal(rng);

    // Train-mode forward records which entry each sample used.
    qm.forward(x, {5, 9}, {0, 1}, nullptr, true);
    for (const auto& [k, a] : qm.aq) {
        REQUIRE(a.last_entries == std::vector<int>{5, 9});
        REQUIRE(a.bank.touched[5] == 1);
        REQUIRE(a.bank.touched[9] == 1);
        REQUIRE(a.bank.touched[0] == 0);
    }

    // Perturbing entry 9's scale at one site changes t=9 outputs only.
    Tensor base5 = qm.forward(x, {5, 5}, {0, 1}, nullptr, false);
    Tensor base9 = qm.forward(x, {9, 9}, {0, 1}, nullptr, false);
    qm.aq.at("in_conv").bank.scales[9] *= 4.0f;
    Tensor pert5 = qm.forward(x, {5, 5}, {0, 1}, nullptr, false);
    Tensor pert9 = qm.forward(x, {9, 9}, {0, 1}, nullptr, false);
    REQUIRE(max_abs_diff(base5, pert5) == 0.0);
    REQUIRE(max_abs_diff(base9, pert9) > 0.0);
}

TEST_CASE("qmodel: a sample's output does not depend on batch composition", "[qmodel]") {
    int T = 12;
    DenoiserModel m = lively_model(8, tiny_cfg());
    QuantConfig qc;
    QuantizedModel qm = attach_quantizers(m, qc, T);
    observe_all_t(qm, T, 13);

    Rng rng(43);
    Tensor xa({1, 1, 8, 8}), xb({1, 1, 8, 8});
    xa.fill_normal(rng);
    xb.fill_normal(rng);
    Tensor both({2, 1, 8, 8});
    std::copy(xa.v.begin(), xa.v.end(), both.v.begin());
    std::copy(xb.v.begin(), xb.v.end(), both.v.begin() + xa.v.size());

    Tensor solo = qm.forward(xa, {5}, {0}, nullptr, false);
    Tensor pair = qm.forward(both, {5, 9}, {0, 2}, nullptr, false);
    for (size_t i = 0; i < solo.v.size(); ++i) REQUIRE(pair.v[i] == solo.v[i]);
}

TEST_CASE("qmodel: weights already on the quant grid pass through exactly", "[qmodel]") {
    int T = 4;
    DenoiserModel m = lively_model(9, tiny_cfg());
    // Rewrite one layer's weights as exact multiples of 0.25 with max 1.75, so
    // per-channel calibration lands on scale = 1.75/7 = 0.25 exactly.
    Param* p = m.find_param("rb1.conv1.w");
    Rng rng(44);
    for (auto& v : p->w.v) {
        int k = static_cast<int>(rng.below(15)) - 7;
        v = static_cast<float>(k) * 0.25f;
    }
    int64_t cols = p->w.dim(1);
    for (int64_t r = 0; r < p->w.dim(0); ++r) p->w.v[static_cast<size_t>(r * cols)] = 1.75f;

    QuantConfig qc;
    QuantizedModel qm = attach_quantizers(m, qc, T);
    observe_all_t(qm, T, 15);
    REQUIRE(qm.wq.at("rb1.conv1").scales[0] == 0.25f);
    const Tensor& weff = qm.weight("rb1.conv1", qm.net.find_param("rb1.conv1.w")->w);
    for (size_t i = 0; i < weff.v.size(); ++i)
        REQUIRE(weff.v[i] == qm.net.find_param("rb1.conv1.w")->w.v[i]);
}

TEST_CASE("qmodel: weight gradient passes only in-range elements", "[qmodel]") {
    int T = 4;
    DenoiserModel m = lively_model(10, tiny_cfg());
    QuantConfig qc;
    QuantizedModel qm = attach_quantizers(m, qc, T);
    observe_all_t(qm, T, 17);

    // Shrink one row's scale so its large-magnitude weights clip.
    auto& w = qm.wq.at("rb1.conv1");
    w.scales[0] *= 0.5f;
    qm.train_mode = true;
    const Tensor& win = qm.net.find_param("rb1.conv1.w")->w;
    qm.weight("rb1.conv1", win);

    Tensor g_eff(win.dims), g_accum(win.dims);
    std::fill(g_eff.v.begin(), g_eff.v.end(), 1.0f);
    qm.weight_grad("rb1.conv1", g_eff, g_accum);

    int clipped = 0;
    for (size_t i = 0; i < win.v.size(); ++i) {
        int64_t row = static_cast<int64_t>(i) / w.cols;
        float s = w.scales[static_cast<size_t>(row)];
        double code = round_half_even(win.v[i] / s);
        bool in = code >= -8 && code <= 7;
        REQUIRE(g_accum.v[i] == (in ? 1.0f : 0.0f));
        if (!in) ++clipped;
    }
    REQUIRE(clipped > 0);  // the shrink actually produced clipped weights

    // Scale gradient accumulates per row: row 0 saw clipped elements, so its
    // entry includes grid-edge terms; all rows get a finite value.
    for (float sg : w.sgrad) REQUIRE(std::isfinite(sg));
}

TEST_CASE("qmodel: freezing pins integer codes monotonically", "[qmodel]") {
    int T = 4;
    DenoiserModel m = lively_model(11, tiny_cfg());
    QuantConfig qc;
    QuantizedModel qm = attach_quantizers(m, qc, T);
    observe_all_t(qm, T, 19);

    const std::string layer = "rb2.conv2";
    Param* p = qm.net.find_param(layer + ".w");
    auto codes_before = qm.effective_codes(layer);

    std::vector<uint8_t> mask(p->w.v.size(), 0);
    for (size_t i = 0; i < mask.size(); i += 3) mask[i] = 1;
    qm.freeze_elements(layer, mask);
    int64_t expect = 0;
    for (auto f : mask) expect += f;
    REQUIRE(qm.frozen_count() == expect);

    // Drift the underlying weights; frozen codes hold, the rest may move.
    Rng rng(45);
    for (auto& v : p->w.v) v += 0.2f * rng.normalf();
    auto codes_after = qm.effective_codes(layer);
    bool some_moved = false;
    for (size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) REQUIRE(codes_after[i] == codes_before[i]);
        else some_moved |= (codes_after[i] != codes_before[i]);
    }
    REQUIRE(some_moved);

    // The forward path uses the pinned codes and blocks their weight gradient.
    qm.train_mode = true;
    const Tensor& weff = qm.weight(layer, p->w);
    auto& w = qm.wq.at(layer);
    for (size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        int64_t row = static_cast<int64_t>(i) / w.cols;
        REQUIRE(weff.v[i] ==
                static_cast<float>(codes_before[i]) * w.scales[static_cast<size_t>(row)]);
        REQUIRE(w.cache.in_range[i] == 0);
        REQUIRE(w.cache.dscale[i] == static_cast<float>(codes_before[i]));
    }

    // Freezing more elements never unfreezes old ones.
    std::vector<uint8_t> mask2(p->w.v.size(), 0);
    mask2[1] = 1;
    qm.freeze_elements(layer, mask2);
    REQUIRE(qm.frozen_count() >= expect + 1);
    auto codes2 = qm.effective_codes(layer);
    for (size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) REQUIRE(codes2[i] == codes_before[i]);
}

TEST_CASE("qmodel: bank entries not in the batch stay bit-identical through a step", "[qmodel]") {
    int T = 12;
    DenoiserModel m = lively_model(12, tiny_cfg());
    QuantConfig qc;
    QuantizedModel qm = attach_quantizers(m, qc, T);
    observe_all_t(qm, T, 21);

    Adam opt;
    for (auto& [k, a] : qm.aq)
        opt.add_sparse(a.bank.scales.data(), a.bank.sgrad.data(), a.bank.entries, 1e-2,
                       a.bank.touched.data());

    std::map<std::string, std::vector<float>> before;
    for (auto& [k, a] : qm.aq) before[k] = a.bank.scales;

    Rng rng(46);
    Tensor x({2, 1, 8, 8});
    x.fill_normal(rng);
    qm.zero_quant_grads();
    qm.net.zero_grads();
    Tensor out = qm.forward(x, {3, 7}, {0, 1}, nullptr, true);
    Tensor gout(out.dims);
    for (auto& g : gout.v) g = rng.normalf();
    qm.backward(gout);

    for (auto& [k, a] : qm.aq) {
        for (int e = 0; e < a.bank.entries; ++e) {
            bool hit = (e == 3 || e == 7);
            REQUIRE(a.bank.touched[static_cast<size_t>(e)] == (hit ? 1 : 0));
            if (!hit) REQUIRE(a.bank.sgrad[static_cast<size_t>(e)] == 0.0f);
        }
    }
    opt.step();
    int changed = 0;
    for (auto& [k, a] : qm.aq) {
        for (int e = 0; e < a.bank.entries; ++e) {
            if (e == 3 || e == 7) {
                changed += (a.bank.scales[static_cast<size_t>(e)] != before[k][static_cast<size_t>(e)]);
            } else {
                REQUIRE(a.bank.scales[static_cast<size_t>(e)] == before[k][static_cast<size_t>(e)]);
            }
        }
    }
    REQUIRE(changed > 0);
}

TEST_CASE("qmodel: bank parameters are a tiny fraction of the model", "[qmodel]") {
    Rng rng(1);
    DenoiserModel full(ModelConfig{}, false, rng);
    int T = 100;
    QuantConfig qc;
    for (bool stripped : {false, true}) {
        DenoiserModel* src = &full;
        DenoiserModel strip;
        if (stripped) {
            strip = strip_time_layers(full);
            src = &strip;
        }
        QuantizedModel qm = attach_quantizers(*src, qc, T);
        int64_t sites = static_cast<int64_t>(src->act_sites().size());
        REQUIRE(qm.bank_param_count() == sites * T * 2);
        double frac = static_cast<double>(qm.bank_param_count()) /
                      static_cast<double>(src->param_count());
        INFO("bank params " << qm.bank_param_count() << " model params " << src->param_count());
        REQUIRE(frac < 0.01);
    }
}

TEST_CASE("qmodel: quantized sampler runs deterministically", "[qmodel]") {
    ModelConfig cfg = tiny_cfg();
    DenoiserModel m = lively_model(13, cfg);
    int T = 12;
    auto sched = build_schedule(T, 1e-4, 0.2);
    QuantConfig qc;
    QuantizedModel qm = attach_quantizers(m, qc, T);
    observe_all_t(qm, T, 23);

    uint64_t calls0 = instr::reverse_step_calls();
    Tensor a = sample_batch(qmodel_eps(qm), sched, cfg.img_ch, cfg.img, {0, 1}, {100, 101});
    REQUIRE(instr::reverse_step_calls() - calls0 == static_cast<uint64_t>(T));
    Tensor b = sample_batch(qmodel_eps(qm), sched, cfg.img_ch, cfg.img, {0, 1}, {100, 101});
    REQUIRE(max_abs_diff(a, b) == 0.0);
    REQUIRE(a.all_finite());
}
