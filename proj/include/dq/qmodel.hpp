#pragma once

#include <map>

#include "dq/bank.hpp"
#include "dq/model.hpp"
#include "dq/sampler.hpp"
#include "dq/timecache.hpp"

namespace dq {

// Weight-side quantizer for one layer: per-output-channel symmetric, with
// optional per-element freezing that pins the integer code (the weight stops
// receiving gradient; the channel scale keeps training).
struct WQState {
    int bits = 4;
    bool per_channel = true;
    int rows = 0;
    int64_t cols = 0;
    std::vector<float> scales;        // trainable, one per row (or one total)
    std::vector<float> sgrad;
    Tensor weff;
    FqCache cache;
    std::vector<int32_t> codes;       // codes from the latest forward
    std::vector<uint8_t> freeze_mask; // per element, monotone
    std::vector<int32_t> frozen_codes;
    bool calibrated = false;
};

struct AQState {
    TimestepBank bank;
    std::vector<MinMax> obs;          // per entry, used in observe mode
    FqCache cache;
    std::vector<int> last_entries;    // entry id per sample in the last forward
    bool calibrated = false;
};

// Fake-quantized view of a denoiser: owns the student network plus one weight
// quantizer per conv/linear layer and one activation bank per input site
// (including the cached time injections when the network is stripped).
// Implements the forward/backward substitution hooks.
struct QuantizedModel : QuantHooks {
    DenoiserModel net;
    QuantConfig qcfg;
    int T = 1;
    uint64_t base_fp = 0;  // fingerprint of the net at attach time, pre-training
    bool observing = false;
    bool train_mode = false;

    std::map<std::string, WQState> wq;
    std::map<std::string, AQState> aq;

    int64_t bank_param_count() const {
        int64_t n = 0;
        for (const auto& [k, a] : aq) n += a.bank.param_count();
        return n;
    }
    int64_t weight_scale_count() const {
        int64_t n = 0;
        for (const auto& [k, w] : wq) n += static_cast<int64_t>(w.scales.size());
        return n;
    }

    // ---- calibration ------------------------------------------------------
    void begin_observe() {
        observing = true;
        for (auto& [k, a] : aq) a.obs.assign(static_cast<size_t>(a.bank.entries), MinMax{});
    }

    void end_observe() {
        observing = false;
        for (auto& [k, a] : aq) {
            a.bank = bank_calibrate(k, a.obs, qcfg.a_bits, qcfg.interpolate_missing);
            a.obs.clear();
            a.calibrated = true;
        }
        for (auto& [k, w] : wq) {
            auto params = calibrate_weight(net.layer_weight(k)->w, qcfg.w_bits, w.per_channel);
            w.scales.resize(params.size());
            for (size_t r = 0; r < params.size(); ++r) w.scales[r] = params[r].scale;
            w.sgrad.assign(w.scales.size(), 0.0f);
            w.calibrated = true;
        }
    }

    bool calibrated() const {
        for (const auto& [k, w] : wq)
            if (!w.calibrated) return false;
        for (const auto& [k, a] : aq)
            if (!a.calibrated) return false;
        return true;
    }

    // ---- freezing ---------------------------------------------------------
    // Pins the current integer codes of the masked elements. Monotone: once
    // frozen, an element stays frozen.
    void freeze_elements(const std::string& layer, const std::vector<uint8_t>& mask) {
        auto& w = wq.at(layer);
        check(mask.size() == w.freeze_mask.size(), "freeze: mask size mismatch");
        const Tensor& weight = net.layer_weight(layer)->w;
        for (size_t i = 0; i < mask.size(); ++i) {
            if (!mask[i] || w.freeze_mask[i]) continue;
            int row = w.per_channel ? static_cast<int>(i / static_cast<size_t>(w.cols)) : 0;
            QuantParams p;
            p.bits = w.bits;
            p.symmetric = true;
            p.scale = w.scales[static_cast<size_t>(row)];
            w.frozen_codes[i] = quantize(weight.v[i], p);
            w.freeze_mask[i] = 1;
        }
    }

    int64_t frozen_count() const {
        int64_t n = 0;
        for (const auto& [k, w] : wq)
            for (uint8_t f : w.freeze_mask) n += f;
        return n;
    }

    // Integer codes the forward pass would use right now for this layer.
    std::vector<int32_t> effective_codes(const std::string& layer) {
        auto& w = wq.at(layer);
        check(w.calibrated, "effective_codes: uncalibrated layer " + layer);
        const Tensor& weight = net.layer_weight(layer)->w;
        std::vector<int32_t> out(weight.v.size());
        for (size_t i = 0; i < out.size(); ++i) {
            if (w.freeze_mask[i]) {
                out[i] = w.frozen_codes[i];
                continue;
            }
            int row = w.per_channel ? static_cast<int>(i / static_cast<size_t>(w.cols)) : 0;
            QuantParams p;
            p.bits = w.bits;
            p.symmetric = true;
            p.scale = w.scales[static_cast<size_t>(row)];
            out[i] = quantize(weight.v[i], p);
        }
        return out;
    }

    // ---- hook implementation ----------------------------------------------
    const Tensor& weight(const std::string& layer, const Tensor& w_in) override {
        auto it = wq.find(layer);
        check(it != wq.end(), "no weight quantizer for layer " + layer);
        auto& w = it->second;
        if (observing) return w_in;
        check(w.calibrated, "quantized forward before calibration (layer " + layer + ")");
        if (!w.weff.same_shape(w_in)) w.weff = Tensor(w_in.dims);
        size_t n = w_in.v.size();
        w.cache.resize(n);
        w.codes.resize(n);
        for (int r = 0; r < w.rows; ++r) {
            QuantParams p;
            p.bits = w.bits;
            p.symmetric = true;
            p.scale = w.scales[static_cast<size_t>(r)];
            size_t off = static_cast<size_t>(r) * static_cast<size_t>(w.cols);
            fake_quant_run(w_in.data() + off, w.weff.data() + off, static_cast<size_t>(w.cols), p,
                           train_mode ? &w.cache : nullptr, train_mode ? off : 0,
                           w.codes.data() + off);
        }
        for (size_t i = 0; i < n; ++i) {
            if (!w.freeze_mask[i]) continue;
            int row = w.per_channel ? static_cast<int>(i / static_cast<size_t>(w.cols)) : 0;
            float s = w.scales[static_cast<size_t>(row)];
            w.codes[i] = w.frozen_codes[i];
            w.weff.v[i] = static_cast<float>(w.frozen_codes[i]) * s;
            if (train_mode) {
                w.cache.in_range[i] = 0;  // pinned code: no gradient to the weight
                w.cache.dscale[i] = static_cast<float>(w.frozen_codes[i]);
            }
        }
        return w.weff;
    }

    void weight_grad(const std::string& layer, const Tensor& g_eff, Tensor& g_accum) override {
        auto& w = wq.at(layer);
        check(w.cache.in_range.size() == g_eff.v.size(), "weight_grad: stale cache");
        for (size_t i = 0; i < g_eff.v.size(); ++i) {
            if (w.cache.in_range[i]) g_accum.v[i] += g_eff.v[i];
            int row = w.per_channel ? static_cast<int>(i / static_cast<size_t>(w.cols)) : 0;
            w.sgrad[static_cast<size_t>(row)] += g_eff.v[i] * w.cache.dscale[i];
        }
    }

    void act(const std::string& site, Tensor& x, const std::vector<int>& ts) override {
        auto it = aq.find(site);
        check(it != aq.end(), "uncovered activation site " + site);
        auto& a = it->second;
        int N = x.dim(0);
        size_t per = x.v.size() / static_cast<size_t>(N);
        if (observing) {
            for (int i = 0; i < N; ++i) {
                int e = a.bank.entry_for(ts[static_cast<size_t>(i)]);
                a.obs[static_cast<size_t>(e)].add(x.data() + static_cast<size_t>(i) * per, per);
            }
            return;
        }
        check(a.calibrated, "quantized forward before calibration (site " + site + ")");
        if (train_mode) {
            a.cache.resize(x.v.size());
            a.last_entries.assign(static_cast<size_t>(N), 0);
        }
        for (int i = 0; i < N; ++i) {
            int e = a.bank.entry_for(ts[static_cast<size_t>(i)]);
            size_t off = static_cast<size_t>(i) * per;
            fake_quant_run(x.data() + off, x.data() + off, per, a.bank.params(e),
                           train_mode ? &a.cache : nullptr, train_mode ? off : 0);
            if (train_mode) {
                a.last_entries[static_cast<size_t>(i)] = e;
                a.bank.touched[static_cast<size_t>(e)] = 1;
            }
        }
    }

    void act_grad(const std::string& site, Tensor& g, const std::vector<int>& ts) override {
        (void)ts;
        auto& a = aq.at(site);
        check(a.cache.in_range.size() == g.v.size(), "act_grad: stale cache for site " + site);
        int N = g.dim(0);
        size_t per = g.v.size() / static_cast<size_t>(N);
        for (int i = 0; i < N; ++i) {
            int e = a.last_entries[static_cast<size_t>(i)];
            size_t off = static_cast<size_t>(i) * per;
            double gs = 0;
            for (size_t j = off; j < off + per; ++j) {
                gs += static_cast<double>(g.v[j]) * a.cache.dscale[j];
                if (!a.cache.in_range[j]) g.v[j] = 0.0f;
            }
            a.bank.sgrad[static_cast<size_t>(e)] += static_cast<float>(gs);
        }
    }

    // ---- model pass-throughs ----------------------------------------------
    Tensor forward(const Tensor& x, const std::vector<int>& ts, const std::vector<int>& conds,
                   const TimeCache* tc, bool train,
                   const std::set<std::string>* capture_names = nullptr,
                   std::map<std::string, Tensor>* captures = nullptr) {
        Ctx ctx;
        ctx.hooks = this;
        ctx.train = train;
        ctx.capture_names = capture_names;
        ctx.captures = captures;
        train_mode = train;
        return net.forward(x, ts, conds, ctx, tc);
    }

    Tensor backward(const Tensor& gout, const std::map<std::string, Tensor>* capture_grads = nullptr) {
        Ctx ctx;
        ctx.hooks = this;
        ctx.train = true;
        ctx.capture_grads = capture_grads;
        return net.backward(gout, ctx);
    }

    void zero_quant_grads() {
        for (auto& [k, w] : wq) std::fill(w.sgrad.begin(), w.sgrad.end(), 0.0f);
        for (auto& [k, a] : aq) {
            std::fill(a.bank.sgrad.begin(), a.bank.sgrad.end(), 0.0f);
            std::fill(a.bank.touched.begin(), a.bank.touched.end(), 0);
        }
    }
};

// Builds the quantized wrapper around a copy of `net`: one weight quantizer
// per conv/linear layer, one activation bank per input site, all uncalibrated.
inline QuantizedModel attach_quantizers(const DenoiserModel& net, const QuantConfig& qcfg, int T) {
    check_bits(qcfg.w_bits);
    check_bits(qcfg.a_bits);
    check(T >= 1, "attach_quantizers: T must be >= 1");
    QuantizedModel qm;
    Rng rng(0);
    qm.net.build(net.cfg, net.stripped, rng);
    copy_shared_params(net, qm.net);
    qm.qcfg = qcfg;
    qm.T = T;
    qm.base_fp = qm.net.fingerprint();
    for (const auto& layer : qm.net.quantized_layers()) {
        Param* p = qm.net.layer_weight(layer);
        check(p != nullptr, "attach_quantizers: missing weight for " + layer);
        WQState w;
        w.bits = qcfg.w_bits;
        w.per_channel = qcfg.per_channel_w;
        w.rows = qcfg.per_channel_w ? p->w.dim(0) : 1;
        w.cols = qcfg.per_channel_w ? p->w.numel() / p->w.dim(0) : p->w.numel();
        w.scales.assign(static_cast<size_t>(w.rows), 0.0f);
        w.sgrad.assign(static_cast<size_t>(w.rows), 0.0f);
        w.freeze_mask.assign(p->w.v.size(), 0);
        w.frozen_codes.assign(p->w.v.size(), 0);
        qm.wq.emplace(layer, std::move(w));
    }
    for (const auto& site : qm.net.act_sites()) {
        AQState a;
        a.bank.site = site;
        a.bank.bits = qcfg.a_bits;
        a.bank.entries = qcfg.multi_timestep ? T : 1;
        a.bank.scales.assign(static_cast<size_t>(a.bank.entries), 0.0f);
        a.bank.zps.assign(static_cast<size_t>(a.bank.entries), 0);
        a.bank.calibrated.assign(static_cast<size_t>(a.bank.entries), 0);
        a.bank.touched.assign(static_cast<size_t>(a.bank.entries), 0);
        a.bank.sgrad.assign(static_cast<size_t>(a.bank.entries), 0.0f);
        qm.aq.emplace(site, std::move(a));
    }
    return qm;
}

inline EpsFn qmodel_eps(QuantizedModel& qm, const TimeCache* tc = nullptr) {
    return [&qm, tc](const Tensor& x, const std::vector<int>& ts, const std::vector<int>& conds) {
        return qm.forward(x, ts, conds, tc, /*train=*/false);
    };
}

// ---------------------------------------------------------------------------
// Quantized-model artifact: config + embedded net + weight scales, freeze
// state and activation banks. Transient training state (optimizer moments,
// touched flags, scale grads) is not part of the artifact.
// ---------------------------------------------------------------------------
inline void save_qmodel(const QuantizedModel& qm, const std::string& path) {
    BinWriter w(path);
    w.raw("DQQMDL01", 8);
    w.u32(1);  // version
    w.u32(static_cast<uint32_t>(qm.qcfg.w_bits));
    w.u32(static_cast<uint32_t>(qm.qcfg.a_bits));
    w.u8(qm.qcfg.per_channel_w ? 1 : 0);
    w.u8(qm.qcfg.multi_timestep ? 1 : 0);
    w.u8(qm.qcfg.interpolate_missing ? 1 : 0);
    w.u8(qm.qcfg.train_w_scales ? 1 : 0);
    w.u8(qm.qcfg.train_a_scales ? 1 : 0);
    w.u32(static_cast<uint32_t>(qm.T));
    w.u64(qm.base_fp);
    write_model(w, qm.net);
    w.u32(static_cast<uint32_t>(qm.wq.size()));
    for (const auto& [layer, s] : qm.wq) {
        w.str(layer);
        w.u8(s.calibrated ? 1 : 0);
        w.f32s(s.scales);
        w.u64(s.freeze_mask.size());
        if (!s.freeze_mask.empty()) w.raw(s.freeze_mask.data(), s.freeze_mask.size());
        w.u64(s.frozen_codes.size());
        if (!s.frozen_codes.empty()) w.raw(s.frozen_codes.data(), s.frozen_codes.size() * 4);
    }
    w.u32(static_cast<uint32_t>(qm.aq.size()));
    for (const auto& [site, a] : qm.aq) {
        w.str(site);
        w.u8(a.calibrated ? 1 : 0);
        w.u32(static_cast<uint32_t>(a.bank.entries));
        w.f32s(a.bank.scales);
        w.u64(a.bank.zps.size());
        if (!a.bank.zps.empty()) w.raw(a.bank.zps.data(), a.bank.zps.size() * 4);
        w.u64(a.bank.calibrated.size());
        if (!a.bank.calibrated.empty())
            w.raw(a.bank.calibrated.data(), a.bank.calibrated.size());
    }
    w.finish_with_fingerprint();
}

inline QuantizedModel load_qmodel(const std::string& path) {
    BinReader r(path);
    r.expect_magic("DQQMDL01");
    uint32_t ver = r.u32();
    check(ver == 1, strfmt("qmodel %s: unsupported version %u", path.c_str(), ver));
    QuantConfig qc;
    qc.w_bits = static_cast<int>(r.u32());
    qc.a_bits = static_cast<int>(r.u32());
    qc.per_channel_w = r.u8() != 0;
    qc.multi_timestep = r.u8() != 0;
    qc.interpolate_missing = r.u8() != 0;
    qc.train_w_scales = r.u8() != 0;
    qc.train_a_scales = r.u8() != 0;
    int T = static_cast<int>(r.u32());
    uint64_t base_fp = r.u64();
    DenoiserModel net = read_model(r);
    QuantizedModel qm = attach_quantizers(net, qc, T);
    qm.base_fp = base_fp;  // fingerprint of the pre-training net, not the loaded one
    uint32_t nw = r.u32();
    check(nw == qm.wq.size(), "qmodel: weight quantizer count mismatch");
    for (uint32_t i = 0; i < nw; ++i) {
        std::string layer = r.str();
        auto it = qm.wq.find(layer);
        check(it != qm.wq.end(), "qmodel: unknown layer " + layer);
        auto& s = it->second;
        s.calibrated = r.u8() != 0;
        auto scales = r.f32s();
        check(scales.size() == s.scales.size(), "qmodel: scale count mismatch at " + layer);
        s.scales = scales;
        uint64_t nm = r.u64();
        check(nm == s.freeze_mask.size(), "qmodel: freeze mask size mismatch at " + layer);
        if (nm) r.raw(s.freeze_mask.data(), nm);
        uint64_t nc = r.u64();
        check(nc == s.frozen_codes.size(), "qmodel: frozen code count mismatch at " + layer);
        if (nc) r.raw(s.frozen_codes.data(), nc * 4);
    }
    uint32_t na = r.u32();
    check(na == qm.aq.size(), "qmodel: activation bank count mismatch");
    for (uint32_t i = 0; i < na; ++i) {
        std::string site = r.str();
        auto it = qm.aq.find(site);
        check(it != qm.aq.end(), "qmodel: unknown activation site " + site);
        auto& a = it->second;
        a.calibrated = r.u8() != 0;
        int entries = static_cast<int>(r.u32());
        check(entries == a.bank.entries, "qmodel: bank entry count mismatch at " + site);
        auto scales = r.f32s();
        check(scales.size() == a.bank.scales.size(), "qmodel: bank scale mismatch at " + site);
        a.bank.scales = scales;
        uint64_t nz = r.u64();
        check(nz == a.bank.zps.size(), "qmodel: bank zero-point mismatch at " + site);
        if (nz) r.raw(a.bank.zps.data(), nz * 4);
        uint64_t ncal = r.u64();
        check(ncal == a.bank.calibrated.size(), "qmodel: bank flag mismatch at " + site);
        if (ncal) r.raw(a.bank.calibrated.data(), ncal);
    }
    r.verify_fingerprint();
    return qm;
}

}  // namespace dq
