#pragma once

#include <string>
#include <vector>

#include "dq/model.hpp"
#include "dq/schedule.hpp"

namespace dq {

// Precomputes the timestep-embedding MLP output and every block's projected
// injection for all T timesteps, using exactly the same row-wise evaluation
// the full forward pass uses, so cached rows are bit-identical to what the
// full model would compute. Always built from full-precision weights.
inline DenoiserModel strip_time_layers(const DenoiserModel& full);

inline TimeCache build_time_cache(DenoiserModel& full, const NoiseSchedule& sched) {
    check(!full.stripped, "time cache must be built from the full (non-stripped) model");
    TimeCache tc;
    tc.T = sched.T;
    tc.emb_dim = full.cfg.emb_dim;
    tc.model_fp = full.fingerprint();
    tc.stripped_fp = strip_time_layers(full).fingerprint();
    tc.sched_fp = sched.fingerprint();

    std::vector<int> all_t(static_cast<size_t>(sched.T));
    for (int t = 0; t < sched.T; ++t) all_t[static_cast<size_t>(t)] = t;

    Ctx ctx;  // no hooks, inference mode
    ctx.ts = &all_t;
    Tensor sf = sinusoidal_embed_batch(all_t, full.cfg.sin_dim);
    Tensor h = linear_fwd(full.time_l1, "time_mlp.l1", std::move(sf), ctx);
    h = full.time_act.forward(h, false);
    tc.emb = linear_fwd(full.time_l2, "time_mlp.l2", std::move(h), ctx);

    ResBlock* blocks[] = {&full.rb1, &full.rb2, &full.rb3a, &full.rb3b, &full.rb4, &full.rb5};
    for (auto* rb : blocks) {
        tc.blocks.push_back(rb->name);
        tc.block_ch.push_back(rb->cout);
        tc.ep.push_back(linear_fwd(rb->tproj, rb->name + ".tproj", tc.emb, ctx));
    }
    return tc;
}

// Payload bytes held by the cache (embedding rows plus per-block injections).
inline int64_t cache_memory_bytes(const TimeCache& tc) {
    int64_t n = tc.emb.numel();
    for (const auto& e : tc.ep) n += e.numel();
    return n * 4;
}

// Bytes of the parameters that stripping removes.
inline int64_t stripped_param_bytes(const DenoiserModel& full) {
    return (full.param_count_role(Role::time_embedding) +
            full.param_count_role(Role::time_projection)) * 4;
}

inline DenoiserModel strip_time_layers(const DenoiserModel& full) {
    check(!full.stripped, "model is already stripped");
    Rng rng(0);
    DenoiserModel m(full.cfg, /*stripped=*/true, rng);
    copy_shared_params(full, m);
    return m;
}

inline void save_time_cache(const TimeCache& tc, const std::string& path) {
    BinWriter w(path);
    w.raw("DQTCHE01", 8);
    w.u32(1);
    w.u64(tc.model_fp);
    w.u64(tc.stripped_fp);
    w.u64(tc.sched_fp);
    w.u32(static_cast<uint32_t>(tc.T));
    w.u32(static_cast<uint32_t>(tc.emb_dim));
    w.u32(static_cast<uint32_t>(tc.blocks.size()));
    for (size_t i = 0; i < tc.blocks.size(); ++i) {
        w.str(tc.blocks[i]);
        w.u32(static_cast<uint32_t>(tc.block_ch[i]));
    }
    w.f32s(tc.emb.v);
    for (const auto& e : tc.ep) w.f32s(e.v);
    w.finish_with_fingerprint();
}

inline TimeCache load_time_cache(const std::string& path) {
    BinReader r(path);
    r.expect_magic("DQTCHE01");
    check(r.u32() == 1, "time cache: unsupported version");
    TimeCache tc;
    tc.model_fp = r.u64();
    tc.stripped_fp = r.u64();
    tc.sched_fp = r.u64();
    tc.T = static_cast<int>(r.u32());
    tc.emb_dim = static_cast<int>(r.u32());
    uint32_t nb = r.u32();
    for (uint32_t i = 0; i < nb; ++i) {
        tc.blocks.push_back(r.str());
        tc.block_ch.push_back(static_cast<int>(r.u32()));
    }
    tc.emb = Tensor({tc.T, tc.emb_dim});
    tc.emb.v = r.f32s();
    check(static_cast<int64_t>(tc.emb.v.size()) == static_cast<int64_t>(tc.T) * tc.emb_dim,
          "time cache: embedding payload size mismatch");
    for (uint32_t i = 0; i < nb; ++i) {
        Tensor e({tc.T, tc.block_ch[i]});
        e.v = r.f32s();
        check(static_cast<int64_t>(e.v.size()) == static_cast<int64_t>(tc.T) * tc.block_ch[i],
              "time cache: block payload size mismatch");
        tc.ep.push_back(std::move(e));
    }
    r.verify_fingerprint();
    return tc;
}

// A cache is only valid for the exact model weights and schedule it was built
// from; consumers call this before using it.
inline void check_cache_compat(const TimeCache& tc, uint64_t model_fp, const NoiseSchedule& s) {
    check(tc.model_fp == model_fp || tc.stripped_fp == model_fp,
          "time cache: built for a different model");
    check(tc.sched_fp == s.fingerprint(), "time cache: built for a different schedule");
    check(tc.T == s.T, "time cache: timestep count mismatch");
    check(tc.blocks == DenoiserModel::block_names(), "time cache: block list mismatch");
}

}  // namespace dq
