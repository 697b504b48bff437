#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "dq/common.hpp"
#include "dq/tensor.hpp"

namespace dq {

// One precomputed training latent: an intermediate denoising state x_t plus
// enough provenance (condition id, trajectory seed) to regenerate it.
struct LatentRecord {
    uint16_t t = 0;
    uint16_t cond_id = 0;
    uint64_t seed = 0;
    std::vector<float> x;  // C*H*W payload
};

struct DatasetPolicy {
    std::string kind;  // "serial-trajectory" or "forward-noised"
    uint32_t conditions = 0;
    uint16_t steps_per_prompt = 1;
    double guidance = 1.0;
    uint64_t base_seed = 0;
};

struct LatentDataset {
    uint16_t T = 0;
    uint16_t c = 0, h = 0, w = 0;
    uint64_t model_fp = 0;
    uint64_t sched_fp = 0;
    DatasetPolicy policy;
    std::vector<LatentRecord> records;

    size_t payload_len() const {
        return static_cast<size_t>(c) * static_cast<size_t>(h) * static_cast<size_t>(w);
    }

    Tensor record_tensor(size_t i) const {
        const auto& r = records[i];
        Tensor x({1, static_cast<int>(c), static_cast<int>(h), static_cast<int>(w)});
        std::copy(r.x.begin(), r.x.end(), x.v.begin());
        return x;
    }

    std::vector<int64_t> per_timestep_counts() const {
        std::vector<int64_t> n(static_cast<size_t>(T), 0);
        for (const auto& r : records) {
            check(r.t < T, "dataset: record timestep out of range");
            ++n[r.t];
        }
        return n;
    }

    std::vector<int> missing_timesteps() const {
        auto n = per_timestep_counts();
        std::vector<int> miss;
        for (int t = 0; t < static_cast<int>(T); ++t)
            if (n[static_cast<size_t>(t)] == 0) miss.push_back(t);
        return miss;
    }

    std::string coverage_report() const {
        auto n = per_timestep_counts();
        int64_t lo = records.empty() ? 0 : n[0], hi = lo;
        for (auto v : n) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        auto miss = missing_timesteps();
        std::string s = strfmt("records %zu over T=%d timesteps; per-t count min %lld max %lld; "
                               "missing timesteps %zu",
                               records.size(), static_cast<int>(T), static_cast<long long>(lo),
                               static_cast<long long>(hi), miss.size());
        return s;
    }

    // Exact serialized size: fixed header fields + length-prefixed policy kind
    // + fixed-size records + trailing fingerprint. Mirrors save_dataset.
    int64_t byte_size() const {
        int64_t header = 8 + 4 + 8 + 8 + (2 + static_cast<int64_t>(policy.kind.size())) + 4 + 2 +
                         8 + 8 + 4 * 2 + 8;
        int64_t per_record = 2 + 2 + 8 + static_cast<int64_t>(payload_len()) * 4;
        return header + static_cast<int64_t>(records.size()) * per_record + 8;
    }
};

inline void save_dataset(const LatentDataset& d, const std::string& path) {
    BinWriter bw(path);
    bw.raw("DQDSET01", 8);
    bw.u32(1);  // version
    bw.u64(d.model_fp);
    bw.u64(d.sched_fp);
    bw.str(d.policy.kind);
    bw.u32(d.policy.conditions);
    bw.u16(d.policy.steps_per_prompt);
    bw.f64(d.policy.guidance);
    bw.u64(d.policy.base_seed);
    bw.u16(d.T);
    bw.u16(d.c);
    bw.u16(d.h);
    bw.u16(d.w);
    bw.u64(d.records.size());
    size_t plen = d.payload_len();
    for (const auto& r : d.records) {
        check(r.x.size() == plen, "save_dataset: malformed record payload");
        bw.u16(r.t);
        bw.u16(r.cond_id);
        bw.u64(r.seed);
        bw.raw(r.x.data(), r.x.size() * 4);
    }
    bw.finish_with_fingerprint();
}

inline LatentDataset load_dataset(const std::string& path) {
    BinReader br(path);
    br.expect_magic("DQDSET01");
    uint32_t ver = br.u32();
    check(ver == 1, strfmt("dataset %s: unsupported version %u", path.c_str(), ver));
    LatentDataset d;
    d.model_fp = br.u64();
    d.sched_fp = br.u64();
    d.policy.kind = br.str();
    d.policy.conditions = br.u32();
    d.policy.steps_per_prompt = br.u16();
    d.policy.guidance = br.f64();
    d.policy.base_seed = br.u64();
    d.T = br.u16();
    d.c = br.u16();
    d.h = br.u16();
    d.w = br.u16();
    uint64_t n = br.u64();
    size_t plen = d.payload_len();
    d.records.resize(n);
    for (auto& r : d.records) {
        r.t = br.u16();
        r.cond_id = br.u16();
        r.seed = br.u64();
        r.x.resize(plen);
        br.raw(r.x.data(), plen * 4);
        check(r.t < d.T, "load_dataset: record timestep out of range");
    }
    br.verify_fingerprint();
    return d;
}

}  // namespace dq
