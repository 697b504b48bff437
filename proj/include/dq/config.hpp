#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dq/experiments.hpp"
#include "dq/features.hpp"
#include "dq/train_fp.hpp"

namespace dq {

// Missing upstream artifact: reported separately so callers can exit with a
// dedicated status and tell the user which command to run first.
struct DepError : Error {
    explicit DepError(const std::string& m) : Error(m) {}
};

// Fully-resolved run configuration. Every key is bound to one scalar below;
// parsing is strict (unknown keys rejected) and the resolved form is written
// next to each command's outputs.
struct RunConfig {
    ModelConfig model;
    int sched_T = 100;
    double beta_start = 1e-4;
    double beta_end = 0.2;
    int data_n = 512;
    uint64_t data_seed = 77;
    FPTrainConfig fp;
    FxTrainConfig fx;
    QuantConfig quant;
    SerialGenConfig gen;
    QatConfig qat;
    std::string mode_str = "s2p";
    bool use_time_cache = false;
    EvalConfig eval;
    CalibConfig calib;
    double cmp_osc_threshold = 0.1;
    int cmp_osc_window = 16;
    int tr_conditions = 40;
    int tr_steps = 10;
    int tr_val_conditions = 64;
    uint64_t tr_seed = 11;
    double tr_guidance = 1.0;
    int sample_count = 16;
    std::string sample_source = "fp";  // "fp" or "quant"
    double sample_guidance = 1.0;
    uint64_t sample_seed = 555;
    std::string out_dir = "run";
};

enum class KeyKind { int32, uint64, float64, boolean, text };

struct KeyBinding {
    const char* key;
    KeyKind kind;
    void* p;
};

inline std::vector<KeyBinding> config_bindings(RunConfig& c) {
    using K = KeyKind;
    return {
        {"model.base", K::int32, &c.model.base},
        {"model.img", K::int32, &c.model.img},
        {"model.img_ch", K::int32, &c.model.img_ch},
        {"model.classes", K::int32, &c.model.classes},
        {"model.sin_dim", K::int32, &c.model.sin_dim},
        {"model.emb_dim", K::int32, &c.model.emb_dim},
        {"model.time_hidden", K::int32, &c.model.time_hidden},
        {"model.gn_groups", K::int32, &c.model.gn_groups},
        {"schedule.T", K::int32, &c.sched_T},
        {"schedule.beta_start", K::float64, &c.beta_start},
        {"schedule.beta_end", K::float64, &c.beta_end},
        {"data.n", K::int32, &c.data_n},
        {"data.seed", K::uint64, &c.data_seed},
        {"fp.iters", K::int32, &c.fp.iters},
        {"fp.batch", K::int32, &c.fp.batch},
        {"fp.lr", K::float64, &c.fp.lr},
        {"fp.cond_dropout", K::float64, &c.fp.cond_dropout},
        {"fp.seed", K::uint64, &c.fp.seed},
        {"fp.log_every", K::int32, &c.fp.log_every},
        {"extractor.iters", K::int32, &c.fx.iters},
        {"extractor.batch", K::int32, &c.fx.batch},
        {"extractor.lr", K::float64, &c.fx.lr},
        {"extractor.seed", K::uint64, &c.fx.seed},
        {"quant.w_bits", K::int32, &c.quant.w_bits},
        {"quant.a_bits", K::int32, &c.quant.a_bits},
        {"quant.per_channel_weights", K::boolean, &c.quant.per_channel_w},
        {"quant.multi_timestep", K::boolean, &c.quant.multi_timestep},
        {"quant.interpolate_missing", K::boolean, &c.quant.interpolate_missing},
        {"quant.train_weight_scales", K::boolean, &c.quant.train_w_scales},
        {"quant.train_act_scales", K::boolean, &c.quant.train_a_scales},
        {"dataset.conditions", K::int32, &c.gen.conditions},
        {"dataset.steps_per_prompt", K::int32, &c.gen.steps_per_prompt},
        {"dataset.guidance", K::float64, &c.gen.guidance},
        {"dataset.seed", K::uint64, &c.gen.seed},
        {"dataset.batch", K::int32, &c.gen.batch},
        {"pipeline.mode", K::text, &c.mode_str},
        {"pipeline.iters", K::int32, &c.qat.iters},
        {"pipeline.batch", K::int32, &c.qat.batch},
        {"pipeline.lr", K::float64, &c.qat.lr},
        {"pipeline.scale_lr", K::float64, &c.qat.scale_lr},
        {"pipeline.seed", K::uint64, &c.qat.seed},
        {"pipeline.val_every", K::int32, &c.qat.val_every},
        {"pipeline.val_records", K::int32, &c.qat.val_records},
        {"pipeline.log_every", K::int32, &c.qat.log_every},
        {"pipeline.track_all_layers", K::boolean, &c.qat.track_all_layers},
        {"pipeline.time_cache", K::boolean, &c.use_time_cache},
        {"distill.enabled", K::boolean, &c.qat.distill},
        {"distill.profile", K::text, &c.qat.sensitive_profile},
        {"stability.freeze", K::boolean, &c.qat.freeze},
        {"stability.every", K::int32, &c.qat.freeze_every},
        {"stability.threshold", K::float64, &c.qat.freeze_threshold},
        {"stability.momentum", K::float64, &c.qat.osc_momentum},
        {"calib.trajectories", K::int32, &c.calib.trajectories},
        {"calib.batches", K::int32, &c.calib.batches},
        {"calib.batch", K::int32, &c.calib.batch},
        {"calib.seed", K::uint64, &c.calib.seed},
        {"eval.images", K::int32, &c.eval.images},
        {"eval.guidance", K::float64, &c.eval.guidance},
        {"eval.seed", K::uint64, &c.eval.seed},
        {"eval.batch", K::int32, &c.eval.batch},
        {"compare.osc_threshold", K::float64, &c.cmp_osc_threshold},
        {"compare.osc_window", K::int32, &c.cmp_osc_window},
        {"tradeoff.conditions", K::int32, &c.tr_conditions},
        {"tradeoff.steps_per_prompt", K::int32, &c.tr_steps},
        {"tradeoff.val_conditions", K::int32, &c.tr_val_conditions},
        {"tradeoff.seed", K::uint64, &c.tr_seed},
        {"tradeoff.guidance", K::float64, &c.tr_guidance},
        {"sample.count", K::int32, &c.sample_count},
        {"sample.source", K::text, &c.sample_source},
        {"sample.guidance", K::float64, &c.sample_guidance},
        {"sample.seed", K::uint64, &c.sample_seed},
        {"out_dir", K::text, &c.out_dir},
    };
}

inline const KeyBinding& find_binding(std::vector<KeyBinding>& bs, const std::string& key) {
    for (const auto& b : bs)
        if (key == b.key) return b;
    throw Error("config: unknown key '" + key + "'");
}

inline void assign_from_json(const KeyBinding& b, const nlohmann::json& v) {
    const std::string key = b.key;
    switch (b.kind) {
        case KeyKind::int32:
            check(v.is_number_integer(), "config: key '" + key + "' wants an integer");
            *static_cast<int*>(b.p) = v.get<int>();
            break;
        case KeyKind::uint64:
            check(v.is_number_integer() && (v.is_number_unsigned() || v.get<int64_t>() >= 0),
                  "config: key '" + key + "' wants a non-negative integer");
            *static_cast<uint64_t*>(b.p) = v.get<uint64_t>();
            break;
        case KeyKind::float64:
            check(v.is_number(), "config: key '" + key + "' wants a number");
            *static_cast<double*>(b.p) = v.get<double>();
            break;
        case KeyKind::boolean:
            check(v.is_boolean(), "config: key '" + key + "' wants true/false");
            *static_cast<bool*>(b.p) = v.get<bool>();
            break;
        case KeyKind::text:
            check(v.is_string(), "config: key '" + key + "' wants a string");
            *static_cast<std::string*>(b.p) = v.get<std::string>();
            break;
    }
}

inline void apply_json(RunConfig& c, const nlohmann::json& j, const std::string& prefix = "") {
    check(j.is_object(), prefix.empty() ? "config: root must be an object"
                                        : "config: '" + prefix + "' must hold keys or a section");
    auto bs = config_bindings(c);
    for (const auto& [k, v] : j.items()) {
        std::string key = prefix.empty() ? k : prefix + "." + k;
        if (v.is_object()) {
            apply_json(c, v, key);
            continue;
        }
        check(!v.is_array(), "config: key '" + key + "' holds an array; scalars only");
        assign_from_json(find_binding(bs, key), v);
    }
}

inline void apply_config_file(RunConfig& c, const std::string& path) {
    std::ifstream is(path);
    if (!is.good()) throw Error("config file not found: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw Error("config: cannot parse " + path + ": " + e.what());
    }
    apply_json(c, j);
}

// "section.key=value" command-line override.
inline void apply_override(RunConfig& c, const std::string& kv) {
    auto eq = kv.find('=');
    check(eq != std::string::npos && eq > 0, "override '" + kv + "' is not key=value");
    std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    auto bs = config_bindings(c);
    const KeyBinding& b = find_binding(bs, key);
    try {
        size_t pos = 0;
        switch (b.kind) {
            case KeyKind::int32:
                *static_cast<int*>(b.p) = std::stoi(val, &pos);
                check(pos == val.size(), "trailing characters");
                break;
            case KeyKind::uint64:
                check(!val.empty() && val[0] != '-', "negative");
                *static_cast<uint64_t*>(b.p) = std::stoull(val, &pos);
                check(pos == val.size(), "trailing characters");
                break;
            case KeyKind::float64:
                *static_cast<double*>(b.p) = std::stod(val, &pos);
                check(pos == val.size(), "trailing characters");
                break;
            case KeyKind::boolean:
                if (val == "true" || val == "1") *static_cast<bool*>(b.p) = true;
                else if (val == "false" || val == "0") *static_cast<bool*>(b.p) = false;
                else throw Error("want true/false");
                break;
            case KeyKind::text:
                *static_cast<std::string*>(b.p) = val;
                break;
        }
    } catch (const std::exception& e) {
        throw Error("override '" + kv + "': bad value (" + e.what() + ")");
    }
}

// Validates cross-field constraints and resolves the enum-backed keys.
inline void finalize_config(RunConfig& c) {
    c.qat.mode = mode_from_string(c.mode_str);
    check(c.sample_source == "fp" || c.sample_source == "quant",
          "config: sample.source must be 'fp' or 'quant'");
}

inline nlohmann::json resolved_json(RunConfig& c) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& b : config_bindings(c)) {
        nlohmann::json* node = &j;
        std::string key = b.key;
        size_t start = 0, dot;
        while ((dot = key.find('.', start)) != std::string::npos) {
            node = &(*node)[key.substr(start, dot - start)];
            start = dot + 1;
        }
        std::string leaf = key.substr(start);
        switch (b.kind) {
            case KeyKind::int32: (*node)[leaf] = *static_cast<int*>(b.p); break;
            case KeyKind::uint64: (*node)[leaf] = *static_cast<uint64_t*>(b.p); break;
            case KeyKind::float64: (*node)[leaf] = *static_cast<double*>(b.p); break;
            case KeyKind::boolean: (*node)[leaf] = *static_cast<bool*>(b.p); break;
            case KeyKind::text: (*node)[leaf] = *static_cast<std::string*>(b.p); break;
        }
    }
    return j;
}

inline void write_resolved_config(RunConfig& c, const std::string& path) {
    std::ofstream os(path);
    check(os.good(), "cannot open for write: " + path);
    os << resolved_json(c).dump(2) << "\n";
    os.close();
    check(os.good(), "write failed: " + path);
}

// ---- helpers for assembling module configs from the run config ------------

inline NoiseSchedule config_schedule(const RunConfig& c) {
    return build_schedule(c.sched_T, c.beta_start, c.beta_end);
}

inline DataSet config_data(const RunConfig& c) {
    return make_synthetic_set(c.data_n, c.model.classes, c.model.img, c.data_seed);
}

inline CompareConfig config_compare(const RunConfig& c) {
    CompareConfig cc;
    cc.quant = c.quant;
    cc.qat = c.qat;
    cc.gen = c.gen;
    cc.eval = c.eval;
    cc.calib = c.calib;
    cc.osc_threshold = c.cmp_osc_threshold;
    cc.osc_window = c.cmp_osc_window;
    return cc;
}

inline AblationConfig config_ablation(const RunConfig& c) {
    AblationConfig ac;
    ac.quant = c.quant;
    ac.qat = c.qat;
    ac.gen = c.gen;
    ac.eval = c.eval;
    ac.calib = c.calib;
    return ac;
}

inline TradeoffConfig config_tradeoff(const RunConfig& c) {
    TradeoffConfig tc;
    tc.quant = c.quant;
    tc.qat = c.qat;
    tc.eval = c.eval;
    tc.conditions = c.tr_conditions;
    tc.steps_per_prompt = c.tr_steps;
    tc.val_conditions = c.tr_val_conditions;
    tc.gen_seed = c.tr_seed;
    tc.guidance = c.tr_guidance;
    tc.gen_batch = c.gen.batch;
    return tc;
}

}  // namespace dq
