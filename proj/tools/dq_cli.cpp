// Command-line entry point: orchestrates FP training, dataset generation,
// calibration, quantization-aware training, sampling, evaluation and the
// experiment drivers. All artifacts live in one run directory and carry
// fingerprints; every command writes its fully-resolved config next to its
// outputs. Exit codes: 0 success, 2 missing upstream artifact, 1 other error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dq/config.hpp"
#include "dq/image_io.hpp"

namespace fs = std::filesystem;
using namespace dq;

namespace {

fs::path run_dir(const RunConfig& c) {
    const char* root = std::getenv("DQ_OUT_ROOT");
    fs::path d = (root && *root) ? fs::path(root) / c.out_dir : fs::path(c.out_dir);
    fs::create_directories(d);
    fs::create_directories(d / "images");
    return d;
}

std::string need(const fs::path& p, const std::string& producer) {
    if (!fs::exists(p))
        throw DepError("missing artifact " + p.string() + "; run `dq " + producer + "` first");
    return p.string();
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p);
    check(os.good(), "cannot open for write: " + p.string());
    os << text;
    os.close();
    check(os.good(), "write failed: " + p.string());
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    check(is.good(), "cannot open: " + p.string());
    std::string s((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return s;
}

// The extractor is a run artifact: trained once from the config's synthetic
// set, then reused so every report shares one feature space.
FeatureExtractor get_extractor(const RunConfig& cfg, const fs::path& dir) {
    fs::path p = dir / "extractor.bin";
    if (fs::exists(p)) return load_extractor(p.string());
    DataSet data = config_data(cfg);
    FeatureExtractor fx = train_feature_extractor(data, cfg.model.classes, cfg.fx);
    save_extractor(fx, p.string());
    return fx;
}

int cmd_train_fp(RunConfig& cfg, const fs::path& dir) {
    DataSet data = config_data(cfg);
    NoiseSchedule sched = config_schedule(cfg);
    Rng rng(mix_seed(cfg.fp.seed, 0x1417));
    DenoiserModel m(cfg.model, false, rng);
    double loss = train_fp(m, data, sched, cfg.fp, &std::cerr);
    save_checkpoint(m, (dir / "fp.ckpt").string());
    std::cout << strfmt("train-fp: final loss %.6f  model %s  -> %s\n", loss,
                        hex64(m.fingerprint()).c_str(), (dir / "fp.ckpt").string().c_str());
    return 0;
}

int cmd_gen_dataset(RunConfig& cfg, const fs::path& dir) {
    DenoiserModel fp = load_checkpoint(need(dir / "fp.ckpt", "train-fp"));
    NoiseSchedule sched = config_schedule(cfg);
    LatentDataset ds = generate_serial_dataset(fp, nullptr, sched, cfg.gen);
    save_dataset(ds, (dir / "dataset.bin").string());
    std::cout << "gen-dataset: " << ds.coverage_report() << "\n  -> "
              << (dir / "dataset.bin").string() << strfmt("  (%lld bytes)\n",
                                                          static_cast<long long>(ds.byte_size()));
    return 0;
}

int cmd_calibrate(RunConfig& cfg, const fs::path& dir) {
    DenoiserModel fp = load_checkpoint(need(dir / "fp.ckpt", "train-fp"));
    NoiseSchedule sched = config_schedule(cfg);

    TimeCache tc;
    DenoiserModel base = fp;
    if (cfg.use_time_cache) {
        tc = build_time_cache(fp, sched);
        save_time_cache(tc, (dir / "cache.bin").string());
        base = strip_time_layers(fp);
    }
    QuantizedModel qm = attach_quantizers(base, cfg.quant, sched.T);

    LatentDataset ds;
    const LatentDataset* dsp = nullptr;
    DataSet data;
    if (cfg.qat.mode == PipelineMode::serial_to_parallel) {
        ds = load_dataset(need(dir / "dataset.bin", "gen-dataset"));
        dsp = &ds;
    } else if (cfg.qat.mode == PipelineMode::parallel) {
        data = config_data(cfg);
    }
    calibrate_for_mode(qm, cfg.use_time_cache ? &tc : nullptr, cfg.qat.mode, sched, data, dsp,
                       cfg.calib);
    save_qmodel(qm, (dir / "qmodel.bin").string());
    std::cout << strfmt("calibrate: mode %s  W%dA%d  %s time cache  -> %s\n",
                        mode_name(cfg.qat.mode), cfg.quant.w_bits, cfg.quant.a_bits,
                        cfg.use_time_cache ? "with" : "without",
                        (dir / "qmodel.bin").string().c_str());
    return 0;
}

int cmd_train_qat(RunConfig& cfg, const fs::path& dir) {
    DenoiserModel fp = load_checkpoint(need(dir / "fp.ckpt", "train-fp"));
    QuantizedModel qm = load_qmodel(need(dir / "qmodel.bin", "calibrate"));
    NoiseSchedule sched = config_schedule(cfg);
    check(qm.net.stripped == cfg.use_time_cache,
          std::string("train-qat: quantized model was calibrated ") +
              (qm.net.stripped ? "with" : "without") +
              " time stripping; set pipeline.time_cache to match");

    TimeCache tc;
    DenoiserModel teacher = fp;
    const TimeCache* tcp = nullptr;
    if (cfg.use_time_cache) {
        tc = load_time_cache(need(dir / "cache.bin", "calibrate"));
        teacher = strip_time_layers(fp);
        tcp = &tc;
    }

    LatentDataset ds, val;
    const LatentDataset* dsp = nullptr;
    const LatentDataset* valp = nullptr;
    DataSet data;
    if (cfg.qat.mode == PipelineMode::serial_to_parallel) {
        ds = load_dataset(need(dir / "dataset.bin", "gen-dataset"));
        dsp = &ds;
    } else if (cfg.qat.mode == PipelineMode::parallel) {
        data = config_data(cfg);
    }
    if (cfg.qat.val_every > 0) {
        SerialGenConfig vg = cfg.gen;
        vg.conditions = cfg.tr_val_conditions;
        vg.steps_per_prompt = 1;
        vg.seed = mix_seed(cfg.gen.seed, 0x7e57);
        val = generate_serial_dataset(fp, nullptr, sched, vg);
        valp = &val;
    }

    TrainResult tr = train_qat(qm, teacher, tcp, sched, cfg.qat, dsp,
                               cfg.qat.mode == PipelineMode::parallel ? &data : nullptr, valp);
    save_qmodel(qm, (dir / "qmodel.bin").string());

    std::string rep = strfmt("qat training  mode %s  iters %d  batch %d\n", mode_name(cfg.qat.mode),
                             cfg.qat.iters, cfg.qat.batch);
    rep += strfmt("  final l_out (last tenth) %.6f\n", tr.final_l_out);
    if (tr.final_val >= 0) rep += strfmt("  final validation %.6f\n", tr.final_val);
    rep += strfmt("  sampler reverse steps during training: %llu\n",
                  static_cast<unsigned long long>(tr.sampler_steps));
    rep += strfmt("  oscillating weight share (ema > %.3f): %.3f%%\n", cfg.qat.freeze_threshold,
                  tr.tracker.oscillation_percent(cfg.qat.freeze_threshold));
    rep += strfmt("  frozen elements: %lld\n", static_cast<long long>(tr.frozen_final));
    write_text(dir / "train_qat.txt", rep);
    std::cout << rep;
    return 0;
}

int cmd_sample(RunConfig& cfg, const fs::path& dir) {
    NoiseSchedule sched = config_schedule(cfg);
    check(cfg.sample_count >= 1, "sample: count must be >= 1");

    DenoiserModel fp;
    QuantizedModel qm;
    TimeCache tc;
    EpsFn eps;
    if (cfg.sample_source == "fp") {
        fp = load_checkpoint(need(dir / "fp.ckpt", "train-fp"));
        eps = model_eps(fp);
    } else {
        qm = load_qmodel(need(dir / "qmodel.bin", "calibrate"));
        check(qm.calibrated(), "sample: quantized model is not calibrated");
        const TimeCache* tcp = nullptr;
        if (qm.net.stripped) {
            tc = load_time_cache(need(dir / "cache.bin", "calibrate"));
            tcp = &tc;
        }
        eps = qmodel_eps(qm, tcp);
    }
    eps = guided_eps(eps, cfg.sample_guidance, cfg.model.classes);

    int n = cfg.sample_count;
    Tensor imgs({n, cfg.model.img_ch, cfg.model.img, cfg.model.img});
    int64_t per = static_cast<int64_t>(cfg.model.img_ch) * cfg.model.img * cfg.model.img;
    for (int i0 = 0; i0 < n; i0 += cfg.eval.batch) {
        int nb = std::min(cfg.eval.batch, n - i0);
        std::vector<int> conds;
        std::vector<uint64_t> seeds;
        for (int i = 0; i < nb; ++i) {
            conds.push_back((i0 + i) % cfg.model.classes);
            seeds.push_back(mix_seed(cfg.sample_seed, static_cast<uint64_t>(i0 + i)));
        }
        Tensor b = sample_batch(eps, sched, cfg.model.img_ch, cfg.model.img, conds, seeds);
        std::copy_n(b.data(), static_cast<int64_t>(nb) * per,
                    imgs.data() + static_cast<int64_t>(i0) * per);
    }

    std::string stem = "sample_" + cfg.sample_source;
    for (int i = 0; i < n; ++i)
        save_pgm(imgs, i, (dir / "images" / strfmt("%s_%03d.pgm", stem.c_str(), i)).string());
    fs::path grid = dir / "images" / (stem + "_grid.pgm");
    save_pgm_grid(imgs, std::min(n, 8), grid.string());
    std::cout << strfmt("sample: %d images from %s -> %s\n", n, cfg.sample_source.c_str(),
                        grid.string().c_str());
    return 0;
}

int cmd_evaluate(RunConfig& cfg, const fs::path& dir) {
    DenoiserModel fp = load_checkpoint(need(dir / "fp.ckpt", "train-fp"));
    QuantizedModel qm = load_qmodel(need(dir / "qmodel.bin", "calibrate"));
    NoiseSchedule sched = config_schedule(cfg);
    TimeCache tc;
    const TimeCache* tcp = nullptr;
    if (qm.net.stripped) {
        tc = load_time_cache(need(dir / "cache.bin", "calibrate"));
        tcp = &tc;
    }
    FeatureExtractor fx = get_extractor(cfg, dir);
    DataSet data = config_data(cfg);
    MetricReport rep = evaluate_pair(qm, tcp, fp, nullptr, sched, fx, &data, cfg.eval);
    write_text(dir / "evaluate.txt", rep.text());
    std::cout << rep.text();
    return 0;
}

int cmd_compare(RunConfig& cfg, const fs::path& dir) {
    DenoiserModel fp = load_checkpoint(need(dir / "fp.ckpt", "train-fp"));
    NoiseSchedule sched = config_schedule(cfg);
    FeatureExtractor fx = get_extractor(cfg, dir);
    DataSet data = config_data(cfg);
    CompareResult res = compare_pipelines(fp, sched, fx, data, config_compare(cfg));
    write_text(dir / "compare.txt", res.text());
    std::cout << res.text();
    return 0;
}

int cmd_tradeoff(RunConfig& cfg, const fs::path& dir) {
    DenoiserModel fp = load_checkpoint(need(dir / "fp.ckpt", "train-fp"));
    NoiseSchedule sched = config_schedule(cfg);
    FeatureExtractor fx = get_extractor(cfg, dir);
    DataSet data = config_data(cfg);
    TradeoffResult res = dataset_tradeoff_experiment(fp, sched, fx, data, config_tradeoff(cfg));
    // Wall-clock timing goes to a sidecar so the report itself is exactly
    // reproducible from config and seeds.
    write_text(dir / "tradeoff.txt", res.text(false));
    write_text(dir / "tradeoff_timing.txt",
               strfmt("dataset generation wall time\n  few_many  %.3f s\n  many_one  %.3f s\n",
                      res.few_many.gen_seconds, res.many_one.gen_seconds));
    std::cout << res.text(true);
    return 0;
}

int cmd_ablate(RunConfig& cfg, const fs::path& dir) {
    DenoiserModel fp = load_checkpoint(need(dir / "fp.ckpt", "train-fp"));
    NoiseSchedule sched = config_schedule(cfg);
    FeatureExtractor fx = get_extractor(cfg, dir);
    DataSet data = config_data(cfg);
    AblationResult res =
        run_ablation(fp, sched, fx, data, standard_ablation_steps(), config_ablation(cfg));
    write_text(dir / "ablation.txt", res.text());
    std::cout << res.text();
    return 0;
}

int cmd_report(RunConfig& cfg, const fs::path& dir) {
    NoiseSchedule sched = config_schedule(cfg);
    std::string s = "run summary: " + dir.string() + "\n";
    s += "  schedule " + hex64(sched.fingerprint()) + strfmt("  (T=%d)\n", sched.T);

    if (fs::exists(dir / "fp.ckpt")) {
        DenoiserModel m = load_checkpoint((dir / "fp.ckpt").string());
        s += "  fp.ckpt        model " + hex64(m.fingerprint()) + "\n";
    }
    if (fs::exists(dir / "cache.bin")) {
        TimeCache tc = load_time_cache((dir / "cache.bin").string());
        s += "  cache.bin      model " + hex64(tc.model_fp) + "  stripped " +
             hex64(tc.stripped_fp) + "\n";
    }
    if (fs::exists(dir / "dataset.bin")) {
        LatentDataset d = load_dataset((dir / "dataset.bin").string());
        s += "  dataset.bin    model " + hex64(d.model_fp) + "  " + d.coverage_report() + "\n";
    }
    if (fs::exists(dir / "qmodel.bin")) {
        QuantizedModel qm = load_qmodel((dir / "qmodel.bin").string());
        s += strfmt("  qmodel.bin     W%dA%d %s  base %s  net %s  calibrated %s\n",
                    qm.qcfg.w_bits, qm.qcfg.a_bits, qm.net.stripped ? "stripped" : "full",
                    hex64(qm.base_fp).c_str(), hex64(qm.net.fingerprint()).c_str(),
                    qm.calibrated() ? "yes" : "no");
    }
    if (fs::exists(dir / "extractor.bin")) {
        FeatureExtractor fx = load_extractor((dir / "extractor.bin").string());
        s += "  extractor.bin  features " + hex64(fx.fingerprint()) + "\n";
    }
    for (const char* f : {"train_qat.txt", "evaluate.txt", "compare.txt", "tradeoff.txt",
                          "ablation.txt"})
        if (fs::exists(dir / f)) s += "\n---- " + std::string(f) + " ----\n" + slurp(dir / f);

    write_text(dir / "report.txt", s);
    std::cout << s;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale diffusion quantization workbench"};
    app.require_subcommand(1);

    std::vector<std::string> config_files;
    std::vector<std::string> overrides;
    app.add_option("-c,--config", config_files,
                   "config file(s), applied in order over the defaults")
        ->allow_extra_args(false);  // one file per -c; repeat the flag to layer
    app.add_option("overrides", overrides, "key=value overrides, applied last");

    std::string mode_flag;
    const std::vector<std::string> commands = {
        "train-fp",        "gen-dataset",      "calibrate", "train-qat", "sample",
        "evaluate",        "compare-pipelines", "dataset-tradeoff", "ablate", "report"};
    for (const auto& name : commands) {
        auto* sub = app.add_subcommand(name);
        sub->fallthrough();  // global -c/overrides may follow the command name
        if (name == "train-qat")
            sub->add_option("--mode", mode_flag, "training pipeline: serial, parallel or s2p");
    }

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg;
        for (const auto& f : config_files) apply_config_file(cfg, f);
        for (const auto& kv : overrides) apply_override(cfg, kv);
        if (!mode_flag.empty()) cfg.mode_str = mode_flag;
        finalize_config(cfg);

        const std::string cmd = app.get_subcommands().at(0)->get_name();
        fs::path dir = run_dir(cfg);
        write_resolved_config(cfg, (dir / (cmd + ".config.json")).string());

        if (cmd == "train-fp") return cmd_train_fp(cfg, dir);
        if (cmd == "gen-dataset") return cmd_gen_dataset(cfg, dir);
        if (cmd == "calibrate") return cmd_calibrate(cfg, dir);
        if (cmd == "train-qat") return cmd_train_qat(cfg, dir);
        if (cmd == "sample") return cmd_sample(cfg, dir);
        if (cmd == "evaluate") return cmd_evaluate(cfg, dir);
        if (cmd == "compare-pipelines") return cmd_compare(cfg, dir);
        if (cmd == "dataset-tradeoff") return cmd_tradeoff(cfg, dir);
        if (cmd == "ablate") return cmd_ablate(cfg, dir);
        if (cmd == "report") return cmd_report(cfg, dir);
        throw Error("unknown command " + cmd);
    } catch (const DepError& e) {
        std::cerr << "dq: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "dq: " << e.what() << "\n";
        return 1;
    }
}
