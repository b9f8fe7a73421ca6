#include "tcl/commands.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "tcl/parallel.hpp"
#include "tcl/tensor_io.hpp"

namespace fs = std::filesystem;

namespace tcl {

namespace {

void apply_threads(const RunConfig& cfg) {
    ThreadPool::instance().set_threads(cfg.threads <= 0 ? 0
                                                        : static_cast<std::size_t>(cfg.threads));
}

void write_resolved_config(const RunConfig& cfg, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
    cfg.save((fs::path(dir) / "config.txt").string());
}

// corpus geometry wins over whatever the config carried
RunConfig resolve_against_corpus(RunConfig cfg, const Dataset& data) {
    cfg.ids = data.spec.num_identities;
    cfg.clips_per_id = data.spec.clips_per_id;
    cfg.frames_per_clip = data.spec.frames_per_clip;
    cfg.frame_h = data.spec.frame_h;
    cfg.frame_w = data.spec.frame_w;
    cfg.channels = data.spec.channels;
    return cfg;
}

} // namespace

int cmd_generate(const RunConfig& cfg) {
    apply_threads(cfg);
    Dataset data = generate(cfg.synth_spec(), cfg.seed);
    save_dataset(data, cfg.corpus_dir);
    write_resolved_config(cfg, cfg.corpus_dir);
    const std::uint64_t digest = file_digest((fs::path(cfg.corpus_dir) / "manifest.txt").string());
    std::printf("generated %d identities x %d clips x %d frames under %s\n", cfg.ids,
                cfg.clips_per_id, cfg.frames_per_clip, cfg.corpus_dir.c_str());
    std::printf("manifest digest %016llx\n", static_cast<unsigned long long>(digest));
    return 0;
}

int cmd_train(const RunConfig& cfg_in) {
    apply_threads(cfg_in);
    Dataset data = load_dataset(cfg_in.corpus_dir);
    RunConfig cfg = resolve_against_corpus(cfg_in, data);
    write_resolved_config(cfg, cfg.out_dir);

    TrainConfig tc = cfg.train_config();
    tc.verbose = true;
    TrainResult result = train(data, tc);
    if (result.status == TrainStatus::diverged) {
        std::fprintf(stderr, "training diverged (non-finite loss); diagnostics under %s\n",
                     (fs::path(cfg.out_dir) / "diagnostics").string().c_str());
        return 3;
    }
    std::printf("checkpoint %s\n", result.checkpoint_path.c_str());
    std::printf("final %s\n", metrics_summary(result.final_metrics).c_str());
    return 0;
}

int cmd_eval(const RunConfig& cfg_in, const std::string& checkpoint_path) {
    apply_threads(cfg_in);
    Dataset data = load_dataset(cfg_in.corpus_dir);
    RunConfig cfg = resolve_against_corpus(cfg_in, data);

    ModelConfig mc = cfg.model_config();
    Model model(mc, 0);
    load_checkpoint(checkpoint_path, model);

    MetricsReport rep = evaluate(model, data);
    write_resolved_config(cfg, cfg.out_dir);
    {
        std::ofstream os(fs::path(cfg.out_dir) / "metrics.csv");
        if (!os) throw IoError("cannot write metrics under " + cfg.out_dir);
        os << metrics_csv(rep);
        std::ofstream sum(fs::path(cfg.out_dir) / "summary.txt");
        sum << metrics_summary(rep) << "\n";
    }
    std::printf("%s\n", metrics_summary(rep).c_str());
    return 0;
}

int cmd_dump_maps(const RunConfig& cfg_in, const std::string& checkpoint_path, int identity,
                  int clip_id) {
    apply_threads(cfg_in);
    Dataset data = load_dataset(cfg_in.corpus_dir);
    RunConfig cfg = resolve_against_corpus(cfg_in, data);

    const VideoClip* clip = nullptr;
    for (const VideoClip& c : data.clips)
        if (c.identity == identity && c.clip_id == clip_id) clip = &c;
    if (!clip)
        throw PreconditionError("dump-maps: no clip " + std::to_string(clip_id) +
                                " for identity " + std::to_string(identity));
    if (clip->frames.size() < static_cast<std::size_t>(cfg.n_learners))
        throw PreconditionError("dump-maps: clip shorter than one segment");

    ModelConfig mc = cfg.model_config();
    Model model(mc, 0);
    load_checkpoint(checkpoint_path, model);

    std::vector<std::vector<SeoArtifacts>> artifacts;
    std::vector<std::vector<double>> attention;
    model.descriptor(clip->frames, BnMode::eval, true, false, &artifacts, &attention);

    write_resolved_config(cfg, cfg.out_dir);
    const fs::path dir = cfg.out_dir;
    std::ofstream index(dir / "artifacts_index.txt");
    if (!index) throw IoError("cannot write artifact index under " + cfg.out_dir);

    auto mask_tensor = [](const BinaryMask& m) {
        Tensor t = Tensor::zeros({m.h, m.w});
        for (std::size_t i = 0; i < m.keep.size(); ++i) t.data_mut()[i] = m.keep[i];
        return t;
    };

    for (std::size_t k = 0; k < artifacts.size(); ++k) {
        for (std::size_t n = 0; n < artifacts[k].size(); ++n) {
            const SeoArtifacts& art = artifacts[k][n];
            const std::string stem = "seg" + std::to_string(k);
            const std::string fid = std::to_string(n + 1);
            for (std::size_t j = 0; j < art.correlation.size(); ++j) {
                const std::string name = stem + "_R" + fid + std::to_string(j + 1);
                save_tensor((dir / (name + ".t64")).string(), art.correlation[j]);
                write_pgm((dir / (name + ".pgm")).string(), art.correlation[j].extent(0),
                          art.correlation[j].extent(1), art.correlation[j].data());
                index << "segment=" << k << " frame=" << n + 1 << " kind=R ref=" << j + 1
                      << " file=" << name + ".t64" << "\n";
            }
            for (std::size_t j = 0; j < art.masks.size(); ++j) {
                const std::string name = stem + "_B" + fid + std::to_string(j + 1);
                save_tensor((dir / (name + ".t64")).string(), mask_tensor(art.masks[j]));
                index << "segment=" << k << " frame=" << n + 1 << " kind=B ref=" << j + 1
                      << " file=" << name + ".t64" << "\n";
            }
            const std::string gname = stem + "_G" + fid;
            save_tensor((dir / (gname + ".t64")).string(), art.gate);
            write_pgm((dir / (gname + ".pgm")).string(), art.gate.extent(0), art.gate.extent(1),
                      art.gate.data());
            index << "segment=" << k << " frame=" << n + 1 << " kind=G file=" << gname + ".t64"
                  << "\n";
            const std::string ename = stem + "_erased" + fid;
            save_tensor((dir / (ename + ".t64")).string(), art.erased);
            index << "segment=" << k << " frame=" << n + 1
                  << " kind=erased file=" << ename + ".t64" << "\n";
        }
    }

    if (!attention.empty()) {
        std::ofstream csv(dir / "tsb_attention.csv");
        for (std::size_t t = 0; t < attention.size(); ++t) {
            csv << t;
            for (double a : attention[t]) {
                char buf[40];
                std::snprintf(buf, sizeof(buf), "%.17g", a);
                csv << "," << buf;
            }
            csv << "\n";
        }
        index << "tsb_attention=tsb_attention.csv rows=" << attention.size() << "\n";
    }
    std::printf("artifacts for id %d clip %d under %s\n", identity, clip_id, cfg.out_dir.c_str());
    return 0;
}

RunConfig arm_config(const RunConfig& base, const std::string& arm) {
    RunConfig cfg = base;
    if (arm == "base") {
        cfg.n_learners = 1;
        cfg.seo = true; // degenerate at N=1
        cfg.tsb = false;
    } else if (arm == "tse_wo_seo") {
        cfg.seo = false;
        cfg.tsb = false;
    } else if (arm == "tse") {
        cfg.seo = true;
        cfg.tsb = false;
    } else if (arm == "tsb") {
        cfg.n_learners = 1;
        cfg.tsb = true;
    } else if (arm == "tclnet") {
        cfg.seo = true;
        cfg.tsb = true;
    } else {
        throw PreconditionError("unknown ablation arm '" + arm +
                                "' (expected base|tse_wo_seo|tse|tsb|tclnet)");
    }
    return cfg;
}

std::vector<AblationRun> run_ablation(const Dataset& data, const RunConfig& cfg,
                                      const std::vector<std::string>& arms, int n_seeds,
                                      std::ostream* progress) {
    std::vector<AblationRun> runs;
    for (const std::string& arm : arms) {
        for (int s = 0; s < n_seeds; ++s) {
            RunConfig rc = arm_config(cfg, arm);
            rc.seed = cfg.seed + static_cast<std::uint64_t>(s);
            TrainConfig tc = rc.train_config();
            tc.out_dir.clear();
            const auto t0 = std::chrono::steady_clock::now();
            TrainResult result = train(data, tc);
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (result.status != TrainStatus::ok)
                throw PreconditionError("ablation run " + arm + " seed " +
                                        std::to_string(rc.seed) + " diverged");
            runs.push_back({arm, rc.seed, result.final_metrics, secs});
            if (progress)
                *progress << arm << " seed " << rc.seed << ": "
                          << metrics_summary(result.final_metrics) << "  (" << std::fixed
                          << std::setprecision(1) << secs << "s)\n"
                          << std::flush;
        }
    }
    return runs;
}

std::string ablation_csv(const std::vector<AblationRun>& runs) {
    std::ostringstream os;
    os << "arm,seed,mAP,top1,top5,seconds\n";
    for (const AblationRun& r : runs) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s,%llu,%.6f,%.6f,%.6f,%.2f\n", r.arm.c_str(),
                      static_cast<unsigned long long>(r.seed), r.metrics.mean_ap,
                      r.metrics.cmc_at(1), r.metrics.cmc_at(5), r.seconds);
        os << buf;
    }
    return os.str();
}

int cmd_ablate(const RunConfig& cfg, const std::vector<std::string>& arms, int n_seeds) {
    apply_threads(cfg);
    Dataset data = load_dataset(cfg.corpus_dir);
    RunConfig resolved = resolve_against_corpus(cfg, data);
    write_resolved_config(resolved, resolved.out_dir);

    std::vector<AblationRun> runs = run_ablation(data, resolved, arms, n_seeds, &std::cout);
    {
        std::ofstream os(fs::path(resolved.out_dir) / "ablation.csv");
        if (!os) throw IoError("cannot write ablation.csv under " + resolved.out_dir);
        os << ablation_csv(runs);
    }

    for (const std::string& arm : arms) {
        double total = 0.0;
        int count = 0;
        for (const AblationRun& r : runs)
            if (r.arm == arm) {
                total += r.metrics.mean_ap;
                ++count;
            }
        std::printf("%-12s mean mAP %.4f over %d seeds\n", arm.c_str(),
                    count ? total / count : 0.0, count);
    }
    return 0;
}

} // namespace tcl
