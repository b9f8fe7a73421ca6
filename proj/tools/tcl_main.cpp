#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "tcl/commands.hpp"

using namespace tcl;

namespace {

// bind every RunConfig field to a mirror flag
void add_config_options(CLI::App& app, RunConfig& cfg) {
    // the file itself is applied by the pre-scan in main; registering the
    // flag here lets it appear before or after the subcommand
    static std::string config_path_sink;
    app.add_option("--config", config_path_sink, "load a run configuration file");
    app.add_option("--seed", cfg.seed, "master random seed");
    app.add_option("--out-dir", cfg.out_dir, "output directory for this run");
    app.add_option("--corpus-dir", cfg.corpus_dir, "corpus location");
    app.add_option("--threads", cfg.threads, "worker threads (0 = hardware)");

    app.add_option("--ids", cfg.ids, "identities in the corpus");
    app.add_option("--clips-per-id", cfg.clips_per_id, "clips per identity");
    app.add_option("--frames-per-clip", cfg.frames_per_clip, "frames per clip");
    app.add_option("--frame-h", cfg.frame_h, "frame height");
    app.add_option("--frame-w", cfg.frame_w, "frame width");
    app.add_option("--channels", cfg.channels, "frame channels");
    app.add_option("--salient-band", cfg.salient_band, "index of the shared salient band");
    app.add_option("--salient-amp", cfg.salient_amp, "salient band amplitude");
    app.add_option("--other-amp", cfg.other_amp, "discriminative band amplitude");
    app.add_option("--noise-sigma", cfg.noise_sigma, "per-pixel gaussian noise");
    app.add_option("--occlusion-prob", cfg.occlusion_prob, "per-frame occlusion probability");
    app.add_option("--gallery-per-id", cfg.gallery_per_id, "gallery clips per identity");
    app.add_option("--query-per-id", cfg.query_per_id, "query clips per identity");

    app.add_option("--stage-channels",
                   [&cfg](const std::vector<std::string>& vals) {
                       cfg.stage_channels.clear();
                       std::stringstream ss(vals.back());
                       std::string tok;
                       while (std::getline(ss, tok, ','))
                           if (!tok.empty()) cfg.stage_channels.push_back(std::stoul(tok));
                       return !cfg.stage_channels.empty();
                   },
                   "backbone stage channels, comma separated");
    app.add_option("--blocks-per-stage", cfg.blocks_per_stage, "conv blocks per stage");
    app.add_option("--head-channels", cfg.head_channels, "learner head channels D1");
    app.add_option("--n-learners", cfg.n_learners, "ordered learners per segment");
    app.add_flag("--seo,!--no-seo", cfg.seo, "saliency erasing operation");
    app.add_option("--block-h", cfg.block_h, "erased block height");
    app.add_option("--block-w", cfg.block_w, "erased block width (0 = map width)");
    app.add_option("--stride-h", cfg.stride_h, "sliding block vertical stride");
    app.add_option("--stride-w", cfg.stride_w, "sliding block horizontal stride");
    app.add_flag("--tsb,!--no-tsb", cfg.tsb, "temporal saliency boosting");
    app.add_option("--tsb-stage", cfg.tsb_stage, "backbone stage enhanced by TSB");
    app.add_option("--tau", cfg.tau, "attention temperature");

    app.add_option("--loss", cfg.loss, "ce | ce+triplet");
    app.add_option("--margin", cfg.margin, "triplet margin");
    app.add_option("--lr", cfg.lr, "initial learning rate");
    app.add_option("--lr-decay", cfg.lr_decay, "step decay factor");
    app.add_option("--lr-step", cfg.lr_step, "epochs between decays");
    app.add_option("--weight-decay", cfg.weight_decay, "decoupled weight decay");
    app.add_option("--epochs", cfg.epochs, "training epochs");
    app.add_option("--batch-p", cfg.batch_p, "identities per batch");
    app.add_option("--batch-k", cfg.batch_k, "clips per identity per batch");
    app.add_option("--train-frames", cfg.train_frames, "frames sampled per training clip");
    app.add_option("--eval-every", cfg.eval_every, "evaluate every n epochs (0 = final only)");
}

} // namespace

int main(int argc, char** argv) {
    RunConfig cfg;

    // a --config file provides the baseline; explicit flags override it
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            try {
                cfg = RunConfig::load(argv[i + 1]);
            } catch (const std::exception& e) {
                std::cerr << "error: " << e.what() << "\n";
                return 2;
            }
        }
    }

    CLI::App app{"temporal complementary learning for video re-identification"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "load a run configuration file");

    std::string checkpoint;
    int identity = 0, clip_id = 0, n_seeds = 5;
    std::vector<std::string> arms{"base", "tse_wo_seo", "tse", "tclnet"};

    CLI::App* c_gen = app.add_subcommand("generate", "write a synthetic corpus");
    add_config_options(*c_gen, cfg);

    CLI::App* c_train = app.add_subcommand("train", "train on an existing corpus");
    add_config_options(*c_train, cfg);

    CLI::App* c_eval = app.add_subcommand("eval", "retrieval metrics for a checkpoint");
    add_config_options(*c_eval, cfg);
    c_eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();

    CLI::App* c_ablate = app.add_subcommand("ablate", "train and evaluate an ablation grid");
    add_config_options(*c_ablate, cfg);
    c_ablate->add_option("--arms", arms, "arms: base tse_wo_seo tse tsb tclnet");
    c_ablate->add_option("--seeds", n_seeds, "seeds per arm");

    CLI::App* c_dump = app.add_subcommand("dump-maps", "export SEO/TSB artifacts for one clip");
    add_config_options(*c_dump, cfg);
    c_dump->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    c_dump->add_option("--identity", identity, "identity to dump");
    c_dump->add_option("--clip", clip_id, "clip id to dump");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (const char* env_seed = std::getenv("TCL_SEED")) {
        try {
            cfg.seed = std::stoull(env_seed);
        } catch (...) {
            std::cerr << "error: TCL_SEED must be an unsigned integer\n";
            return 2;
        }
    }

    try {
        if (c_gen->parsed()) return cmd_generate(cfg);
        if (c_train->parsed()) return cmd_train(cfg);
        if (c_eval->parsed()) return cmd_eval(cfg, checkpoint);
        if (c_ablate->parsed()) return cmd_ablate(cfg, arms, n_seeds);
        if (c_dump->parsed()) return cmd_dump_maps(cfg, checkpoint, identity, clip_id);
    } catch (const PreconditionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
