#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tcl/data_eval.hpp"
#include "tcl/pipeline.hpp"

namespace tcl {

// One flat bag of knobs for every command: corpus, model, training protocol
// and ablation toggles. Serializes to diff-friendly "key = value" lines and
// round-trips losslessly.
struct RunConfig {
    std::uint64_t seed = 12345;
    std::string out_dir = "runs/default";
    std::string corpus_dir = "data/synth";
    int threads = 0; // 0 = hardware default

    // corpus
    int ids = 16;
    int clips_per_id = 6;
    int frames_per_clip = 8;
    int frame_h = 64;
    int frame_w = 32;
    int channels = 1;
    int salient_band = 2;
    double salient_amp = 1.2;
    double other_amp = 0.25;
    double noise_sigma = 0.06;
    double occlusion_prob = 0.15;
    int gallery_per_id = 3;
    int query_per_id = 2;

    // model
    std::vector<std::size_t> stage_channels{16, 32, 64};
    int blocks_per_stage = 2;
    int head_channels = 128;
    int n_learners = 2;
    bool seo = true;
    int block_h = 3;
    int block_w = 0; // 0 = feature-map width
    int stride_h = 1;
    int stride_w = 1;
    bool tsb = true;
    int tsb_stage = 2;
    double tau = 16.0;

    // training
    std::string loss = "ce"; // ce | ce+triplet
    double margin = 0.3;
    double lr = 3e-4;
    double lr_decay = 0.1;
    int lr_step = 40;
    double weight_decay = 5e-4;
    int epochs = 150;
    int batch_p = 8;
    int batch_k = 4;
    int train_frames = 4;
    int eval_every = 0;

    bool operator==(const RunConfig&) const = default;

    SynthSpec synth_spec() const;
    ModelConfig model_config() const;
    TrainConfig train_config() const;

    std::string serialize() const;
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);
    void save(const std::string& path) const;
    std::uint64_t digest() const;
};

} // namespace tcl
