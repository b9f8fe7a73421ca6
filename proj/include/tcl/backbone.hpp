#pragma once

#include <cstdint>
#include <vector>

#include "tcl/layers.hpp"
#include "tcl/tse.hpp"
#include "tcl/tsb.hpp"

namespace tcl {

// Toy convolutional stand-in for the first three stages of a deep backbone.
// Stages after the first open with a stride-2 conv, so the default 64x32
// input leaves stage 3 as a 16x8 map.
struct BackboneConfig {
    std::vector<std::size_t> stage_channels{16, 32, 64};
    int blocks_per_stage = 2;
    std::size_t in_channels = 1;
    std::size_t in_h = 64;
    std::size_t in_w = 32;
    std::size_t head_channels = 128; // D1 of the learner heads
    int tsb_stage = 2;

    std::size_t out_channels() const { return stage_channels.back(); }
    std::size_t out_h() const { return in_h >> (stage_channels.size() - 1); }
    std::size_t out_w() const { return in_w >> (stage_channels.size() - 1); }
};

// per-stage map digests for instrumentation
struct StageTrace {
    struct Entry {
        int stage;
        bool post_tsb;
        std::size_t frame;
        std::uint64_t digest;
    };
    std::vector<Entry> entries;
};

class Backbone {
public:
    Backbone() = default;
    Backbone(const BackboneConfig& cfg, Rng& rng);

    // Runs every frame through the conv stages; when tsb is given, the whole
    // clip is enhanced jointly at the configured stage boundary. Returns
    // channels-last [H,W,D] maps.
    std::vector<Tensor> forward_clip(const std::vector<Tensor>& frames, TsbModule* tsb,
                                     BnMode mode, bool update_running = true,
                                     StageTrace* trace = nullptr,
                                     std::vector<std::vector<double>>* tsb_attention = nullptr) const;

    // conv stages [begin, end) over channels-first maps; no TSB, no output permute
    std::vector<Tensor> run_stages(std::vector<Tensor> maps, std::size_t begin,
                                   std::size_t end) const;
    void check_frames(const std::vector<Tensor>& frames) const;

    BackboneConfig cfg;
    std::vector<std::vector<ConvLayer>> stages;
};

// one shared trunk block + n private head blocks mapping D -> D1
LearnerStack make_learners(const BackboneConfig& cfg, int n, Rng& rng);

} // namespace tcl
