#include "tcl/backbone.hpp"

#include "tcl/ops.hpp"
#include "tcl/tensor_io.hpp"

namespace tcl {

Backbone::Backbone(const BackboneConfig& cfg_, Rng& rng) : cfg(cfg_) {
    if (cfg.stage_channels.empty()) throw PreconditionError("backbone: no stages configured");
    if (cfg.blocks_per_stage < 1) throw PreconditionError("backbone: blocks_per_stage must be >= 1");
    std::size_t prev = cfg.in_channels;
    for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
        std::vector<ConvLayer> blocks;
        const std::size_t ch = cfg.stage_channels[s];
        for (int b = 0; b < cfg.blocks_per_stage; ++b) {
            const int stride = (s > 0 && b == 0) ? 2 : 1;
            Rng r = rng.fork(s * 131 + b);
            blocks.push_back(ConvLayer::make(ch, prev, 3, stride, 1, r));
            prev = ch;
        }
        stages.push_back(std::move(blocks));
    }
}

void Backbone::check_frames(const std::vector<Tensor>& frames) const {
    if (frames.empty()) throw PreconditionError("backbone: empty clip");
    const Shape base = frames[0].shape();
    for (const Tensor& f : frames) {
        if (f.rank() != 3 || f.extent(0) != cfg.in_channels)
            throw DimensionError("backbone: frame shape " + shape_str(f.shape()) +
                                 " does not match configured input [" +
                                 std::to_string(cfg.in_channels) + "," +
                                 std::to_string(cfg.in_h) + "," + std::to_string(cfg.in_w) + "]");
        if (f.shape() != base)
            throw DimensionError("backbone: inconsistent frame shapes " + shape_str(base) +
                                 " and " + shape_str(f.shape()));
    }
}

std::vector<Tensor> Backbone::run_stages(std::vector<Tensor> maps, std::size_t begin,
                                         std::size_t end) const {
    for (std::size_t s = begin; s < end && s < stages.size(); ++s)
        for (Tensor& m : maps)
            for (const ConvLayer& block : stages[s]) m = relu(block(m));
    return maps;
}

std::vector<Tensor> Backbone::forward_clip(const std::vector<Tensor>& frames, TsbModule* tsb,
                                           BnMode mode, bool update_running, StageTrace* trace,
                                           std::vector<std::vector<double>>* tsb_attention) const {
    check_frames(frames);
    std::vector<Tensor> maps = frames;
    for (std::size_t s = 0; s < stages.size(); ++s) {
        for (std::size_t i = 0; i < maps.size(); ++i) {
            for (const ConvLayer& block : stages[s]) maps[i] = relu(block(maps[i]));
            if (trace)
                trace->entries.push_back(
                    {static_cast<int>(s + 1), false, i, tensor_digest(maps[i])});
        }
        if (tsb && tsb->cfg.stage == static_cast<int>(s + 1)) {
            std::vector<Tensor> hwd;
            hwd.reserve(maps.size());
            for (const Tensor& m : maps) hwd.push_back(permute(m, {1, 2, 0}));
            hwd = tsb->forward(hwd, mode, update_running, tsb_attention);
            for (std::size_t i = 0; i < maps.size(); ++i) {
                maps[i] = permute(hwd[i], {2, 0, 1});
                if (trace)
                    trace->entries.push_back(
                        {static_cast<int>(s + 1), true, i, tensor_digest(maps[i])});
            }
        }
    }
    for (Tensor& m : maps) m = permute(m, {1, 2, 0});
    return maps;
}

LearnerStack make_learners(const BackboneConfig& cfg, int n, Rng& rng) {
    if (n < 1) throw PreconditionError("make_learners: need at least one learner");
    LearnerStack ls;
    const std::size_t d = cfg.out_channels();
    Rng tr = rng.fork(9001);
    ls.trunk = ConvLayer::make(d, d, 3, 1, 1, tr);
    for (int i = 0; i < n; ++i) {
        Rng hr = rng.fork(9100 + i);
        ls.heads.push_back(ConvLayer::make(cfg.head_channels, d, 3, 1, 1, hr));
    }
    return ls;
}

} // namespace tcl
