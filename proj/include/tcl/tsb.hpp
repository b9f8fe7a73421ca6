#pragma once

#include <vector>

#include "tcl/layers.hpp"
#include "tcl/tensor.hpp"

namespace tcl {

// Temporal Saliency Boosting: query-memory attention that propagates salient
// information from the other frames of a clip into each frame's feature map.

struct TsbConfig {
    double temperature = 16.0; // softmax sharpness over cosine similarities
    int stage = 2;             // backbone stage whose output is enhanced
};

// A_i = softmax_i(tau * qhat . Mhat_i); q is [D], memory is [|M|,D].
// Zero-norm vectors are normalized with a 1e-12 floor, no exception.
Tensor attention_weights(const Tensor& q, const Tensor& memory, double tau);

class TsbModule {
public:
    TsbModule(std::size_t channels, TsbConfig cfg);

    TsbConfig cfg;
    BatchNorm bn;

    // Q is [H,W,D], memory is [S,H,W,D]. S == 0 returns Q unchanged.
    // E = BN(broadcast(o)) + Q with o the attention-weighted memory sum.
    Tensor propagate(const Tensor& query, const Tensor& memory, BnMode mode,
                     bool update_running = true, std::vector<double>* attention_out = nullptr);

    // per-frame propagate with the remaining frames as memory; queries always
    // use the original maps, so the result is frame-order equivariant. The BN
    // batch is the clip's set of broadcast descriptors.
    std::vector<Tensor> forward(const std::vector<Tensor>& clip_maps, BnMode mode,
                                bool update_running = true,
                                std::vector<std::vector<double>>* attention_out = nullptr);

    // split forward: the pre-BN attention descriptors o_t, and the residual
    // add once rows have been normalized. Training batches the BN over every
    // clip in the step, so the two halves are exposed separately.
    std::vector<Tensor> memory_descriptors(const std::vector<Tensor>& clip_maps,
                                           std::vector<std::vector<double>>* attention_out =
                                               nullptr) const;
    std::vector<Tensor> apply_rows(const std::vector<Tensor>& clip_maps,
                                   const std::vector<Tensor>& normalized_rows) const;

    std::size_t channels() const { return bn.channels(); }
};

inline std::vector<Tensor> tsb_forward(TsbModule& tsb, const std::vector<Tensor>& clip_maps,
                                       BnMode mode, bool update_running = true) {
    return tsb.forward(clip_maps, mode, update_running);
}

} // namespace tcl
