#pragma once

#include <vector>

#include "tcl/layers.hpp"
#include "tcl/tensor.hpp"

namespace tcl {

// Temporal Saliency Erasing: per segment of N consecutive frame feature maps,
// each learner sees the map with the regions attended by previous frames
// erased, so successive learners mine complementary parts.

struct SeoConfig {
    int n_learners = 2;
    int block_h = 3;
    int block_w = 0; // <= 0 means full feature-map width
    int stride_h = 1;
    int stride_w = 1;

    std::size_t resolved_block_w(std::size_t w) const {
        return block_w <= 0 ? w : static_cast<std::size_t>(block_w);
    }
};

// 1 outside the erased block, 0 inside
struct BinaryMask {
    std::size_t h = 0, w = 0;
    std::size_t block_row = 0, block_col = 0;
    std::size_t block_h = 0, block_w = 0;
    std::vector<std::uint8_t> keep;

    static BinaryMask all_ones(std::size_t h, std::size_t w);
    bool erased_at(std::size_t i, std::size_t j) const { return keep[i * w + j] == 0; }
    std::size_t zero_count() const;
};

// number of candidate sliding-block positions for an HxW map
std::size_t n_block_positions(std::size_t h, std::size_t w, const SeoConfig& cfg);

// R[i,j] = <F[i,j,:], w^T f_k>; F is [H,W,D], f_k is [D1], w is [D1,D]
Tensor correlation_map(const Tensor& f_map, const Tensor& f_k, const Tensor& w);

// exhaustively scores all candidate blocks by the sum of map values inside
// and zeroes the best one; ties break to the smallest row-major position
BinaryMask block_binarize(const Tensor& r, const SeoConfig& cfg);

// elementwise product of per-frame masks
BinaryMask fuse_masks(const std::vector<BinaryMask>& masks);

// softmax over all H*W locations of the elementwise product of the
// correlation maps, then multiplied by the fused mask. The mask is a
// constant: gradients reach the correlation maps only.
Tensor gate_map(const std::vector<Tensor>& r_maps, const BinaryMask& fused);

// the gate used for the first frame: no previous features exist, so the
// fused correlation map is all zeros and the softmax is uniform
Tensor uniform_gate(std::size_t h, std::size_t w);

// erased map: H*W * gate * F, gate broadcast over channels; the H*W factor
// makes the uniform gate an exact identity
Tensor erase(const Tensor& f_map, const Tensor& gate);

struct SeoArtifacts {
    std::vector<Tensor> correlation; // R_nk for k = 1..n-1
    std::vector<BinaryMask> masks;   // B_nk
    BinaryMask fused;                // B_n
    Tensor gate;                     // G_n
    Tensor erased;                   // erased feature map
};

// shared trunk + per-learner head, both 3x3 conv blocks; the trunk tensors
// are the same objects for every learner
struct LearnerStack {
    ConvLayer trunk;
    std::vector<ConvLayer> heads;

    std::size_t n_learners() const { return heads.size(); }
    // [H,W,D] -> [D1]: permute to channels-first, trunk, relu, head_n, relu, GAP
    Tensor feature(const Tensor& f_map_hwd, std::size_t n) const;
};

struct TseResult {
    std::vector<Tensor> features;       // f_1..f_N
    std::vector<SeoArtifacts> artifacts; // per frame; empty when SEO disabled
};

// ordered forward over one segment. With use_seo = false this is the
// TSE-wo-SEO ablation arm: N independent learner+GAP paths.
TseResult tse_forward(const std::vector<Tensor>& segment, const LearnerStack& learners,
                      const Tensor& proj_w, const SeoConfig& cfg, bool use_seo = true);

} // namespace tcl
