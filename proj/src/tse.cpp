#include "tcl/tse.hpp"

#include "tcl/ops.hpp"

namespace tcl {

BinaryMask BinaryMask::all_ones(std::size_t h, std::size_t w) {
    BinaryMask m;
    m.h = h;
    m.w = w;
    m.keep.assign(h * w, 1);
    return m;
}

std::size_t BinaryMask::zero_count() const {
    std::size_t n = 0;
    for (std::uint8_t k : keep) n += (k == 0);
    return n;
}

std::size_t n_block_positions(std::size_t h, std::size_t w, const SeoConfig& cfg) {
    const std::size_t bh = static_cast<std::size_t>(cfg.block_h);
    const std::size_t bw = cfg.resolved_block_w(w);
    if (bh < 1 || bh > h || bw < 1 || bw > w)
        throw PreconditionError("block " + std::to_string(bh) + "x" + std::to_string(bw) +
                                " does not fit in " + std::to_string(h) + "x" + std::to_string(w) +
                                " map");
    if (cfg.stride_h < 1 || cfg.stride_w < 1)
        throw PreconditionError("block strides must be >= 1");
    const std::size_t rows = (h - bh) / cfg.stride_h + 1;
    const std::size_t cols = (w - bw) / cfg.stride_w + 1;
    return rows * cols;
}

Tensor correlation_map(const Tensor& f_map, const Tensor& f_k, const Tensor& w) {
    if (f_map.rank() != 3)
        throw DimensionError("correlation_map: feature map must be [H,W,D], got " +
                             shape_str(f_map.shape()));
    if (f_k.rank() != 1 || w.rank() != 2 || w.extent(0) != f_k.extent(0) ||
        w.extent(1) != f_map.extent(2))
        throw DimensionError("correlation_map: channel mismatch between map " +
                             shape_str(f_map.shape()) + ", feature " + shape_str(f_k.shape()) +
                             " and projection " + shape_str(w.shape()));
    const std::size_t h = f_map.extent(0), ww = f_map.extent(1), d = f_map.extent(2);
    // p = w^T f_k, then R = F . p at every location
    Tensor proj = matmul(reshape(f_k, {1, f_k.size()}), w);       // [1,D]
    Tensor flat = reshape(f_map, {h * ww, d});                    // [HW,D]
    Tensor r = matmul(flat, transpose(proj));                     // [HW,1]
    return reshape(r, {h, ww});
}

BinaryMask block_binarize(const Tensor& r, const SeoConfig& cfg) {
    if (r.rank() != 2)
        throw DimensionError("block_binarize: correlation map must be rank 2, got " +
                             shape_str(r.shape()));
    const std::size_t h = r.extent(0), w = r.extent(1);
    n_block_positions(h, w, cfg); // validates fit
    const std::size_t bh = static_cast<std::size_t>(cfg.block_h);
    const std::size_t bw = cfg.resolved_block_w(w);
    const std::size_t sh = static_cast<std::size_t>(cfg.stride_h);
    const std::size_t sw = static_cast<std::size_t>(cfg.stride_w);

    const auto& rv = r.data();
    double best = 0.0;
    std::size_t best_r = 0, best_c = 0;
    bool first = true;
    for (std::size_t pr = 0; pr + bh <= h; pr += sh)
        for (std::size_t pc = 0; pc + bw <= w; pc += sw) {
            double acc = 0.0;
            for (std::size_t i = 0; i < bh; ++i)
                for (std::size_t j = 0; j < bw; ++j) acc += rv[(pr + i) * w + pc + j];
            if (first || acc > best) {
                best = acc;
                best_r = pr;
                best_c = pc;
                first = false;
            }
        }

    BinaryMask m = BinaryMask::all_ones(h, w);
    m.block_row = best_r;
    m.block_col = best_c;
    m.block_h = bh;
    m.block_w = bw;
    for (std::size_t i = 0; i < bh; ++i)
        for (std::size_t j = 0; j < bw; ++j) m.keep[(best_r + i) * w + best_c + j] = 0;
    return m;
}

BinaryMask fuse_masks(const std::vector<BinaryMask>& masks) {
    if (masks.empty()) throw PreconditionError("fuse_masks: empty mask list");
    BinaryMask out = masks[0];
    for (std::size_t i = 1; i < masks.size(); ++i) {
        if (masks[i].h != out.h || masks[i].w != out.w)
            throw DimensionError("fuse_masks: mixed mask sizes");
        for (std::size_t j = 0; j < out.keep.size(); ++j) out.keep[j] &= masks[i].keep[j];
    }
    return out;
}

Tensor gate_map(const std::vector<Tensor>& r_maps, const BinaryMask& fused) {
    if (r_maps.empty()) throw PreconditionError("gate_map: need at least one correlation map");
    const std::size_t h = r_maps[0].extent(0), w = r_maps[0].extent(1);
    for (const Tensor& r : r_maps)
        if (r.rank() != 2 || r.extent(0) != h || r.extent(1) != w)
            throw DimensionError("gate_map: correlation maps must share shape, got " +
                                 shape_str(r.shape()));
    if (fused.h != h || fused.w != w) throw DimensionError("gate_map: mask size mismatch");

    Tensor prod = r_maps[0];
    for (std::size_t i = 1; i < r_maps.size(); ++i) prod = mul(prod, r_maps[i]);
    Tensor sm = softmax(reshape(prod, {h * w}), 0);
    Tensor mask = Tensor::zeros({h * w});
    for (std::size_t i = 0; i < h * w; ++i) mask.data_mut()[i] = fused.keep[i];
    return reshape(mul(sm, mask), {h, w});
}

Tensor uniform_gate(std::size_t h, std::size_t w) {
    return Tensor::full({h, w}, 1.0 / static_cast<double>(h * w));
}

Tensor erase(const Tensor& f_map, const Tensor& gate) {
    if (f_map.rank() != 3 || gate.rank() != 2 || gate.extent(0) != f_map.extent(0) ||
        gate.extent(1) != f_map.extent(1))
        throw DimensionError("erase: map " + shape_str(f_map.shape()) + " and gate " +
                             shape_str(gate.shape()) + " do not align");
    const std::size_t hw = gate.size(), d = f_map.extent(2);
    Tensor gcol = reshape(gate, {hw, 1});
    Tensor bcast = matmul(gcol, Tensor::full({1, d}, 1.0)); // [HW,D]
    Tensor scaled = scale(mul(bcast, reshape(f_map, {hw, d})), static_cast<double>(hw));
    return reshape(scaled, f_map.shape());
}

Tensor LearnerStack::feature(const Tensor& f_map_hwd, std::size_t n) const {
    Tensor x = permute(f_map_hwd, {2, 0, 1});
    x = relu(trunk(x));
    x = relu(heads[n](x));
    return global_avg_pool(x);
}

TseResult tse_forward(const std::vector<Tensor>& segment, const LearnerStack& learners,
                      const Tensor& proj_w, const SeoConfig& cfg, bool use_seo) {
    const std::size_t n = static_cast<std::size_t>(cfg.n_learners);
    if (segment.size() != n)
        throw PreconditionError("tse_forward: segment length " + std::to_string(segment.size()) +
                                " != configured learner count " + std::to_string(n));
    if (learners.n_learners() != n)
        throw PreconditionError("tse_forward: learner stack has " +
                                std::to_string(learners.n_learners()) + " heads, expected " +
                                std::to_string(n));

    TseResult out;
    if (!use_seo) {
        for (std::size_t i = 0; i < n; ++i)
            out.features.push_back(learners.feature(segment[i], i));
        return out;
    }

    const std::size_t h = segment[0].extent(0), w = segment[0].extent(1);
    for (std::size_t i = 0; i < n; ++i) {
        SeoArtifacts art;
        if (i == 0) {
            art.fused = BinaryMask::all_ones(h, w);
            art.gate = uniform_gate(h, w);
        } else {
            for (std::size_t k = 0; k < i; ++k) {
                Tensor r = correlation_map(segment[i], out.features[k], proj_w);
                art.masks.push_back(block_binarize(r, cfg));
                art.correlation.push_back(std::move(r));
            }
            art.fused = fuse_masks(art.masks);
            art.gate = gate_map(art.correlation, art.fused);
        }
        art.erased = erase(segment[i], art.gate);
        out.features.push_back(learners.feature(art.erased, i));
        out.artifacts.push_back(std::move(art));
    }
    return out;
}

} // namespace tcl
