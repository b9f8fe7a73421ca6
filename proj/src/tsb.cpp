#include "tcl/tsb.hpp"

#include "tcl/ops.hpp"

namespace tcl {

Tensor attention_weights(const Tensor& q, const Tensor& memory, double tau) {
    if (q.rank() != 1 || memory.rank() != 2)
        throw DimensionError("attention_weights: expected q [D] and memory [m,D], got " +
                             shape_str(q.shape()) + " and " + shape_str(memory.shape()));
    if (memory.extent(1) != q.extent(0))
        throw DimensionError("attention_weights: descriptor width " +
                             shape_str(memory.shape()) + " does not match query " +
                             shape_str(q.shape()));
    if (memory.extent(0) < 1) throw PreconditionError("attention_weights: empty memory");

    Tensor qn = l2_normalize_rows(q);
    Tensor mn = l2_normalize_rows(memory);
    Tensor logits = scale(matmul(mn, reshape(qn, {q.size(), 1})), tau); // [m,1]
    return softmax(reshape(logits, {memory.extent(0)}), 0);
}

namespace {

// GAP over the spatial grid of a channels-last map: [H,W,D] -> [D]
Tensor spatial_mean(const Tensor& map_hwd) {
    const std::size_t hw = map_hwd.extent(0) * map_hwd.extent(1);
    const std::size_t d = map_hwd.extent(2);
    Tensor weights = Tensor::full({1, hw}, 1.0 / static_cast<double>(hw));
    return reshape(matmul(weights, reshape(map_hwd, {hw, d})), {d});
}

Tensor broadcast_spatial(const Tensor& vec, std::size_t h, std::size_t w) {
    const std::size_t d = vec.size();
    Tensor col = Tensor::full({h * w, 1}, 1.0);
    return reshape(matmul(col, reshape(vec, {1, d})), {h, w, d});
}

// attention-weighted memory descriptor o = M^T A for one query map
Tensor weighted_memory(const Tensor& query, const Tensor& memory, double tau,
                       std::vector<double>* attention_out) {
    const std::size_t d = query.extent(2);
    const std::size_t m = memory.size() / d;
    Tensor mem2d = reshape(memory, {m, d});
    Tensor a = attention_weights(spatial_mean(query), mem2d, tau);
    if (attention_out) *attention_out = a.data();
    return reshape(matmul(reshape(a, {1, m}), mem2d), {d});
}

void check_maps(const Tensor& query, const Tensor& memory) {
    if (query.rank() != 3 || memory.rank() != 4)
        throw DimensionError("propagate: expected query [H,W,D] and memory [S,H,W,D], got " +
                             shape_str(query.shape()) + " and " + shape_str(memory.shape()));
    if (memory.extent(3) != query.extent(2))
        throw DimensionError("propagate: channel extents differ between query " +
                             shape_str(query.shape()) + " and memory " +
                             shape_str(memory.shape()));
}

} // namespace

TsbModule::TsbModule(std::size_t channels, TsbConfig cfg_) : cfg(cfg_) {
    bn = BatchNorm::make(channels);
}

Tensor TsbModule::propagate(const Tensor& query, const Tensor& memory, BnMode mode,
                            bool update_running, std::vector<double>* attention_out) {
    check_maps(query, memory);
    if (memory.extent(0) == 0) return query;
    Tensor o = weighted_memory(query, memory, cfg.temperature, attention_out);
    Tensor normed = bn(reshape(o, {1, o.size()}), mode, update_running);
    Tensor row = reshape(normed, {o.size()});
    return add(broadcast_spatial(row, query.extent(0), query.extent(1)), query);
}

std::vector<Tensor> TsbModule::memory_descriptors(
    const std::vector<Tensor>& clip_maps, std::vector<std::vector<double>>* attention_out) const {
    if (clip_maps.empty()) throw PreconditionError("tsb_forward: empty clip");
    const std::size_t t = clip_maps.size();
    if (attention_out) attention_out->assign(t, {});
    std::vector<Tensor> descriptors;
    if (t == 1) return descriptors;
    descriptors.reserve(t);
    for (std::size_t i = 0; i < t; ++i) {
        std::vector<Tensor> others;
        others.reserve(t - 1);
        for (std::size_t j = 0; j < t; ++j)
            if (j != i) others.push_back(clip_maps[j]);
        Tensor memory = stack(others);
        check_maps(clip_maps[i], memory);
        descriptors.push_back(weighted_memory(clip_maps[i], memory, cfg.temperature,
                                              attention_out ? &(*attention_out)[i] : nullptr));
    }
    return descriptors;
}

std::vector<Tensor> TsbModule::apply_rows(const std::vector<Tensor>& clip_maps,
                                          const std::vector<Tensor>& normalized_rows) const {
    if (normalized_rows.size() != clip_maps.size())
        throw PreconditionError("tsb: one normalized row per frame required");
    const std::size_t h = clip_maps[0].extent(0), w = clip_maps[0].extent(1);
    std::vector<Tensor> out;
    out.reserve(clip_maps.size());
    for (std::size_t i = 0; i < clip_maps.size(); ++i)
        out.push_back(add(broadcast_spatial(normalized_rows[i], h, w), clip_maps[i]));
    return out;
}

std::vector<Tensor> TsbModule::forward(const std::vector<Tensor>& clip_maps, BnMode mode,
                                       bool update_running,
                                       std::vector<std::vector<double>>* attention_out) {
    std::vector<Tensor> descriptors = memory_descriptors(clip_maps, attention_out);
    if (descriptors.empty()) return clip_maps;
    Tensor normed = bn(stack(descriptors), mode, update_running); // [T,D]
    std::vector<Tensor> rows;
    rows.reserve(clip_maps.size());
    for (std::size_t i = 0; i < clip_maps.size(); ++i) rows.push_back(take_index(normed, i));
    return apply_rows(clip_maps, rows);
}

} // namespace tcl
