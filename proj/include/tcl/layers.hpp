#pragma once

#include "tcl/ops.hpp"
#include "tcl/rng.hpp"
#include "tcl/tensor.hpp"

namespace tcl {

// conv + bias; weight [Co,Ci,k,k], fan-in uniform init
struct ConvLayer {
    Tensor weight;
    Tensor bias;
    int stride = 1;
    int pad = 1;

    static ConvLayer make(std::size_t c_out, std::size_t c_in, std::size_t k, int stride, int pad,
                          Rng& rng);
    Tensor operator()(const Tensor& x) const;
    std::size_t param_count() const { return weight.size() + bias.size(); }
};

struct Linear {
    Tensor weight; // [out, in]
    Tensor bias;   // [out]

    static Linear make(std::size_t out, std::size_t in, Rng& rng);
    Tensor operator()(const Tensor& x) const; // [B,in] -> [B,out]
};

struct BatchNorm {
    Tensor gamma;
    Tensor beta;
    BnStats stats;
    double momentum = 0.1;
    double eps = 1e-5;

    static BatchNorm make(std::size_t channels);
    Tensor operator()(const Tensor& x, BnMode mode, bool update_running = true,
                      BnBatchStats* batch_out = nullptr);
    std::size_t channels() const { return gamma.size(); }
};

} // namespace tcl
