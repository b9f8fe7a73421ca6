#include "tcl/layers.hpp"

#include <cmath>

namespace tcl {

ConvLayer ConvLayer::make(std::size_t c_out, std::size_t c_in, std::size_t k, int stride, int pad,
                          Rng& rng) {
    ConvLayer l;
    // Kaiming-uniform for the relu blocks; keeps activation scale roughly
    // constant through the stages. Biases start off zero so erased (exactly
    // zero) patches do not park the relu on its kink.
    const double bound = std::sqrt(6.0 / static_cast<double>(c_in * k * k));
    l.weight = Tensor::uniform({c_out, c_in, k, k}, rng, -bound, bound).set_requires_grad(true);
    const double bbound = std::sqrt(1.0 / static_cast<double>(c_in * k * k));
    l.bias = Tensor::uniform({c_out}, rng, -bbound, bbound).set_requires_grad(true);
    l.stride = stride;
    l.pad = pad;
    return l;
}

Tensor ConvLayer::operator()(const Tensor& x) const {
    return add_chanvec(conv2d(x, weight, stride, pad), bias);
}

Linear Linear::make(std::size_t out, std::size_t in, Rng& rng) {
    Linear l;
    const double bound = std::sqrt(1.0 / static_cast<double>(in));
    l.weight = Tensor::uniform({out, in}, rng, -bound, bound).set_requires_grad(true);
    l.bias = Tensor::uniform({out}, rng, -bound, bound).set_requires_grad(true);
    return l;
}

Tensor Linear::operator()(const Tensor& x) const {
    return add_rowvec(matmul(x, transpose(weight)), bias);
}

BatchNorm BatchNorm::make(std::size_t channels) {
    BatchNorm bn;
    bn.gamma = Tensor::full({channels}, 1.0).set_requires_grad(true);
    bn.beta = Tensor::zeros({channels}).set_requires_grad(true);
    bn.stats.mean.assign(channels, 0.0);
    bn.stats.var.assign(channels, 1.0);
    return bn;
}

Tensor BatchNorm::operator()(const Tensor& x, BnMode mode, bool update_running,
                             BnBatchStats* batch_out) {
    return batchnorm(x, gamma, beta, stats, mode, momentum, eps, update_running, batch_out);
}

} // namespace tcl
