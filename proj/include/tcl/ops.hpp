#pragma once

#include <vector>

#include "tcl/tensor.hpp"

namespace tcl {

// Elementwise / scalar
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor relu(const Tensor& x);
Tensor sqrt_shift(const Tensor& x, double eps); // sqrt(x + eps)
Tensor sum_all(const Tensor& x);                // -> shape {1}

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b); // [m,k] x [k,n]
Tensor transpose(const Tensor& x);               // rank 2
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& x, Shape shape);

// Assembly
Tensor concat_vecs(const std::vector<Tensor>& parts);      // rank-1 concat
Tensor stack(const std::vector<Tensor>& parts);            // same shape -> new axis 0
Tensor take_index(const Tensor& x, std::size_t i);         // drop axis 0 at i
Tensor add_rowvec(const Tensor& x, const Tensor& b);       // [m,n] + [n]
Tensor add_chanvec(const Tensor& x, const Tensor& b);      // [C,H,W] + [C]

// Neural primitives
Tensor conv2d(const Tensor& x, const Tensor& k, int stride = 1, int pad = 0);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor global_avg_pool(const Tensor& x); // [C,H,W] -> [C]
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12); // rank 1 or 2
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels); // mean

enum class BnMode { train, eval };

struct BnStats {
    std::vector<double> mean;
    std::vector<double> var;
};

struct BnBatchStats {
    std::vector<double> mean;
    std::vector<double> var;
};

// x is [B,C] or [B,C,H,W]; channel axis 1. Train mode normalizes with batch
// statistics (biased variance) and, when update_running is set, folds them
// into stats with the given momentum; eval mode normalizes with stats.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnStats& stats,
                 BnMode mode, double momentum = 0.1, double eps = 1e-5,
                 bool update_running = true, BnBatchStats* batch_out = nullptr);

} // namespace tcl
