#include "tcl/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "tcl/rng.hpp"

namespace tcl {

namespace {

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (max_coords == 0 || max_coords >= n) return idx;
    Rng rng(seed);
    shuffle(idx, rng);
    idx.resize(max_coords);
    std::sort(idx.begin(), idx.end());
    return idx;
}

} // namespace

double grad_check_params(const std::function<Tensor()>& fn, const std::vector<Tensor>& params,
                         double eps, std::size_t max_coords, std::uint64_t seed) {
    // analytic gradients from one recorded pass
    std::vector<bool> had_grad;
    for (const Tensor& p : params) {
        had_grad.push_back(p.requires_grad());
        const_cast<Tensor&>(p).set_requires_grad(true);
        const_cast<Tensor&>(p).zero_grad();
    }
    Tape tape;
    {
        Tape::Scope scope(tape);
        Tensor loss = fn();
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (const Tensor& p : params) {
        if (p.has_grad())
            analytic.push_back(p.grad());
        else
            analytic.push_back(std::vector<double>(p.size(), 0.0));
    }

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        auto coords = pick_coords(p.size(), max_coords, seed + pi);
        for (std::size_t i : coords) {
            const double keep = p.data()[i];
            p.data_mut()[i] = keep + eps;
            const double up = fn().at(0);
            p.data_mut()[i] = keep - eps;
            const double down = fn().at(0);
            p.data_mut()[i] = keep;
            const double fd = (up - down) / (2.0 * eps);
            worst = std::max(worst, rel_err(fd, analytic[pi][i]));
        }
    }
    for (std::size_t pi = 0; pi < params.size(); ++pi)
        const_cast<Tensor&>(params[pi]).set_requires_grad(had_grad[pi]);
    return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps,
                  std::size_t max_coords, std::uint64_t seed) {
    Tensor probe = x.clone();
    probe.set_requires_grad(true);
    return grad_check_params([&] { return f(probe); }, {probe}, eps, max_coords, seed);
}

} // namespace tcl
