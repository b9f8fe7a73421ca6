#pragma once

#include <functional>

#include "tcl/tensor.hpp"

namespace tcl {

// Central-difference gradient verification. Compares (f(x+eps*e)-f(x-eps*e))
// / (2*eps) against the tape gradient, coordinate by coordinate, and returns
// the max relative error with denominator max(|a|,|b|,1e-8). f must be
// scalar-valued and deterministic; the result is unspecified otherwise.
// max_coords > 0 checks a deterministic random subset of coordinates.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5, std::size_t max_coords = 0, std::uint64_t seed = 17);

// Same check for a closure over shared parameter handles: fn() is re-run with
// each checked parameter coordinate perturbed in place.
double grad_check_params(const std::function<Tensor()>& fn, const std::vector<Tensor>& params,
                         double eps = 1e-5, std::size_t max_coords = 0, std::uint64_t seed = 17);

} // namespace tcl
