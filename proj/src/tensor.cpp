#include "tcl/tensor.hpp"

#include <unordered_set>

#include "tcl/rng.hpp"

namespace tcl {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

namespace {
void check_extents(const Shape& s) {
    for (std::size_t e : s)
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(s));
}
} // namespace

Tensor Tensor::zeros(Shape shape) {
    check_extents(shape);
    auto impl = std::make_shared<TensorImpl>();
    impl->value.assign(shape_numel(shape), 0.0);
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double v) {
    Tensor t = zeros(std::move(shape));
    for (double& x : t.impl_->value) x = v;
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    check_extents(shape);
    if (shape_numel(shape) != data.size())
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(data);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t = zeros(std::move(shape));
    for (double& x : t.impl_->value) x = rng.uniform(lo, hi);
    return t;
}

double Tensor::at(std::size_t i, std::size_t j) const {
    return impl_->value[i * impl_->shape[1] + j];
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
    const Shape& s = impl_->shape;
    return impl_->value[(i * s[1] + j) * s[2] + k];
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    const Shape& s = impl_->shape;
    return impl_->value[((i * s[1] + j) * s[2] + k) * s[3] + l];
}

const std::vector<double>& Tensor::grad() const {
    static const std::vector<double> empty;
    return impl_->grad.empty() ? empty : impl_->grad;
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->value = impl_->value;
    impl->requires_grad = impl_->requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::detached() const {
    Tensor t = clone();
    t.impl_->requires_grad = false;
    return t;
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

Tape::Scope::Scope(Tape& t) : prev_(g_active_tape) { g_active_tape = &t; }
Tape::Scope::~Scope() { g_active_tape = prev_; }

void Tape::push(std::shared_ptr<TensorImpl> output, BackFn back) {
    records_.push_back({std::move(output), std::move(back)});
}

std::vector<double>& Tape::slot(GradMap& grads, const std::shared_ptr<TensorImpl>& t) {
    auto& buf = grads[t.get()];
    if (buf.empty()) buf.assign(t->value.size(), 0.0);
    return buf;
}

void Tape::backward(const Tensor& loss) {
    if (records_.empty()) throw PreconditionError("backward: tape is empty");
    if (!loss.defined() || loss.size() != 1)
        throw PreconditionError("backward: loss must be a scalar tensor, got " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("null")));

    GradMap grads;
    grads[loss.impl()] = {1.0};

    std::unordered_set<TensorImpl*> produced;
    produced.reserve(records_.size() * 2);
    for (const auto& r : records_) produced.insert(r.output.get());

    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        auto g = grads.find(it->output.get());
        if (g == grads.end()) continue;
        it->back(g->second, grads);
    }

    for (auto& [impl, g] : grads) {
        if (!impl->requires_grad || produced.count(impl)) continue;
        if (impl->grad.empty()) impl->grad.assign(impl->value.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) impl->grad[i] += g[i];
    }
}

} // namespace tcl
