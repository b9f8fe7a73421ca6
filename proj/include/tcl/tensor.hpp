#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace tcl {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Contract violations surface as typed exceptions; messages name the
// offending shapes.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct PreconditionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until a backward pass touches it
    bool requires_grad = false;
};

// Dense row-major f64 tensor. Copies share the buffer; ops never mutate their
// inputs, so treat a tensor as immutable once it has been consumed and use
// clone() when a real copy is needed.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from_data(Shape shape, std::vector<double> data);
    static Tensor scalar(double v); // shape {1}
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->value.size(); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t extent(std::size_t axis) const { return impl_->shape[axis]; }

    const std::vector<double>& data() const { return impl_->value; }
    std::vector<double>& data_mut() { return impl_->value; }
    double operator[](std::size_t i) const { return impl_->value[i]; }

    double at(std::size_t i) const { return impl_->value[i]; }
    double at(std::size_t i, std::size_t j) const;
    double at(std::size_t i, std::size_t j, std::size_t k) const;
    double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        impl_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad() { impl_->grad.clear(); }

    Tensor clone() const;    // deep copy of values, keeps requires_grad, drops grad
    Tensor detached() const; // deep copy with requires_grad = false

    const std::shared_ptr<TensorImpl>& handle() const { return impl_; }
    TensorImpl* impl() const { return impl_.get(); }

    static Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of executed ops. A backward sweep stages gradients of the
// pass in a scratch map and then folds them into the .grad of requires_grad
// leaves, so repeated backward calls accumulate.
class Tape {
public:
    using GradMap = std::unordered_map<TensorImpl*, std::vector<double>>;
    using BackFn = std::function<void(const std::vector<double>& gout, GradMap& grads)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void push(std::shared_ptr<TensorImpl> output, BackFn back);
    void backward(const Tensor& loss);
    std::size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }

    static Tape* active();

    // zero-initialized gradient buffer for t inside a pass
    static std::vector<double>& slot(GradMap& grads, const std::shared_ptr<TensorImpl>& t);

    // RAII: makes a tape the active recording target on this thread
    class Scope {
    public:
        explicit Scope(Tape& t);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

private:
    struct Record {
        std::shared_ptr<TensorImpl> output;
        BackFn back;
    };
    std::vector<Record> records_;
};

} // namespace tcl
