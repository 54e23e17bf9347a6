#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <vector>

#include "dsanet/common.hpp"
#include "dsanet/rng.hpp"

namespace dsanet {

// Shared payload of a tensor handle. Ops allocate a fresh payload per output;
// grad lives next to the values so a backward closure only needs this pointer.
template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until requires_grad and first touched
    bool requires_grad = false;

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() : d_(std::make_shared<TensorData<T>>()) {}
    explicit Tensor(std::shared_ptr<TensorData<T>> d) : d_(std::move(d)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto d = std::make_shared<TensorData<T>>();
        d->value.assign(static_cast<std::size_t>(dsanet::numel(shape)), T(0));
        d->shape = std::move(shape);
        d->requires_grad = requires_grad;
        return Tensor(std::move(d));
    }

    static Tensor full(Shape shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.d_->value.begin(), t.d_->value.end(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        DSANET_CHECK(static_cast<std::int64_t>(data.size()) == dsanet::numel(shape), DimensionError,
                     "tensor data length ", data.size(), " does not match shape ", shape_str(shape));
        auto d = std::make_shared<TensorData<T>>();
        d->shape = std::move(shape);
        d->value = std::move(data);
        d->requires_grad = requires_grad;
        return Tensor(std::move(d));
    }

    static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    static Tensor uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.d_->value) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    static Tensor normal(Shape shape, Rng& rng, T mean, T stddev, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.d_->value) v = static_cast<T>(rng.normal(mean, stddev));
        return t;
    }

    const Shape& shape() const { return d_->shape; }
    std::int64_t dim(std::size_t i) const { return d_->shape[i]; }
    std::size_t rank() const { return d_->shape.size(); }
    std::int64_t numel() const { return d_->numel(); }
    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool b) {
        d_->requires_grad = b;
        if (b) d_->ensure_grad();
    }

    T* data() { return d_->value.data(); }
    const T* data() const { return d_->value.data(); }
    std::vector<T>& values() { return d_->value; }
    const std::vector<T>& values() const { return d_->value; }

    T* grad_data() {
        d_->ensure_grad();
        return d_->grad.data();
    }
    const std::vector<T>& grad() const { return d_->grad; }
    void zero_grad() {
        d_->ensure_grad();
        d_->zero_grad();
    }

    std::shared_ptr<TensorData<T>> payload() const { return d_; }

    T& operator[](std::int64_t i) { return d_->value[static_cast<std::size_t>(i)]; }
    T operator[](std::int64_t i) const { return d_->value[static_cast<std::size_t>(i)]; }

    std::int64_t flat_index(std::initializer_list<std::int64_t> idx) const {
        DSANET_CHECK(idx.size() == d_->shape.size(), DimensionError, "index rank mismatch");
        std::int64_t flat = 0;
        std::size_t k = 0;
        for (auto i : idx) {
            flat = flat * d_->shape[k] + i;
            ++k;
        }
        return flat;
    }
    T& at(std::initializer_list<std::int64_t> idx) { return d_->value[flat_index(idx)]; }
    T at(std::initializer_list<std::int64_t> idx) const { return d_->value[flat_index(idx)]; }

    bool all_finite() const {
        for (T v : d_->value)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    // Deep copy (values only; fresh payload, no grad).
    Tensor clone() const {
        auto d = std::make_shared<TensorData<T>>();
        d->shape = d_->shape;
        d->value = d_->value;
        d->requires_grad = false;
        return Tensor(std::move(d));
    }

private:
    std::shared_ptr<TensorData<T>> d_;
};

// Dense integer array for class labels; not differentiable.
struct IntTensor {
    Shape shape;
    std::vector<std::int32_t> value;

    static IntTensor zeros(Shape s) {
        IntTensor t;
        t.value.assign(static_cast<std::size_t>(dsanet::numel(s)), 0);
        t.shape = std::move(s);
        return t;
    }
    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
};

}  // namespace dsanet
