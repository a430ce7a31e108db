#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtprompt/rng.hpp"

namespace mtp {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("tensor extent must be positive");
        n *= e;
    }
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Storage is a raw array so op outputs can skip value-initialization (the
// zero-fill showed up as a fifth of the training profile with std::vector),
// shared so that layout-preserving views (reshape, row slices) can alias the
// same value and grad memory instead of copying.
template <typename T>
struct TensorImpl {
    std::vector<int> shape;
    int64_t n = 0;
    std::shared_ptr<T[]> data;
    std::shared_ptr<T[]> grad; // null until first use; always n elements once set
    bool requires_grad = false;
    const void* tape = nullptr; // tape that produced this node, null for leaves
};

// Dense row-major tensor. Copies are shallow handles to shared storage;
// clone() makes an independent deep copy. Values are immutable once an op
// has consumed them; grad is the only field mutated after construction.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    // allocated but not written; caller must fill every element
    static Tensor uninit(std::vector<int> shape, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->n = shape_numel(shape);
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::shared_ptr<T[]>(new T[static_cast<size_t>(t.impl_->n)]);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        Tensor t = uninit(std::move(shape), requires_grad);
        std::fill_n(t.impl_->data.get(), t.impl_->n, T(0));
        return t;
    }

    static Tensor full(std::vector<int> shape, T value, bool requires_grad = false) {
        Tensor t = uninit(std::move(shape), requires_grad);
        std::fill_n(t.impl_->data.get(), t.impl_->n, value);
        return t;
    }

    static Tensor from(std::vector<int> shape, const std::vector<T>& data, bool requires_grad = false) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("data length does not match shape " + shape_str(shape));
        Tensor t = uninit(std::move(shape), requires_grad);
        std::copy(data.begin(), data.end(), t.impl_->data.get());
        return t;
    }

    static Tensor scalar(T value) { return from({1}, {value}); }

    // seeded uniform in [lo, hi)
    static Tensor uniform(std::vector<int> shape, Rng& rng, T lo, T hi, bool requires_grad = false) {
        Tensor t = uninit(std::move(shape), requires_grad);
        for (int64_t i = 0; i < t.impl_->n; ++i)
            t.impl_->data[static_cast<size_t>(i)] = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return impl_->n; }

    std::span<T> data() { return {impl_->data.get(), static_cast<size_t>(impl_->n)}; }
    std::span<const T> data() const { return {impl_->data.get(), static_cast<size_t>(impl_->n)}; }
    T* ptr() { return impl_->data.get(); }
    const T* ptr() const { return impl_->data.get(); }

    T item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    T& at(int i) { return impl_->data[static_cast<size_t>(i)]; }
    T at(int i) const { return impl_->data[static_cast<size_t>(i)]; }
    T& at(int r, int c) { return impl_->data[static_cast<size_t>(r) * dim(1) + c]; }
    T at(int r, int c) const { return impl_->data[static_cast<size_t>(r) * dim(1) + c]; }
    T& at(int i, int j, int k) {
        return impl_->data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    T at(int i, int j, int k) const {
        return impl_->data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool b) { impl_->requires_grad = b; }

    bool grad_allocated() const { return impl_->grad != nullptr; }

    // Lazily allocated (zero-filled) so detached tensors never carry a buffer.
    std::span<T> grad() {
        ensure_grad();
        return {impl_->grad.get(), static_cast<size_t>(impl_->n)};
    }
    std::span<const T> grad_view() const {
        return {impl_->grad.get(), impl_->grad ? static_cast<size_t>(impl_->n) : 0};
    }
    T* grad_ptr() {
        ensure_grad();
        return impl_->grad.get();
    }

    void ensure_grad() {
        if (!impl_->requires_grad)
            throw ContractError("grad requested on tensor with requires_grad=false");
        if (!impl_->grad) {
            impl_->grad = std::shared_ptr<T[]>(new T[static_cast<size_t>(impl_->n)]);
            std::fill_n(impl_->grad.get(), impl_->n, T(0));
        }
    }

    void zero_grad() {
        if (impl_->grad) std::fill_n(impl_->grad.get(), impl_->n, T(0));
    }

    // Zero-copy reinterpretation of the same buffer. Gradients accumulate
    // into the shared storage, which is exactly the pass-through backward of
    // a reshape, so views never appear on the tape.
    Tensor view_reshaped(std::vector<int> new_shape) const {
        if (shape_numel(new_shape) != impl_->n)
            throw ShapeError("reshape: element count mismatch " + shape_str(impl_->shape) + " -> " +
                             shape_str(new_shape));
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->n = impl_->n;
        t.impl_->shape = std::move(new_shape);
        if (impl_->requires_grad) const_cast<Tensor*>(this)->ensure_grad();
        t.impl_->data = impl_->data;
        t.impl_->grad = impl_->grad;
        t.impl_->requires_grad = impl_->requires_grad;
        t.impl_->tape = impl_->tape;
        return t;
    }

    // Contiguous row-range view of a rank-2 tensor.
    Tensor view_rows(int r0, int r1) const {
        if (rank() != 2 || r0 < 0 || r1 > dim(0) || r0 >= r1)
            throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                             ") on " + shape_str(impl_->shape));
        const int d = dim(1);
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->n = static_cast<int64_t>(r1 - r0) * d;
        t.impl_->shape = {r1 - r0, d};
        if (impl_->requires_grad) const_cast<Tensor*>(this)->ensure_grad();
        t.impl_->data = std::shared_ptr<T[]>(impl_->data, impl_->data.get() + static_cast<size_t>(r0) * d);
        if (impl_->grad)
            t.impl_->grad = std::shared_ptr<T[]>(impl_->grad, impl_->grad.get() + static_cast<size_t>(r0) * d);
        t.impl_->requires_grad = impl_->requires_grad;
        t.impl_->tape = impl_->tape;
        return t;
    }

    const void* producer_tape() const { return impl_->tape; }
    void mark_on_tape(const void* tape) { impl_->tape = tape; }

    const void* id() const { return impl_.get(); }
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    Tensor clone() const {
        Tensor t = uninit(impl_->shape, impl_->requires_grad);
        std::memcpy(t.impl_->data.get(), impl_->data.get(), static_cast<size_t>(impl_->n) * sizeof(T));
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t = Tensor<U>::uninit(impl_->shape, impl_->requires_grad);
        for (int64_t i = 0; i < impl_->n; ++i)
            t.ptr()[i] = static_cast<U>(impl_->data[static_cast<size_t>(i)]);
        return t;
    }

    bool all_finite() const {
        for (int64_t i = 0; i < impl_->n; ++i)
            if (!std::isfinite(static_cast<double>(impl_->data[static_cast<size_t>(i)]))) return false;
        return true;
    }

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape();
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.ptr(), b.ptr(), static_cast<size_t>(a.numel()) * sizeof(T)) == 0;
}

} // namespace mtp
