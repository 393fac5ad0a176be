// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensor with tape-free reverse-mode differentiation. Each result
// produced while gradient recording is enabled keeps strong references to its
// inputs and a closure that pushes its gradient back into them; backward()
// sorts the reachable subgraph topologically and runs each closure once.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tec/errors.hpp"

namespace tec {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;
using BackwardFn = std::function<void(TensorImpl&)>;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until a gradient reaches this node
    bool requires_grad = false;
    bool is_leaf = true;
    bool released = false;
    std::vector<ImplPtr> parents;
    BackwardFn backward_fn;

    std::vector<double>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        for (auto e : shape)
            if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
        if (shape_numel(shape) != data.size())
            throw DimensionError("shape " + shape_str(shape) + " does not match " +
                                 std::to_string(data.size()) + " values");
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }

    /// Row-major matrix from nested initializer lists.
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false) {
        std::vector<double> d;
        const std::size_t cols = rows.begin()->size();
        for (const auto& r : rows) {
            if (r.size() != cols) throw DimensionError("ragged matrix literal");
            d.insert(d.end(), r.begin(), r.end());
        }
        return Tensor({rows.size(), cols}, std::move(d), requires_grad);
    }

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    /// Extent along `axis`; negative axes count from the end.
    std::size_t size(int axis) const {
        const int d = static_cast<int>(dim());
        const int a = axis < 0 ? axis + d : axis;
        if (a < 0 || a >= d) throw DimensionError("axis out of range");
        return impl_->shape[static_cast<std::size_t>(a)];
    }

    std::span<const double> data() const { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    /// In-place access for leaf tensors (parameters, optimizer updates).
    std::span<double> mutable_data() {
        if (!impl_->is_leaf) throw GraphError("cannot mutate a non-leaf tensor in place");
        return impl_->data;
    }

    double item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    double operator[](std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_->requires_grad; }
    bool is_leaf() const { return impl_->is_leaf; }

    void set_requires_grad(bool v) {
        if (!impl_->is_leaf) throw GraphError("requires_grad can only be set on leaves");
        impl_->requires_grad = v;
        if (!v) impl_->grad.clear();
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    /// Copy of the values with no history.
    Tensor detach() const { return Tensor(impl_->shape, impl_->data, false); }

    bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

    /// Reverse-mode sweep from this scalar. The graph is released afterwards;
    /// a second backward through any released node raises GraphError.
    void backward();

    detail::TensorImpl& impl() const { return *impl_; }
    const detail::ImplPtr& impl_ptr() const { return impl_; }

    static Tensor from_impl(detail::ImplPtr p) {
        Tensor t;
        t.impl_ = std::move(p);
        return t;
    }

private:
    detail::ImplPtr impl_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
}

/// Wraps freshly computed values as the result of `op`, attaching the backward
/// closure when recording is enabled and any input is tracked.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
    check_finite(data, op);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool track = false;
    if (grad_enabled())
        for (const Tensor* in : inputs)
            if (in->requires_grad()) track = true;
    if (track) {
        impl->requires_grad = true;
        impl->is_leaf = false;
        for (const Tensor* in : inputs) impl->parents.push_back(in->impl_ptr());
        impl->backward_fn = std::move(fn);
    }
    return Tensor::from_impl(std::move(impl));
}

/// Same as above for a variable number of inputs.
inline Tensor make_result_n(const char* op, Shape shape, std::vector<double> data,
                            const std::vector<Tensor>& inputs, BackwardFn fn) {
    check_finite(data, op);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool track = false;
    if (grad_enabled())
        for (const auto& in : inputs)
            if (in.requires_grad()) track = true;
    if (track) {
        impl->requires_grad = true;
        impl->is_leaf = false;
        for (const auto& in : inputs) impl->parents.push_back(in.impl_ptr());
        impl->backward_fn = std::move(fn);
    }
    return Tensor::from_impl(std::move(impl));
}

/// Gradient buffer of a parent if it is tracked, else nullptr.
inline double* grad_of(const ImplPtr& p) {
    return p->requires_grad ? p->grad_buffer().data() : nullptr;
}

} // namespace detail

inline void Tensor::backward() {
    if (!impl_) throw GraphError("backward on undefined tensor");
    if (numel() != 1) throw GraphError("backward requires a scalar, got " + shape_str(shape()));
    if (impl_->released) throw GraphError("backward called twice on the same graph");
    if (!impl_->requires_grad) throw GraphError("backward on a tensor that does not require grad");

    // Iterative post-order DFS gives a topological order (inputs before outputs).
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (node->released) throw GraphError("backward through an already released graph");
        if (next < node->parents.size()) {
            detail::TensorImpl* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    impl_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorImpl* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    for (detail::TensorImpl* node : order) {
        if (node->is_leaf) continue;
        node->backward_fn = nullptr;
        node->parents.clear();
        node->grad.clear();
        node->grad.shrink_to_fit();
        node->released = true;
    }
}

} // namespace tec
