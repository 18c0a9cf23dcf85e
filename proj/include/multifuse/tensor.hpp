#ifndef MULTIFUSE_TENSOR_HPP
#define MULTIFUSE_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "multifuse/errors.hpp"

namespace multifuse {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// 64-byte aligned storage, so vectorized reductions sum in the same order on every run.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept
    {
    }

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept
    {
        return true;
    }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

namespace detail {

template <class T>
struct TensorImpl {
    Shape shape;
    AlignedVector<T> data;
    AlignedVector<T> grad; // sized like data iff requires_grad
    bool requires_grad = false;
    bool parameter = false;
};

} // namespace detail

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl<T>>())
    {
        impl_->data.assign(numel(shape), fill);
        impl_->shape = std::move(shape);
        set_requires_grad(requires_grad);
    }

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl<T>>())
    {
        if (numel(shape) != data.size()) {
            throw ContractError("tensor: shape " + shape_str(shape) + " does not match "
                                + std::to_string(data.size()) + " values");
        }
        impl_->shape = std::move(shape);
        impl_->data.assign(data.begin(), data.end());
        set_requires_grad(requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false)
    {
        return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
    }

    bool defined() const noexcept { return static_cast<bool>(impl_); }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t size() const { return impl_->data.size(); }

    std::span<T> data() { return impl_->data; }
    std::span<const T> data() const { return impl_->data; }
    std::vector<T> values() const { return {impl_->data.begin(), impl_->data.end()}; }

    T& operator[](std::size_t i) { return impl_->data[i]; }
    const T& operator[](std::size_t i) const { return impl_->data[i]; }

    T item() const
    {
        if (size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }

    void set_requires_grad(bool on)
    {
        impl_->requires_grad = on;
        if (on) {
            impl_->grad.assign(impl_->data.size(), T(0));
        } else {
            impl_->grad.clear();
            impl_->grad.shrink_to_fit();
        }
    }

    bool is_parameter() const { return impl_->parameter; }
    void mark_parameter()
    {
        impl_->parameter = true;
        if (!requires_grad()) set_requires_grad(true);
    }

    // Gradient buffers are accumulated through shared handles, including const ones.
    std::span<T> grad() const { return impl_->grad; }

    void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

    Tensor clone() const
    {
        Tensor out(impl_->shape, values(), impl_->requires_grad);
        out.impl_->parameter = impl_->parameter;
        if (impl_->requires_grad) out.impl_->grad = impl_->grad;
        return out;
    }

    /// Deep copy of the values only; no gradient tracking.
    Tensor detached() const { return Tensor(impl_->shape, values(), false); }

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }
    const void* identity() const noexcept { return impl_.get(); }

    bool all_finite() const
    {
        return std::all_of(impl_->data.begin(), impl_->data.end(),
                           [](T v) { return std::isfinite(v); });
    }

private:
    std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Convert between precisions (value copy, no gradient).
template <class To, class From>
Tensor<To> cast(const Tensor<From>& t)
{
    std::vector<To> out(t.size());
    std::transform(t.data().begin(), t.data().end(), out.begin(),
                   [](From v) { return static_cast<To>(v); });
    return Tensor<To>(t.shape(), std::move(out));
}

} // namespace multifuse

#endif
