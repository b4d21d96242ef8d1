#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "dblend/error.hpp"

namespace dblend {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor. A rank-0 shape holds exactly one scalar.
template <typename T>
class BasicTensor {
   public:
    using value_type = T;

    BasicTensor() : data_(1, T(0)) {}
    explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        require(shape_numel(shape_) == data_.size(), ErrorCode::shape_mismatch,
                "tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
    }

    static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const noexcept { return data_.size(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T* ptr() noexcept { return data_.data(); }
    const T* ptr() const noexcept { return data_.data(); }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T item() const {
        require(data_.size() == 1, ErrorCode::shape_mismatch, "item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    BasicTensor reshaped(Shape shape) const {
        require(shape_numel(shape) == data_.size(), ErrorCode::shape_mismatch,
                "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return BasicTensor(std::move(shape), data_);
    }

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return BasicTensor<U>(shape_, std::move(out));
    }

    bool all_finite() const noexcept {
        using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
        constexpr Bits exp_mask = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
        Bits bad = 0;
        for (T v : data_) {
            Bits b;
            std::memcpy(&b, &v, sizeof b);
            bad |= Bits((b & exp_mask) == exp_mask);
        }
        return bad == 0;
    }

   private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Same shape and identical bit patterns.
template <typename T>
bool bit_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(T)) == 0;
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require(a.shape() == b.shape(), ErrorCode::shape_mismatch, "max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

template <typename T>
double rms_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require(a.shape() == b.shape(), ErrorCode::shape_mismatch, "rms_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        s += d * d;
    }
    return std::sqrt(s / double(a.numel()));
}

}  // namespace dblend
