#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "xxnet/error.hpp"

namespace xxnet {

/// Extent of a dense (batch, channel, row, col) array.
struct Shape {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    constexpr std::size_t size() const noexcept { return n * c * h * w; }
    constexpr std::size_t plane() const noexcept { return h * w; }
    friend constexpr bool operator==(const Shape&, const Shape&) = default;

    std::string str() const {
        std::ostringstream os;
        os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
        return os.str();
    }
};

/// Dense 4-D tensor stored row-major in (n, c, h, w) order.
///
/// A default-constructed tensor is empty (all extents zero); every tensor
/// built from a Shape has all extents >= 1. Element type is `float` for
/// training and `double` for gradient checks.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape) {
        if (shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0)
            throw ShapeError("tensor extents must be >= 1, got " + shape.str());
        data_.assign(shape.size(), fill);
    }

    Tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
        : Tensor(Shape{n, c, h, w}, fill) {}

    Tensor(Shape shape, std::vector<T> data) : Tensor(shape) {
        if (data.size() != shape.size())
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             shape.str());
        data_ = std::move(data);
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t n() const noexcept { return shape_.n; }
    std::size_t c() const noexcept { return shape_.c; }
    std::size_t h() const noexcept { return shape_.h; }
    std::size_t w() const noexcept { return shape_.w; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t plane() const noexcept { return shape_.plane(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }

    std::size_t offset(std::size_t in, std::size_t ic, std::size_t ih, std::size_t iw) const noexcept {
        return ((in * shape_.c + ic) * shape_.h + ih) * shape_.w + iw;
    }

    T& operator()(std::size_t in, std::size_t ic, std::size_t ih, std::size_t iw) noexcept {
        return data_[offset(in, ic, ih, iw)];
    }
    const T& operator()(std::size_t in, std::size_t ic, std::size_t ih, std::size_t iw) const noexcept {
        return data_[offset(in, ic, ih, iw)];
    }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    T operator[](std::size_t i) const noexcept { return data_[i]; }

    /// One (h, w) feature map.
    std::span<T> plane(std::size_t in, std::size_t ic) noexcept {
        return {data_.data() + offset(in, ic, 0, 0), shape_.plane()};
    }
    std::span<const T> plane(std::size_t in, std::size_t ic) const noexcept {
        return {data_.data() + offset(in, ic, 0, 0), shape_.plane()};
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    /// Same data, different extents with the same element count.
    Tensor reshaped(Shape shape) const {
        if (shape.size() != size())
            throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
        Tensor out;
        out.shape_ = shape;
        out.data_ = data_;
        return out;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        std::transform(data_.begin(), data_.end(), out.data().begin(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_{};
    std::vector<T> data_;
};

inline void require_shape(const Shape& got, const Shape& want, const char* what) {
    if (got != want)
        throw ShapeError(std::string(what) + ": expected " + want.str() + ", got " + got.str());
}

}  // namespace xxnet
