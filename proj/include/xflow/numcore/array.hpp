#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace xflow {

using Shape = std::vector<std::size_t>;

/// Thrown when array shapes do not match an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when an operation produces NaN or Inf.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? ", " : "") << shape[i];
    }
    out << ']';
    return out.str();
}

/// Dense row-major array. The element count always equals the product of the shape.
template <class T>
class BasicDenseArray {
public:
    using value_type = T;

    BasicDenseArray() = default;

    explicit BasicDenseArray(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    BasicDenseArray(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size()) {
            throw ShapeError("DenseArray: shape " + shape_string(shape_) + " holds " +
                             std::to_string(shape_size(shape_)) + " elements but data has " +
                             std::to_string(data_.size()));
        }
    }

    BasicDenseArray(Shape shape, std::initializer_list<T> data)
        : BasicDenseArray(std::move(shape), std::vector<T>(data)) {}

    template <class U>
    [[nodiscard]] BasicDenseArray<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return BasicDenseArray<U>(shape_, std::move(out));
    }

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    [[nodiscard]] std::span<T> data() noexcept { return data_; }
    [[nodiscard]] std::span<const T> data() const noexcept { return data_; }
    [[nodiscard]] T* raw() noexcept { return data_.data(); }
    [[nodiscard]] const T* raw() const noexcept { return data_.data(); }
    [[nodiscard]] std::vector<T>& storage() noexcept { return data_; }
    [[nodiscard]] const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Row-major multi-index access; bounds are not checked.
    template <class... Idx>
    T& at(Idx... idx) noexcept {
        return data_[offset(idx...)];
    }
    template <class... Idx>
    const T& at(Idx... idx) const noexcept {
        return data_[offset(idx...)];
    }

    /// Same data, new shape with identical element count.
    [[nodiscard]] BasicDenseArray reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size()) {
            throw ShapeError("reshape " + shape_string(shape_) + " -> " + shape_string(shape));
        }
        return BasicDenseArray(std::move(shape), data_);
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    [[nodiscard]] bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const BasicDenseArray& a, const BasicDenseArray& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    template <class... Idx>
    std::size_t offset(Idx... idx) const noexcept {
        const std::size_t index[] = {static_cast<std::size_t>(idx)...};
        std::size_t off = 0;
        for (std::size_t i = 0; i < sizeof...(Idx); ++i) {
            off = off * shape_[i] + index[i];
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

using DenseArray = BasicDenseArray<float>;

inline void require_shape(std::string_view where, const Shape& got, const Shape& want) {
    if (got != want) {
        throw ShapeError(std::string(where) + ": expected shape " + shape_string(want) + ", got " +
                         shape_string(got));
    }
}

template <class T>
void require_finite(std::string_view where, const BasicDenseArray<T>& a) {
    if (!a.all_finite()) {
        throw NumericError(std::string(where) + ": non-finite value produced");
    }
}

/// Bitwise comparison for floating-point payloads (treats -0 and +0 as different).
template <class T>
bool bit_identical(const BasicDenseArray<T>& a, const BasicDenseArray<T>& b) {
    if (a.shape() != b.shape()) {
        return false;
    }
    auto da = a.data();
    auto db = b.data();
    return std::equal(da.begin(), da.end(), db.begin(), [](T x, T y) {
        return std::memcmp(&x, &y, sizeof(T)) == 0;
    });
}

/// Rows `index` of the leading axis, in the given order.
template <class T>
BasicDenseArray<T> gather_rows(const BasicDenseArray<T>& a, std::span<const std::size_t> index) {
    if (a.rank() == 0) {
        throw ShapeError("gather_rows: rank-0 array");
    }
    Shape shape = a.shape();
    const std::size_t rows = shape[0];
    const std::size_t row = rows == 0 ? 0 : a.size() / rows;
    shape[0] = index.size();
    BasicDenseArray<T> out(shape);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= rows) {
            throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of range " + std::to_string(rows));
        }
        std::copy_n(a.raw() + index[i] * row, row, out.raw() + i * row);
    }
    return out;
}

}  // namespace xflow
