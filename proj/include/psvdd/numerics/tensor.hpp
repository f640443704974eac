#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace psvdd {

/// Raised when tensor extents do not conform to an operation's contract.
class DimensionError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for out-of-range arguments that are not shape problems.
class ArgumentError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values encountered where finite ones are required.
class NumericalError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

namespace numerics {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// Storage with a fixed 64-byte alignment. Vectorised kernels take different
/// rounding paths for differently aligned inputs, so alignment must not depend
/// on where the heap happens to place a buffer.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array. The last axis is contiguous.
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(element_count(shape_), fill) {}
    Tensor(Shape shape, std::initializer_list<T> values) : Tensor(std::move(shape), AlignedVector<T>(values)) {}
    Tensor(Shape shape, const std::vector<T>& values) : Tensor(std::move(shape), AlignedVector<T>(values.begin(), values.end())) {}
    Tensor(Shape shape, AlignedVector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
        if (data_.size() != element_count(shape_)) {
            throw DimensionError("tensor: " + std::to_string(data_.size()) + " values do not fill shape " +
                                 shape_string(shape_));
        }
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    T& at(std::size_t i, std::size_t j, std::size_t k) { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
    const T& at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    /// Same values, new extents. Element counts must agree.
    Tensor reshaped(Shape shape) const {
        if (element_count(shape) != data_.size()) {
            throw DimensionError("reshape: " + shape_string(shape_) + " -> " + shape_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, AlignedVector<U>(data_.begin(), data_.end()));
    }

    bool operator==(const Tensor& other) const = default;

   private:
    Shape shape_;
    AlignedVector<T> data_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.values()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace numerics
}  // namespace psvdd
