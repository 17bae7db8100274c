#pragma once

#include "galbnn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace galbnn::nn {

/// Dense row-major N-d array.
template <typename T>
class Tensor {
public:
    using Shape = std::vector<std::size_t>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(count(shape_), fill) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_string());
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    /// Same data under a new shape with an equal element count.
    Tensor reshaped(Shape shape) const& {
        Tensor t = *this;
        t.reshape(std::move(shape));
        return t;
    }

    Tensor reshaped(Shape shape) && {
        reshape(std::move(shape));
        return std::move(*this);
    }

    void reshape(Shape shape) {
        if (count(shape) != data_.size()) throw ShapeError("cannot reshape " + shape_string());
        shape_ = std::move(shape);
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_string() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ", ";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

    bool operator==(const Tensor&) const = default;

    static std::size_t count(const Shape& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

/// A learnable tensor with its gradient accumulator.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string n, typename Tensor<T>::Shape shape)
        : name(std::move(n)), value(shape), grad(std::move(shape)) {}
};

}  // namespace galbnn::nn
