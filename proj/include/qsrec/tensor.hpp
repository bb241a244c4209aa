#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "qsrec/error.hpp"

namespace qsrec {

/// Dense row-major tensor of rank 1 or 2.
template <class T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, T fill = T{}) : shape_(std::move(shape)) {
        require(shape_.size() == 1 || shape_.size() == 2, ErrorKind::kShape, "tensor rank must be 1 or 2");
        data_.assign(element_count(shape_), fill);
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }
    [[nodiscard]] const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
    [[nodiscard]] std::size_t cols() const noexcept { return shape_.size() == 2 ? shape_[1] : 1; }

    [[nodiscard]] std::span<T> data() noexcept { return data_; }
    [[nodiscard]] std::span<const T> data() const noexcept { return data_; }

    [[nodiscard]] std::span<T> row(std::size_t i) noexcept { return {data_.data() + i * cols(), cols()}; }
    [[nodiscard]] std::span<const T> row(std::size_t i) const noexcept {
        return {data_.data() + i * cols(), cols()};
    }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    friend bool operator==(const Tensor&, const Tensor&) = default;

   private:
    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out += std::to_string(shape[i]);
        if (i + 1 < shape.size() || shape.size() == 1) {
            out += shape.size() == 1 ? "," : ", ";
        }
    }
    return out + ")";
}

}  // namespace qsrec
