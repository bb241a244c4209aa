#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qsrec/error.hpp"

namespace qsrec {

/// Number of stored entries of a packed symmetric n x n matrix.
constexpr std::size_t packed_size(std::size_t n) noexcept { return n * (n + 1) / 2; }

/// Inverse of packed_size; returns 0 when `m` is not a triangular number.
constexpr std::size_t packed_dim(std::size_t m) noexcept {
    std::size_t n = 0;
    while (packed_size(n) < m) {
        ++n;
    }
    return packed_size(n) == m ? n : 0;
}

/// Zero-based offset of entry (row, col), row <= col < n, in the row-major
/// upper-triangle layout: row r holds (r,r)..(r,n-1).
constexpr std::size_t packed_offset(std::size_t row, std::size_t col, std::size_t n) noexcept {
    return row * n - (row * (row + 1)) / 2 + col;
}

/// Offset of entry (i, j) given 1-based indices, 1 <= i <= j <= n.
inline std::size_t pack_index(std::size_t i, std::size_t j, std::size_t n) {
    if (!(i >= 1 && i <= j && j <= n)) {
        fail(ErrorKind::kIndex, "pack_index(" + std::to_string(i) + ", " + std::to_string(j) +
                                    ") outside upper triangle of dim " + std::to_string(n));
    }
    return packed_offset(i - 1, j - 1, n);
}

namespace detail {

// Shared by quadratic_form and gamma2 so both produce the same rounding.
inline double flatten_weight(double yi, double yj, bool diagonal) noexcept {
    return diagonal ? yi * yj : (2.0 * yi) * yj;
}

}  // namespace detail

/// Symmetric matrix stored as its upper triangle, row-major.
class PackedSymMatrix {
   public:
    PackedSymMatrix() = default;

    explicit PackedSymMatrix(std::size_t dim) : dim_(dim), values_(packed_size(dim), 0.0) {
        require(dim > 0, ErrorKind::kShape, "symmetric matrix dimension must be positive");
    }

    PackedSymMatrix(std::size_t dim, std::vector<double> packed) : dim_(dim), values_(std::move(packed)) {
        require(dim > 0, ErrorKind::kShape, "symmetric matrix dimension must be positive");
        require(values_.size() == packed_size(dim), ErrorKind::kShape,
                "packed length " + std::to_string(values_.size()) + " != " + std::to_string(packed_size(dim)));
        for (double v : values_) {
            require(std::isfinite(v), ErrorKind::kNumeric, "non-finite matrix entry");
        }
    }

    static PackedSymMatrix identity(std::size_t dim) {
        PackedSymMatrix m(dim);
        for (std::size_t i = 0; i < dim; ++i) {
            m.values_[packed_offset(i, i, dim)] = 1.0;
        }
        return m;
    }

    /// Packs a dense row-major matrix; only the upper triangle is read.
    static PackedSymMatrix from_dense(std::size_t dim, std::span<const double> dense) {
        require(dense.size() == dim * dim, ErrorKind::kShape, "dense matrix size mismatch");
        std::vector<double> packed(packed_size(dim));
        for (std::size_t i = 0; i < dim; ++i) {
            for (std::size_t j = i; j < dim; ++j) {
                packed[packed_offset(i, j, dim)] = dense[i * dim + j];
            }
        }
        return PackedSymMatrix(dim, std::move(packed));
    }

    [[nodiscard]] std::size_t dim() const noexcept { return dim_; }
    [[nodiscard]] std::span<const double> packed() const noexcept { return values_; }

    /// Zero-based element access; either triangle.
    [[nodiscard]] double at(std::size_t i, std::size_t j) const {
        require(i < dim_ && j < dim_, ErrorKind::kIndex, "matrix index out of range");
        return i <= j ? values_[packed_offset(i, j, dim_)] : values_[packed_offset(j, i, dim_)];
    }

    [[nodiscard]] std::vector<double> dense() const {
        std::vector<double> out(dim_ * dim_);
        for (std::size_t i = 0; i < dim_; ++i) {
            for (std::size_t j = i; j < dim_; ++j) {
                const double v = values_[packed_offset(i, j, dim_)];
                out[i * dim_ + j] = v;
                out[j * dim_ + i] = v;
            }
        }
        return out;
    }

    [[nodiscard]] double frobenius_norm() const {
        double sum = 0.0;
        for (std::size_t i = 0; i < dim_; ++i) {
            for (std::size_t j = i; j < dim_; ++j) {
                const double v = values_[packed_offset(i, j, dim_)];
                sum += (i == j ? 1.0 : 2.0) * v * v;
            }
        }
        return std::sqrt(sum);
    }

    friend bool operator==(const PackedSymMatrix&, const PackedSymMatrix&) = default;

   private:
    std::size_t dim_ = 0;
    std::vector<double> values_;
};

/// Reads `z` as the packed upper triangle of an n x n symmetric matrix.
template <class T>
PackedSymMatrix reshape_to_symmetric(std::span<const T> z, std::size_t n) {
    require(n > 0 && z.size() == packed_size(n), ErrorKind::kShape,
            "reshape_to_symmetric: length " + std::to_string(z.size()) + " does not match dim " + std::to_string(n));
    return PackedSymMatrix(n, std::vector<double>(z.begin(), z.end()));
}

/// y^T A y, summed over the packed upper triangle.
template <class T>
double quadratic_form(const PackedSymMatrix& a, std::span<const T> y) {
    const std::size_t n = a.dim();
    require(y.size() == n, ErrorKind::kShape,
            "quadratic_form: vector length " + std::to_string(y.size()) + " != dim " + std::to_string(n));
    const auto packed = a.packed();
    double sum = 0.0;
    std::size_t p = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double yi = static_cast<double>(y[i]);
        for (std::size_t j = i; j < n; ++j, ++p) {
            sum += packed[p] * detail::flatten_weight(yi, static_cast<double>(y[j]), i == j);
        }
    }
    return sum;
}

template <class T>
double quadratic_form(const PackedSymMatrix& a, const std::vector<T>& y) {
    return quadratic_form(a, std::span<const T>(y));
}

/// Session-side flatten map: the packed entries themselves.
inline std::vector<double> gamma1(const PackedSymMatrix& a) {
    const auto packed = a.packed();
    return {packed.begin(), packed.end()};
}

/// Item-side flatten map: entry (i,j) is k_ij * x_i * x_j with k = 1 on the
/// diagonal and 2 off it, so <gamma1(A), gamma2(x)> == x^T A x.
template <class T>
void gamma2_into(std::span<const T> x, std::span<double> out) {
    const std::size_t n = x.size();
    require(out.size() == packed_size(n), ErrorKind::kShape, "gamma2: output length mismatch");
    std::size_t p = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double xi = static_cast<double>(x[i]);
        for (std::size_t j = i; j < n; ++j, ++p) {
            out[p] = detail::flatten_weight(xi, static_cast<double>(x[j]), i == j);
        }
    }
}

template <class T>
std::vector<double> gamma2(std::span<const T> x) {
    std::vector<double> out(packed_size(x.size()));
    gamma2_into(x, std::span<double>(out));
    return out;
}

template <class T>
std::vector<double> gamma2(const std::vector<T>& x) {
    return gamma2(std::span<const T>(x));
}

/// Plain dot product accumulated in double, in index order.
template <class A, class B>
double dot(std::span<const A> a, std::span<const B> b) {
    require(a.size() == b.size(), ErrorKind::kShape, "dot: length mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sum += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return sum;
}

struct EigenDecomposition {
    std::size_t dim = 0;
    /// Descending.
    std::vector<double> eigenvalues;
    /// Row i is the unit eigenvector for eigenvalues[i].
    std::vector<double> eigenvectors;
    int sweeps = 0;

    [[nodiscard]] std::span<const double> vector(std::size_t i) const {
        return std::span<const double>(eigenvectors).subspan(i * dim, dim);
    }
};

struct JacobiOptions {
    /// Absolute threshold on the off-diagonal Frobenius norm; <= 0 selects
    /// 1e-12 * ||A||_F.
    double tolerance = 0.0;
    int max_sweeps = 64;
};

namespace detail {

inline double off_diagonal_norm(const std::vector<double>& a, std::size_t n) {
    double sum = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t q = p + 1; q < n; ++q) {
            sum += 2.0 * a[p * n + q] * a[p * n + q];
        }
    }
    return std::sqrt(sum);
}

// Orients v into the upper half space: last coordinate positive, or the first
// clearly nonzero coordinate when the last one vanishes.
inline void normalize_sign(std::span<double> v) {
    constexpr double kZero = 1e-12;
    double pivot = v.back();
    if (std::abs(pivot) <= kZero) {
        pivot = 0.0;
        for (double x : v) {
            if (std::abs(x) > kZero) {
                pivot = x;
                break;
            }
        }
    }
    if (pivot < 0.0) {
        for (double& x : v) {
            x = -x;
        }
    }
}

}  // namespace detail

/// Cyclic Jacobi eigensolver for a symmetric matrix.
inline EigenDecomposition eigendecompose(const PackedSymMatrix& m, JacobiOptions options = {}) {
    const std::size_t n = m.dim();
    std::vector<double> a = m.dense();
    std::vector<double> v(n * n, 0.0);  // columns are eigenvectors
    for (std::size_t i = 0; i < n; ++i) {
        v[i * n + i] = 1.0;
    }

    const double norm = m.frobenius_norm();
    require(std::isfinite(norm), ErrorKind::kNumeric, "eigendecompose: non-finite matrix");
    const double tol = options.tolerance > 0.0 ? options.tolerance : 1e-12 * norm;

    int sweep = 0;
    double off = detail::off_diagonal_norm(a, n);
    while (off > tol) {
        if (sweep == options.max_sweeps) {
            fail(ErrorKind::kNumeric, "Jacobi did not converge after " + std::to_string(sweep) +
                                          " sweeps; residual off-diagonal norm " + std::to_string(off));
        }
        ++sweep;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (apq == 0.0) {
                    continue;
                }
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                // A <- J^T A J with J the (p,q) rotation.
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p];
                    const double akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k];
                    const double aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v[k * n + p];
                    const double vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        off = detail::off_diagonal_norm(a, n);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return a[x * n + x] > a[y * n + y]; });

    EigenDecomposition out;
    out.dim = n;
    out.sweeps = sweep;
    out.eigenvalues.resize(n);
    out.eigenvectors.resize(n * n);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t col = order[r];
        out.eigenvalues[r] = a[col * n + col];
        std::span<double> row(out.eigenvectors.data() + r * n, n);
        double len = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            row[k] = v[k * n + col];
            len += row[k] * row[k];
        }
        len = std::sqrt(len);
        for (double& x : row) {
            x /= len;
        }
        detail::normalize_sign(row);
    }
    return out;
}

inline EigenDecomposition eigendecompose(const PackedSymMatrix& m, double tolerance) {
    require(tolerance > 0.0, ErrorKind::kInput, "eigendecompose: tolerance must be positive");
    return eigendecompose(m, JacobiOptions{tolerance, 64});
}

}  // namespace qsrec
