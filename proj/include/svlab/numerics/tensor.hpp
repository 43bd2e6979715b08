#pragma once

// Dense row-major tensors of doubles and the handful of kernels the rest of
// the library is built on.
//
// Summation order: every reduction in this file accumulates its terms in
// ascending index order, starting from 0.0. Nothing is reassociated, so a
// given output element always sees the same sequence of floating-point
// operations regardless of how many other rows/columns are being computed.
// The build disables FMA contraction (-ffp-contract=off) so vectorized and
// scalar tails round identically.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace svlab {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size()) {
            throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                                 std::to_string(data_.size()) + " values");
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor vector(std::vector<double> values) {
        const auto n = values.size();
        return Tensor(Shape{n}, std::move(values));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t m = rows.size();
        const std::size_t n = m ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(m * n);
        for (const auto& r : rows) {
            if (r.size() != n) throw DimensionError("ragged matrix literal");
            data.insert(data.end(), r.begin(), r.end());
        }
        return Tensor(Shape{m, n}, std::move(data));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const {
        require_rank(2, "rows");
        return shape_[0];
    }
    std::size_t cols() const {
        require_rank(2, "cols");
        return shape_[1];
    }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    std::span<const double> row(std::size_t i) const {
        const auto n = shape_.back();
        return std::span<const double>(data_).subspan(i * n, n);
    }
    std::span<double> row(std::size_t i) {
        const auto n = shape_.back();
        return std::span<double>(data_).subspan(i * n, n);
    }

    double item() const {
        if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size()) {
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const noexcept {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void check_finite(std::string_view what) const {
        for (std::size_t i = 0; i < data_.size(); ++i) {
            if (!std::isfinite(data_[i])) {
                throw NumericError(std::string(what) + ": non-finite value at flat index " + std::to_string(i));
            }
        }
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    void require_rank(std::size_t r, const char* what) const {
        if (shape_.size() != r) {
            throw DimensionError(std::string(what) + " requires rank " + std::to_string(r) + ", got " +
                                 shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

namespace kernels {

// c[m x n] += a[m x k] * b[k x n]; for each c[i][j] the k terms are added in
// ascending order onto the existing value.
inline void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                       std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = ai[t];
            const double* bt = b + t * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
        }
    }
}

// c[k x n] += a^T * g where a is [m x k] and g is [m x n]; rows of a are
// consumed in ascending order.
inline void matmul_tn_acc(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
                          std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* gi = g + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = ai[t];
            double* ct = c + t * n;
            for (std::size_t j = 0; j < n; ++j) ct[j] += av * gi[j];
        }
    }
}

inline void transpose(const double* a, double* out, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
}

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

// In-place numerically stable softmax over a contiguous run of n values.
inline void softmax_inplace(double* x, std::size_t n) {
    if (n == 0) return;
    double mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        z += x[i];
    }
    const double inv = 1.0 / z;
    for (std::size_t i = 0; i < n; ++i) x[i] *= inv;
}

}  // namespace kernels

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    Tensor c(Shape{a.shape()[0], b.shape()[1]});
    kernels::matmul_acc(a.data().data(), b.data().data(), c.data().data(), a.shape()[0], a.shape()[1],
                        b.shape()[1]);
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + shape_str(a.shape()));
    Tensor t(Shape{a.shape()[1], a.shape()[0]});
    kernels::transpose(a.data().data(), t.data().data(), a.shape()[0], a.shape()[1]);
    return t;
}

// Matrix-vector product for a [m x n] matrix and length-n vector.
inline std::vector<double> matvec(const Tensor& a, std::span<const double> x) {
    if (a.rank() != 2 || a.shape()[1] != x.size()) {
        throw DimensionError("matvec: matrix " + shape_str(a.shape()) + " with vector of length " +
                             std::to_string(x.size()));
    }
    std::vector<double> y(a.shape()[0]);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = kernels::dot(a.row(i).data(), x.data(), x.size());
    return y;
}

inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (x.rank() == 0 || x.rank() > 2 || axis >= x.rank()) {
        throw DimensionError("softmax: unsupported axis " + std::to_string(axis) + " for shape " +
                             shape_str(x.shape()));
    }
    x.check_finite("softmax input");
    if (x.rank() == 1) {
        Tensor y = x;
        kernels::softmax_inplace(y.data().data(), y.size());
        return y;
    }
    if (axis == 1) {
        Tensor y = x;
        for (std::size_t i = 0; i < y.rows(); ++i) kernels::softmax_inplace(y.row(i).data(), y.cols());
        return y;
    }
    return transpose(softmax(transpose(x), 1));
}

inline Tensor outer(const Tensor& u, const Tensor& v) {
    if (u.rank() != 1 || v.rank() != 1) {
        throw DimensionError("outer: expected two vectors, got " + shape_str(u.shape()) + " and " +
                             shape_str(v.shape()));
    }
    Tensor r(Shape{u.size(), v.size()});
    for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) r(i, j) = u[i] * v[j];
    return r;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("max_abs_diff: length mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace svlab
