#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "lpvss/errors.hpp"

namespace lpvss {

/// Dense real matrix, row-major, double precision. The single numeric
/// carrier used throughout the library; sizes here are small (state
/// dimensions, MLP layers), so no effort is spent on blocking or BLAS.
class DenseMatrix {
public:
    DenseMatrix() = default;

    DenseMatrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ShapeMismatch("matrix data length " + std::to_string(data_.size()) +
                                " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }

    DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeMismatch("ragged initializer");
            for (double v : r) {
                if (!std::isfinite(v)) throw Error("non-finite entry in matrix literal");
                data_.push_back(v);
            }
        }
    }

    static DenseMatrix zeros(std::size_t r, std::size_t c) { return DenseMatrix(r, c); }

    static DenseMatrix ones(std::size_t r, std::size_t c) {
        DenseMatrix m(r, c);
        std::fill(m.data_.begin(), m.data_.end(), 1.0);
        return m;
    }

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    /// Square diagonal matrix from an n-vector (n x 1 or 1 x n).
    static DenseMatrix diag(const DenseMatrix& v) {
        if (v.rows() != 1 && v.cols() != 1) throw ShapeMismatch("diag expects a vector");
        std::size_t n = v.size();
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = v[i];
        return m;
    }

    static DenseMatrix column(std::vector<double> entries) {
        std::size_t n = entries.size();
        return DenseMatrix(n, 1, std::move(entries));
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool is_square() const { return rows_ == cols_; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    // flat access (row-major), handy for vectors
    double& operator[](std::size_t k) { return data_[k]; }
    double operator[](std::size_t k) const { return data_[k]; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    double frobenius_norm() const {
        double s = 0.0;
        for (double v : data_) s += v * v;
        return std::sqrt(s);
    }

    DenseMatrix transposed() const {
        DenseMatrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    /// Copy of the block [r0, r1) x [c0, c1).
    DenseMatrix block(std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) const {
        if (r1 < r0 || c1 < c0 || r1 > rows_ || c1 > cols_) throw ShapeMismatch("block out of range");
        DenseMatrix b(r1 - r0, c1 - c0);
        for (std::size_t i = r0; i < r1; ++i)
            for (std::size_t j = c0; j < c1; ++j) b(i - r0, j - c0) = (*this)(i, j);
        return b;
    }

    void set_block(std::size_t r0, std::size_t c0, const DenseMatrix& b) {
        if (r0 + b.rows() > rows_ || c0 + b.cols() > cols_) throw ShapeMismatch("set_block out of range");
        for (std::size_t i = 0; i < b.rows(); ++i)
            for (std::size_t j = 0; j < b.cols(); ++j) (*this)(r0 + i, c0 + j) = b(i, j);
    }

    DenseMatrix row(std::size_t i) const { return block(i, i + 1, 0, cols_); }
    DenseMatrix col(std::size_t j) const { return block(0, rows_, j, j + 1); }

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

inline void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeMismatch(std::string(what) + ": " + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()));
}

inline DenseMatrix operator+(const DenseMatrix& a, const DenseMatrix& b) {
    require_same_shape(a, b, "add");
    DenseMatrix c = a;
    for (std::size_t k = 0; k < c.size(); ++k) c[k] += b[k];
    return c;
}

inline DenseMatrix operator-(const DenseMatrix& a, const DenseMatrix& b) {
    require_same_shape(a, b, "subtract");
    DenseMatrix c = a;
    for (std::size_t k = 0; k < c.size(); ++k) c[k] -= b[k];
    return c;
}

inline DenseMatrix operator-(const DenseMatrix& a) {
    DenseMatrix c = a;
    for (std::size_t k = 0; k < c.size(); ++k) c[k] = -c[k];
    return c;
}

inline DenseMatrix operator*(double s, const DenseMatrix& a) {
    DenseMatrix c = a;
    for (std::size_t k = 0; k < c.size(); ++k) c[k] *= s;
    return c;
}

inline DenseMatrix operator*(const DenseMatrix& a, double s) { return s * a; }

inline DenseMatrix operator*(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows())
        throw ShapeMismatch("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                            " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    DenseMatrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    return c;
}

inline DenseMatrix hadamard(const DenseMatrix& a, const DenseMatrix& b) {
    require_same_shape(a, b, "hadamard");
    DenseMatrix c = a;
    for (std::size_t k = 0; k < c.size(); ++k) c[k] *= b[k];
    return c;
}

inline DenseMatrix map_elements(const DenseMatrix& a, double (*f)(double)) {
    DenseMatrix c = a;
    for (std::size_t k = 0; k < c.size(); ++k) c[k] = f(c[k]);
    return c;
}

inline DenseMatrix elementwise_exp(const DenseMatrix& a) { return map_elements(a, [](double v) { return std::exp(v); }); }

inline DenseMatrix elementwise_relu(const DenseMatrix& a) {
    return map_elements(a, [](double v) { return v > 0.0 ? v : 0.0; });
}

inline DenseMatrix elementwise_sigmoid(const DenseMatrix& a) {
    return map_elements(a, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

inline double sum_all(const DenseMatrix& a) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k];
    return s;
}

inline double dot_all(const DenseMatrix& a, const DenseMatrix& b) {
    require_same_shape(a, b, "dot");
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

inline DenseMatrix vertcat(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    if (a.cols() != b.cols()) throw ShapeMismatch("vertcat: column mismatch");
    DenseMatrix c(a.rows() + b.rows(), a.cols());
    c.set_block(0, 0, a);
    c.set_block(a.rows(), 0, b);
    return c;
}

inline DenseMatrix horzcat(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    if (a.rows() != b.rows()) throw ShapeMismatch("horzcat: row mismatch");
    DenseMatrix c(a.rows(), a.cols() + b.cols());
    c.set_block(0, 0, a);
    c.set_block(0, a.cols(), b);
    return c;
}

/// Reinterpret a column vector as an r x c matrix filled column by column.
inline DenseMatrix unvec_colmajor(const DenseMatrix& v, std::size_t r, std::size_t c) {
    if (v.size() != r * c) throw ShapeMismatch("unvec: size mismatch");
    DenseMatrix m(r, c);
    for (std::size_t j = 0; j < c; ++j)
        for (std::size_t i = 0; i < r; ++i) m(i, j) = v[j * r + i];
    return m;
}

inline DenseMatrix vec_colmajor(const DenseMatrix& m) {
    DenseMatrix v(m.rows() * m.cols(), 1);
    for (std::size_t j = 0; j < m.cols(); ++j)
        for (std::size_t i = 0; i < m.rows(); ++i) v[j * m.rows() + i] = m(i, j);
    return v;
}

inline DenseMatrix symmetrized(const DenseMatrix& a) {
    if (!a.is_square()) throw ShapeMismatch("symmetrize expects square");
    DenseMatrix s = a;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) s(i, j) = 0.5 * (a(i, j) + a(j, i));
    return s;
}

/// ||a - b||_F / max(||b||_F, floor) — relative difference used all over the tests.
inline double rel_frobenius_diff(const DenseMatrix& a, const DenseMatrix& b, double floor = 1e-300) {
    require_same_shape(a, b, "rel_frobenius_diff");
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        double d = a[k] - b[k];
        num += d * d;
        den += b[k] * b[k];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

}  // namespace lpvss
