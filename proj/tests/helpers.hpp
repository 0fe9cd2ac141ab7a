#pragma once

// Shared test utilities. The eigenvalue/determinant oracles here are
// deliberately independent of the library's own factorizations: closed-form
// characteristic polynomials for 2x2/3x3 and a plain elimination determinant,
// so library results are checked against something they do not share code with.

#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <vector>

#include "lpvss/matrix.hpp"
#include "lpvss/rng.hpp"

namespace testutil {

using lpvss::DenseMatrix;
using lpvss::Rng;

inline DenseMatrix randu(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    DenseMatrix m(r, c);
    for (std::size_t k = 0; k < m.size(); ++k) m[k] = rng.uniform(lo, hi);
    return m;
}

inline DenseMatrix randn(Rng& rng, std::size_t r, std::size_t c, double stddev = 1.0) {
    DenseMatrix m(r, c);
    for (std::size_t k = 0; k < m.size(); ++k) m[k] = rng.normal(0.0, stddev);
    return m;
}

inline DenseMatrix random_symmetric(Rng& rng, std::size_t n) {
    DenseMatrix a = randn(rng, n, n);
    return 0.5 * (a + a.transposed());
}

inline DenseMatrix random_skew(Rng& rng, std::size_t n) {
    DenseMatrix a = randn(rng, n, n);
    return 0.5 * (a - a.transposed());
}

inline double rel_err(double a, double b, double floor = 1e-12) {
    return std::abs(a - b) / std::max(std::abs(b), floor);
}

/// Determinant by plain partial-pivot elimination (no library code).
inline double det_oracle(DenseMatrix a) {
    const std::size_t n = a.rows();
    double det = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t piv = k;
        for (std::size_t i = k + 1; i < n; ++i)
            if (std::abs(a(i, k)) > std::abs(a(piv, k))) piv = i;
        if (a(piv, k) == 0.0) return 0.0;
        if (piv != k) {
            for (std::size_t j = 0; j < n; ++j) std::swap(a(k, j), a(piv, j));
            det = -det;
        }
        det *= a(k, k);
        for (std::size_t i = k + 1; i < n; ++i) {
            double m = a(i, k) / a(k, k);
            for (std::size_t j = k; j < n; ++j) a(i, j) -= m * a(k, j);
        }
    }
    return det;
}

/// Eigenvalues of a symmetric 2x2 via the quadratic formula, ascending.
inline std::array<double, 2> sym_eigs_2x2_oracle(const DenseMatrix& s) {
    const double a = s(0, 0), d = s(1, 1), b = 0.5 * (s(0, 1) + s(1, 0));
    const double mean = 0.5 * (a + d);
    const double r = std::sqrt(0.25 * (a - d) * (a - d) + b * b);
    return {mean - r, mean + r};
}

/// All roots of the monic cubic x^3 + a x^2 + b x + c.
inline std::array<std::complex<double>, 3> cubic_roots(double a, double b, double c) {
    // depressed cubic t^3 + p t + q with x = t - a/3
    const double p = b - a * a / 3.0;
    const double q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    const double shift = -a / 3.0;
    const double disc = q * q / 4.0 + p * p * p / 27.0;  // <0 iff three distinct real roots
    std::array<std::complex<double>, 3> roots;
    if (disc <= 0.0) {
        // trigonometric form; p <= 0 here
        const double mp3 = std::max(-p / 3.0, 0.0);
        const double r = std::sqrt(mp3);
        double arg = (r > 0.0) ? (3.0 * q) / (2.0 * p * r) : 0.0;
        arg = std::clamp(arg, -1.0, 1.0);
        const double phi = std::acos(arg);
        for (int k = 0; k < 3; ++k) {
            const double t = 2.0 * r * std::cos(phi / 3.0 - 2.0943951023931953 * k);
            roots[k] = std::complex<double>(t + shift, 0.0);
        }
    } else {
        const double sq = std::sqrt(disc);
        const double u = std::cbrt(-q / 2.0 + sq);
        const double v = std::cbrt(-q / 2.0 - sq);
        const double t_real = u + v;
        const double x_real = t_real + shift;
        // deflate: x^3+ax^2+bx+c = (x - x_real)(x^2 + beta x + gamma)
        const double beta = a + x_real;
        const double gamma = b + x_real * beta;
        const double d2 = beta * beta - 4.0 * gamma;
        roots[0] = std::complex<double>(x_real, 0.0);
        if (d2 >= 0.0) {
            roots[1] = std::complex<double>((-beta + std::sqrt(d2)) / 2.0, 0.0);
            roots[2] = std::complex<double>((-beta - std::sqrt(d2)) / 2.0, 0.0);
        } else {
            const double im = std::sqrt(-d2) / 2.0;
            roots[1] = std::complex<double>(-beta / 2.0, im);
            roots[2] = std::complex<double>(-beta / 2.0, -im);
        }
    }
    return roots;
}

/// Characteristic polynomial of a 3x3: x^3 + a x^2 + b x + c (monic form).
inline std::array<double, 3> char_poly_3x3(const DenseMatrix& m) {
    const double tr = m(0, 0) + m(1, 1) + m(2, 2);
    // sum of principal 2x2 minors
    const double m01 = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
    const double m02 = m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0);
    const double m12 = m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1);
    const double det = det_oracle(m);
    return {-tr, m01 + m02 + m12, -det};
}

inline std::array<std::complex<double>, 3> eigs_3x3_oracle(const DenseMatrix& m) {
    const auto cp = char_poly_3x3(m);
    return cubic_roots(cp[0], cp[1], cp[2]);
}

inline double spectral_radius_3x3_oracle(const DenseMatrix& m) {
    double rho = 0.0;
    for (const auto& z : eigs_3x3_oracle(m)) rho = std::max(rho, std::abs(z));
    return rho;
}

/// Ascending real eigenvalues of a symmetric 3x3 (all roots real).
inline std::array<double, 3> sym_eigs_3x3_oracle(const DenseMatrix& s) {
    const auto roots = eigs_3x3_oracle(s);
    std::array<double, 3> vals{roots[0].real(), roots[1].real(), roots[2].real()};
    std::sort(vals.begin(), vals.end());
    return vals;
}

/// Central finite difference of a scalar function along one coordinate.
template <typename F>
double fd_partial(F&& f, std::vector<double> x, std::size_t k, double h = 1e-6) {
    x[k] += h;
    const double fp = f(x);
    x[k] -= 2.0 * h;
    const double fm = f(x);
    return (fp - fm) / (2.0 * h);
}

}  // namespace testutil
