#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "lpvss/errors.hpp"
#include "lpvss/matrix.hpp"
#include "lpvss/rng.hpp"

namespace lpvss {

/// Combined LU storage from partial-pivoting Gaussian elimination.
/// Row i of P·A is row perm[i] of A; L sits strictly below the diagonal
/// (unit diagonal implied) and U on and above it.
struct LuFactors {
    DenseMatrix lu;
    std::vector<std::size_t> perm;
    int parity = 1;  // sign of the row permutation
};

inline LuFactors lu_factor(DenseMatrix a) {
    if (!a.is_square()) throw ShapeMismatch("lu_factor expects a square matrix");
    const std::size_t n = a.rows();
    LuFactors f;
    f.perm.resize(n);
    // per-row magnitude of the input, used only for the singularity test
    std::vector<double> scale(n);
    for (std::size_t i = 0; i < n; ++i) {
        f.perm[i] = i;
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s = std::max(s, std::abs(a(i, j)));
        scale[i] = s;
    }
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t piv = k;
        double best = std::abs(a(k, k));
        for (std::size_t i = k + 1; i < n; ++i) {
            double v = std::abs(a(i, k));
            if (v > best) {
                best = v;
                piv = i;
            }
        }
        if (piv != k) {
            for (std::size_t j = 0; j < n; ++j) std::swap(a(k, j), a(piv, j));
            std::swap(f.perm[k], f.perm[piv]);
            std::swap(scale[k], scale[piv]);
            f.parity = -f.parity;
        }
        const double pivot = a(k, k);
        if (std::abs(pivot) <= 1e-12 * scale[k])
            throw SingularMatrix("pivot " + std::to_string(pivot) + " below threshold at column " +
                                 std::to_string(k));
        for (std::size_t i = k + 1; i < n; ++i) {
            const double m = a(i, k) / pivot;
            a(i, k) = m;
            if (m == 0.0) continue;
            for (std::size_t j = k + 1; j < n; ++j) a(i, j) -= m * a(k, j);
        }
    }
    f.lu = std::move(a);
    return f;
}

/// Solve a·x = b, or aᵀ·x = b when `transposed`, reusing a factorization.
/// b may carry multiple right-hand sides as columns.
inline DenseMatrix lu_solve(const LuFactors& f, const DenseMatrix& b, bool transposed = false) {
    const std::size_t n = f.lu.rows();
    if (b.rows() != n) throw ShapeMismatch("lu_solve: rhs rows != system size");
    const std::size_t m = b.cols();
    const DenseMatrix& lu = f.lu;
    DenseMatrix x(n, m);
    if (!transposed) {
        for (std::size_t c = 0; c < m; ++c) {
            // L·y = P·b (unit lower triangular), then U·x = y
            for (std::size_t i = 0; i < n; ++i) x(i, c) = b(f.perm[i], c);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < i; ++j) x(i, c) -= lu(i, j) * x(j, c);
            for (std::size_t ii = n; ii-- > 0;) {
                for (std::size_t j = ii + 1; j < n; ++j) x(ii, c) -= lu(ii, j) * x(j, c);
                x(ii, c) /= lu(ii, ii);
            }
        }
    } else {
        // aᵀ = Uᵀ·Lᵀ·P: solve Uᵀz = b forward, Lᵀw = z backward, then
        // undo the permutation via x[perm[i]] = w[i].
        DenseMatrix w(n, m);
        for (std::size_t c = 0; c < m; ++c) {
            for (std::size_t i = 0; i < n; ++i) {
                double s = b(i, c);
                for (std::size_t j = 0; j < i; ++j) s -= lu(j, i) * w(j, c);
                w(i, c) = s / lu(i, i);
            }
            for (std::size_t ii = n; ii-- > 0;)
                for (std::size_t j = ii + 1; j < n; ++j) w(ii, c) -= lu(j, ii) * w(j, c);
            for (std::size_t i = 0; i < n; ++i) x(f.perm[i], c) = w(i, c);
        }
    }
    return x;
}

inline DenseMatrix solve(const DenseMatrix& a, const DenseMatrix& b) {
    return lu_solve(lu_factor(a), b);
}

/// Cayley transform (I−M)(I+M)⁻¹. Evaluated through the transposed system
/// (I+M)ᵀ·Xᵀ = (I−M)ᵀ so the numeric path and the tape path share one
/// formulation (the tape only has a left solve A⁻¹B as a primitive).
inline DenseMatrix cayley(const DenseMatrix& m) {
    if (!m.is_square()) throw ShapeMismatch("cayley expects a square matrix");
    const DenseMatrix eye = DenseMatrix::identity(m.rows());
    DenseMatrix xt = solve((eye + m).transposed(), (eye - m).transposed());
    return xt.transposed();
}

struct SymEig {
    std::vector<double> values;  // ascending
    DenseMatrix vectors;         // column k pairs with values[k]; S = V·diag(values)·Vᵀ
};

/// Cyclic Jacobi eigendecomposition. The input is symmetrized as (S+Sᵀ)/2
/// first; sweeps run until every off-diagonal magnitude drops below
/// 1e-12 × the Frobenius norm (which Jacobi rotations preserve, so the
/// threshold is computed once).
inline SymEig sym_eig(const DenseMatrix& s_in, std::size_t max_sweeps = 100) {
    if (!s_in.is_square()) throw ShapeMismatch("sym_eig expects a square matrix");
    const std::size_t n = s_in.rows();
    DenseMatrix a = symmetrized(s_in);
    DenseMatrix v = DenseMatrix::identity(n);
    const double thresh = 1e-12 * std::max(a.frobenius_norm(), 1e-300);

    auto max_offdiag = [&]() {
        double m = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) m = std::max(m, std::abs(a(p, q)));
        return m;
    };

    std::size_t sweeps = 0;
    while (max_offdiag() > thresh) {
        if (sweeps++ >= max_sweeps)
            throw NoConvergence("jacobi eigensolver: off-diagonals above threshold after " +
                                std::to_string(max_sweeps) + " sweeps");
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                double t;
                if (theta * theta + 1.0 == theta * theta) {
                    t = 1.0 / (2.0 * theta);  // |theta| so large the sqrt would lose it
                } else {
                    t = 1.0 / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                    if (theta < 0.0) t = -t;
                }
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                const double h = t * apq;
                a(p, p) -= h;
                a(q, q) += h;
                a(p, q) = a(q, p) = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (i == p || i == q) continue;
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = a(p, i) = c * aip - s * aiq;
                    a(i, q) = a(q, i) = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = v(i, p), viq = v(i, q);
                    v(i, p) = c * vip - s * viq;
                    v(i, q) = s * vip + c * viq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });
    SymEig out;
    out.values.resize(n);
    out.vectors = DenseMatrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = a(order[k], order[k]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
    }
    return out;
}

inline double min_eigenvalue(const DenseMatrix& symmetric) { return sym_eig(symmetric).values.front(); }
inline double max_eigenvalue(const DenseMatrix& symmetric) { return sym_eig(symmetric).values.back(); }

/// Largest singular value via the symmetric eigenproblem on MᵀM.
inline double spectral_norm(const DenseMatrix& m) {
    const double lam = max_eigenvalue(m.transposed() * m);
    return std::sqrt(std::max(lam, 0.0));
}

/// Power-iteration estimate of the spectral radius (dominant eigenvalue
/// magnitude) over 5 deterministic random starts; the max estimate is
/// returned. A start's estimate is the tightest tail growth rate
/// min over w∈[window/2, window] of (‖x_K‖/‖x_{K−w}‖)^{1/w}, which stays
/// accurate when the dominant eigenvalue is a complex pair (single-step
/// ratios then oscillate around the modulus instead of converging).
inline double spectral_radius_upper(const DenseMatrix& a, std::size_t iters = 600) {
    if (!a.is_square()) throw ShapeMismatch("spectral_radius_upper expects a square matrix");
    const std::size_t n = a.rows();
    if (n == 0) return 0.0;
    if (iters == 0) iters = 1;
    const std::size_t window = std::max<std::size_t>(1, iters / 3);
    const std::size_t wlo = std::max<std::size_t>(1, window / 2);
    double best = 0.0;
    for (std::uint64_t start = 0; start < 5; ++start) {
        Rng rng(derive_seed(0xA11CEULL, start));
        DenseMatrix x(n, 1);
        for (std::size_t i = 0; i < n; ++i) x[i] = rng.normal();
        double xn = x.frobenius_norm();
        if (xn == 0.0) {
            x[0] = 1.0;
            xn = 1.0;
        }
        x = (1.0 / xn) * x;
        std::vector<double> cumlog(iters + 1, 0.0);
        bool collapsed = false;
        for (std::size_t k = 1; k <= iters; ++k) {
            DenseMatrix y = a * x;
            const double g = y.frobenius_norm();
            if (!std::isfinite(g)) return std::numeric_limits<double>::infinity();
            if (g == 0.0) {
                collapsed = true;  // start fell into a nilpotent direction
                break;
            }
            cumlog[k] = cumlog[k - 1] + std::log(g);
            x = (1.0 / g) * y;
        }
        if (collapsed) continue;
        double est_log = std::numeric_limits<double>::infinity();
        for (std::size_t w = wlo; w <= window; ++w)
            est_log = std::min(est_log, (cumlog[iters] - cumlog[iters - w]) / static_cast<double>(w));
        best = std::max(best, std::exp(est_log));
    }
    return best;
}

}  // namespace lpvss
