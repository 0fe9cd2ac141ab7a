#pragma once

#include <algorithm>
#include <cstddef>

#include "lpvss/autodiff.hpp"
#include "lpvss/errors.hpp"
#include "lpvss/linalg.hpp"
#include "lpvss/matrix.hpp"

namespace lpvss {

struct SsDims {
    std::size_t n_x = 0, n_u = 0, n_y = 0, n_p = 0;
    // inner sizes of the rectangular Cayley construction
    std::size_t n() const { return n_x + std::min(n_u, n_y); }
    std::size_t n0() const { return (n_y >= n_u) ? (n_y - n_u) : (n_u - n_y); }
};

/// Trainable bundle realizing the contracting parametrization:
/// Λ = diag(e^d), Q = cayley(𝒴−𝒴ᵀ), and α mapped into (alpha_min, 1) by a
/// shifted sigmoid so that unconstrained alpha_raw can never leave the
/// feasible range. A fixed-α mode bypasses the mapping.
struct ContractingParam {
    DenseMatrix d;     // n_x x 1
    DenseMatrix Ycal;  // n_x x n_x
    double alpha_raw = 0.0;
    bool alpha_trained = true;
    double alpha_fixed = 0.95;  // used when alpha_trained is false
    double epsilon = 1e-2;
    static constexpr double alpha_min = 0.5;

    double alpha() const {
        if (!alpha_trained) return alpha_fixed;
        return alpha_min + (1.0 - alpha_min) / (1.0 + std::exp(-alpha_raw));
    }
};

/// Trainable bundle for the γ-Lipschitz parametrization. γ is a fixed
/// hyperparameter, never trained.
struct LipschitzParam {
    DenseMatrix d;     // n_x x 1
    DenseMatrix Ycal;  // n_x x n_x
    double gamma = 1.0;
    double epsilon = 1e-2;
    SsDims dims;
};

/// Output bundle of the coefficient map φ at one scheduling value. For the
/// Lipschitz variant X, Y are n×n with Z n0×n (zero rows when square); for
/// the contracting variant X, Y are n_x×n_x, Z is absent, and B, C, D come
/// along unconstrained. Biases ride along in both variants.
struct PhiOutput {
    DenseMatrix X, Y, Z;
    DenseMatrix B, C, D;
    DenseMatrix b_x, b_y;
};

// ---------------------------------------------------------------------------
// Differentiable building blocks, written once against the context
// interface (NumericCtx for plain evaluation, TapeCtx to record gradients).
// ---------------------------------------------------------------------------

/// (I−M)(I+M)⁻¹ through the transposed system; see linalg::cayley.
template <typename Ctx>
typename Ctx::V cayley_t(Ctx& ctx, const typename Ctx::V& m) {
    const auto eye = ctx.constant(DenseMatrix::identity(m.rows()));
    const auto xt = ctx.solve(ctx.transpose(ctx.add(eye, m)), ctx.transpose(ctx.sub(eye, m)));
    return ctx.transpose(xt);
}

/// Square diagonal matrix from a column vector, assembled from existing
/// primitives ((v·1ᵀ) ∘ I) so no dedicated tape op is needed.
template <typename Ctx>
typename Ctx::V diag_t(Ctx& ctx, const typename Ctx::V& v) {
    const std::size_t n = v.rows();
    return ctx.hadamard(ctx.matmul(v, ctx.constant(DenseMatrix::ones(1, n))),
                        ctx.constant(DenseMatrix::identity(n)));
}

/// N = XᵀX + Y − Yᵀ (+ ZᵀZ) + εI. Its symmetric part is εI + XᵀX (+ ZᵀZ),
/// strictly positive definite, so I+N is always invertible — the
/// construction cannot fail.
template <typename Ctx>
typename Ctx::V build_N_t(Ctx& ctx, const typename Ctx::V& X, const typename Ctx::V& Y,
                          const typename Ctx::V* Z, double epsilon) {
    const std::size_t m = X.cols();
    if (epsilon <= 0.0) throw Error("build_N: epsilon must be positive");
    auto acc = ctx.add(ctx.matmul(ctx.transpose(X), X), ctx.sub(Y, ctx.transpose(Y)));
    if (Z != nullptr && Z->rows() > 0) acc = ctx.add(acc, ctx.matmul(ctx.transpose(*Z), *Z));
    return ctx.add(acc, ctx.constant(epsilon * DenseMatrix::identity(m)));
}

/// The tall stack [cayley(N); −2Z(I+N)⁻¹] with N built from (X, Y, Z, ε).
/// With Z absent this is exactly cayley(N); with Z present the result is an
/// (m+n0)×m matrix with spectral norm strictly below 1.
template <typename Ctx>
typename Ctx::V cayley_stack_t(Ctx& ctx, const typename Ctx::V& X, const typename Ctx::V& Y,
                               const typename Ctx::V* Z, double epsilon) {
    const auto N = build_N_t(ctx, X, Y, Z, epsilon);
    const auto top = cayley_t(ctx, N);
    if (Z == nullptr || Z->rows() == 0) return top;
    // −2Z(I+N)⁻¹ = [ (I+N)⁻ᵀ (−2Zᵀ) ]ᵀ
    const auto eye = ctx.constant(DenseMatrix::identity(N.rows()));
    const auto bottom = ctx.transpose(
        ctx.solve(ctx.transpose(ctx.add(eye, N)), ctx.transpose(ctx.scale(*Z, -2.0))));
    return ctx.vertcat(top, bottom);
}

template <typename Ctx>
struct OrthBasis {
    typename Ctx::V Q;        // orthogonal, cayley(𝒴−𝒴ᵀ)
    typename Ctx::V lam;      // n_x×1, diagonal of Λ = diag(e^d)
    typename Ctx::V lam_inv;  // n_x×1, diagonal of Λ⁻¹
};

template <typename Ctx>
OrthBasis<Ctx> orth_basis_t(Ctx& ctx, const typename Ctx::V& d, const typename Ctx::V& Ycal) {
    OrthBasis<Ctx> ob;
    ob.Q = cayley_t(ctx, ctx.sub(Ycal, ctx.transpose(Ycal)));
    ob.lam = ctx.exp(d);
    ob.lam_inv = ctx.exp(ctx.scale(d, -1.0));
    return ob;
}

/// Shifted-sigmoid map keeping α inside (alpha_min, 1).
template <typename Ctx>
typename Ctx::V alpha_from_raw_t(Ctx& ctx, const typename Ctx::V& raw,
                                 double alpha_min = ContractingParam::alpha_min) {
    return ctx.add(ctx.scale(ctx.sigmoid(raw), 1.0 - alpha_min),
                   ctx.constant(alpha_min * DenseMatrix::ones(1, 1)));
}

template <typename Ctx>
struct ContractingAssembly {
    typename Ctx::V A;    // α·Q·Λ⁻¹·M·Λ·Qᵀ
    typename Ctx::V Q;
    typename Ctx::V M;    // cayley(N), spectral norm < 1
    typename Ctx::V lam;  // Λ diagonal
};

/// A(p) = α·Q·Λ⁻¹·M(p)·Λ·Qᵀ with M(p) = cayley(N(p)). Every output of this
/// map satisfies α²𝒳 − Aᵀ𝒳A ≻ 0 for 𝒳 = QΛ²Qᵀ, regardless of the inputs.
template <typename Ctx>
ContractingAssembly<Ctx> contracting_A_t(Ctx& ctx, const typename Ctx::V& d,
                                         const typename Ctx::V& Ycal, const typename Ctx::V& X,
                                         const typename Ctx::V& Y, double epsilon,
                                         const typename Ctx::V& alpha) {
    const auto ob = orth_basis_t(ctx, d, Ycal);
    ContractingAssembly<Ctx> out;
    out.Q = ob.Q;
    out.lam = ob.lam;
    out.M = cayley_stack_t<Ctx>(ctx, X, Y, nullptr, epsilon);
    const auto inner = ctx.matmul(
        diag_t(ctx, ob.lam_inv),
        ctx.matmul(out.M, ctx.matmul(diag_t(ctx, ob.lam), ctx.transpose(ob.Q))));
    out.A = ctx.smul(alpha, ctx.matmul(ob.Q, inner));
    return out;
}

template <typename Ctx>
struct LipschitzAssembly {
    typename Ctx::V W;    // (n_x+n_y)×(n_x+n_u), the full coefficient block
    typename Ctx::V Q;
    typename Ctx::V M;    // rectangular Cayley image, spectral norm < 1
    typename Ctx::V lam;
};

/// W(p) = diag(QΛ⁻¹, I) · M(p) · diag(ΛQᵀ, γI), with M(p) from the
/// rectangular Cayley stack (transposed when n_y < n_u so the stack is
/// always built tall). Every output satisfies the γ-Lipschitz inequality
/// diag(𝒳, γ²I) − Wᵀdiag(𝒳, I)W ≻ 0 by construction.
template <typename Ctx>
LipschitzAssembly<Ctx> lipschitz_W_t(Ctx& ctx, const typename Ctx::V& d,
                                     const typename Ctx::V& Ycal, const typename Ctx::V& X,
                                     const typename Ctx::V& Y, const typename Ctx::V* Z,
                                     double gamma, double epsilon, const SsDims& dims) {
    if (gamma <= 0.0) throw Error("lipschitz_W: gamma must be positive");
    const auto ob = orth_basis_t(ctx, d, Ycal);
    LipschitzAssembly<Ctx> out;
    out.Q = ob.Q;
    out.lam = ob.lam;
    const auto stack = cayley_stack_t(ctx, X, Y, Z, epsilon);
    out.M = (dims.n_y >= dims.n_u) ? stack : ctx.transpose(stack);

    // left factor diag(QΛ⁻¹, I_ny), right factor diag(ΛQᵀ, γI_nu)
    const auto q_lam_inv = ctx.matmul(ob.Q, diag_t(ctx, ob.lam_inv));
    const auto lam_qt = ctx.matmul(diag_t(ctx, ob.lam), ctx.transpose(ob.Q));
    const std::size_t nx = dims.n_x, ny = dims.n_y, nu = dims.n_u;
    const auto left = ctx.vertcat(
        ctx.horzcat(q_lam_inv, ctx.constant(DenseMatrix::zeros(nx, ny))),
        ctx.horzcat(ctx.constant(DenseMatrix::zeros(ny, nx)),
                    ctx.constant(DenseMatrix::identity(ny))));
    const auto right = ctx.vertcat(
        ctx.horzcat(lam_qt, ctx.constant(DenseMatrix::zeros(nx, nu))),
        ctx.horzcat(ctx.constant(DenseMatrix::zeros(nu, nx)),
                    ctx.constant(gamma * DenseMatrix::identity(nu))));
    out.W = ctx.matmul(left, ctx.matmul(out.M, right));
    return out;
}

// ---------------------------------------------------------------------------
// Plain numeric entry points.
// ---------------------------------------------------------------------------

inline DenseMatrix build_N(const DenseMatrix& X, const DenseMatrix& Y, const DenseMatrix& Z,
                           double epsilon) {
    NumericCtx ctx;
    return build_N_t(ctx, X, Y, Z.rows() > 0 ? &Z : nullptr, epsilon);
}

struct ContractingCoeffs {
    DenseMatrix A, Q, M, lam;
    double alpha = 0.0;
};

inline ContractingCoeffs contracting_A(const ContractingParam& par, const PhiOutput& phi) {
    NumericCtx ctx;
    DenseMatrix alpha(1, 1);
    alpha(0, 0) = par.alpha();
    auto asm_ = contracting_A_t(ctx, par.d, par.Ycal, phi.X, phi.Y, par.epsilon, alpha);
    return {asm_.A, asm_.Q, asm_.M, asm_.lam, par.alpha()};
}

struct LipschitzCoeffs {
    DenseMatrix W, Q, M, lam;
};

inline LipschitzCoeffs lipschitz_W(const LipschitzParam& par, const PhiOutput& phi) {
    NumericCtx ctx;
    auto asm_ = lipschitz_W_t(ctx, par.d, par.Ycal, phi.X, phi.Y,
                              phi.Z.rows() > 0 ? &phi.Z : nullptr, par.gamma, par.epsilon,
                              par.dims);
    return {asm_.W, asm_.Q, asm_.M, asm_.lam};
}

/// 𝒳 = QΛ²Qᵀ from the orthogonal factor and the Λ diagonal.
inline DenseMatrix xcal_of(const DenseMatrix& Q, const DenseMatrix& lam) {
    const std::size_t n = lam.size();
    DenseMatrix lam2(n, n);
    for (std::size_t i = 0; i < n; ++i) lam2(i, i) = lam[i] * lam[i];
    return Q * lam2 * Q.transposed();
}

/// The contraction certificate matrix α²𝒳 − Aᵀ𝒳A.
inline DenseMatrix contraction_lmi(const DenseMatrix& A, const DenseMatrix& Xcal, double alpha) {
    return alpha * alpha * Xcal - A.transposed() * Xcal * A;
}

/// The γ-Lipschitz certificate matrix diag(𝒳, γ²I) − Wᵀdiag(𝒳, I)W.
/// n_x tells the split of W's rows/cols into state and input/output parts.
inline DenseMatrix lipschitz_lmi(const DenseMatrix& W, const DenseMatrix& Xcal, double gamma,
                                 std::size_t n_x) {
    const std::size_t n_y = W.rows() - n_x, n_u = W.cols() - n_x;
    DenseMatrix xg(n_x + n_u, n_x + n_u);
    xg.set_block(0, 0, Xcal);
    for (std::size_t i = 0; i < n_u; ++i) xg(n_x + i, n_x + i) = gamma * gamma;
    DenseMatrix xi(n_x + n_y, n_x + n_y);
    xi.set_block(0, 0, Xcal);
    for (std::size_t i = 0; i < n_y; ++i) xi(n_x + i, n_x + i) = 1.0;
    return xg - W.transposed() * xi * W;
}

/// min-eig(I − MᵀM): the congruence-reduced margin both certificates factor
/// through. Eq-wise, α²𝒳 − Aᵀ𝒳A = α²(QΛ)(I−MᵀM)(QΛ)ᵀ and the Lipschitz
/// certificate equals Rᵀ(I−MᵀM)R with R = diag(ΛQᵀ, γI), so positivity of
/// the certificates is equivalent to positivity of this margin — and this
/// form stays numerically well-scaled when d drives Λ through e^±10, where
/// the raw certificate matrices span too many orders of magnitude for a
/// float64 eigensolver to certify directly.
inline double unit_ball_margin(const DenseMatrix& M) {
    return min_eigenvalue(DenseMatrix::identity(M.cols()) - M.transposed() * M);
}

// ---------------------------------------------------------------------------
// Inverse constructions (surjectivity round-trips).
// ---------------------------------------------------------------------------

struct Lemma1Inverse {
    DenseMatrix X, Y, Z;
    double epsilon = 0.0;  // possibly shrunk from the requested value
};

/// Recover (X, Y, Z, ε) such that the cayley stack reproduces a given tall
/// M with MᵀM ≺ I: N = cayley(M₁), Z = −½M₂(I+N), Y = ½N, and X from the
/// eigendecomposition of H − εI with H = ½(N+Nᵀ) − ZᵀZ ≻ 0, halving ε
/// until H − εI stays PSD.
inline Lemma1Inverse inverse_lemma1(const DenseMatrix& M, double epsilon = 1e-2) {
    if (M.rows() < M.cols()) throw ShapeMismatch("inverse_lemma1 expects a tall or square matrix");
    const std::size_t m = M.cols();
    const double norm2_sq = max_eigenvalue(M.transposed() * M);
    if (norm2_sq >= 1.0 - 1e-10)
        throw NormBoundViolated("inverse_lemma1: spectral norm " + std::to_string(std::sqrt(norm2_sq)) +
                                " not strictly below 1");

    const DenseMatrix m1 = M.block(0, m, 0, m);
    const DenseMatrix m2 = M.block(m, M.rows(), 0, m);
    const DenseMatrix n = cayley(m1);
    Lemma1Inverse out;
    out.Z = (m2.rows() > 0) ? (-0.5) * (m2 * (DenseMatrix::identity(m) + n)) : DenseMatrix(0, m);
    const DenseMatrix ztz = (out.Z.rows() > 0) ? out.Z.transposed() * out.Z : DenseMatrix::zeros(m, m);
    const DenseMatrix h = 0.5 * (n + n.transposed()) - ztz;

    const double h_min = min_eigenvalue(h);  // > 0 whenever the norm bound holds
    double eps = epsilon;
    for (int halvings = 0; eps > h_min; ++halvings) {
        if (halvings >= 60)
            throw NoConvergence("inverse_lemma1: epsilon did not shrink below the eigenvalue floor");
        eps *= 0.5;
    }
    out.epsilon = eps;

    const SymEig eh = sym_eig(h - eps * DenseMatrix::identity(m));
    DenseMatrix x(m, m);  // diag(√σ)·Vᵀ, so XᵀX = H − εI
    for (std::size_t i = 0; i < m; ++i) {
        const double s = std::sqrt(std::max(eh.values[i], 0.0));
        for (std::size_t j = 0; j < m; ++j) x(i, j) = s * eh.vectors(j, i);
    }
    out.X = std::move(x);
    out.Y = 0.5 * n;
    return out;
}

/// Recover 𝒴 such that cayley(𝒴−𝒴ᵀ) = Q for an orthogonal Q without a −1
/// eigenvalue: 𝒴 is the strictly lower triangle of the (skew) cayley(Q).
inline DenseMatrix inverse_lemma2(const DenseMatrix& q) {
    const DenseMatrix n = cayley(q);  // throws SingularMatrix at a −1 eigenvalue
    DenseMatrix y = DenseMatrix::zeros(n.rows(), n.cols());
    for (std::size_t i = 1; i < n.rows(); ++i)
        for (std::size_t j = 0; j < i; ++j) y(i, j) = n(i, j);
    return y;
}

}  // namespace lpvss
