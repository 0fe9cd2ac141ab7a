#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "lpvss/rng.hpp"
#include "lpvss/ssparam.hpp"

namespace lpvss {

/// Simulation aborts with NonFiniteState once any state entry passes this.
constexpr double kStateGuard = 1e30;

enum class SsVariant : std::uint8_t {
    contracting = 0,           // A(p) built so that a contraction certificate always holds
    lipschitz = 1,             // W(p) built so that the incremental gain is at most gamma
    unconstrained_affine = 2,  // plain affine coefficients, no guarantee
};

enum class MapKind : std::uint8_t {
    mlp_per_component = 0,  // one small network per coefficient block
    mlp_trunk = 1,          // a single network whose output is split by offsets
    affine = 2,             // S1*p + S0
};

struct ComponentShape {
    std::string name;
    std::size_t rows = 0, cols = 0;
    std::size_t size() const { return rows * cols; }
};

/// The coefficient blocks the scheduling map must produce, in evaluation
/// order. The constrained variants route X, Y (and Z) through the Cayley
/// construction; biases always bypass it (they do not affect either
/// guarantee, which bounds increments only).
inline std::vector<ComponentShape> phi_components(SsVariant v, const SsDims& dims) {
    std::vector<ComponentShape> c;
    switch (v) {
        case SsVariant::contracting:
            c.push_back({"X", dims.n_x, dims.n_x});
            c.push_back({"Y", dims.n_x, dims.n_x});
            c.push_back({"B", dims.n_x, dims.n_u});
            c.push_back({"C", dims.n_y, dims.n_x});
            c.push_back({"D", dims.n_y, dims.n_u});
            break;
        case SsVariant::lipschitz:
            c.push_back({"X", dims.n(), dims.n()});
            c.push_back({"Y", dims.n(), dims.n()});
            if (dims.n0() > 0) c.push_back({"Z", dims.n0(), dims.n()});
            break;
        case SsVariant::unconstrained_affine:
            c.push_back({"A", dims.n_x, dims.n_x});
            c.push_back({"B", dims.n_x, dims.n_u});
            c.push_back({"C", dims.n_y, dims.n_x});
            c.push_back({"D", dims.n_y, dims.n_u});
            break;
    }
    c.push_back({"b_x", dims.n_x, 1});
    c.push_back({"b_y", dims.n_y, 1});
    return c;
}

inline std::size_t total_component_size(const std::vector<ComponentShape>& comps) {
    std::size_t s = 0;
    for (const auto& c : comps) s += c.size();
    return s;
}

/// Fully-connected network: ReLU on hidden layers, linear output.
struct Mlp {
    std::vector<std::size_t> widths;     // input, hidden..., output
    std::vector<DenseMatrix> weights;    // widths[l+1] x widths[l]
    std::vector<DenseMatrix> biases;     // widths[l+1] x 1
};

inline Mlp mlp_structure(const std::vector<std::size_t>& widths) {
    if (widths.size() < 2) throw Error("mlp_structure: need at least input and output widths");
    Mlp net;
    net.widths = widths;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        net.weights.emplace_back(widths[l + 1], widths[l]);
        net.biases.emplace_back(widths[l + 1], 1);
    }
    return net;
}

/// The guaranteed model: x_{t+1} = A(p)x + B(p)u + b_x(p), y = C(p)x + D(p)u
/// + b_y(p), with the coefficient blocks produced by the scheduling map and
/// (for the constrained variants) pushed through the Cayley construction.
struct LpvSsModel {
    SsVariant variant = SsVariant::lipschitz;
    SsDims dims;
    MapKind map_kind = MapKind::mlp_per_component;
    std::vector<std::size_t> hidden = {50, 50};
    double epsilon = 1e-2;
    double gamma = 1.0;   // lipschitz variant only
    bool alpha_trained = true;
    double alpha_fixed = 0.95;
    std::uint64_t seed = 0;

    // trainable parameters (d, Ycal, alpha_raw absent for unconstrained)
    DenseMatrix d;          // n_x x 1
    DenseMatrix Ycal;       // n_x x n_x
    DenseMatrix alpha_raw;  // 1 x 1, used when variant==contracting && alpha_trained

    // scheduling map storage (one of:)
    std::vector<Mlp> nets;  // per-component (one per block) or trunk (single)
    DenseMatrix S1, S0;     // affine map over the concatenated blocks

    bool constrained() const { return variant != SsVariant::unconstrained_affine; }
};

/// Every trainable matrix in a fixed, documented order: d, Ycal, [alpha_raw],
/// then the scheduling map (per net, per layer: weights then bias; or S1, S0).
/// Evaluation pulls bound values through a cursor in exactly this order, and
/// serialization writes them in exactly this order.
template <typename Model, typename Fn>
void enumerate_params_impl(Model& m, Fn&& fn) {
    if (m.constrained()) {
        fn(m.d);
        fn(m.Ycal);
        if (m.variant == SsVariant::contracting && m.alpha_trained) fn(m.alpha_raw);
    }
    if (m.map_kind == MapKind::affine) {
        fn(m.S1);
        fn(m.S0);
    } else {
        for (auto& net : m.nets)
            for (std::size_t l = 0; l < net.weights.size(); ++l) {
                fn(net.weights[l]);
                fn(net.biases[l]);
            }
    }
}

template <typename Fn>
void enumerate_params(LpvSsModel& m, Fn&& fn) {
    enumerate_params_impl(m, std::forward<Fn>(fn));
}
template <typename Fn>
void enumerate_params(const LpvSsModel& m, Fn&& fn) {
    enumerate_params_impl(m, std::forward<Fn>(fn));
}

/// One affinely scheduled matrix family: value(p) = mats[0] + sum_i p_i mats[1+i].
struct AffineFamily {
    std::vector<DenseMatrix> mats;
};

inline AffineFamily affine_family_structure(std::size_t rows, std::size_t cols, std::size_t n_p) {
    AffineFamily f;
    for (std::size_t i = 0; i <= n_p; ++i) f.mats.emplace_back(rows, cols);
    return f;
}

/// Unconstrained baseline with an internal ReLU channel:
///   x_{t+1} = A(p)x + B_w(p)w + B_u(p)u + b_x(p)
///   z_t     = C_z(p)x + D_zu(p)u + b_z(p)      (no w feedthrough: explicit loop)
///   w_t     = relu(z_t)
///   y_t     = C_y(p)x + D_yw(p)w + D_yu(p)u + b_y(p)
struct LpvLfrModel {
    SsDims dims;
    std::size_t n_z = 100;
    std::uint64_t seed = 0;
    AffineFamily A, B_w, B_u, C_z, D_zu, C_y, D_yw, D_yu, b_x, b_z, b_y;
};

template <typename Model, typename Fn>
void enumerate_lfr_params_impl(Model& m, Fn&& fn) {
    for (auto* fam : {&m.A, &m.B_w, &m.B_u, &m.C_z, &m.D_zu, &m.C_y, &m.D_yw, &m.D_yu, &m.b_x,
                      &m.b_z, &m.b_y})
        for (auto& mat : fam->mats) fn(mat);
}

template <typename Fn>
void enumerate_params(LpvLfrModel& m, Fn&& fn) {
    enumerate_lfr_params_impl(m, std::forward<Fn>(fn));
}
template <typename Fn>
void enumerate_params(const LpvLfrModel& m, Fn&& fn) {
    enumerate_lfr_params_impl(m, std::forward<Fn>(fn));
}

// ---------------------------------------------------------------------------
// Construction & initialization
// ---------------------------------------------------------------------------

inline LpvSsModel lpv_ss_structure(SsVariant variant, const SsDims& dims, MapKind map_kind,
                                   const std::vector<std::size_t>& hidden) {
    LpvSsModel m;
    m.variant = variant;
    m.dims = dims;
    m.map_kind = map_kind;
    m.hidden = hidden;
    if (m.constrained()) {
        m.d = DenseMatrix(dims.n_x, 1);
        m.Ycal = DenseMatrix(dims.n_x, dims.n_x);
        m.alpha_raw = DenseMatrix(1, 1);
    }
    const auto comps = phi_components(variant, dims);
    if (map_kind == MapKind::affine) {
        const std::size_t total = total_component_size(comps);
        m.S1 = DenseMatrix(total, dims.n_p);
        m.S0 = DenseMatrix(total, 1);
    } else if (map_kind == MapKind::mlp_trunk) {
        std::vector<std::size_t> widths{dims.n_p};
        widths.insert(widths.end(), hidden.begin(), hidden.end());
        widths.push_back(total_component_size(comps));
        m.nets.push_back(mlp_structure(widths));
    } else {
        for (const auto& c : comps) {
            std::vector<std::size_t> widths{dims.n_p};
            widths.insert(widths.end(), hidden.begin(), hidden.end());
            widths.push_back(c.size());
            m.nets.push_back(mlp_structure(widths));
        }
    }
    return m;
}

/// Every trainable entry drawn uniform(-0.1, 0.1), identically for all model
/// kinds so baselines start from comparable scales.
template <typename Model>
void init_params(Model& m, std::uint64_t seed) {
    m.seed = seed;
    Rng rng(seed);
    enumerate_params(m, [&](DenseMatrix& mat) {
        for (std::size_t k = 0; k < mat.size(); ++k) mat[k] = rng.uniform(-0.1, 0.1);
    });
}

inline LpvSsModel make_lpv_ss(SsVariant variant, const SsDims& dims, MapKind map_kind,
                              std::uint64_t seed, double gamma = 1.0, double epsilon = 1e-2,
                              const std::vector<std::size_t>& hidden = {50, 50},
                              bool alpha_trained = true, double alpha_fixed = 0.95) {
    LpvSsModel m = lpv_ss_structure(variant, dims, map_kind, hidden);
    m.gamma = gamma;
    m.epsilon = epsilon;
    m.alpha_trained = alpha_trained;
    m.alpha_fixed = alpha_fixed;
    init_params(m, seed);
    return m;
}

inline LpvLfrModel lpv_lfr_structure(const SsDims& dims, std::size_t n_z) {
    LpvLfrModel m;
    m.dims = dims;
    m.n_z = n_z;
    const std::size_t nx = dims.n_x, nu = dims.n_u, ny = dims.n_y, np = dims.n_p;
    m.A = affine_family_structure(nx, nx, np);
    m.B_w = affine_family_structure(nx, n_z, np);
    m.B_u = affine_family_structure(nx, nu, np);
    m.C_z = affine_family_structure(n_z, nx, np);
    m.D_zu = affine_family_structure(n_z, nu, np);
    m.C_y = affine_family_structure(ny, nx, np);
    m.D_yw = affine_family_structure(ny, n_z, np);
    m.D_yu = affine_family_structure(ny, nu, np);
    m.b_x = affine_family_structure(nx, 1, np);
    m.b_z = affine_family_structure(n_z, 1, np);
    m.b_y = affine_family_structure(ny, 1, np);
    return m;
}

inline LpvLfrModel make_lpv_lfr(const SsDims& dims, std::uint64_t seed, std::size_t n_z = 100) {
    LpvLfrModel m = lpv_lfr_structure(dims, n_z);
    init_params(m, seed);
    return m;
}

// ---------------------------------------------------------------------------
// Parameter binding: numeric evaluation uses the stored matrices directly,
// taped evaluation uses leaves created in the same canonical order.
// ---------------------------------------------------------------------------

template <typename Ctx>
struct BoundParams {
    std::vector<typename Ctx::V> vals;
};

template <typename Model>
BoundParams<NumericCtx> bind_numeric(const Model& m) {
    BoundParams<NumericCtx> bp;
    enumerate_params(m, [&](const DenseMatrix& mat) { bp.vals.push_back(mat); });
    return bp;
}

template <typename Model>
BoundParams<TapeCtx> bind_tape(const Model& m, ad::Tape& tape) {
    BoundParams<TapeCtx> bp;
    enumerate_params(m, [&](const DenseMatrix& mat) { bp.vals.push_back(tape.leaf(mat)); });
    return bp;
}

template <typename Ctx>
struct ParamCursor {
    const std::vector<typename Ctx::V>* vals = nullptr;
    std::size_t next_index = 0;
    const typename Ctx::V& next() {
        if (next_index >= vals->size()) throw Error("parameter cursor overrun");
        return (*vals)[next_index++];
    }
};

// ---------------------------------------------------------------------------
// Coefficient assembly (written once, runs numerically or on a tape)
// ---------------------------------------------------------------------------

template <typename Ctx>
typename Ctx::V mlp_forward_t(Ctx& ctx, const Mlp& net, ParamCursor<Ctx>& cur,
                              const typename Ctx::V& in) {
    typename Ctx::V h = in;
    const std::size_t layers = net.weights.size();
    for (std::size_t l = 0; l < layers; ++l) {
        const auto& w = cur.next();
        const auto& b = cur.next();
        h = ctx.add(ctx.matmul(w, h), b);
        if (l + 1 < layers) h = ctx.relu(h);
    }
    return h;
}

/// Evaluate the scheduling map at one scheduling point (given as a constant
/// n_p x 1 column) into the component blocks listed by phi_components.
template <typename Ctx>
std::vector<typename Ctx::V> eval_coeff_map_t(Ctx& ctx, const LpvSsModel& m, ParamCursor<Ctx>& cur,
                                              const typename Ctx::V& pcol) {
    const auto comps = phi_components(m.variant, m.dims);
    std::vector<typename Ctx::V> out;
    out.reserve(comps.size());
    auto split_flat = [&](const typename Ctx::V& flat) {
        std::size_t off = 0;
        for (const auto& c : comps) {
            out.push_back(ctx.reshape(ctx.block(flat, off, off + c.size(), 0, 1), c.rows, c.cols));
            off += c.size();
        }
    };
    if (m.map_kind == MapKind::affine) {
        const auto& s1 = cur.next();
        const auto& s0 = cur.next();
        split_flat(ctx.add(ctx.matmul(s1, pcol), s0));
    } else if (m.map_kind == MapKind::mlp_trunk) {
        split_flat(mlp_forward_t(ctx, m.nets.at(0), cur, pcol));
    } else {
        for (std::size_t i = 0; i < comps.size(); ++i) {
            const auto flat = mlp_forward_t(ctx, m.nets.at(i), cur, pcol);
            out.push_back(ctx.reshape(flat, comps[i].rows, comps[i].cols));
        }
    }
    return out;
}

template <typename Ctx>
struct CoeffsT {
    typename Ctx::V A, B, C, D, b_x, b_y;
};

inline DenseMatrix as_column(const DenseMatrix& p) {
    if (p.cols() == 1) return p;
    if (p.rows() == 1) return p.transposed();
    throw ShapeMismatch("scheduling point must be a vector");
}

template <typename Ctx>
CoeffsT<Ctx> assemble_coeffs_t(Ctx& ctx, const LpvSsModel& m, const BoundParams<Ctx>& bp,
                               const DenseMatrix& p) {
    const DenseMatrix pvec = as_column(p);
    if (pvec.rows() != m.dims.n_p) throw ShapeMismatch("scheduling point has wrong length");
    if (!pvec.all_finite()) throw Error("assemble_coeffs: non-finite scheduling value");

    ParamCursor<Ctx> cur{&bp.vals, 0};
    const auto pcol = ctx.constant(pvec);
    CoeffsT<Ctx> out;
    const SsDims& dims = m.dims;

    if (m.variant == SsVariant::contracting) {
        const auto& dv = cur.next();
        const auto& ycal = cur.next();
        typename Ctx::V alpha =
            m.alpha_trained ? alpha_from_raw_t(ctx, cur.next())
                            : ctx.constant(m.alpha_fixed * DenseMatrix::ones(1, 1));
        const auto comps = eval_coeff_map_t(ctx, m, cur, pcol);
        const auto asmb = contracting_A_t(ctx, dv, ycal, comps[0], comps[1], m.epsilon, alpha);
        out.A = asmb.A;
        out.B = comps[2];
        out.C = comps[3];
        out.D = comps[4];
        out.b_x = comps[5];
        out.b_y = comps[6];
    } else if (m.variant == SsVariant::lipschitz) {
        const auto& dv = cur.next();
        const auto& ycal = cur.next();
        const auto comps = eval_coeff_map_t(ctx, m, cur, pcol);
        const bool has_z = dims.n0() > 0;
        const typename Ctx::V* z = has_z ? &comps[2] : nullptr;
        const auto asmb =
            lipschitz_W_t(ctx, dv, ycal, comps[0], comps[1], z, m.gamma, m.epsilon, dims);
        const std::size_t nx = dims.n_x, nu = dims.n_u, ny = dims.n_y;
        out.A = ctx.block(asmb.W, 0, nx, 0, nx);
        out.B = ctx.block(asmb.W, 0, nx, nx, nx + nu);
        out.C = ctx.block(asmb.W, nx, nx + ny, 0, nx);
        out.D = ctx.block(asmb.W, nx, nx + ny, nx, nx + nu);
        out.b_x = comps[has_z ? 3 : 2];
        out.b_y = comps[has_z ? 4 : 3];
    } else {
        const auto comps = eval_coeff_map_t(ctx, m, cur, pcol);
        out.A = comps[0];
        out.B = comps[1];
        out.C = comps[2];
        out.D = comps[3];
        out.b_x = comps[4];
        out.b_y = comps[5];
    }
    if (cur.next_index != bp.vals.size())
        throw Error("assemble_coeffs: parameter order drifted from the bound list");
    return out;
}

/// Full W(p) of the lipschitz variant (for certificate checks).
template <typename Ctx>
LipschitzAssembly<Ctx> assemble_W_t(Ctx& ctx, const LpvSsModel& m, const BoundParams<Ctx>& bp,
                                    const DenseMatrix& p) {
    if (m.variant != SsVariant::lipschitz) throw Error("assemble_W requires the lipschitz variant");
    ParamCursor<Ctx> cur{&bp.vals, 0};
    const auto pcol = ctx.constant(as_column(p));
    const auto& dv = cur.next();
    const auto& ycal = cur.next();
    const auto comps = eval_coeff_map_t(ctx, m, cur, pcol);
    const bool has_z = m.dims.n0() > 0;
    const typename Ctx::V* z = has_z ? &comps[2] : nullptr;
    return lipschitz_W_t(ctx, dv, ycal, comps[0], comps[1], z, m.gamma, m.epsilon, m.dims);
}

/// Contracting-variant assembly with certificate factors (for checks).
template <typename Ctx>
ContractingAssembly<Ctx> assemble_A_t(Ctx& ctx, const LpvSsModel& m, const BoundParams<Ctx>& bp,
                                      const DenseMatrix& p) {
    if (m.variant != SsVariant::contracting)
        throw Error("assemble_A requires the contracting variant");
    ParamCursor<Ctx> cur{&bp.vals, 0};
    const auto pcol = ctx.constant(as_column(p));
    const auto& dv = cur.next();
    const auto& ycal = cur.next();
    typename Ctx::V alpha = m.alpha_trained
                                ? alpha_from_raw_t(ctx, cur.next())
                                : ctx.constant(m.alpha_fixed * DenseMatrix::ones(1, 1));
    const auto comps = eval_coeff_map_t(ctx, m, cur, pcol);
    return contracting_A_t(ctx, dv, ycal, comps[0], comps[1], m.epsilon, alpha);
}

/// The model's alpha as a plain number (contracting variant).
inline double model_alpha(const LpvSsModel& m) {
    ContractingParam par;
    par.alpha_raw = m.constrained() && m.alpha_raw.size() == 1 ? m.alpha_raw(0, 0) : 0.0;
    par.alpha_trained = m.alpha_trained;
    par.alpha_fixed = m.alpha_fixed;
    return par.alpha();
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

template <typename Ctx>
struct SimTraj {
    std::vector<typename Ctx::V> y;  // T entries, n_y x 1
    std::vector<typename Ctx::V> x;  // T+1 entries, n_x x 1
};

namespace detail {
template <typename Ctx>
void guard_state(Ctx& ctx, const typename Ctx::V& x, std::size_t step) {
    const DenseMatrix& v = ctx.peek(x);
    if (!v.all_finite() || v.max_abs() > kStateGuard) throw NonFiniteState(step);
}
}  // namespace detail

template <typename Ctx>
SimTraj<Ctx> simulate_t(Ctx& ctx, const LpvSsModel& m, const BoundParams<Ctx>& bp,
                        const DenseMatrix& x0, const DenseMatrix& u, const DenseMatrix& p) {
    const std::size_t T = u.rows();
    if (p.rows() != T) throw ShapeMismatch("simulate: input and scheduling lengths differ");
    if (u.cols() != m.dims.n_u || p.cols() != m.dims.n_p || x0.rows() != m.dims.n_x ||
        x0.cols() != 1)
        throw ShapeMismatch("simulate: trajectory dimensions do not match the model");

    SimTraj<Ctx> out;
    out.x.reserve(T + 1);
    out.y.reserve(T);
    out.x.push_back(ctx.constant(x0));
    for (std::size_t t = 0; t < T; ++t) {
        const auto cf = assemble_coeffs_t(ctx, m, bp, p.block(t, t + 1, 0, p.cols()).transposed());
        const auto ut = ctx.constant(u.block(t, t + 1, 0, u.cols()).transposed());
        const auto& xt = out.x.back();
        out.y.push_back(ctx.add(ctx.add(ctx.matmul(cf.C, xt), ctx.matmul(cf.D, ut)), cf.b_y));
        auto xn = ctx.add(ctx.add(ctx.matmul(cf.A, xt), ctx.matmul(cf.B, ut)), cf.b_x);
        detail::guard_state(ctx, xn, t + 1);
        out.x.push_back(std::move(xn));
    }
    return out;
}

template <typename Ctx>
typename Ctx::V affine_eval_t(Ctx& ctx, ParamCursor<Ctx>& cur, const DenseMatrix& pvec) {
    typename Ctx::V acc = cur.next();
    for (std::size_t i = 0; i < pvec.size(); ++i)
        acc = ctx.add(acc, ctx.scale(cur.next(), pvec[i]));
    return acc;
}

template <typename Ctx>
SimTraj<Ctx> simulate_lfr_t(Ctx& ctx, const LpvLfrModel& m, const BoundParams<Ctx>& bp,
                            const DenseMatrix& x0, const DenseMatrix& u, const DenseMatrix& p) {
    const std::size_t T = u.rows();
    if (p.rows() != T) throw ShapeMismatch("simulate_lfr: input and scheduling lengths differ");
    if (u.cols() != m.dims.n_u || p.cols() != m.dims.n_p || x0.rows() != m.dims.n_x ||
        x0.cols() != 1)
        throw ShapeMismatch("simulate_lfr: trajectory dimensions do not match the model");

    SimTraj<Ctx> out;
    out.x.reserve(T + 1);
    out.y.reserve(T);
    out.x.push_back(ctx.constant(x0));
    for (std::size_t t = 0; t < T; ++t) {
        const DenseMatrix pvec = p.block(t, t + 1, 0, p.cols()).transposed();
        ParamCursor<Ctx> cur{&bp.vals, 0};
        const auto A = affine_eval_t(ctx, cur, pvec);
        const auto B_w = affine_eval_t(ctx, cur, pvec);
        const auto B_u = affine_eval_t(ctx, cur, pvec);
        const auto C_z = affine_eval_t(ctx, cur, pvec);
        const auto D_zu = affine_eval_t(ctx, cur, pvec);
        const auto C_y = affine_eval_t(ctx, cur, pvec);
        const auto D_yw = affine_eval_t(ctx, cur, pvec);
        const auto D_yu = affine_eval_t(ctx, cur, pvec);
        const auto b_x = affine_eval_t(ctx, cur, pvec);
        const auto b_z = affine_eval_t(ctx, cur, pvec);
        const auto b_y = affine_eval_t(ctx, cur, pvec);
        if (cur.next_index != bp.vals.size())
            throw Error("simulate_lfr: parameter order drifted from the bound list");

        const auto ut = ctx.constant(u.block(t, t + 1, 0, u.cols()).transposed());
        const auto& xt = out.x.back();
        const auto z = ctx.add(ctx.add(ctx.matmul(C_z, xt), ctx.matmul(D_zu, ut)), b_z);
        const auto w = ctx.relu(z);
        out.y.push_back(ctx.add(
            ctx.add(ctx.add(ctx.matmul(C_y, xt), ctx.matmul(D_yw, w)), ctx.matmul(D_yu, ut)),
            b_y));
        auto xn = ctx.add(ctx.add(ctx.add(ctx.matmul(A, xt), ctx.matmul(B_w, w)),
                                  ctx.matmul(B_u, ut)),
                          b_x);
        detail::guard_state(ctx, xn, t + 1);
        out.x.push_back(std::move(xn));
    }
    return out;
}

struct SimResult {
    DenseMatrix y;  // T x n_y
    DenseMatrix x;  // (T+1) x n_x
};

namespace detail {
inline SimResult pack_traj(const SimTraj<NumericCtx>& tr, std::size_t n_y, std::size_t n_x) {
    SimResult r;
    r.y = DenseMatrix(tr.y.size(), n_y);
    for (std::size_t t = 0; t < tr.y.size(); ++t)
        for (std::size_t j = 0; j < n_y; ++j) r.y(t, j) = tr.y[t](j, 0);
    r.x = DenseMatrix(tr.x.size(), n_x);
    for (std::size_t t = 0; t < tr.x.size(); ++t)
        for (std::size_t j = 0; j < n_x; ++j) r.x(t, j) = tr.x[t](j, 0);
    return r;
}
}  // namespace detail

inline SimResult simulate(const LpvSsModel& m, const DenseMatrix& x0, const DenseMatrix& u,
                          const DenseMatrix& p) {
    NumericCtx ctx;
    const auto bp = bind_numeric(m);
    return detail::pack_traj(simulate_t(ctx, m, bp, x0, u, p), m.dims.n_y, m.dims.n_x);
}

inline SimResult simulate_lfr(const LpvLfrModel& m, const DenseMatrix& x0, const DenseMatrix& u,
                              const DenseMatrix& p) {
    NumericCtx ctx;
    const auto bp = bind_numeric(m);
    return detail::pack_traj(simulate_lfr_t(ctx, m, bp, x0, u, p), m.dims.n_y, m.dims.n_x);
}

/// Numeric coefficient assembly at one scheduling point.
struct Coeffs {
    DenseMatrix A, B, C, D, b_x, b_y;
};

inline Coeffs assemble_coeffs(const LpvSsModel& m, const DenseMatrix& p) {
    NumericCtx ctx;
    const auto bp = bind_numeric(m);
    const auto c = assemble_coeffs_t(ctx, m, bp, p);
    return {c.A, c.B, c.C, c.D, c.b_x, c.b_y};
}

// ---------------------------------------------------------------------------
// Serialization: "LPVSS1" magic, version, kind tag, payload, CRC32 trailer.
// All parameter arrays are written column-major in enumerate_params order.
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t crc32(const unsigned char* data, std::size_t len) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? (0xEDB88320u ^ (c >> 1)) : (c >> 1);
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

struct ByteWriter {
    std::string buf;
    void u8(std::uint8_t v) { buf.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void mat(const DenseMatrix& m) {
        u64(m.rows());
        u64(m.cols());
        for (std::size_t j = 0; j < m.cols(); ++j)
            for (std::size_t i = 0; i < m.rows(); ++i) f64(m(i, j));
    }
};

struct ByteReader {
    const std::string* buf;
    std::size_t pos = 0;
    void need(std::size_t k) const {
        if (pos + k > buf->size()) throw CorruptFile("model file truncated");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>((*buf)[pos++]);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>((*buf)[pos++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>((*buf)[pos++])) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    DenseMatrix mat() {
        const std::uint64_t r = u64(), c = u64();
        if (r > (1u << 20) || c > (1u << 20) || r * c > (1u << 26))
            throw CorruptFile("model file declares an implausible matrix size");
        DenseMatrix m(r, c);
        for (std::size_t j = 0; j < c; ++j)
            for (std::size_t i = 0; i < r; ++i) m(i, j) = f64();
        return m;
    }
};

constexpr char kMagic[6] = {'L', 'P', 'V', 'S', 'S', '1'};
constexpr std::uint32_t kFormatVersion = 1;

inline void write_params(ByteWriter& w, const LpvSsModel& m) {
    w.u8(static_cast<std::uint8_t>(m.variant));
    w.u8(static_cast<std::uint8_t>(m.map_kind));
    w.u8(m.alpha_trained ? 1 : 0);
    w.u64(m.dims.n_x);
    w.u64(m.dims.n_u);
    w.u64(m.dims.n_y);
    w.u64(m.dims.n_p);
    w.f64(m.epsilon);
    w.f64(m.gamma);
    w.f64(m.alpha_fixed);
    w.u64(m.seed);
    w.u64(m.hidden.size());
    for (std::size_t h : m.hidden) w.u64(h);
    std::size_t count = 0;
    enumerate_params(m, [&](const DenseMatrix&) { ++count; });
    w.u64(count);
    enumerate_params(m, [&](const DenseMatrix& mat) { w.mat(mat); });
}

inline void write_params(ByteWriter& w, const LpvLfrModel& m) {
    w.u64(m.dims.n_x);
    w.u64(m.dims.n_u);
    w.u64(m.dims.n_y);
    w.u64(m.dims.n_p);
    w.u64(m.n_z);
    w.u64(m.seed);
    std::size_t count = 0;
    enumerate_params(m, [&](const DenseMatrix&) { ++count; });
    w.u64(count);
    enumerate_params(m, [&](const DenseMatrix& mat) { w.mat(mat); });
}

template <typename Model>
void fill_params_from(ByteReader& r, Model& m, std::uint64_t declared_count) {
    std::size_t expect = 0;
    enumerate_params(m, [&](const DenseMatrix&) { ++expect; });
    if (declared_count != expect) throw CorruptFile("model file parameter count mismatch");
    enumerate_params(m, [&](DenseMatrix& mat) {
        DenseMatrix got = r.mat();
        if (got.rows() != mat.rows() || got.cols() != mat.cols())
            throw CorruptFile("model file parameter shape mismatch");
        mat = std::move(got);
    });
}

}  // namespace detail

using LoadedModel = std::variant<LpvSsModel, LpvLfrModel>;

namespace detail {

template <typename Model>
void save_model_impl(const Model& m, const std::string& path, std::uint8_t kind) {
    ByteWriter w;
    w.u32(kFormatVersion);
    w.u8(kind);
    write_params(w, m);
    std::string out(kMagic, sizeof(kMagic));
    out += w.buf;
    const std::uint32_t crc =
        crc32(reinterpret_cast<const unsigned char*>(w.buf.data()), w.buf.size());
    ByteWriter trailer;
    trailer.u32(crc);
    out += trailer.buf;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed: " + path);
}

}  // namespace detail

inline void save_model(const LpvSsModel& m, const std::string& path) {
    detail::save_model_impl(m, path, 0);
}
inline void save_model(const LpvLfrModel& m, const std::string& path) {
    detail::save_model_impl(m, path, 1);
}

inline LoadedModel load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (all.size() < sizeof(detail::kMagic) + 4 + 1 + 4 ||
        std::memcmp(all.data(), detail::kMagic, sizeof(detail::kMagic)) != 0)
        throw FormatVersionMismatch("not a model file (bad magic)");
    const std::string payload =
        all.substr(sizeof(detail::kMagic), all.size() - sizeof(detail::kMagic) - 4);
    std::string crc_bytes = all.substr(all.size() - 4);
    detail::ByteReader crc_r{&crc_bytes, 0};
    const std::uint32_t stored = crc_r.u32();
    const std::uint32_t actual =
        detail::crc32(reinterpret_cast<const unsigned char*>(payload.data()), payload.size());
    if (stored != actual) throw CorruptFile("model file checksum mismatch");

    detail::ByteReader r{&payload, 0};
    const std::uint32_t version = r.u32();
    if (version != detail::kFormatVersion)
        throw FormatVersionMismatch("unsupported model format version " + std::to_string(version));
    const std::uint8_t kind = r.u8();
    if (kind == 0) {
        const auto variant = static_cast<SsVariant>(r.u8());
        const auto map_kind = static_cast<MapKind>(r.u8());
        const bool alpha_trained = r.u8() != 0;
        SsDims dims;
        dims.n_x = r.u64();
        dims.n_u = r.u64();
        dims.n_y = r.u64();
        dims.n_p = r.u64();
        const double epsilon = r.f64();
        const double gamma = r.f64();
        const double alpha_fixed = r.f64();
        const std::uint64_t seed = r.u64();
        const std::uint64_t nh = r.u64();
        if (nh > 64) throw CorruptFile("model file declares an implausible depth");
        std::vector<std::size_t> hidden;
        for (std::uint64_t i = 0; i < nh; ++i) hidden.push_back(r.u64());
        LpvSsModel m = lpv_ss_structure(variant, dims, map_kind, hidden);
        m.epsilon = epsilon;
        m.gamma = gamma;
        m.alpha_trained = alpha_trained;
        m.alpha_fixed = alpha_fixed;
        m.seed = seed;
        detail::fill_params_from(r, m, r.u64());
        return m;
    }
    if (kind == 1) {
        SsDims dims;
        dims.n_x = r.u64();
        dims.n_u = r.u64();
        dims.n_y = r.u64();
        dims.n_p = r.u64();
        const std::uint64_t n_z = r.u64();
        if (n_z > (1u << 20)) throw CorruptFile("model file declares an implausible width");
        const std::uint64_t seed = r.u64();
        LpvLfrModel m = lpv_lfr_structure(dims, n_z);
        m.seed = seed;
        detail::fill_params_from(r, m, r.u64());
        return m;
    }
    throw CorruptFile("unknown model kind tag");
}

}  // namespace lpvss
