#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "lpvss/model.hpp"

namespace lpvss {

enum class CertProperty : std::uint8_t { contraction = 0, lipschitz = 1 };

inline const char* property_name(CertProperty p) {
    return p == CertProperty::contraction ? "contraction" : "lipschitz";
}

/// Result of a sampled certificate check. Sampling scheduling values cannot
/// prove a for-all-p statement for a general coefficient map; for the
/// constrained variants the guarantee is structural and these checks are a
/// numerical regression test on top of it.
struct CertReport {
    CertProperty property = CertProperty::contraction;
    std::size_t samples = 0;
    double min_lmi_eig = std::numeric_limits<double>::infinity();
    double empirical = std::numeric_limits<double>::quiet_NaN();  // fitted slope or worst gain
    double bound = std::numeric_limits<double>::quiet_NaN();      // log(alpha) or gamma
    double tolerance = 0.0;
    bool pass = false;
    std::uint64_t seed = 0;
};

namespace detail {
inline bool empirical_ok(const CertReport& r) {
    return std::isnan(r.empirical) || r.empirical <= r.bound + r.tolerance;
}
inline void refresh_pass(CertReport& r) { r.pass = r.min_lmi_eig > 0.0 && empirical_ok(r); }
}  // namespace detail

/// Attach an empirical probe result to a report and re-evaluate the verdict.
inline void merge_empirical(CertReport& r, double value, double bound, double tolerance) {
    r.empirical = value;
    r.bound = bound;
    r.tolerance = tolerance;
    detail::refresh_pass(r);
}

// ---------------------------------------------------------------------------
// Scheduling-box sampling
// ---------------------------------------------------------------------------

inline std::vector<DenseMatrix> sample_box(std::size_t count, const DenseMatrix& lo,
                                           const DenseMatrix& hi, std::uint64_t seed) {
    require_same_shape(lo, hi, "sample_box");
    Rng rng(seed);
    std::vector<DenseMatrix> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        DenseMatrix p(lo.rows(), 1);
        for (std::size_t j = 0; j < p.size(); ++j) p[j] = rng.uniform(lo[j], hi[j]);
        out.push_back(std::move(p));
    }
    return out;
}

/// All 2^n corners of the box.
inline std::vector<DenseMatrix> box_vertices(const DenseMatrix& lo, const DenseMatrix& hi) {
    require_same_shape(lo, hi, "box_vertices");
    const std::size_t n = lo.size();
    if (n > 24) throw Error("box_vertices: dimension too large to enumerate");
    std::vector<DenseMatrix> out;
    out.reserve(std::size_t{1} << n);
    for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
        DenseMatrix p(n, 1);
        for (std::size_t j = 0; j < n; ++j) p[j] = (mask >> j) & 1 ? hi[j] : lo[j];
        out.push_back(std::move(p));
    }
    return out;
}

namespace detail {
inline std::pair<DenseMatrix, DenseMatrix> default_box(const DenseMatrix& lo,
                                                       const DenseMatrix& hi, std::size_t n_p) {
    if (lo.size() == n_p && hi.size() == n_p) return {lo, hi};
    DenseMatrix l(n_p, 1), h(n_p, 1);
    for (std::size_t j = 0; j < n_p; ++j) {
        l[j] = -1.0;
        h[j] = 1.0;
    }
    return {l, h};
}
}  // namespace detail

// ---------------------------------------------------------------------------
// LMI checks on sampled scheduling values
// ---------------------------------------------------------------------------

/// Contraction LMI at each sample using the model's own certificate metric.
/// Contracting variant checks its trained rate; the gain-bounded variant
/// certifies rate 1 (its LMI dominates the contraction one).
inline CertReport check_contraction_lmi(const LpvSsModel& m,
                                        const std::vector<DenseMatrix>& p_samples) {
    if (!m.constrained())
        throw Error(
            "check_contraction_lmi: unconstrained model has no certificate metric; "
            "supply a candidate one");
    CertReport r;
    r.property = CertProperty::contraction;
    r.samples = p_samples.size();
    NumericCtx ctx;
    const auto bp = bind_numeric(m);
    for (const auto& p : p_samples) {
        double eig;
        if (m.variant == SsVariant::contracting) {
            const auto a = assemble_A_t(ctx, m, bp, p);
            eig = min_eigenvalue(contraction_lmi(a.A, xcal_of(a.Q, a.lam), model_alpha(m)));
        } else {
            const auto w = assemble_W_t(ctx, m, bp, p);
            const DenseMatrix A = w.W.block(0, m.dims.n_x, 0, m.dims.n_x);
            eig = min_eigenvalue(contraction_lmi(A, xcal_of(w.Q, w.lam), 1.0));
        }
        r.min_lmi_eig = std::min(r.min_lmi_eig, eig);
    }
    detail::refresh_pass(r);
    return r;
}

/// Same check against a caller-supplied candidate metric and rate (for
/// unconstrained models).
inline CertReport check_contraction_lmi(const LpvSsModel& m,
                                        const std::vector<DenseMatrix>& p_samples,
                                        const DenseMatrix& xcal, double alpha) {
    CertReport r;
    r.property = CertProperty::contraction;
    r.samples = p_samples.size();
    for (const auto& p : p_samples) {
        const auto c = assemble_coeffs(m, p);
        r.min_lmi_eig = std::min(r.min_lmi_eig, min_eigenvalue(contraction_lmi(c.A, xcal, alpha)));
    }
    detail::refresh_pass(r);
    return r;
}

/// Incremental-gain LMI at each sample, checked at the given gamma with the
/// model's own certificate metric.
inline CertReport check_lipschitz_lmi(const LpvSsModel& m,
                                      const std::vector<DenseMatrix>& p_samples, double gamma) {
    if (!m.constrained())
        throw Error(
            "check_lipschitz_lmi: unconstrained model has no certificate metric; "
            "supply a candidate one");
    CertReport r;
    r.property = CertProperty::lipschitz;
    r.samples = p_samples.size();
    NumericCtx ctx;
    const auto bp = bind_numeric(m);
    for (const auto& p : p_samples) {
        DenseMatrix W, xcal;
        if (m.variant == SsVariant::lipschitz) {
            const auto w = assemble_W_t(ctx, m, bp, p);
            W = w.W;
            xcal = xcal_of(w.Q, w.lam);
        } else {
            const auto c = assemble_coeffs(m, p);
            const auto a = assemble_A_t(ctx, m, bp, p);
            W = vertcat(horzcat(c.A, c.B), horzcat(c.C, c.D));
            xcal = xcal_of(a.Q, a.lam);
        }
        r.min_lmi_eig =
            std::min(r.min_lmi_eig, min_eigenvalue(lipschitz_lmi(W, xcal, gamma, m.dims.n_x)));
    }
    detail::refresh_pass(r);
    return r;
}

inline CertReport check_lipschitz_lmi(const LpvSsModel& m,
                                      const std::vector<DenseMatrix>& p_samples, double gamma,
                                      const DenseMatrix& xcal) {
    CertReport r;
    r.property = CertProperty::lipschitz;
    r.samples = p_samples.size();
    for (const auto& p : p_samples) {
        const auto c = assemble_coeffs(m, p);
        const DenseMatrix W = vertcat(horzcat(c.A, c.B), horzcat(c.C, c.D));
        r.min_lmi_eig =
            std::min(r.min_lmi_eig, min_eigenvalue(lipschitz_lmi(W, xcal, gamma, m.dims.n_x)));
    }
    detail::refresh_pass(r);
    return r;
}

// ---------------------------------------------------------------------------
// Empirical probes
// ---------------------------------------------------------------------------

namespace detail {

inline double ls_slope(const std::vector<double>& t, const std::vector<double>& v) {
    const std::size_t n = t.size();
    double tm = 0.0, vm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        tm += t[i];
        vm += v[i];
    }
    tm /= static_cast<double>(n);
    vm /= static_cast<double>(n);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        num += (t[i] - tm) * (v[i] - vm);
        den += (t[i] - tm) * (t[i] - tm);
    }
    return num / den;
}

inline double vec2(const DenseMatrix& v) { return std::sqrt(dot_all(v, v)); }

inline DenseMatrix random_steps(Rng& rng, std::size_t T, const DenseMatrix& lo,
                                const DenseMatrix& hi) {
    DenseMatrix out(T, lo.size());
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < lo.size(); ++j) out(t, j) = rng.uniform(lo[j], hi[j]);
    return out;
}

}  // namespace detail

/// Fitted decay rate of paired trajectories: simulate the same inputs and
/// scheduling from two random initial states and least-squares fit the log
/// difference norm against time. For constrained models the fit is done in
/// the certificate metric (0.5*log of x'*Xcal*x), where the per-step descent
/// is exact; samples are dropped once the difference falls below the
/// float64 cancellation floor of the subtraction. Returns the maximum slope
/// over trials, or -infinity when every difference dies faster than a fit
/// can resolve.
inline double empirical_contraction(const LpvSsModel& m, std::size_t trials, std::size_t T,
                                    std::uint64_t seed, const DenseMatrix& p_lo = {},
                                    const DenseMatrix& p_hi = {}) {
    const auto [lo, hi] = detail::default_box(p_lo, p_hi, m.dims.n_p);
    DenseMatrix xcal;  // empty = Euclidean
    if (m.constrained()) {
        NumericCtx ctx;
        const auto bp = bind_numeric(m);
        DenseMatrix mid(m.dims.n_p, 1);
        for (std::size_t j = 0; j < mid.size(); ++j) mid[j] = 0.5 * (lo[j] + hi[j]);
        if (m.variant == SsVariant::contracting) {
            const auto a = assemble_A_t(ctx, m, bp, mid);
            xcal = xcal_of(a.Q, a.lam);
        } else {
            const auto w = assemble_W_t(ctx, m, bp, mid);
            xcal = xcal_of(w.Q, w.lam);
        }
    }
    DenseMatrix ulo(m.dims.n_u, 1), uhi(m.dims.n_u, 1);
    for (std::size_t j = 0; j < m.dims.n_u; ++j) {
        ulo[j] = -1.0;
        uhi[j] = 1.0;
    }
    double worst = -std::numeric_limits<double>::infinity();
    bool fitted = false;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Rng rng(derive_seed(seed, trial));
        const DenseMatrix u = detail::random_steps(rng, T, ulo, uhi);
        const DenseMatrix p = detail::random_steps(rng, T, lo, hi);
        DenseMatrix x0a(m.dims.n_x, 1), x0b(m.dims.n_x, 1);
        for (std::size_t k = 0; k < m.dims.n_x; ++k) {
            x0a[k] = rng.uniform(-1.0, 1.0);
            x0b[k] = rng.uniform(-1.0, 1.0);
        }
        const SimResult ra = simulate(m, x0a, u, p);
        const SimResult rb = simulate(m, x0b, u, p);

        std::vector<double> ts, vs;
        for (std::size_t t = 0; t + 1 < ra.x.rows(); ++t) {
            DenseMatrix dx(m.dims.n_x, 1), xa(m.dims.n_x, 1), xb(m.dims.n_x, 1);
            for (std::size_t k = 0; k < m.dims.n_x; ++k) {
                xa[k] = ra.x(t, k);
                xb[k] = rb.x(t, k);
                dx[k] = xa[k] - xb[k];
            }
            const double de = detail::vec2(dx);
            // Subtracting two O(|x|) float64 trajectories floors out near
            // 1e-16*|x|; stopping four decades above that keeps the relative
            // rounding in every fitted point below ~1e-6.
            if (de <= 1e-10 * (detail::vec2(xa) + detail::vec2(xb) + 1.0)) continue;
            const double v =
                xcal.size() ? dot_all(dx, xcal * dx) : de * de;
            if (!(v > 0.0)) continue;
            ts.push_back(static_cast<double>(t));
            vs.push_back(0.5 * std::log(v));
        }
        if (ts.size() < 5) continue;
        worst = std::max(worst, detail::ls_slope(ts, vs));
        fitted = true;
    }
    return fitted ? worst : -std::numeric_limits<double>::infinity();
}

namespace detail {

/// One forward/adjoint pass pair of the input-increment -> output-increment
/// map at a frozen scheduling trajectory (the state recursion is linear in
/// (x,u) there, so these applications are exact).
struct IncrementMap {
    std::vector<Coeffs> cf;  // per-step coefficients
    std::size_t n_x, n_u, n_y;

    DenseMatrix forward(const DenseMatrix& du) const {
        const std::size_t T = cf.size();
        DenseMatrix dy(T, n_y);
        DenseMatrix dx = DenseMatrix::zeros(n_x, 1);
        for (std::size_t t = 0; t < T; ++t) {
            DenseMatrix dut(n_u, 1);
            for (std::size_t j = 0; j < n_u; ++j) dut[j] = du(t, j);
            const DenseMatrix dyt = cf[t].C * dx + cf[t].D * dut;
            for (std::size_t j = 0; j < n_y; ++j) dy(t, j) = dyt[j];
            dx = cf[t].A * dx + cf[t].B * dut;
        }
        return dy;
    }

    DenseMatrix adjoint(const DenseMatrix& dy) const {
        const std::size_t T = cf.size();
        DenseMatrix du(T, n_u);
        DenseMatrix lam = DenseMatrix::zeros(n_x, 1);
        for (std::size_t ti = T; ti-- > 0;) {
            DenseMatrix dyt(n_y, 1);
            for (std::size_t j = 0; j < n_y; ++j) dyt[j] = dy(ti, j);
            const DenseMatrix dut =
                cf[ti].B.transposed() * lam + cf[ti].D.transposed() * dyt;
            for (std::size_t j = 0; j < n_u; ++j) du(ti, j) = dut[j];
            lam = cf[ti].A.transposed() * lam + cf[ti].C.transposed() * dyt;
        }
        return du;
    }
};

inline double frob2(const DenseMatrix& a) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * a[k];
    return s;
}

}  // namespace detail

/// Worst observed ratio sqrt(sum ||dy||^2 / sum ||du||^2) over probe pairs
/// sharing the initial state and scheduling: random input pairs, per-channel
/// impulses, and (for state-space models) a power iteration on the exact
/// input-to-output increment operator at frozen scheduling. Returns +infinity
/// when a probe trips the state guard.
template <typename Model>
double empirical_gain(const Model& m, std::size_t trials, std::size_t T, std::uint64_t seed,
                      const DenseMatrix& p_lo = {}, const DenseMatrix& p_hi = {},
                      double u_amp = 1.0) {
    const auto [lo, hi] = detail::default_box(p_lo, p_hi, m.dims.n_p);
    DenseMatrix ulo(m.dims.n_u, 1), uhi(m.dims.n_u, 1);
    for (std::size_t j = 0; j < m.dims.n_u; ++j) {
        ulo[j] = -u_amp;
        uhi[j] = u_amp;
    }
    constexpr bool is_ss = std::is_same_v<Model, LpvSsModel>;
    double worst = 0.0;

    auto ratio_of = [&](const DenseMatrix& x0, const DenseMatrix& ua, const DenseMatrix& ub,
                        const DenseMatrix& p) {
        const double den = detail::frob2(ua - ub);
        if (den < 1e-30) return 0.0;
        try {
            DenseMatrix ya, yb;
            if constexpr (is_ss) {
                ya = simulate(m, x0, ua, p).y;
                yb = simulate(m, x0, ub, p).y;
            } else {
                ya = simulate_lfr(m, x0, ua, p).y;
                yb = simulate_lfr(m, x0, ub, p).y;
            }
            return std::sqrt(detail::frob2(ya - yb) / den);
        } catch (const NonFiniteState&) {
            return std::numeric_limits<double>::infinity();
        }
    };

    for (std::size_t trial = 0; trial < trials; ++trial) {
        Rng rng(derive_seed(seed, 0xA11CE + trial));
        const DenseMatrix p = detail::random_steps(rng, T, lo, hi);
        DenseMatrix x0(m.dims.n_x, 1);
        for (std::size_t k = 0; k < m.dims.n_x; ++k) x0[k] = rng.uniform(-1.0, 1.0);
        const DenseMatrix ua = detail::random_steps(rng, T, ulo, uhi);
        const DenseMatrix ub = detail::random_steps(rng, T, ulo, uhi);
        worst = std::max(worst, ratio_of(x0, ua, ub, p));
    }

    // per-channel impulse differences on a random baseline
    {
        Rng rng(derive_seed(seed, 0x1BEA7));
        const DenseMatrix p = detail::random_steps(rng, T, lo, hi);
        DenseMatrix x0(m.dims.n_x, 1);
        for (std::size_t k = 0; k < m.dims.n_x; ++k) x0[k] = rng.uniform(-1.0, 1.0);
        const DenseMatrix ub = detail::random_steps(rng, T, ulo, uhi);
        for (std::size_t j = 0; j < m.dims.n_u; ++j) {
            DenseMatrix ua = ub;
            ua(0, j) += u_amp;
            worst = std::max(worst, ratio_of(x0, ua, ub, p));
        }
    }

    if constexpr (is_ss) {
        // power iteration on the exact increment operator at frozen scheduling
        const std::size_t probes = std::max<std::size_t>(1, trials / 20);
        for (std::size_t probe = 0; probe < probes; ++probe) {
            Rng rng(derive_seed(seed, 0x90A37 + probe));
            detail::IncrementMap L;
            L.n_x = m.dims.n_x;
            L.n_u = m.dims.n_u;
            L.n_y = m.dims.n_y;
            const DenseMatrix p = detail::random_steps(rng, T, lo, hi);
            L.cf.reserve(T);
            for (std::size_t t = 0; t < T; ++t) {
                DenseMatrix pt(m.dims.n_p, 1);
                for (std::size_t j = 0; j < m.dims.n_p; ++j) pt[j] = p(t, j);
                L.cf.push_back(assemble_coeffs(m, pt));
            }
            DenseMatrix z = detail::random_steps(rng, T, ulo, uhi);
            double sigma = 0.0;
            for (int it = 0; it < 30; ++it) {
                const double zn = std::sqrt(detail::frob2(z));
                if (zn < 1e-300) break;
                for (std::size_t k = 0; k < z.size(); ++k) z[k] /= zn;
                const DenseMatrix w = L.forward(z);
                sigma = std::sqrt(detail::frob2(w));
                z = L.adjoint(w);
            }
            worst = std::max(worst, sigma);
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Full certification runs and report emission
// ---------------------------------------------------------------------------

struct ProbeConfig {
    std::size_t lmi_samples = 1000;
    std::size_t trials = 100;
    std::size_t T = 200;
    double u_amp = 1.0;
    double slope_tol = 1e-3;  // fitted decay rate may exceed log(alpha) by this
    double gain_tol = 1e-9;   // observed gain may exceed gamma by this
    DenseMatrix p_lo, p_hi;   // empty = [-1, 1]^n_p
    std::uint64_t seed = 0;
};

/// LMI sampling plus the matching empirical probe, merged into one verdict.
inline CertReport certify(const LpvSsModel& m, CertProperty property, const ProbeConfig& cfg) {
    const auto [lo, hi] = detail::default_box(cfg.p_lo, cfg.p_hi, m.dims.n_p);
    const auto samples = sample_box(cfg.lmi_samples, lo, hi, derive_seed(cfg.seed, 0x5A));
    CertReport r;
    if (property == CertProperty::contraction) {
        r = check_contraction_lmi(m, samples);
        const double alpha = m.variant == SsVariant::contracting ? model_alpha(m) : 1.0;
        const double slope =
            empirical_contraction(m, cfg.trials, cfg.T, derive_seed(cfg.seed, 0xEC), lo, hi);
        merge_empirical(r, slope, std::log(alpha), cfg.slope_tol);
    } else {
        r = check_lipschitz_lmi(m, samples, m.gamma);
        const double gain = empirical_gain(m, cfg.trials, cfg.T, derive_seed(cfg.seed, 0xE6), lo,
                                           hi, cfg.u_amp);
        merge_empirical(r, gain, m.gamma, cfg.gain_tol);
    }
    r.seed = cfg.seed;
    return r;
}

inline std::string to_text(const CertReport& r) {
    char buf[512];
    const char* metric = r.property == CertProperty::contraction
                             ? "fitted decay slope"
                             : "worst observed gain";
    const char* bound = r.property == CertProperty::contraction ? "log rate bound" : "gain bound";
    std::snprintf(buf, sizeof(buf),
                  "sampled certificate: %s | scheduling samples=%zu | min LMI eigenvalue=%.6g | "
                  "%s=%.6g (%s %.6g, tolerance %.3g) | seed=%llu | %s",
                  property_name(r.property), r.samples, r.min_lmi_eig, metric, r.empirical, bound,
                  r.bound, r.tolerance, static_cast<unsigned long long>(r.seed),
                  r.pass ? "PASS" : "FAIL");
    return std::string(buf);
}

inline void write_cert_csv(const CertReport& r, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "property,samples,min_lmi_eig,empirical,bound,tolerance,pass,seed\n";
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%s,%zu,%.17g,%.17g,%.17g,%.17g,%d,%llu\n",
                  property_name(r.property), r.samples, r.min_lmi_eig, r.empirical, r.bound,
                  r.tolerance, r.pass ? 1 : 0, static_cast<unsigned long long>(r.seed));
    f << buf;
    if (!f) throw IoError("write failed: " + path);
}

}  // namespace lpvss
