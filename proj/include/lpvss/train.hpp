#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "lpvss/model.hpp"

namespace lpvss {

/// One recorded trajectory: u is T x n_u, p is T x n_p, y is T x n_y.
struct Trajectory {
    DenseMatrix u, p, y;
};
using TrajSet = std::vector<Trajectory>;

enum class X0Policy : std::uint8_t { zero = 0, random_uniform = 1 };

struct TrainConfig {
    double lr = 1e-2;
    std::size_t epochs = 20;
    std::size_t batch = 0;  // 0 = full batch (one optimizer step per epoch)
    std::size_t skip = 10;  // burn-in: loss counts t in [skip, T)
    double beta1 = 0.9, beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    X0Policy x0_policy = X0Policy::random_uniform;
    std::size_t lmi_check_samples = 100;  // fresh scheduling draws per epoch (constrained only)
    DenseMatrix p_lo, p_hi;  // scheduling box for the epoch checks; empty = train-set hull
    std::string checkpoint_dir;  // when set, saves the model after every epoch
};

// ---------------------------------------------------------------------------
// Simulation-error loss
// ---------------------------------------------------------------------------

namespace detail {
// Uniform simulate entry so the training loop is one template for both kinds.
template <typename Ctx>
SimTraj<Ctx> sim_any_t(Ctx& ctx, const LpvSsModel& m, const BoundParams<Ctx>& bp,
                       const DenseMatrix& x0, const DenseMatrix& u, const DenseMatrix& p) {
    return simulate_t(ctx, m, bp, x0, u, p);
}
template <typename Ctx>
SimTraj<Ctx> sim_any_t(Ctx& ctx, const LpvLfrModel& m, const BoundParams<Ctx>& bp,
                       const DenseMatrix& x0, const DenseMatrix& u, const DenseMatrix& p) {
    return simulate_lfr_t(ctx, m, bp, x0, u, p);
}
}  // namespace detail

/// Mean over t in [skip, T) of ||y_data_t - y_model_t||^2 for one trajectory.
template <typename Ctx, typename Model>
typename Ctx::V sim_loss_traj_t(Ctx& ctx, const Model& m, const BoundParams<Ctx>& bp,
                                const Trajectory& traj, std::size_t skip, const DenseMatrix& x0) {
    const std::size_t T = traj.u.rows();
    if (skip >= T) throw Error("sim_loss: burn-in skip must be below the trajectory length");
    const auto sim = detail::sim_any_t(ctx, m, bp, x0, traj.u, traj.p);
    typename Ctx::V acc = ctx.constant(DenseMatrix::zeros(1, 1));
    for (std::size_t t = skip; t < T; ++t) {
        const auto ref = ctx.constant(traj.y.block(t, t + 1, 0, traj.y.cols()).transposed());
        const auto res = ctx.sub(sim.y[t], ref);
        acc = ctx.add(acc, ctx.sum(ctx.hadamard(res, res)));
    }
    return ctx.scale(acc, 1.0 / static_cast<double>(T - skip));
}

/// Batch loss on one context: mean over trajectories of sim_loss_traj.
/// (Training itself uses one tape per trajectory; this entry point is the
/// reference definition and the numeric evaluator.)
template <typename Ctx, typename Model>
typename Ctx::V sim_loss_t(Ctx& ctx, const Model& m, const BoundParams<Ctx>& bp,
                           const TrajSet& batch, std::size_t skip,
                           const std::vector<DenseMatrix>& x0s) {
    if (batch.empty()) throw Error("sim_loss: empty batch");
    if (x0s.size() != batch.size()) throw ShapeMismatch("sim_loss: one x0 per trajectory");
    typename Ctx::V acc = ctx.constant(DenseMatrix::zeros(1, 1));
    for (std::size_t i = 0; i < batch.size(); ++i)
        acc = ctx.add(acc, sim_loss_traj_t(ctx, m, bp, batch[i], skip, x0s[i]));
    return ctx.scale(acc, 1.0 / static_cast<double>(batch.size()));
}

template <typename Model>
double sim_loss(const Model& m, const TrajSet& batch, std::size_t skip,
                const std::vector<DenseMatrix>& x0s) {
    NumericCtx ctx;
    const auto bp = bind_numeric(m);
    return ctx.scalar_value(sim_loss_t(ctx, m, bp, batch, skip, x0s));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<DenseMatrix> m1, m2;  // first/second moment, aligned with enumerate order
    std::size_t step = 0;
};

template <typename Model>
AdamState make_adam_state(const Model& model) {
    AdamState s;
    enumerate_params(model, [&](const DenseMatrix& p) {
        s.m1.emplace_back(p.rows(), p.cols());
        s.m2.emplace_back(p.rows(), p.cols());
    });
    return s;
}

/// Standard bias-corrected Adam update applied to the model parameters in
/// enumerate order. grads must be aligned with that order.
template <typename Model>
void adam_step(Model& model, const std::vector<DenseMatrix>& grads, AdamState& state,
               const TrainConfig& cfg) {
    std::size_t i = 0;
    state.step += 1;
    const double b1t = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double b2t = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    enumerate_params(model, [&](DenseMatrix& p) {
        if (i >= grads.size()) throw ShapeMismatch("adam_step: gradient list too short");
        const DenseMatrix& g = grads[i];
        if (g.rows() != p.rows() || g.cols() != p.cols())
            throw ShapeMismatch("adam_step: gradient shape mismatch");
        DenseMatrix& m1 = state.m1[i];
        DenseMatrix& m2 = state.m2[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m1[k] = cfg.beta1 * m1[k] + (1.0 - cfg.beta1) * g[k];
            m2[k] = cfg.beta2 * m2[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            const double mhat = m1[k] / b1t;
            const double vhat = m2[k] / b2t;
            p[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
        ++i;
    });
    if (i != grads.size()) throw ShapeMismatch("adam_step: gradient list too long");
}

/// Deterministic pairwise reduction of per-trajectory gradient lists. The
/// reduction tree depends only on the list length, so the merged sums are
/// bitwise identical however the per-trajectory results were produced.
inline std::vector<DenseMatrix> pairwise_merge(std::vector<std::vector<DenseMatrix>> parts) {
    if (parts.empty()) throw Error("pairwise_merge: nothing to merge");
    while (parts.size() > 1) {
        std::vector<std::vector<DenseMatrix>> next;
        for (std::size_t i = 0; i + 1 < parts.size(); i += 2) {
            auto merged = std::move(parts[i]);
            const auto& other = parts[i + 1];
            if (merged.size() != other.size()) throw ShapeMismatch("pairwise_merge: ragged parts");
            for (std::size_t k = 0; k < merged.size(); ++k) merged[k] = merged[k] + other[k];
            next.push_back(std::move(merged));
        }
        if (parts.size() % 2 == 1) next.push_back(std::move(parts.back()));
        parts = std::move(next);
    }
    return std::move(parts.front());
}

// ---------------------------------------------------------------------------
// NRMSe
// ---------------------------------------------------------------------------

/// Mean over channels of RMS(error) / population-std(true channel).
/// The std convention (divide by T, not T-1) makes "predict the channel
/// mean" score exactly 1.
inline double nrmse(const DenseMatrix& ytrue, const DenseMatrix& ypred) {
    require_same_shape(ytrue, ypred, "nrmse");
    const std::size_t T = ytrue.rows(), C = ytrue.cols();
    if (T == 0 || C == 0) throw ShapeMismatch("nrmse: empty trajectories");
    double acc = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
        double mean = 0.0;
        for (std::size_t t = 0; t < T; ++t) mean += ytrue(t, j);
        mean /= static_cast<double>(T);
        double var = 0.0, mse = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            const double c = ytrue(t, j) - mean;
            const double e = ytrue(t, j) - ypred(t, j);
            var += c * c;
            mse += e * e;
        }
        var /= static_cast<double>(T);
        mse /= static_cast<double>(T);
        const double sd = std::sqrt(var);
        if (sd < 1e-12)
            throw DegenerateReference("nrmse: reference channel " + std::to_string(j) +
                                      " is (near-)constant");
        acc += std::sqrt(mse) / sd;
    }
    return acc / static_cast<double>(C);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = std::numeric_limits<double>::quiet_NaN();
    double val_loss = std::numeric_limits<double>::quiet_NaN();
    double wall_ms = 0.0;
    // certificate margins on fresh scheduling samples (constrained variants)
    double lmi_margin_direct = std::numeric_limits<double>::quiet_NaN();
    double lmi_margin_congruence = std::numeric_limits<double>::quiet_NaN();
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    std::size_t best_epoch = 0;  // 1-based; 0 = no epoch ran
    double best_val = std::numeric_limits<double>::infinity();
    bool aborted = false;
    std::size_t aborted_epoch = 0;
};

inline void write_train_report_csv(const TrainReport& r, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "epoch,train_loss,val_loss,wall_ms\n";
    char buf[160];
    for (const auto& e : r.epochs) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss,
                      e.val_loss, e.wall_ms);
        f << buf;
    }
    if (!f) throw IoError("write failed: " + path);
}

namespace detail {

inline std::pair<DenseMatrix, DenseMatrix> scheduling_hull(const TrajSet& set, std::size_t n_p) {
    DenseMatrix lo(n_p, 1), hi(n_p, 1);
    bool first = true;
    for (const auto& tr : set)
        for (std::size_t t = 0; t < tr.p.rows(); ++t)
            for (std::size_t j = 0; j < n_p; ++j) {
                const double v = tr.p(t, j);
                if (first || v < lo[j]) lo[j] = v;
                if (first || v > hi[j]) hi[j] = v;
                first = false;
            }
    if (first) {
        lo = DenseMatrix::zeros(n_p, 1);
        hi = DenseMatrix::zeros(n_p, 1);
    }
    return {lo, hi};
}

/// Certificate margins at freshly sampled scheduling points. Returns
/// {direct LMI min-eig, congruence margin}; NaNs for unconstrained models.
inline std::pair<double, double> epoch_lmi_margins(const LpvSsModel& m, const DenseMatrix& lo,
                                                   const DenseMatrix& hi, std::size_t samples,
                                                   std::uint64_t seed) {
    if (!m.constrained() || samples == 0)
        return {std::numeric_limits<double>::quiet_NaN(),
                std::numeric_limits<double>::quiet_NaN()};
    Rng rng(seed);
    NumericCtx ctx;
    const auto bp = bind_numeric(m);
    double worst_direct = std::numeric_limits<double>::infinity();
    double worst_cong = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < samples; ++s) {
        DenseMatrix p(m.dims.n_p, 1);
        for (std::size_t j = 0; j < p.size(); ++j) p[j] = rng.uniform(lo[j], hi[j]);
        if (m.variant == SsVariant::contracting) {
            const auto a = assemble_A_t(ctx, m, bp, p);
            const DenseMatrix xcal = xcal_of(a.Q, a.lam);
            worst_direct = std::min(
                worst_direct, min_eigenvalue(contraction_lmi(a.A, xcal, model_alpha(m))));
            worst_cong = std::min(worst_cong, unit_ball_margin(a.M));
        } else {
            const auto w = assemble_W_t(ctx, m, bp, p);
            const DenseMatrix xcal = xcal_of(w.Q, w.lam);
            worst_direct =
                std::min(worst_direct, min_eigenvalue(lipschitz_lmi(w.W, xcal, m.gamma, m.dims.n_x)));
            worst_cong = std::min(worst_cong, unit_ball_margin(w.M));
        }
    }
    return {worst_direct, worst_cong};
}

inline std::pair<double, double> epoch_lmi_margins(const LpvLfrModel&, const DenseMatrix&,
                                                   const DenseMatrix&, std::size_t,
                                                   std::uint64_t) {
    return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
}

template <typename Model>
std::vector<DenseMatrix> snapshot_params(const Model& m) {
    std::vector<DenseMatrix> out;
    enumerate_params(m, [&](const DenseMatrix& p) { out.push_back(p); });
    return out;
}

template <typename Model>
void restore_params(Model& m, const std::vector<DenseMatrix>& snap) {
    std::size_t i = 0;
    enumerate_params(m, [&](DenseMatrix& p) { p = snap.at(i++); });
}

inline DenseMatrix draw_x0(X0Policy policy, std::size_t n_x, std::uint64_t seed) {
    DenseMatrix x0(n_x, 1);
    if (policy == X0Policy::random_uniform) {
        Rng rng(seed);
        for (std::size_t k = 0; k < n_x; ++k) x0[k] = rng.uniform(-1.0, 1.0);
    }
    return x0;
}

}  // namespace detail

/// Train with Adam on the simulation-error loss. Deterministic for a fixed
/// seed (the loop is serial; gradients merge through a fixed pairwise tree).
/// Initial states are drawn per trajectory per epoch from the configured
/// policy; validation always uses zero initial states so its loss is
/// comparable across epochs. The best-validation parameters are restored
/// at the end. On NonFiniteState (unconstrained models can blow up) the
/// partial report is written to report_out before the error propagates.
template <typename Model>
TrainReport train(Model& model, const TrajSet& train_set, const TrajSet& val_set,
                  const TrainConfig& cfg,
                  const std::function<void(const Model&, const EpochStats&)>& on_epoch = {},
                  TrainReport* report_out = nullptr) {
    TrainReport report;
    if (train_set.empty()) throw Error("train: empty training set");
    const std::size_t n_x = model.dims.n_x;
    for (const auto& tr : train_set)
        if (cfg.skip >= tr.u.rows()) throw Error("train: burn-in skip must be below T");

    auto [box_lo, box_hi] = cfg.p_lo.size() == model.dims.n_p && cfg.p_hi.size() == model.dims.n_p
                                ? std::pair{cfg.p_lo, cfg.p_hi}
                                : detail::scheduling_hull(train_set, model.dims.n_p);

    AdamState adam = make_adam_state(model);
    std::vector<DenseMatrix> best_params = detail::snapshot_params(model);
    const std::vector<DenseMatrix> zero_x0(val_set.size(), DenseMatrix::zeros(n_x, 1));

    auto run_epoch = [&](std::size_t epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        // deterministic order; optional seed-derived shuffle for mini-batches
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        const std::size_t chunk = (cfg.batch == 0) ? train_set.size() : cfg.batch;
        if (cfg.batch != 0) {
            Rng shuffle_rng(derive_seed(cfg.seed, 0x51000003u + epoch));
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[shuffle_rng.index(i)]);
        }

        double epoch_loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += chunk) {
            const std::size_t end = std::min(order.size(), start + chunk);
            const double inv_n = 1.0 / static_cast<double>(end - start);
            std::vector<std::vector<DenseMatrix>> parts;
            double batch_loss = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t traj_idx = order[k];
                const DenseMatrix x0 = detail::draw_x0(
                    cfg.x0_policy, n_x, derive_seed(derive_seed(cfg.seed, epoch), traj_idx));
                ad::Tape tape;
                TapeCtx ctx(tape);
                const auto bp = bind_tape(model, tape);
                const auto traj_loss =
                    sim_loss_traj_t(ctx, model, bp, train_set[traj_idx], cfg.skip, x0);
                const auto scaled = ctx.scale(traj_loss, inv_n);
                batch_loss += ctx.scalar_value(scaled);
                const auto grads = tape.backward(scaled);
                std::vector<DenseMatrix> part;
                part.reserve(bp.vals.size());
                for (const auto& leaf : bp.vals) part.push_back(tape.grad_of(grads, leaf));
                parts.push_back(std::move(part));
            }
            adam_step(model, pairwise_merge(std::move(parts)), adam, cfg);
            epoch_loss_sum += batch_loss * static_cast<double>(end - start);
        }

        EpochStats st;
        st.epoch = epoch + 1;
        st.train_loss = epoch_loss_sum / static_cast<double>(order.size());
        if (!val_set.empty()) st.val_loss = sim_loss(model, val_set, cfg.skip, zero_x0);
        const auto [md, mc] = detail::epoch_lmi_margins(model, box_lo, box_hi,
                                                        cfg.lmi_check_samples,
                                                        derive_seed(cfg.seed, 0xC0DE + epoch));
        st.lmi_margin_direct = md;
        st.lmi_margin_congruence = mc;
        st.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                               t0)
                         .count();
        report.epochs.push_back(st);

        if (!val_set.empty() && st.val_loss < report.best_val) {
            report.best_val = st.val_loss;
            report.best_epoch = epoch + 1;
            best_params = detail::snapshot_params(model);
        }
        if (!cfg.checkpoint_dir.empty()) {
            char name[64];
            std::snprintf(name, sizeof(name), "/model_epoch_%03zu.bin", epoch + 1);
            save_model(model, cfg.checkpoint_dir + name);
        }
        if (on_epoch) on_epoch(model, st);
    };

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        try {
            run_epoch(epoch);
        } catch (const NonFiniteState&) {
            report.aborted = true;
            report.aborted_epoch = epoch + 1;
            if (report_out) *report_out = report;
            throw;
        }
    }

    if (!val_set.empty() && report.best_epoch > 0) {
        detail::restore_params(model, best_params);
    }
    if (report_out) *report_out = report;
    return report;
}

}  // namespace lpvss
