// lpv — command-line front end for the LPV state-space learning library.
//
// Subcommands:
//   generate   synthesize the benchmark data-sets (CSV directories)
//   train      fit a model variant to a data-set directory
//   verify     sample the stability/gain certificate of a saved model
//   eval       score a saved model on a data-set (NRMSe per trajectory)
//   trace      dump one simulated trajectory next to the measured output
//
// Flag precedence: command-line flag > config file (--config, key = value
// lines with one [section] per subcommand) > environment (LPV_SEED) >
// built-in default.  Exit codes: 0 success, 1 runtime failure (including a
// failed certificate check and training divergence), 2 usage error.
//
// Everything runs single-threaded, so every command is bitwise reproducible
// given its flags and seed; --serial is accepted for script compatibility.

#include <CLI11.hpp>

#include <lpvss/bench.hpp>
#include <lpvss/verify.hpp>

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

namespace {

using namespace lpvss;

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct GenerateOpts {
    std::string set = "all";
    std::string out;
    std::uint64_t seed = 0;
};

int run_generate(const GenerateOpts& o) {
    std::vector<DatasetName> names;
    if (o.set == "all")
        names = {DatasetName::training, DatasetName::validation, DatasetName::test_a,
                 DatasetName::test_b};
    else
        names = {dataset_name_from(o.set)};
    for (const DatasetName name : names) {
        // Each set draws from its own stream derived from (seed, set), so
        // sets that share T and signal ranges never share trajectories.
        const std::uint64_t ds_seed =
            derive_seed(o.seed, 0xD5E7u + static_cast<std::uint64_t>(name));
        const Dataset ds = generate_dataset(name, ds_seed);
        const std::string dir = o.out + "/" + dataset_name_str(name);
        save_dataset(ds, dir);
        std::printf("wrote %s: %zu trajectories of length %zu\n", dir.c_str(), ds.trajs.size(),
                    ds.spec.T);
    }
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
    std::string variant = "lipschitz";
    double gamma = 1.0;
    std::string data;
    std::string val;
    std::string out;
    std::size_t epochs = 20;
    double lr = 1e-2;
    std::uint64_t seed = 0;
    std::string scale = "paper";
    std::size_t nx = 3;
    std::string checkpoints;
};

template <typename Model>
int train_and_save(Model& model, const TrajSet& train_set, const TrajSet& val_set,
                   const TrainOpts& o) {
    TrainConfig cfg;
    cfg.lr = o.lr;
    cfg.epochs = o.epochs;
    cfg.seed = o.seed;
    cfg.checkpoint_dir = o.checkpoints;
    const std::string report_path = o.out + ".train.csv";

    TrainReport partial;
    const std::function<void(const Model&, const EpochStats&)> on_epoch =
        [](const Model&, const EpochStats& st) {
            std::printf("epoch %3zu  train %.6g  val %.6g  lmi margin %.3g\n", st.epoch,
                        st.train_loss, st.val_loss, st.lmi_margin_direct);
            std::fflush(stdout);
        };
    try {
        const TrainReport rep = train(model, train_set, val_set, cfg, on_epoch, &partial);
        save_model(model, o.out);
        write_train_report_csv(rep, report_path);
        if (rep.best_epoch > 0)
            std::printf("kept epoch %zu parameters (validation loss %.6g)\n", rep.best_epoch,
                        rep.best_val);
        std::printf("wrote %s and %s\n", o.out.c_str(), report_path.c_str());
        return 0;
    } catch (const NonFiniteState& e) {
        write_train_report_csv(partial, report_path);
        std::fprintf(stderr, "training diverged (non-finite state) at epoch %zu: %s\n",
                     partial.aborted_epoch, e.what());
        std::fprintf(stderr, "partial report written to %s; no model file emitted\n",
                     report_path.c_str());
        return 1;
    }
}

int run_train(const TrainOpts& o) {
    const Dataset train_ds = load_dataset(o.data);
    TrajSet train_set = train_ds.trajs;
    TrajSet val_set;
    if (!o.val.empty()) val_set = load_dataset(o.val).trajs;
    if (o.scale == "desk") {
        if (train_set.size() > 128) train_set.resize(128);
        if (val_set.size() > 64) val_set.resize(64);
    }
    if (train_set.empty()) throw Error("train: data-set is empty");

    SsDims dims;
    dims.n_x = o.nx;
    dims.n_u = train_set[0].u.cols();
    dims.n_y = train_set[0].y.cols();
    dims.n_p = train_set[0].p.cols();

    std::printf("training %s model: n_x=%zu n_u=%zu n_y=%zu n_p=%zu, %zu train / %zu val "
                "trajectories, %zu epochs\n",
                o.variant.c_str(), dims.n_x, dims.n_u, dims.n_y, dims.n_p, train_set.size(),
                val_set.size(), o.epochs);

    if (o.variant == "lfr") {
        LpvLfrModel m = make_lpv_lfr(dims, o.seed, 100);
        return train_and_save(m, train_set, val_set, o);
    }
    const SsVariant v =
        o.variant == "contracting" ? SsVariant::contracting : SsVariant::lipschitz;
    LpvSsModel m = make_lpv_ss(v, dims, MapKind::mlp_per_component, o.seed, o.gamma, 1e-2,
                               {50, 50});
    return train_and_save(m, train_set, val_set, o);
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct VerifyOpts {
    std::string model;
    std::string property = "contraction";
    std::size_t samples = 1000;
    std::uint64_t seed = 0;
    std::string out;
};

int run_verify(const VerifyOpts& o) {
    const LoadedModel lm = load_model(o.model);
    if (!std::holds_alternative<LpvSsModel>(lm)) {
        std::fprintf(stderr,
                     "error: the unconstrained baseline carries no certificate to verify\n");
        return 1;
    }
    const auto& m = std::get<LpvSsModel>(lm);
    ProbeConfig cfg;
    cfg.lmi_samples = o.samples;
    cfg.seed = o.seed;
    const CertProperty prop =
        o.property == "contraction" ? CertProperty::contraction : CertProperty::lipschitz;
    const CertReport r = certify(m, prop, cfg);
    std::printf("%s\n", to_text(r).c_str());
    if (!o.out.empty()) write_cert_csv(r, o.out);
    return r.pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOpts {
    std::string model;
    std::string data;
    std::string out;
    std::uint64_t seed = 0;
};

int run_eval(const EvalOpts& o) {
    const LoadedModel lm = load_model(o.model);
    const Dataset ds = load_dataset(o.data);
    const EvalResult r =
        std::visit([&](const auto& m) { return evaluate(m, ds, o.seed); }, lm);
    write_eval_csv(r, o.out);
    std::printf("mean NRMSe %.6g over %zu trajectories, written to %s\n", r.mean,
                r.per_traj.size(), o.out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// trace
// ---------------------------------------------------------------------------

struct TraceOpts {
    std::string model;
    std::string data;
    std::size_t traj = 0;
    std::string out;
};

bool all_finite(const DenseMatrix& m) {
    for (std::size_t k = 0; k < m.size(); ++k)
        if (!std::isfinite(m[k])) return false;
    return true;
}

DenseMatrix row_as_col(const DenseMatrix& m, std::size_t t) {
    DenseMatrix out(m.cols(), 1);
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, 0) = m(t, j);
    return out;
}

// Writes one CSV row per simulated step: t, the measured output, the model
// output.  On a non-finite state the finite prefix is kept and a marker line
// "NonFiniteState at t=K" ends the file.
template <typename Model>
void trace_csv(const Model& m, const Trajectory& tr, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    const std::size_t n_y = m.dims.n_y;
    f << "t";
    if (n_y == 1) {
        f << ",y_data,y_model";
    } else {
        for (std::size_t j = 0; j < n_y; ++j) f << ",y_data_" << (j + 1);
        for (std::size_t j = 0; j < n_y; ++j) f << ",y_model_" << (j + 1);
    }
    f << "\n";

    const std::size_t T = tr.u.rows();
    DenseMatrix x(m.dims.n_x, 1);  // trace starts from the origin
    char buf[64];
    for (std::size_t t = 0; t < T; ++t) {
        const DenseMatrix u = row_as_col(tr.u, t);
        const DenseMatrix p = row_as_col(tr.p, t);
        DenseMatrix y;
        if constexpr (std::is_same_v<Model, LpvLfrModel>) {
            const DenseMatrix A = affine_at(m.A, p), B_w = affine_at(m.B_w, p);
            const DenseMatrix B_u = affine_at(m.B_u, p), C_z = affine_at(m.C_z, p);
            const DenseMatrix D_zu = affine_at(m.D_zu, p), C_y = affine_at(m.C_y, p);
            const DenseMatrix D_yw = affine_at(m.D_yw, p), D_yu = affine_at(m.D_yu, p);
            const DenseMatrix b_x = affine_at(m.b_x, p), b_z = affine_at(m.b_z, p);
            const DenseMatrix b_y = affine_at(m.b_y, p);
            DenseMatrix w = C_z * x + D_zu * u + b_z;
            for (std::size_t k = 0; k < w.size(); ++k) w[k] = std::max(0.0, w[k]);
            y = C_y * x + D_yw * w + D_yu * u + b_y;
            if (!all_finite(x) || !all_finite(y)) {
                f << "NonFiniteState at t=" << t << "\n";
                std::fprintf(stderr, "warning: state became non-finite at t=%zu\n", t);
                return;
            }
            x = A * x + B_w * w + B_u * u + b_x;
        } else {
            const Coeffs c = assemble_coeffs(m, p);
            y = c.C * x + c.D * u + c.b_y;
            if (!all_finite(x) || !all_finite(y)) {
                f << "NonFiniteState at t=" << t << "\n";
                std::fprintf(stderr, "warning: state became non-finite at t=%zu\n", t);
                return;
            }
            x = c.A * x + c.B * u + c.b_x;
        }
        f << t;
        for (std::size_t j = 0; j < n_y; ++j) {
            std::snprintf(buf, sizeof(buf), ",%.17g", tr.y(t, j));
            f << buf;
        }
        for (std::size_t j = 0; j < n_y; ++j) {
            std::snprintf(buf, sizeof(buf), ",%.17g", y(j, 0));
            f << buf;
        }
        f << "\n";
    }
    if (!f) throw IoError("write failed: " + path);
}

int run_trace(const TraceOpts& o) {
    const LoadedModel lm = load_model(o.model);
    const Dataset ds = load_dataset(o.data);
    if (o.traj >= ds.trajs.size()) {
        std::fprintf(stderr, "error: --traj %zu out of range (data-set has %zu trajectories)\n",
                     o.traj, ds.trajs.size());
        return 1;
    }
    const Trajectory& tr = ds.trajs[o.traj];
    std::visit([&](const auto& m) { trace_csv(m, tr, o.out); }, lm);
    std::printf("wrote %s\n", o.out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "lpv — learn and check linear parameter-varying state-space models\n"
        "with built-in contraction or incremental-gain guarantees."};
    app.require_subcommand(1);
    app.set_config("--config", "", "config file of key = value lines ([section] per subcommand)");
    bool serial = false;
    app.add_flag("--serial", serial,
                 "single-threaded bitwise-reproducible mode (always on in this build)");

    GenerateOpts g;
    auto* gen = app.add_subcommand("generate", "synthesize the benchmark data-sets");
    gen->add_option("--set", g.set, "which set to write")
        ->check(CLI::IsMember({"training", "validation", "test-a", "test-b", "all"}))
        ->capture_default_str();
    gen->add_option("--out", g.out, "output directory (one sub-directory per set)")->required();
    gen->add_option("--seed", g.seed, "base seed; each set derives its own stream")
        ->envname("LPV_SEED")
        ->capture_default_str();

    TrainOpts t;
    auto* trn = app.add_subcommand("train", "fit a model to a data-set directory");
    trn->add_option("--variant", t.variant, "model family to fit")
        ->check(CLI::IsMember({"lipschitz", "contracting", "lfr"}))
        ->capture_default_str();
    trn->add_option("--gamma", t.gamma, "incremental-gain bound for the lipschitz variant")
        ->capture_default_str();
    trn->add_option("--data", t.data, "training data-set directory")->required();
    trn->add_option("--val", t.val, "validation data-set directory (best epoch is kept)");
    trn->add_option("--out", t.out, "model file to write (report goes to <out>.train.csv)")
        ->required();
    trn->add_option("--epochs", t.epochs, "training epochs (0 writes the initialized model)")
        ->capture_default_str();
    trn->add_option("--lr", t.lr, "Adam learning rate")->capture_default_str();
    trn->add_option("--seed", t.seed, "seed for the model init and every training stream")
        ->envname("LPV_SEED")
        ->capture_default_str();
    trn->add_option("--scale", t.scale, "desk truncates to 128 train / 64 val trajectories")
        ->check(CLI::IsMember({"paper", "desk"}))
        ->capture_default_str();
    trn->add_option("--nx", t.nx, "model state dimension")->capture_default_str();
    trn->add_option("--checkpoints", t.checkpoints,
                    "directory for per-epoch model snapshots (optional)");

    VerifyOpts v;
    auto* ver = app.add_subcommand("verify", "sample the certificate of a saved model");
    ver->add_option("--model", v.model, "model file")->required();
    ver->add_option("--property", v.property, "which guarantee to check")
        ->check(CLI::IsMember({"contraction", "lipschitz"}))
        ->capture_default_str();
    ver->add_option("--samples", v.samples, "number of scheduling samples for the LMI check")
        ->capture_default_str();
    ver->add_option("--seed", v.seed, "seed for sampling and empirical probes")
        ->envname("LPV_SEED")
        ->capture_default_str();
    ver->add_option("--out", v.out, "optional CSV report path");

    EvalOpts e;
    auto* evl = app.add_subcommand("eval", "score a model on a data-set (NRMSe)");
    evl->add_option("--model", e.model, "model file")->required();
    evl->add_option("--data", e.data, "data-set directory")->required();
    evl->add_option("--out", e.out, "CSV output (trajectory,nrmse rows plus mean)")->required();
    evl->add_option("--seed", e.seed, "seed for the per-trajectory initial states")
        ->envname("LPV_SEED")
        ->capture_default_str();

    TraceOpts tr;
    auto* trc = app.add_subcommand("trace", "dump one simulated trajectory as CSV");
    trc->add_option("--model", tr.model, "model file")->required();
    trc->add_option("--data", tr.data, "data-set directory")->required();
    trc->add_option("--traj", tr.traj, "trajectory index within the data-set")
        ->capture_default_str();
    trc->add_option("--out", tr.out, "CSV output (t, measured output, model output)")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::CallForAllHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::CallForVersion& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        app.exit(ex);  // prints the message
        return 2;      // usage errors map to exit code 2
    }

    try {
        if (*gen) return run_generate(g);
        if (*trn) return run_train(t);
        if (*ver) return run_verify(v);
        if (*evl) return run_eval(e);
        if (*trc) return run_trace(tr);
    } catch (const Error& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    }
    return 0;
}
