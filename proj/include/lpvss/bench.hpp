#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lpvss/train.hpp"

namespace lpvss {

// ---------------------------------------------------------------------------
// Data-generating system (three states, one input, three scheduling signals,
// one output; affine scheduling dependence; additive Gaussian output noise)
// ---------------------------------------------------------------------------

struct TrueSystem {
    AffineFamily A, B, C, D;  // mats[0] constant term, mats[1..3] scheduling terms
    double noise_std = 0.08;
    DenseMatrix p_lo{{-1.0}, {0.0}, {-2.0}};
    DenseMatrix p_hi{{1.0}, {4.0}, {2.0}};
};

inline TrueSystem true_system() {
    TrueSystem s;
    s.A.mats = {
        DenseMatrix{{-0.3885, -0.1912, 0.1631},
                    {0.3261, -0.2583, -0.9150},
                    {-0.1664, -0.1384, 0.0768}},
        DenseMatrix{{0.2650, -0.2214, -0.1866},
                    {0.1747, 0.1687, -0.5876},
                    {-0.0477, -0.1313, 0.2863}},
        DenseMatrix{{0.1476, 0.1390, 0.0901},
                    {-0.1242, 0.1903, 0.4027},
                    {0.0403, 0.0845, 0.0971}},
        DenseMatrix{{0.1613, -0.0998, -0.1652},
                    {0.0349, 0.0645, -0.1630},
                    {0.0098, -0.0529, 0.0591}},
    };
    s.B.mats = {
        DenseMatrix{{-3.4269}, {-0.3316}, {-2.1006}},
        DenseMatrix{{-1.1096}, {-0.8456}, {-0.5727}},
        DenseMatrix{{-0.5587}, {0.1784}, {-0.1969}},
        DenseMatrix::zeros(3, 1),
    };
    s.C.mats = {
        DenseMatrix{{-0.2097, 0.0607, 0.1421}},
        DenseMatrix::zeros(1, 3),
        DenseMatrix::zeros(1, 3),
        DenseMatrix::zeros(1, 3),
    };
    s.D.mats = {
        DenseMatrix{{0.3}},
        DenseMatrix{{0.01}},
        DenseMatrix{{0.0}},
        DenseMatrix{{0.04}},
    };
    return s;
}

inline DenseMatrix affine_at(const AffineFamily& f, const DenseMatrix& pcol) {
    if (f.mats.empty()) throw ShapeMismatch("affine_at: empty family");
    if (pcol.size() + 1 != f.mats.size())
        throw ShapeMismatch("affine_at: scheduling length does not match family");
    DenseMatrix out = f.mats[0];
    for (std::size_t i = 0; i < pcol.size(); ++i) out = out + pcol[i] * f.mats[1 + i];
    return out;
}

/// CRC32 of the system matrices in a fixed byte order; regression-pins the
/// transcription of the published entries.
inline std::uint32_t true_system_checksum() {
    const TrueSystem s = true_system();
    std::vector<unsigned char> bytes;
    auto put = [&](const DenseMatrix& m) {
        for (std::size_t k = 0; k < m.size(); ++k) {
            const auto b = std::bit_cast<std::array<unsigned char, 8>>(m[k]);
            bytes.insert(bytes.end(), b.begin(), b.end());
        }
    };
    for (const auto* fam : {&s.A, &s.B, &s.C, &s.D})
        for (const auto& m : fam->mats) put(m);
    return detail::crc32(bytes.data(), bytes.size());
}

struct TrueSimResult {
    DenseMatrix y_clean, y;  // T x 1; y = y_clean + noise
};

/// Forward simulation of the data-generating system from x0 = 0 with an
/// i.i.d. Gaussian output-noise stream drawn from noise_seed.
inline TrueSimResult simulate_true(const TrueSystem& s, const DenseMatrix& u, const DenseMatrix& p,
                                   std::uint64_t noise_seed, double noise_std) {
    if (u.cols() != 1 || p.cols() != 3 || u.rows() != p.rows())
        throw ShapeMismatch("simulate_true: expects u T x 1 and p T x 3");
    const std::size_t T = u.rows();
    TrueSimResult out;
    out.y_clean = DenseMatrix(T, 1);
    out.y = DenseMatrix(T, 1);
    Rng noise(noise_seed);
    DenseMatrix x = DenseMatrix::zeros(3, 1);
    for (std::size_t t = 0; t < T; ++t) {
        DenseMatrix pt(3, 1);
        for (std::size_t j = 0; j < 3; ++j) pt[j] = p(t, j);
        const DenseMatrix A = affine_at(s.A, pt), B = affine_at(s.B, pt);
        const DenseMatrix C = affine_at(s.C, pt), D = affine_at(s.D, pt);
        const DenseMatrix yt = C * x + D * u.block(t, t + 1, 0, 1);
        out.y_clean(t, 0) = yt(0, 0);
        out.y(t, 0) = yt(0, 0) + noise_std * noise.normal();
        x = A * x + B * u.block(t, t + 1, 0, 1);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Excitation signal
// ---------------------------------------------------------------------------

/// Multisine (n_sines components at f_k = k / (2 (n_sines + 1)) cycles per
/// sample, random phases) plus white Gaussian noise, affinely rescaled so the
/// sample min/max hit [lo, hi] exactly. Degenerate signals collapse to the
/// midpoint.
inline DenseMatrix excitation(std::size_t T, double lo, double hi, std::size_t n_sines,
                              double noise_var, std::uint64_t seed) {
    if (T == 0) throw Error("excitation: T must be at least 1");
    if (hi < lo) throw Error("excitation: empty range");
    Rng rng(seed);
    std::vector<double> phase(n_sines);
    for (auto& ph : phase) ph = rng.uniform(0.0, 6.283185307179586476925286766559);
    const double noise_std = std::sqrt(noise_var);
    DenseMatrix u(T, 1);
    for (std::size_t t = 0; t < T; ++t) {
        double v = 0.0;
        for (std::size_t k = 1; k <= n_sines; ++k) {
            const double f = static_cast<double>(k) / (2.0 * static_cast<double>(n_sines + 1));
            v += std::sin(6.283185307179586476925286766559 * f * static_cast<double>(t) +
                          phase[k - 1]);
        }
        if (noise_var > 0.0) v += noise_std * rng.normal();
        u(t, 0) = v;
    }
    double mn = u(0, 0), mx = u(0, 0);
    for (std::size_t t = 1; t < T; ++t) {
        mn = std::min(mn, u(t, 0));
        mx = std::max(mx, u(t, 0));
    }
    if (!(mx > mn)) {
        const double mid = 0.5 * (lo + hi);
        for (std::size_t t = 0; t < T; ++t) u(t, 0) = mid;
        return u;
    }
    for (std::size_t t = 0; t < T; ++t)
        u(t, 0) = lo + (u(t, 0) - mn) / (mx - mn) * (hi - lo);
    return u;
}

// ---------------------------------------------------------------------------
// Dataset synthesis
// ---------------------------------------------------------------------------

enum class DatasetName : std::uint8_t { training = 0, validation = 1, test_a = 2, test_b = 3 };

struct DatasetSpec {
    DatasetName name;
    std::size_t T, N_b;
    double u_min, u_max;
    double p_scale;  // scheduling box shrink factor about the box center
};

inline DatasetSpec dataset_spec(DatasetName name) {
    switch (name) {
        case DatasetName::training: return {name, 200, 3200, -1.0, 1.0, 0.3};
        case DatasetName::validation: return {name, 200, 1280, -1.0, 1.0, 0.3};
        case DatasetName::test_a: return {name, 200, 30, -1.0, 1.0, 0.3};
        case DatasetName::test_b: return {name, 6000, 1, -20.0, 20.0, 1.0};
    }
    throw Error("dataset_spec: unknown set");
}

inline const char* dataset_name_str(DatasetName name) {
    switch (name) {
        case DatasetName::training: return "training";
        case DatasetName::validation: return "validation";
        case DatasetName::test_a: return "test-a";
        case DatasetName::test_b: return "test-b";
    }
    throw Error("dataset_name_str: unknown set");
}

inline DatasetName dataset_name_from(const std::string& s) {
    if (s == "training") return DatasetName::training;
    if (s == "validation") return DatasetName::validation;
    if (s == "test-a") return DatasetName::test_a;
    if (s == "test-b") return DatasetName::test_b;
    throw Error("unknown data-set name: " + s);
}

struct Dataset {
    DatasetSpec spec;
    std::uint64_t seed = 0;
    double noise_var = 0.05;   // excitation noise variance
    double noise_std = 0.08;   // output noise standard deviation
    TrajSet trajs;
};

/// Scheduling box shrunk about its center by the given factor.
inline std::pair<DenseMatrix, DenseMatrix> scaled_box(const DenseMatrix& lo, const DenseMatrix& hi,
                                                      double scale) {
    DenseMatrix slo(lo.rows(), 1), shi(lo.rows(), 1);
    for (std::size_t j = 0; j < lo.size(); ++j) {
        const double c = 0.5 * (lo[j] + hi[j]);
        const double h = 0.5 * (hi[j] - lo[j]) * scale;
        slo[j] = c - h;
        shi[j] = c + h;
    }
    return {slo, shi};
}

/// Per-trajectory seeds derive from the dataset seed; slots 0, 1, 2 feed the
/// input phases/noise, the scheduling draws, and the output noise.
inline Dataset generate_dataset(DatasetName name, std::uint64_t seed,
                                double output_noise_std = 0.08) {
    const TrueSystem sys = true_system();
    Dataset ds;
    ds.spec = dataset_spec(name);
    ds.seed = seed;
    ds.noise_std = output_noise_std;
    const auto [plo, phi] = scaled_box(sys.p_lo, sys.p_hi, ds.spec.p_scale);
    ds.trajs.reserve(ds.spec.N_b);
    for (std::size_t i = 0; i < ds.spec.N_b; ++i) {
        const std::uint64_t traj_seed = derive_seed(seed, i);
        Trajectory tr;
        tr.u = excitation(ds.spec.T, ds.spec.u_min, ds.spec.u_max, 10, ds.noise_var,
                          derive_seed(traj_seed, 0));
        Rng prng(derive_seed(traj_seed, 1));
        tr.p = DenseMatrix(ds.spec.T, 3);
        for (std::size_t t = 0; t < ds.spec.T; ++t)
            for (std::size_t j = 0; j < 3; ++j) tr.p(t, j) = prng.uniform(plo[j], phi[j]);
        tr.y = simulate_true(sys, tr.u, tr.p, derive_seed(traj_seed, 2), output_noise_std).y;
        ds.trajs.push_back(std::move(tr));
    }
    return ds;
}

/// Empirical signal-to-noise ratio in dB between a noisy set and its
/// noise-free regeneration (same seed, zero output noise).
inline double empirical_snr_db(const Dataset& noisy, const Dataset& clean) {
    if (noisy.trajs.size() != clean.trajs.size()) throw ShapeMismatch("snr: set size mismatch");
    double sig = 0.0, noise = 0.0, mean = 0.0;
    std::size_t count = 0;
    for (const auto& tr : clean.trajs)
        for (std::size_t t = 0; t < tr.y.rows(); ++t) {
            mean += tr.y(t, 0);
            ++count;
        }
    mean /= static_cast<double>(count);
    for (std::size_t i = 0; i < clean.trajs.size(); ++i) {
        const auto& yc = clean.trajs[i].y;
        const auto& yn = noisy.trajs[i].y;
        require_same_shape(yc, yn, "snr");
        for (std::size_t t = 0; t < yc.rows(); ++t) {
            sig += (yc(t, 0) - mean) * (yc(t, 0) - mean);
            const double e = yn(t, 0) - yc(t, 0);
            noise += e * e;
        }
    }
    if (noise <= 0.0) throw DegenerateReference("snr: zero noise power");
    return 10.0 * std::log10(sig / noise);
}

// ---------------------------------------------------------------------------
// Evaluation protocol
// ---------------------------------------------------------------------------

struct EvalResult {
    std::vector<double> per_traj;
    double mean = std::numeric_limits<double>::quiet_NaN();
};

/// Forward-simulate the model over every trajectory (initial states drawn
/// uniform from [-1,1]^n_x per trajectory by default) and score each with
/// NRMSe over the full length — no burn-in skip. A state-guard trip scores
/// +infinity for that trajectory.
template <typename Model>
EvalResult evaluate(const Model& m, const Dataset& ds, std::uint64_t seed,
                    X0Policy x0_policy = X0Policy::random_uniform) {
    EvalResult out;
    out.per_traj.reserve(ds.trajs.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < ds.trajs.size(); ++i) {
        const auto& tr = ds.trajs[i];
        const DenseMatrix x0 = detail::draw_x0(x0_policy, m.dims.n_x, derive_seed(seed, i));
        double score;
        try {
            NumericCtx ctx;
            const auto bp = bind_numeric(m);
            const auto sim = detail::sim_any_t(ctx, m, bp, x0, tr.u, tr.p);
            DenseMatrix yhat(tr.y.rows(), tr.y.cols());
            for (std::size_t t = 0; t < tr.y.rows(); ++t)
                for (std::size_t j = 0; j < tr.y.cols(); ++j) yhat(t, j) = ctx.peek(sim.y[t])(j, 0);
            score = nrmse(tr.y, yhat);
        } catch (const NonFiniteState&) {
            score = std::numeric_limits<double>::infinity();
        }
        out.per_traj.push_back(score);
        acc += score;
    }
    out.mean = ds.trajs.empty() ? std::numeric_limits<double>::quiet_NaN()
                                : acc / static_cast<double>(ds.trajs.size());
    return out;
}

inline void write_eval_csv(const EvalResult& r, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "trajectory,nrmse\n";
    char buf[96];
    for (std::size_t i = 0; i < r.per_traj.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, r.per_traj[i]);
        f << buf;
    }
    std::snprintf(buf, sizeof(buf), "mean,%.17g\n", r.mean);
    f << buf;
    if (!f) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Dataset directory format: `meta` key = value file plus one CSV per
// trajectory (header t,u,p1,p2,p3,y; 17 significant digits).
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory: " + dir);
    {
        std::ofstream meta(dir + "/meta", std::ios::trunc);
        if (!meta) throw IoError("cannot open for writing: " + dir + "/meta");
        char buf[512];
        std::snprintf(buf, sizeof(buf),
                      "name = %s\nT = %zu\nN_b = %zu\nu_min = %.17g\nu_max = %.17g\n"
                      "p_scale = %.17g\nnoise_var = %.17g\nnoise_std = %.17g\nseed = %llu\n",
                      dataset_name_str(ds.spec.name), ds.spec.T, ds.spec.N_b, ds.spec.u_min,
                      ds.spec.u_max, ds.spec.p_scale, ds.noise_var, ds.noise_std,
                      static_cast<unsigned long long>(ds.seed));
        meta << buf;
        if (!meta) throw IoError("write failed: " + dir + "/meta");
    }
    char name[64], row[256];
    for (std::size_t i = 0; i < ds.trajs.size(); ++i) {
        std::snprintf(name, sizeof(name), "/traj_%05zu.csv", i);
        std::ofstream f(dir + name, std::ios::trunc);
        if (!f) throw IoError(std::string("cannot open for writing: ") + dir + name);
        f << "t,u,p1,p2,p3,y\n";
        const auto& tr = ds.trajs[i];
        for (std::size_t t = 0; t < tr.u.rows(); ++t) {
            std::snprintf(row, sizeof(row), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", t, tr.u(t, 0),
                          tr.p(t, 0), tr.p(t, 1), tr.p(t, 2), tr.y(t, 0));
            f << row;
        }
        if (!f) throw IoError(std::string("write failed: ") + dir + name);
    }
}

namespace detail {
inline std::map<std::string, std::string> read_kv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}
}  // namespace detail

inline Dataset load_dataset(const std::string& dir) {
    const auto kv = detail::read_kv(dir + "/meta");
    auto need = [&](const char* key) {
        const auto it = kv.find(key);
        if (it == kv.end()) throw CorruptFile(std::string("meta is missing key: ") + key);
        return it->second;
    };
    Dataset ds;
    try {
        ds.spec.name = dataset_name_from(need("name"));
        ds.spec.T = std::stoull(need("T"));
        ds.spec.N_b = std::stoull(need("N_b"));
        ds.spec.u_min = std::stod(need("u_min"));
        ds.spec.u_max = std::stod(need("u_max"));
        ds.spec.p_scale = std::stod(need("p_scale"));
        ds.noise_var = std::stod(need("noise_var"));
        if (kv.count("noise_std")) ds.noise_std = std::stod(kv.at("noise_std"));
        ds.seed = std::stoull(need("seed"));
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw CorruptFile(std::string("bad meta value: ") + e.what());
    }

    char name[64];
    ds.trajs.reserve(ds.spec.N_b);
    for (std::size_t i = 0; i < ds.spec.N_b; ++i) {
        std::snprintf(name, sizeof(name), "/traj_%05zu.csv", i);
        std::ifstream f(dir + name);
        if (!f) throw IoError(std::string("cannot open: ") + dir + name);
        std::string line;
        if (!std::getline(f, line)) throw CorruptFile(std::string("empty trajectory file: ") + name);
        if (line != "t,u,p1,p2,p3,y")
            throw CorruptFile(std::string("unexpected trajectory header: ") + line);
        Trajectory tr;
        tr.u = DenseMatrix(ds.spec.T, 1);
        tr.p = DenseMatrix(ds.spec.T, 3);
        tr.y = DenseMatrix(ds.spec.T, 1);
        std::size_t t = 0;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            if (t >= ds.spec.T) throw CorruptFile(std::string("too many rows in ") + name);
            std::stringstream ss(line);
            std::string cell;
            double vals[6];
            for (int c = 0; c < 6; ++c) {
                if (!std::getline(ss, cell, ','))
                    throw CorruptFile(std::string("short row in ") + name);
                try {
                    vals[c] = std::stod(cell);
                } catch (const std::exception&) {
                    throw CorruptFile(std::string("bad number in ") + name + ": " + cell);
                }
            }
            tr.u(t, 0) = vals[1];
            tr.p(t, 0) = vals[2];
            tr.p(t, 1) = vals[3];
            tr.p(t, 2) = vals[4];
            tr.y(t, 0) = vals[5];
            ++t;
        }
        if (t != ds.spec.T) throw CorruptFile(std::string("row count mismatch in ") + name);
        ds.trajs.push_back(std::move(tr));
    }
    return ds;
}

}  // namespace lpvss
