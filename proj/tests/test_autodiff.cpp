#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "helpers.hpp"
#include "lpvss/autodiff.hpp"

using namespace lpvss;
using namespace testutil;

namespace {

using BuildFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

double eval_loss(const BuildFn& build, const std::vector<DenseMatrix>& leaf_values) {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    leaves.reserve(leaf_values.size());
    for (const auto& v : leaf_values) leaves.push_back(tape.leaf(v));
    return tape.value(build(tape, leaves))(0, 0);
}

/// Check every coordinate of every leaf against central finite differences.
/// Passes when |adjoint - fd| <= max(tol * |fd|, abs_floor).
void check_gradients(const BuildFn& build, std::vector<DenseMatrix> leaf_values, double tol = 1e-5,
                     double abs_floor = 1e-7, double h = 1e-6) {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const auto& v : leaf_values) leaves.push_back(tape.leaf(v));
    const ad::Var loss = build(tape, leaves);
    const auto grads = tape.backward(loss);

    for (std::size_t k = 0; k < leaves.size(); ++k) {
        const DenseMatrix adj = tape.grad_of(grads, leaves[k]);
        for (std::size_t idx = 0; idx < leaf_values[k].size(); ++idx) {
            const double keep = leaf_values[k][idx];
            leaf_values[k][idx] = keep + h;
            const double fp = eval_loss(build, leaf_values);
            leaf_values[k][idx] = keep - h;
            const double fm = eval_loss(build, leaf_values);
            leaf_values[k][idx] = keep;
            const double fd = (fp - fm) / (2.0 * h);
            INFO("leaf " << k << " coord " << idx << ": adjoint " << adj[idx] << " vs fd " << fd);
            CHECK(std::abs(adj[idx] - fd) <= std::max(tol * std::abs(fd), abs_floor));
        }
    }
}

/// Random probe matrix used to turn a matrix-valued op into a scalar loss
/// that is sensitive to every output entry: loss = sum(out .* C).
DenseMatrix probe(Rng& rng, std::size_t r, std::size_t c) { return randu(rng, r, c, 0.5, 1.5); }

DenseMatrix away_from_kinks(Rng& rng, std::size_t r, std::size_t c) {
    DenseMatrix m = randu(rng, r, c, -1.0, 1.0);
    for (std::size_t k = 0; k < m.size(); ++k)
        if (std::abs(m[k]) < 1e-3) m[k] = (m[k] < 0.0 ? -0.1 : 0.1);
    return m;
}

}  // namespace

TEST_CASE("gradients of every elementwise and structural primitive") {
    Rng rng(21);

    SECTION("add / sub") {
        DenseMatrix c = probe(rng, 2, 3);
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.add(l[0], l[1]), t.constant(c)));
            },
            {randu(rng, 2, 3), randu(rng, 2, 3)});
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.sub(l[0], l[1]), t.constant(c)));
            },
            {randu(rng, 2, 3), randu(rng, 2, 3)});
    }

    SECTION("hadamard") {
        DenseMatrix c = probe(rng, 3, 2);
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.hadamard(l[0], l[1]), t.constant(c)));
            },
            {randu(rng, 3, 2), randu(rng, 3, 2)});
    }

    SECTION("matmul") {
        DenseMatrix c = probe(rng, 2, 4);
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.matmul(l[0], l[1]), t.constant(c)));
            },
            {randu(rng, 2, 3), randu(rng, 3, 4)});
    }

    SECTION("transpose") {
        DenseMatrix c = probe(rng, 3, 2);
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.transpose(l[0]), t.constant(c)));
            },
            {randu(rng, 2, 3)});
    }

    SECTION("exp / sigmoid") {
        DenseMatrix c = probe(rng, 2, 2);
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.exp(l[0]), t.constant(c)));
            },
            {randu(rng, 2, 2)});
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.sigmoid(l[0]), t.constant(c)));
            },
            {randu(rng, 2, 2, -2.0, 2.0)});
    }

    SECTION("relu away from kinks") {
        DenseMatrix c = probe(rng, 3, 3);
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.relu(l[0]), t.constant(c)));
            },
            {away_from_kinks(rng, 3, 3)});
    }

    SECTION("scale and smul") {
        DenseMatrix c = probe(rng, 2, 2);
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.scale(l[0], -2.5), t.constant(c)));
            },
            {randu(rng, 2, 2)});
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.smul(l[0], l[1]), t.constant(c)));
            },
            {randu(rng, 1, 1, 0.5, 2.0), randu(rng, 2, 2)});
    }

    SECTION("sum") {
        check_gradients([](ad::Tape& t, const std::vector<ad::Var>& l) { return t.sum(l[0]); },
                        {randu(rng, 3, 4)});
    }

    SECTION("vertcat / horzcat") {
        DenseMatrix cv = probe(rng, 5, 2), ch = probe(rng, 2, 5);
        check_gradients(
            [cv](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.vertcat(l[0], l[1]), t.constant(cv)));
            },
            {randu(rng, 2, 2), randu(rng, 3, 2)});
        check_gradients(
            [ch](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.horzcat(l[0], l[1]), t.constant(ch)));
            },
            {randu(rng, 2, 2), randu(rng, 2, 3)});
    }

    SECTION("block") {
        DenseMatrix c = probe(rng, 2, 2);
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.block(l[0], 1, 3, 0, 2), t.constant(c)));
            },
            {randu(rng, 4, 4)});
    }

    SECTION("reshape") {
        DenseMatrix c = probe(rng, 3, 2);
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.reshape(l[0], 3, 2), t.constant(c)));
            },
            {randu(rng, 2, 3)});
    }

    SECTION("solve") {
        DenseMatrix c = probe(rng, 3, 2);
        DenseMatrix a = randn(rng, 3, 3, 0.5) + 4.0 * DenseMatrix::identity(3);
        check_gradients(
            [c](ad::Tape& t, const std::vector<ad::Var>& l) {
                return t.sum(t.hadamard(t.solve(l[0], l[1]), t.constant(c)));
            },
            {a, randu(rng, 3, 2)});
    }
}

TEST_CASE("reshape forward follows column-major order") {
    ad::Tape t;
    // columns of the input read top-to-bottom feed the output's columns
    ad::Var x = t.leaf(DenseMatrix{{1.0, 3.0, 5.0}, {2.0, 4.0, 6.0}});
    ad::Var y = t.reshape(x, 3, 2);
    DenseMatrix expect{{1.0, 4.0}, {2.0, 5.0}, {3.0, 6.0}};
    CHECK(rel_frobenius_diff(t.value(y), expect) == 0.0);
    ad::Var flat = t.reshape(x, 6, 1);
    for (std::size_t k = 0; k < 6; ++k) CHECK(t.value(flat)[k] == 1.0 + k);
}

TEST_CASE("solve adjoint: closed-form special cases") {
    Rng rng(22);

    SECTION("identity system") {
        DenseMatrix b = randu(rng, 3, 2), c = probe(rng, 3, 2);
        ad::Tape t;
        ad::Var av = t.leaf(DenseMatrix::identity(3));
        ad::Var bv = t.leaf(b);
        ad::Var x = t.solve(av, bv);
        auto grads = t.backward(t.sum(t.hadamard(x, t.constant(c))));
        // gradB = I^{-T} c = c and gradA = -gradB * X^T with X = B
        CHECK(rel_frobenius_diff(t.grad_of(grads, bv), c) < 1e-14);
        CHECK(rel_frobenius_diff(t.grad_of(grads, av), -1.0 * (c * b.transposed())) < 1e-14);
    }

    SECTION("1x1 system: d(b/a)/da = -b/a^2, d(b/a)/db = 1/a") {
        const double a = 2.0, b = 3.0;
        ad::Tape t;
        ad::Var av = t.leaf(DenseMatrix{{a}});
        ad::Var bv = t.leaf(DenseMatrix{{b}});
        auto grads = t.backward(t.solve(av, bv));
        CHECK(t.grad_of(grads, av)(0, 0) == Catch::Approx(-b / (a * a)).epsilon(1e-12));
        CHECK(t.grad_of(grads, bv)(0, 0) == Catch::Approx(1.0 / a).epsilon(1e-12));
    }
}

TEST_CASE("backward: linear loss gives all-ones gradient") {
    Rng rng(23);
    DenseMatrix w = randu(rng, 4, 3);
    ad::Tape t;
    ad::Var wv = t.leaf(w);
    auto grads = t.backward(t.sum(wv));
    CHECK(rel_frobenius_diff(t.grad_of(grads, wv), DenseMatrix::ones(4, 3)) == 0.0);
}

TEST_CASE("backward: ||relu(W x)||^2 matches finite differences") {
    Rng rng(24);
    check_gradients(
        [](ad::Tape& t, const std::vector<ad::Var>& l) {
            ad::Var r = t.relu(t.matmul(l[0], l[1]));
            return t.sum(t.hadamard(r, r));
        },
        {away_from_kinks(rng, 3, 3), away_from_kinks(rng, 3, 1)});
}

TEST_CASE("backward: 200-step recurrent rollout, probed coordinates") {
    Rng rng(25);
    const std::size_t n = 4, m = 2, T = 200;
    DenseMatrix w0 = randn(rng, n, n, 0.4);
    DenseMatrix b0 = randn(rng, n, m, 0.4);
    std::vector<DenseMatrix> inputs;
    for (std::size_t t = 0; t < T; ++t) inputs.push_back(randu(rng, m, 1));

    BuildFn build = [&inputs, n, T](ad::Tape& t, const std::vector<ad::Var>& l) {
        ad::Var x = t.constant(0.1 * DenseMatrix::ones(n, 1));
        ad::Var loss = t.constant(DenseMatrix::zeros(1, 1));
        for (std::size_t step = 0; step < T; ++step) {
            ad::Var drive = t.matmul(l[1], t.constant(inputs[step]));
            x = t.sigmoid(t.add(t.matmul(l[0], x), drive));
            loss = t.add(loss, t.sum(t.hadamard(x, x)));
        }
        return loss;
    };

    std::vector<DenseMatrix> leaf_values{w0, b0};
    ad::Tape tape;
    std::vector<ad::Var> leaves{tape.leaf(w0), tape.leaf(b0)};
    const ad::Var loss = build(tape, leaves);
    const auto grads = tape.backward(loss);

    // probe 10 random coordinates across both parameter matrices
    for (int probe_i = 0; probe_i < 10; ++probe_i) {
        const std::size_t which = rng.index(2);
        const std::size_t idx = rng.index(leaf_values[which].size());
        const double keep = leaf_values[which][idx];
        const double h = 1e-6;
        leaf_values[which][idx] = keep + h;
        const double fp = eval_loss(build, leaf_values);
        leaf_values[which][idx] = keep - h;
        const double fm = eval_loss(build, leaf_values);
        leaf_values[which][idx] = keep;
        const double fd = (fp - fm) / (2.0 * h);
        const double adj = tape.grad_of(grads, leaves[which])[idx];
        INFO("leaf " << which << " coord " << idx);
        CHECK(std::abs(adj - fd) <= std::max(1e-4 * std::abs(fd), 1e-7));
    }
}

TEST_CASE("backward is linear in the loss") {
    Rng rng(26);
    DenseMatrix x = randu(rng, 3, 3), c1 = probe(rng, 3, 3), c2 = probe(rng, 3, 3);
    const double a = 1.7, b = -0.4;
    ad::Tape t;
    ad::Var xv = t.leaf(x);
    ad::Var f = t.sum(t.hadamard(xv, t.constant(c1)));
    ad::Var g = t.sum(t.hadamard(xv, t.constant(c2)));
    auto grads = t.backward(t.add(t.scale(f, a), t.scale(g, b)));
    CHECK(rel_frobenius_diff(t.grad_of(grads, xv), a * c1 + b * c2) < 1e-12);
}

TEST_CASE("identical tapes produce bit-identical gradients") {
    auto run = [] {
        Rng rng(27);
        ad::Tape t;
        ad::Var a = t.leaf(randn(rng, 4, 4));
        ad::Var b = t.leaf(randn(rng, 4, 4) + 3.0 * DenseMatrix::identity(4));
        ad::Var x = t.solve(b, t.exp(t.scale(a, 0.3)));
        auto grads = t.backward(t.sum(t.hadamard(x, x)));
        return std::pair{t.grad_of(grads, a), t.grad_of(grads, b)};
    };
    auto [ga1, gb1] = run();
    auto [ga2, gb2] = run();
    CHECK(std::memcmp(ga1.data().data(), ga2.data().data(), ga1.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(gb1.data().data(), gb2.data().data(), gb1.size() * sizeof(double)) == 0);
}

TEST_CASE("untouched leaves read back as zero gradient") {
    ad::Tape t;
    ad::Var used = t.leaf(DenseMatrix::ones(2, 2));
    ad::Var unused = t.leaf(DenseMatrix::ones(3, 3));
    auto grads = t.backward(t.sum(used));
    CHECK(rel_frobenius_diff(t.grad_of(grads, unused), DenseMatrix::zeros(3, 3)) == 0.0);
}

TEST_CASE("shape errors surface at record time") {
    ad::Tape t;
    ad::Var a = t.leaf(DenseMatrix::ones(2, 2));
    ad::Var b = t.leaf(DenseMatrix::ones(2, 3));
    CHECK_THROWS_AS(t.add(a, b), ShapeMismatch);
    CHECK_THROWS_AS(t.matmul(b, b), ShapeMismatch);
    CHECK_THROWS_AS(t.smul(a, b), ShapeMismatch);
    CHECK_THROWS_AS(t.vertcat(a, b), ShapeMismatch);
    CHECK_THROWS_AS(t.reshape(a, 3, 2), ShapeMismatch);
    CHECK_THROWS_AS(t.backward(a), ShapeMismatch);  // non-scalar loss
}

TEST_CASE("numeric context and tape context agree bitwise") {
    Rng rng(28);
    DenseMatrix a = randn(rng, 3, 3, 0.5) + 2.0 * DenseMatrix::identity(3);
    DenseMatrix b = randn(rng, 3, 2);

    NumericCtx num;
    DenseMatrix num_out = num.relu(num.solve(a, num.exp(num.scale(b, 0.7))));

    ad::Tape t;
    TapeCtx tc(t);
    ad::Var out = tc.relu(tc.solve(tc.constant(a), tc.exp(tc.scale(tc.constant(b), 0.7))));
    CHECK(std::memcmp(num_out.data().data(), t.value(out).data().data(),
                      num_out.size() * sizeof(double)) == 0);
}
