#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "lpvss/errors.hpp"
#include "lpvss/linalg.hpp"
#include "lpvss/matrix.hpp"

namespace lpvss::ad {

enum class OpKind {
    leaf,
    constant,
    add,
    sub,
    hadamard,
    matmul,
    transpose,
    exp_,
    relu,
    sigmoid,
    scale,    // constant scalar times matrix
    smul,     // 1x1 Var times matrix
    sum,      // all-entries sum -> 1x1
    vertcat,
    horzcat,
    block,    // sub-matrix copy
    reshape,  // column-major relayout to new dims
    solve,    // A^{-1} B
};

/// Handle into a Tape. Cheap to copy; shape is mirrored here so generic
/// code can query it the same way it queries a DenseMatrix.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    std::size_t rows_ = 0, cols_ = 0;
    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool valid() const { return id != static_cast<std::size_t>(-1); }
};

struct Node {
    OpKind kind;
    std::size_t a = static_cast<std::size_t>(-1);  // parent ids
    std::size_t b = static_cast<std::size_t>(-1);
    DenseMatrix value;  // forward result, cached for the adjoint
    double scalar = 0.0;
    std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;  // block bounds
    std::shared_ptr<LuFactors> lu;               // cached factorization for solve
};

/// Append-only record of a forward computation. Values are computed
/// eagerly at record time, so shape errors surface immediately and the
/// taped forward pass is bit-identical to the plain numeric one.
class Tape {
public:
    const DenseMatrix& value(const Var& v) const { return nodes_[v.id].value; }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    Var leaf(DenseMatrix v) { return push(OpKind::leaf, std::move(v)); }
    Var constant(DenseMatrix v) { return push(OpKind::constant, std::move(v)); }

    Var add(const Var& a, const Var& b) {
        Var out = push(OpKind::add, value(a) + value(b));
        link(out, a, b);
        return out;
    }

    Var sub(const Var& a, const Var& b) {
        Var out = push(OpKind::sub, value(a) - value(b));
        link(out, a, b);
        return out;
    }

    Var hadamard(const Var& a, const Var& b) {
        Var out = push(OpKind::hadamard, lpvss::hadamard(value(a), value(b)));
        link(out, a, b);
        return out;
    }

    Var matmul(const Var& a, const Var& b) {
        Var out = push(OpKind::matmul, value(a) * value(b));
        link(out, a, b);
        return out;
    }

    Var transpose(const Var& a) {
        Var out = push(OpKind::transpose, value(a).transposed());
        link(out, a);
        return out;
    }

    Var exp(const Var& a) {
        Var out = push(OpKind::exp_, elementwise_exp(value(a)));
        link(out, a);
        return out;
    }

    Var relu(const Var& a) {
        Var out = push(OpKind::relu, elementwise_relu(value(a)));
        link(out, a);
        return out;
    }

    Var sigmoid(const Var& a) {
        Var out = push(OpKind::sigmoid, elementwise_sigmoid(value(a)));
        link(out, a);
        return out;
    }

    Var scale(const Var& a, double c) {
        Var out = push(OpKind::scale, c * value(a));
        link(out, a);
        nodes_[out.id].scalar = c;
        return out;
    }

    /// (1x1 Var) * matrix Var, the differentiable scalar-matrix product.
    Var smul(const Var& s, const Var& m) {
        if (s.rows() != 1 || s.cols() != 1) throw ShapeMismatch("smul: scalar operand must be 1x1");
        Var out = push(OpKind::smul, value(s)(0, 0) * value(m));
        link(out, s, m);
        return out;
    }

    Var sum(const Var& a) {
        DenseMatrix v(1, 1);
        v(0, 0) = sum_all(value(a));
        Var out = push(OpKind::sum, std::move(v));
        link(out, a);
        return out;
    }

    Var vertcat(const Var& a, const Var& b) {
        Var out = push(OpKind::vertcat, lpvss::vertcat(value(a), value(b)));
        link(out, a, b);
        return out;
    }

    Var horzcat(const Var& a, const Var& b) {
        Var out = push(OpKind::horzcat, lpvss::horzcat(value(a), value(b)));
        link(out, a, b);
        return out;
    }

    Var block(const Var& a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
        Var out = push(OpKind::block, value(a).block(r0, r1, c0, c1));
        link(out, a);
        Node& n = nodes_[out.id];
        n.r0 = r0;
        n.r1 = r1;
        n.c0 = c0;
        n.c1 = c1;
        return out;
    }

    /// Column-major relayout: entry at column-major linear index k of the
    /// output equals entry k of the input. Total sizes must match.
    Var reshape(const Var& a, std::size_t r, std::size_t c) {
        const DenseMatrix& in = value(a);
        if (in.size() != r * c) throw ShapeMismatch("reshape: size mismatch");
        DenseMatrix out_v(r, c);
        relayout_colmajor(in, out_v);
        Var out = push(OpKind::reshape, std::move(out_v));
        link(out, a);
        return out;
    }

    /// X = A^{-1} B. The factorization is cached on the node; the adjoint
    /// reuses it through the transposed solve.
    Var solve(const Var& a, const Var& b) {
        auto lu = std::make_shared<LuFactors>(lu_factor(value(a)));
        Var out = push(OpKind::solve, lu_solve(*lu, value(b)));
        link(out, a, b);
        nodes_[out.id].lu = std::move(lu);
        return out;
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per node id
    /// (empty DenseMatrix for nodes the loss does not depend on); use
    /// grad_of to read a specific Var with zero-filling.
    std::vector<DenseMatrix> backward(const Var& loss) const {
        if (loss.rows() != 1 || loss.cols() != 1) throw ShapeMismatch("backward: loss must be 1x1");
        std::vector<DenseMatrix> g(nodes_.size());
        g[loss.id] = DenseMatrix::ones(1, 1);
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            if (g[id].empty()) continue;
            const Node& n = nodes_[id];
            const DenseMatrix& go = g[id];
            switch (n.kind) {
                case OpKind::leaf:
                case OpKind::constant:
                    break;
                case OpKind::add:
                    accumulate(g, n.a, go);
                    accumulate(g, n.b, go);
                    break;
                case OpKind::sub:
                    accumulate(g, n.a, go);
                    accumulate_scaled(g, n.b, go, -1.0);
                    break;
                case OpKind::hadamard:
                    accumulate(g, n.a, lpvss::hadamard(go, nodes_[n.b].value));
                    accumulate(g, n.b, lpvss::hadamard(go, nodes_[n.a].value));
                    break;
                case OpKind::matmul:
                    accumulate(g, n.a, go * nodes_[n.b].value.transposed());
                    accumulate(g, n.b, nodes_[n.a].value.transposed() * go);
                    break;
                case OpKind::transpose:
                    accumulate(g, n.a, go.transposed());
                    break;
                case OpKind::exp_:
                    accumulate(g, n.a, lpvss::hadamard(go, n.value));
                    break;
                case OpKind::relu: {
                    DenseMatrix m = go;
                    const DenseMatrix& in = nodes_[n.a].value;
                    for (std::size_t k = 0; k < m.size(); ++k)
                        if (in[k] <= 0.0) m[k] = 0.0;  // subgradient 0 at the kink
                    accumulate(g, n.a, m);
                    break;
                }
                case OpKind::sigmoid: {
                    DenseMatrix m = go;
                    for (std::size_t k = 0; k < m.size(); ++k)
                        m[k] *= n.value[k] * (1.0 - n.value[k]);
                    accumulate(g, n.a, m);
                    break;
                }
                case OpKind::scale:
                    accumulate_scaled(g, n.a, go, n.scalar);
                    break;
                case OpKind::smul: {
                    DenseMatrix gs(1, 1);
                    gs(0, 0) = dot_all(go, nodes_[n.b].value);
                    accumulate(g, n.a, gs);
                    accumulate_scaled(g, n.b, go, nodes_[n.a].value(0, 0));
                    break;
                }
                case OpKind::sum: {
                    const DenseMatrix& in = nodes_[n.a].value;
                    accumulate(g, n.a, go(0, 0) * DenseMatrix::ones(in.rows(), in.cols()));
                    break;
                }
                case OpKind::vertcat: {
                    const std::size_t ra = nodes_[n.a].value.rows();
                    accumulate(g, n.a, go.block(0, ra, 0, go.cols()));
                    accumulate(g, n.b, go.block(ra, go.rows(), 0, go.cols()));
                    break;
                }
                case OpKind::horzcat: {
                    const std::size_t ca = nodes_[n.a].value.cols();
                    accumulate(g, n.a, go.block(0, go.rows(), 0, ca));
                    accumulate(g, n.b, go.block(0, go.rows(), ca, go.cols()));
                    break;
                }
                case OpKind::block: {
                    const DenseMatrix& in = nodes_[n.a].value;
                    if (g[n.a].empty()) g[n.a] = DenseMatrix::zeros(in.rows(), in.cols());
                    for (std::size_t i = n.r0; i < n.r1; ++i)
                        for (std::size_t j = n.c0; j < n.c1; ++j)
                            g[n.a](i, j) += go(i - n.r0, j - n.c0);
                    break;
                }
                case OpKind::reshape: {
                    const DenseMatrix& in = nodes_[n.a].value;
                    DenseMatrix back(in.rows(), in.cols());
                    relayout_colmajor(go, back);
                    accumulate(g, n.a, back);
                    break;
                }
                case OpKind::solve: {
                    // X = A^{-1}B: gradB = A^{-T} g, gradA = -gradB X^T
                    DenseMatrix gb = lu_solve(*n.lu, go, /*transposed=*/true);
                    accumulate_scaled(g, n.a, gb * n.value.transposed(), -1.0);
                    accumulate(g, n.b, gb);
                    break;
                }
            }
        }
        return g;
    }

    DenseMatrix grad_of(const std::vector<DenseMatrix>& grads, const Var& v) const {
        if (grads[v.id].empty()) return DenseMatrix::zeros(v.rows(), v.cols());
        return grads[v.id];
    }

private:
    std::vector<Node> nodes_;

    Var push(OpKind kind, DenseMatrix value) {
        Node n;
        n.kind = kind;
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        Var v;
        v.id = nodes_.size() - 1;
        v.rows_ = nodes_.back().value.rows();
        v.cols_ = nodes_.back().value.cols();
        return v;
    }

    void link(const Var& out, const Var& a) { nodes_[out.id].a = a.id; }
    void link(const Var& out, const Var& a, const Var& b) {
        nodes_[out.id].a = a.id;
        nodes_[out.id].b = b.id;
    }

    static void relayout_colmajor(const DenseMatrix& in, DenseMatrix& out) {
        const std::size_t rin = in.rows(), rout = out.rows();
        for (std::size_t k = 0; k < in.size(); ++k)
            out(k % rout, k / rout) = in(k % rin, k / rin);
    }

    static void accumulate(std::vector<DenseMatrix>& g, std::size_t id, const DenseMatrix& d) {
        if (g[id].empty()) {
            g[id] = d;
        } else {
            for (std::size_t k = 0; k < d.size(); ++k) g[id][k] += d[k];
        }
    }

    static void accumulate_scaled(std::vector<DenseMatrix>& g, std::size_t id, const DenseMatrix& d,
                                  double c) {
        if (g[id].empty()) {
            g[id] = c * d;
        } else {
            for (std::size_t k = 0; k < d.size(); ++k) g[id][k] += c * d[k];
        }
    }
};

}  // namespace lpvss::ad

namespace lpvss {

/// The two evaluation contexts. Model code is written once against this
/// interface; NumericCtx runs it on plain matrices, TapeCtx records the
/// identical arithmetic for backpropagation. Keeping one code path is what
/// makes the taped forward pass agree bitwise with plain simulation.
struct NumericCtx {
    using V = DenseMatrix;
    static constexpr bool taped = false;

    V constant(DenseMatrix m) const { return m; }
    V add(const V& a, const V& b) const { return a + b; }
    V sub(const V& a, const V& b) const { return a - b; }
    V hadamard(const V& a, const V& b) const { return lpvss::hadamard(a, b); }
    V matmul(const V& a, const V& b) const { return a * b; }
    V transpose(const V& a) const { return a.transposed(); }
    V exp(const V& a) const { return elementwise_exp(a); }
    V relu(const V& a) const { return elementwise_relu(a); }
    V sigmoid(const V& a) const { return elementwise_sigmoid(a); }
    V scale(const V& a, double c) const { return c * a; }
    V smul(const V& s, const V& m) const {
        if (s.rows() != 1 || s.cols() != 1) throw ShapeMismatch("smul: scalar operand must be 1x1");
        return s(0, 0) * m;
    }
    V sum(const V& a) const {
        DenseMatrix o(1, 1);
        o(0, 0) = sum_all(a);
        return o;
    }
    V vertcat(const V& a, const V& b) const { return lpvss::vertcat(a, b); }
    V horzcat(const V& a, const V& b) const { return lpvss::horzcat(a, b); }
    V block(const V& a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) const {
        return a.block(r0, r1, c0, c1);
    }
    V reshape(const V& a, std::size_t r, std::size_t c) const { return unvec_colmajor(vec_colmajor(a), r, c); }
    V solve(const V& a, const V& b) const { return lpvss::solve(a, b); }
    double scalar_value(const V& v) const { return v(0, 0); }
    const DenseMatrix& peek(const V& v) const { return v; }
};

struct TapeCtx {
    using V = ad::Var;
    static constexpr bool taped = true;
    ad::Tape* tape = nullptr;

    explicit TapeCtx(ad::Tape& t) : tape(&t) {}

    V constant(DenseMatrix m) const { return tape->constant(std::move(m)); }
    V add(const V& a, const V& b) const { return tape->add(a, b); }
    V sub(const V& a, const V& b) const { return tape->sub(a, b); }
    V hadamard(const V& a, const V& b) const { return tape->hadamard(a, b); }
    V matmul(const V& a, const V& b) const { return tape->matmul(a, b); }
    V transpose(const V& a) const { return tape->transpose(a); }
    V exp(const V& a) const { return tape->exp(a); }
    V relu(const V& a) const { return tape->relu(a); }
    V sigmoid(const V& a) const { return tape->sigmoid(a); }
    V scale(const V& a, double c) const { return tape->scale(a, c); }
    V smul(const V& s, const V& m) const { return tape->smul(s, m); }
    V sum(const V& a) const { return tape->sum(a); }
    V vertcat(const V& a, const V& b) const { return tape->vertcat(a, b); }
    V horzcat(const V& a, const V& b) const { return tape->horzcat(a, b); }
    V block(const V& a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) const {
        return tape->block(a, r0, r1, c0, c1);
    }
    V reshape(const V& a, std::size_t r, std::size_t c) const { return tape->reshape(a, r, c); }
    V solve(const V& a, const V& b) const { return tape->solve(a, b); }
    double scalar_value(const V& v) const { return tape->value(v)(0, 0); }
    const DenseMatrix& peek(const V& v) const { return tape->value(v); }
};

}  // namespace lpvss
