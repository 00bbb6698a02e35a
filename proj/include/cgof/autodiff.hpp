#pragma once

#include <Eigen/Core>

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgof::ad {

using MatX = Eigen::MatrixXd;

class Tape;

/// Handle to a matrix-valued node on a tape. Batched values keep one point per
/// column.
struct Var
{
    Tape* tape = nullptr;
    std::size_t id = 0;

    const MatX& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

class Tape
{
public:
    using Backward = std::function<void(const MatX& grad_out)>;

    Var leaf(MatX value, bool requires_grad = true) { return push(std::move(value), requires_grad, {}); }
    Var constant(MatX value) { return push(std::move(value), false, {}); }

    /// Records a node whose gradient rule is supplied by the caller. The rule
    /// receives the node's accumulated gradient and must route it into the
    /// inputs via accumulate().
    Var record(std::initializer_list<Var> inputs, MatX value, Backward rule)
    {
        bool needs = false;
        for (const Var& in : inputs) {
            needs = needs || nodes_[in.id].needs_grad;
        }
        return push(std::move(value), needs, needs ? std::move(rule) : Backward{});
    }
    Var record(const std::vector<Var>& inputs, MatX value, Backward rule)
    {
        bool needs = false;
        for (const Var& in : inputs) {
            needs = needs || nodes_[in.id].needs_grad;
        }
        return push(std::move(value), needs, needs ? std::move(rule) : Backward{});
    }

    const MatX& value(Var v) const { return nodes_[v.id].value; }
    bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

    /// Gradient of the last backward() target w.r.t. v (zeros when untouched).
    MatX grad(Var v) const
    {
        const Node& n = nodes_[v.id];
        return n.grad.size() ? n.grad : MatX::Zero(n.value.rows(), n.value.cols());
    }

    void accumulate(Var v, const MatX& g)
    {
        Node& n = nodes_[v.id];
        if (!n.needs_grad) {
            return;
        }
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    template <typename Expr>
    void accumulate_expr(Var v, const Expr& g)
    {
        Node& n = nodes_[v.id];
        if (!n.needs_grad) {
            return;
        }
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    /// Reverse sweep from a scalar output.
    void backward(Var out)
    {
        const MatX& v = value(out);
        if (v.rows() != 1 || v.cols() != 1) {
            throw std::invalid_argument("backward: output is " + std::to_string(v.rows()) + "x" +
                                        std::to_string(v.cols()) + "; pass an explicit cotangent");
        }
        backward(out, MatX::Ones(1, 1));
    }

    void backward(Var out, const MatX& cotangent)
    {
        const MatX& v = value(out);
        if (cotangent.rows() != v.rows() || cotangent.cols() != v.cols()) {
            throw std::invalid_argument("backward: cotangent shape does not match the output");
        }
        for (auto& n : nodes_) {
            n.grad.resize(0, 0);
        }
        accumulate(out, cotangent);
        for (std::size_t i = out.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.rule && n.grad.size()) {
                n.rule(n.grad);
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node
    {
        MatX value;
        MatX grad;
        bool needs_grad = false;
        Backward rule;
    };

    Var push(MatX value, bool needs_grad, Backward rule)
    {
        nodes_.push_back(Node{std::move(value), MatX(), needs_grad, std::move(rule)});
        return Var{this, nodes_.size() - 1};
    }

    std::deque<Node> nodes_; // stable references across pushes
};

inline const MatX& Var::value() const { return tape->value(*this); }

namespace detail {

inline void same_shape(const Var& a, const Var& b, const char* op)
{
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
    }
}

inline double sigmoid(double x)
{
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double softplus(double x)
{
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

} // namespace detail

inline Var matmul(Var a, Var b)
{
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions differ");
    }
    Tape& t = *a.tape;
    MatX out = a.value() * b.value();
    return t.record({a, b}, std::move(out), [&t, a, b](const MatX& g) {
        if (t.needs_grad(a)) {
            t.accumulate_expr(a, g * b.value().transpose());
        }
        if (t.needs_grad(b)) {
            t.accumulate_expr(b, a.value().transpose() * g);
        }
    });
}

/// W x + b with b (rows x 1) broadcast across columns.
inline Var affine(Var w, Var x, Var b)
{
    if (w.cols() != x.rows() || b.rows() != w.rows() || b.cols() != 1) {
        throw std::invalid_argument("affine: incompatible shapes");
    }
    Tape& t = *w.tape;
    MatX out = w.value() * x.value();
    out.colwise() += b.value().col(0);
    return t.record({w, x, b}, std::move(out), [&t, w, x, b](const MatX& g) {
        if (t.needs_grad(w)) {
            t.accumulate_expr(w, g * x.value().transpose());
        }
        if (t.needs_grad(x)) {
            t.accumulate_expr(x, w.value().transpose() * g);
        }
        if (t.needs_grad(b)) {
            t.accumulate_expr(b, g.rowwise().sum());
        }
    });
}

inline Var add(Var a, Var b)
{
    detail::same_shape(a, b, "add");
    Tape& t = *a.tape;
    return t.record({a, b}, a.value() + b.value(), [&t, a, b](const MatX& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

inline Var sub(Var a, Var b)
{
    detail::same_shape(a, b, "sub");
    Tape& t = *a.tape;
    return t.record({a, b}, a.value() - b.value(), [&t, a, b](const MatX& g) {
        t.accumulate(a, g);
        t.accumulate_expr(b, -g);
    });
}

inline Var mul(Var a, Var b)
{
    detail::same_shape(a, b, "mul");
    Tape& t = *a.tape;
    return t.record({a, b}, a.value().cwiseProduct(b.value()), [&t, a, b](const MatX& g) {
        t.accumulate_expr(a, g.cwiseProduct(b.value()));
        t.accumulate_expr(b, g.cwiseProduct(a.value()));
    });
}

inline Var scale(Var a, double s)
{
    Tape& t = *a.tape;
    return t.record({a}, a.value() * s, [&t, a, s](const MatX& g) { t.accumulate_expr(a, g * s); });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

template <typename F, typename DF>
Var unary(Var a, F f, DF df)
{
    Tape& t = *a.tape;
    MatX out = a.value().unaryExpr(f);
    return t.record({a}, std::move(out), [&t, a, df](const MatX& g) {
        t.accumulate_expr(a, g.cwiseProduct(a.value().unaryExpr(df)));
    });
}

inline Var silu(Var a)
{
    return unary(
        a, [](double x) { return x * detail::sigmoid(x); },
        [](double x) {
            const double s = detail::sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

inline Var transpose(Var a)
{
    Tape& t = *a.tape;
    return t.record({a}, a.value().transpose(), [&t, a](const MatX& g) { t.accumulate_expr(a, g.transpose()); });
}

/// Derivative of silu, s(x)(1 + x(1 - s(x))), as a differentiable op.
inline Var silu_grad(Var a)
{
    return unary(
        a,
        [](double x) {
            const double s = detail::sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        },
        [](double x) {
            const double s = detail::sigmoid(x);
            return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s));
        });
}

inline Var sigmoid(Var a)
{
    return unary(
        a, [](double x) { return detail::sigmoid(x); },
        [](double x) {
            const double s = detail::sigmoid(x);
            return s * (1.0 - s);
        });
}

inline Var softplus(Var a)
{
    return unary(a, [](double x) { return detail::softplus(x); }, [](double x) { return detail::sigmoid(x); });
}

inline Var exp(Var a)
{
    return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

/// |x| with derivative sign(x) (zero at the kink).
inline Var abs(Var a)
{
    return unary(
        a, [](double x) { return std::abs(x); }, [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var square(Var a)
{
    return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

inline Var sum(Var a)
{
    Tape& t = *a.tape;
    MatX out(1, 1);
    out(0, 0) = a.value().sum();
    return t.record({a}, std::move(out), [&t, a](const MatX& g) {
        t.accumulate_expr(a, MatX::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

inline Var mean(Var a)
{
    const double n = static_cast<double>(a.value().size());
    return scale(sum(a), 1.0 / n);
}

/// Weighted sum of 1x1 scalars.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights)
{
    if (terms.empty() || terms.size() != weights.size()) {
        throw std::invalid_argument("weighted_sum: need matching non-empty term and weight lists");
    }
    Tape& t = *terms.front().tape;
    MatX out = MatX::Zero(1, 1);
    for (std::size_t i = 0; i < terms.size(); ++i) {
        out(0, 0) += weights[i] * terms[i].value()(0, 0);
    }
    return t.record(terms, std::move(out), [&t, terms, weights](const MatX& g) {
        for (std::size_t i = 0; i < terms.size(); ++i) {
            t.accumulate_expr(terms[i], MatX::Constant(1, 1, weights[i] * g(0, 0)));
        }
    });
}

/// Column sums as a 1 x n row.
inline Var sum_rows(Var a)
{
    Tape& t = *a.tape;
    return t.record({a}, a.value().colwise().sum(), [&t, a](const MatX& g) {
        t.accumulate_expr(a, g.replicate(a.rows(), 1));
    });
}

/// Columns of a at the given indices, in order (repeats allowed).
inline Var gather_cols(Var a, std::vector<Eigen::Index> idx)
{
    Tape& t = *a.tape;
    MatX out(a.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
        out.col(static_cast<Eigen::Index>(k)) = a.value().col(idx[k]);
    }
    return t.record({a}, std::move(out), [&t, a, idx = std::move(idx)](const MatX& g) {
        MatX full = MatX::Zero(a.rows(), a.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            full.col(idx[k]) += g.col(static_cast<Eigen::Index>(k));
        }
        t.accumulate(a, full);
    });
}

/// Elementwise a / b.
inline Var div(Var a, Var b)
{
    detail::same_shape(a, b, "div");
    Tape& t = *a.tape;
    return t.record({a, b}, a.value().cwiseQuotient(b.value()), [&t, a, b](const MatX& g) {
        t.accumulate_expr(a, g.cwiseQuotient(b.value()));
        t.accumulate_expr(b, -g.cwiseProduct(a.value()).cwiseQuotient(b.value().cwiseProduct(b.value())));
    });
}

/// Adds a constant matrix.
inline Var add_const(Var a, const MatX& c)
{
    Tape& t = *a.tape;
    if (c.rows() != a.rows() || c.cols() != a.cols()) {
        throw std::invalid_argument("add_const: shape mismatch");
    }
    return t.record({a}, a.value() + c, [&t, a](const MatX& g) { t.accumulate(a, g); });
}

/// Elementwise product with a constant matrix.
inline Var mul_const(Var a, const MatX& c)
{
    Tape& t = *a.tape;
    if (c.rows() != a.rows() || c.cols() != a.cols()) {
        throw std::invalid_argument("mul_const: shape mismatch");
    }
    return t.record({a}, a.value().cwiseProduct(c), [&t, a, c](const MatX& g) {
        t.accumulate_expr(a, g.cwiseProduct(c));
    });
}

/// Constant matrix times a: c * a.
inline Var lmul_const(const MatX& c, Var a)
{
    Tape& t = *a.tape;
    if (c.cols() != a.rows()) {
        throw std::invalid_argument("lmul_const: inner dimensions differ");
    }
    return t.record({a}, c * a.value(), [&t, a, c](const MatX& g) { t.accumulate_expr(a, c.transpose() * g); });
}

inline Var concat_rows(const std::vector<Var>& parts)
{
    if (parts.empty()) {
        throw std::invalid_argument("concat_rows: nothing to concatenate");
    }
    Tape& t = *parts.front().tape;
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    for (const Var& p : parts) {
        if (p.cols() != cols) {
            throw std::invalid_argument("concat_rows: column counts differ");
        }
        rows += p.rows();
    }
    MatX out(rows, cols);
    Eigen::Index r = 0;
    for (const Var& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return t.record(parts, std::move(out), [&t, parts](const MatX& g) {
        Eigen::Index r = 0;
        for (const Var& p : parts) {
            if (t.needs_grad(p)) {
                t.accumulate_expr(p, g.middleRows(r, p.rows()));
            }
            r += p.rows();
        }
    });
}

inline Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count)
{
    if (begin < 0 || count < 0 || begin + count > a.rows()) {
        throw std::invalid_argument("slice_rows: range out of bounds");
    }
    Tape& t = *a.tape;
    return t.record({a}, a.value().middleRows(begin, count), [&t, a, begin, count](const MatX& g) {
        MatX full = MatX::Zero(a.rows(), a.cols());
        full.middleRows(begin, count) = g;
        t.accumulate(a, full);
    });
}

inline Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count)
{
    if (begin < 0 || count < 0 || begin + count > a.cols()) {
        throw std::invalid_argument("slice_cols: range out of bounds");
    }
    Tape& t = *a.tape;
    return t.record({a}, a.value().middleCols(begin, count), [&t, a, begin, count](const MatX& g) {
        MatX full = MatX::Zero(a.rows(), a.cols());
        full.middleCols(begin, count) = g;
        t.accumulate(a, full);
    });
}

/// Repeats a column vector n times.
inline Var broadcast_cols(Var v, Eigen::Index n)
{
    if (v.cols() != 1) {
        throw std::invalid_argument("broadcast_cols: expected a column vector");
    }
    Tape& t = *v.tape;
    return t.record({v}, v.value().replicate(1, n), [&t, v](const MatX& g) { t.accumulate_expr(v, g.rowwise().sum()); });
}

/// Per column: [x, sin(2^k base x), cos(2^k base x) for k < octaves], rows
/// grouped by octave as (sin xyz, cos xyz).
inline Var positional_encoding(Var x, int octaves, double base = std::numbers::pi)
{
    const Eigen::Index d = x.rows();
    const Eigen::Index n = x.cols();
    Tape& t = *x.tape;
    MatX out(d * (1 + 2 * octaves), n);
    out.topRows(d) = x.value();
    for (int k = 0; k < octaves; ++k) {
        const double f = std::ldexp(base, k);
        out.middleRows(d * (1 + 2 * k), d) = (x.value() * f).array().sin().matrix();
        out.middleRows(d * (2 + 2 * k), d) = (x.value() * f).array().cos().matrix();
    }
    return t.record({x}, std::move(out), [&t, x, d, octaves, base](const MatX& g) {
        MatX gx = g.topRows(d);
        for (int k = 0; k < octaves; ++k) {
            const double f = std::ldexp(base, k);
            const auto arg = (x.value() * f).array();
            gx.array() += f * (g.middleRows(d * (1 + 2 * k), d).array() * arg.cos() -
                               g.middleRows(d * (2 + 2 * k), d).array() * arg.sin());
        }
        t.accumulate(x, gx);
    });
}

} // namespace cgof::ad
