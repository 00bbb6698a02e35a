#include "cgof/autodiff.hpp"
#include "cgof/optimize.hpp"
#include "cgof/rng.hpp"

#include <gtest/gtest.h>

using namespace cgof;
namespace ad = cgof::ad;

namespace {

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

MatX random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0)
{
    MatX m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = uniform(rng, lo, hi);
    }
    return m;
}

Eigen::VectorXd flatten(const std::vector<MatX>& ms)
{
    Eigen::Index n = 0;
    for (const auto& m : ms) {
        n += m.size();
    }
    Eigen::VectorXd x(n);
    Eigen::Index k = 0;
    for (const auto& m : ms) {
        x.segment(k, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
        k += m.size();
    }
    return x;
}

std::vector<MatX> unflatten(const Eigen::VectorXd& x, const std::vector<MatX>& shapes)
{
    std::vector<MatX> out;
    Eigen::Index k = 0;
    for (const auto& s : shapes) {
        MatX m(s.rows(), s.cols());
        Eigen::Map<Eigen::VectorXd>(m.data(), m.size()) = x.segment(k, m.size());
        k += m.size();
        out.push_back(std::move(m));
    }
    return out;
}

/// Reduces the op output against a fixed random cotangent and checks every
/// input coordinate by central differences.
double check(const Builder& build, const std::vector<MatX>& inputs, std::uint64_t key)
{
    MatX cot;
    auto eval = [&](const std::vector<MatX>& in, std::vector<MatX>* grads) {
        ad::Tape t;
        std::vector<ad::Var> leaves;
        for (const auto& m : in) {
            leaves.push_back(t.leaf(m));
        }
        const ad::Var out = build(t, leaves);
        if (cot.size() == 0) {
            Rng rng = keyed_stream(17, {key});
            cot = random_matrix(rng, out.rows(), out.cols());
        }
        const double v = out.value().cwiseProduct(cot).sum();
        if (grads) {
            t.backward(out, cot);
            for (const auto& l : leaves) {
                grads->push_back(t.grad(l));
            }
        }
        return v;
    };
    std::vector<MatX> grads;
    eval(inputs, &grads);
    Rng rng = keyed_stream(17, {key, 1});
    const auto rep = finite_diff_check([&](const Eigen::VectorXd& x) { return eval(unflatten(x, inputs), nullptr); },
                                       flatten(inputs), flatten(grads), 1 << 20, rng);
    return rep.max_rel_error;
}

} // namespace

TEST(Autodiff, LinearAlgebraOps)
{
    Rng rng = keyed_stream(5, {1});
    const MatX a = random_matrix(rng, 3, 4), b = random_matrix(rng, 4, 5), bias = random_matrix(rng, 3, 1);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::matmul(v[0], v[1]); }, {a, b}, 1), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::affine(v[0], v[1], v[2]); }, {a, b, bias}, 2), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::transpose(v[0]); }, {a}, 3), 1e-6);
    const MatX c = random_matrix(rng, 2, 3);
    EXPECT_LT(check([c](ad::Tape&, const auto& v) { return ad::lmul_const(c, v[0]); }, {a}, 4), 1e-6);
}

TEST(Autodiff, ElementwiseOps)
{
    Rng rng = keyed_stream(5, {2});
    const MatX a = random_matrix(rng, 3, 4, -2.0, 2.0), b = random_matrix(rng, 3, 4, 0.5, 2.0);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return v[0] + v[1]; }, {a, b}, 10), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return v[0] - v[1]; }, {a, b}, 11), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::mul(v[0], v[1]); }, {a, b}, 12), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::div(v[0], v[1]); }, {a, b}, 13), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return 2.5 * v[0]; }, {a}, 14), 1e-6);
    EXPECT_LT(check([b](ad::Tape&, const auto& v) { return ad::add_const(v[0], b); }, {a}, 15), 1e-6);
    EXPECT_LT(check([b](ad::Tape&, const auto& v) { return ad::mul_const(v[0], b); }, {a}, 16), 1e-6);
}

TEST(Autodiff, Nonlinearities)
{
    Rng rng = keyed_stream(5, {3});
    const MatX a = random_matrix(rng, 4, 6, -3.0, 3.0);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::silu(v[0]); }, {a}, 20), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::silu_grad(v[0]); }, {a}, 21), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::sigmoid(v[0]); }, {a}, 22), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::softplus(v[0]); }, {a}, 23), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::exp(v[0]); }, {a}, 24), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::square(v[0]); }, {a}, 25), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::abs(v[0]); }, {a}, 26), 1e-6);
}

TEST(Autodiff, ReductionsAndReshaping)
{
    Rng rng = keyed_stream(5, {4});
    const MatX a = random_matrix(rng, 3, 5), b = random_matrix(rng, 2, 5), col = random_matrix(rng, 3, 1);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::sum(v[0]); }, {a}, 30), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::mean(v[0]); }, {a}, 31), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::sum_rows(v[0]); }, {a}, 32), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::gather_cols(v[0], {4, 0, 0, 2}); }, {a}, 33), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::concat_rows({v[0], v[1]}); }, {a, b}, 34), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::slice_rows(v[0], 1, 2); }, {a}, 35), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::slice_cols(v[0], 2, 3); }, {a}, 36), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::broadcast_cols(v[0], 4); }, {col}, 37), 1e-6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) {
                  return ad::weighted_sum({ad::sum(v[0]), ad::mean(v[1])}, {0.3, 4.0});
              },
                    {a, b}, 38),
              1e-6);
}

TEST(Autodiff, PositionalEncoding)
{
    Rng rng = keyed_stream(5, {5});
    const MatX x = random_matrix(rng, 3, 7, -0.6, 0.6);
    EXPECT_LT(check([](ad::Tape&, const auto& v) { return ad::positional_encoding(v[0], 6); }, {x}, 40), 1e-5);
    ad::Tape t;
    const ad::Var pe = ad::positional_encoding(t.leaf(x), 6);
    EXPECT_EQ(pe.rows(), 39);
    EXPECT_EQ(pe.value().topRows(3), x);
    EXPECT_NEAR(pe.value()(3, 0), std::sin(std::numbers::pi * x(0, 0)), 1e-15);
    EXPECT_NEAR(pe.value()(6, 0), std::cos(std::numbers::pi * x(0, 0)), 1e-15);
    EXPECT_NEAR(pe.value()(9 + 1, 2), std::sin(2 * std::numbers::pi * x(1, 2)), 1e-15);
}

TEST(Autodiff, SharedSubexpressionAccumulates)
{
    ad::Tape t;
    MatX x0(1, 1);
    x0(0, 0) = 3.0;
    const ad::Var x = t.leaf(x0);
    const ad::Var y = ad::mul(x, x) + x;
    t.backward(ad::sum(y));
    EXPECT_DOUBLE_EQ(t.grad(x)(0, 0), 7.0);
}

TEST(Autodiff, ConstantsReceiveNoGradient)
{
    ad::Tape t;
    const ad::Var c = t.constant(MatX::Ones(2, 2));
    const ad::Var x = t.leaf(MatX::Constant(2, 2, 2.0));
    t.backward(ad::sum(ad::mul(c, x)));
    EXPECT_FALSE(t.needs_grad(c));
    EXPECT_EQ(t.grad(x), MatX::Ones(2, 2));
}

TEST(Autodiff, ShapeMismatchThrows)
{
    ad::Tape t;
    const ad::Var a = t.leaf(MatX::Zero(2, 3)), b = t.leaf(MatX::Zero(3, 2));
    EXPECT_THROW(ad::add(a, b), std::invalid_argument);
    EXPECT_THROW(ad::matmul(a, a), std::invalid_argument);
    EXPECT_THROW(ad::slice_rows(a, 1, 2), std::invalid_argument);
    EXPECT_THROW(ad::broadcast_cols(a, 2), std::invalid_argument);
}

TEST(Autodiff, StableScalarHelpers)
{
    EXPECT_DOUBLE_EQ(ad::detail::sigmoid(0.0), 0.5);
    EXPECT_GT(ad::detail::sigmoid(-800.0), -1.0);
    EXPECT_TRUE(std::isfinite(ad::detail::sigmoid(-800.0)));
    EXPECT_NEAR(ad::detail::softplus(0.0), std::log(2.0), 1e-15);
    EXPECT_DOUBLE_EQ(ad::detail::softplus(800.0), 800.0);
}

TEST(FiniteDiff, DetectsWrongGradient)
{
    Rng rng = keyed_stream(5, {6});
    Eigen::VectorXd x(3);
    x << 0.3, -0.2, 0.9;
    auto f = [](const Eigen::VectorXd& v) { return v.squaredNorm(); };
    EXPECT_TRUE(finite_diff_check(f, x, 2.0 * x, 3, rng).pass);
    EXPECT_FALSE(finite_diff_check(f, x, 2.1 * x, 3, rng).pass);
    EXPECT_THROW(finite_diff_check(f, x, Eigen::VectorXd(2), 3, rng), std::invalid_argument);
}
