#include "cgof/field.hpp"
#include "cgof/optimize.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <sstream>

using namespace cgof;

namespace {

FieldConfig small_config()
{
    FieldConfig c;
    c.width = 16;
    c.depth = 2;
    c.map_hidden = 8;
    c.w_dim = 4;
    c.octaves = 2;
    return c;
}

MatX random_points(Rng& rng, int n)
{
    MatX x(3, n);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        x.data()[i] = uniform(rng, -0.5, 0.5);
    }
    return x;
}

} // namespace

TEST(Field, InputWidthMatchesEncoding)
{
    const FieldConfig c;
    EXPECT_EQ(c.encoded_dim(), 39);
    EXPECT_EQ(c.trunk_input_dim(), 55);
    const FieldParams p = init_params(1, c);
    EXPECT_EQ(p.get("trunk0.w").cols(), 55);
    EXPECT_EQ(p.get("trunk0.w").rows(), 64);
    EXPECT_EQ(p.get("color.w").cols(), 67);
    EXPECT_EQ(p.get("map0.w").cols(), 8);
    EXPECT_EQ(p.get("map1.w").rows(), 16);
}

TEST(Field, InitialDensityIsCalibrated)
{
    const FieldParams p = init_params(3);
    Rng rng = keyed_stream(9, {1});
    const MatX x = random_points(rng, 4096);
    const auto [sigma, color] = eval_field_batch(p, map_latent(p, Eigen::VectorXd::Zero(8)), x);
    EXPECT_GT(sigma.mean(), 0.1);
    EXPECT_LT(sigma.mean(), 2.0);
    EXPECT_GE(sigma.minCoeff(), 0.0);
    EXPECT_GT(color.minCoeff(), 0.0);
    EXPECT_LT(color.maxCoeff(), 1.0);
}

TEST(Field, InitIsDeterministicPerSeed)
{
    EXPECT_EQ(flatten(init_params(4)), flatten(init_params(4)));
    EXPECT_NE(flatten(init_params(4)), flatten(init_params(5)));
}

TEST(Field, BatchMatchesSinglePoint)
{
    const FieldParams p = init_params(2, small_config());
    Rng rng = keyed_stream(9, {2});
    const MatX x = random_points(rng, 5);
    const Eigen::VectorXd w = map_latent(p, Eigen::VectorXd::Constant(8, 0.3));
    const auto [sigma, color] = eval_field_batch(p, w, x);
    for (int i = 0; i < 5; ++i) {
        const FieldSample s = eval_field(p, w, x.col(i), Vec3(0, 0, -1));
        EXPECT_NEAR(s.sigma, sigma(i), 1e-14);
        EXPECT_LT((s.color - color.col(i)).norm(), 1e-14);
    }
}

TEST(Field, ViewDirectionIgnoredUnlessEnabled)
{
    FieldConfig c = small_config();
    const FieldParams off = init_params(2, c);
    const Eigen::VectorXd w = map_latent(off, Eigen::VectorXd::Zero(8));
    const Vec3 x(0.1, 0.2, -0.1);
    EXPECT_EQ(eval_field(off, w, x, Vec3(1, 0, 0)).color, eval_field(off, w, x, Vec3(0, 1, 0)).color);
    c.use_view_dirs = true;
    const FieldParams on = init_params(2, c);
    EXPECT_NE(eval_field(on, w, x, Vec3(1, 0, 0)).color, eval_field(on, w, x, Vec3(0, 1, 0)).color);
    EXPECT_EQ(eval_field(on, w, x, Vec3(1, 0, 0)).sigma, eval_field(on, w, x, Vec3(0, 1, 0)).sigma);
}

TEST(Field, RejectsWrongCoefficientCount)
{
    const FieldParams p = init_params(2, small_config());
    EXPECT_THROW(map_latent(p, Eigen::VectorXd::Zero(5)), std::invalid_argument);
}

TEST(Field, GradientMatchesFiniteDifferences)
{
    FieldParams p = init_params(6, small_config());
    Rng rng = keyed_stream(9, {3});
    const MatX x = random_points(rng, 6);
    Eigen::VectorXd z(8);
    for (int i = 0; i < 8; ++i) {
        z(i) = normal01(rng);
    }
    MatX cot(4, 6);
    for (Eigen::Index i = 0; i < cot.size(); ++i) {
        cot.data()[i] = uniform(rng, -1, 1);
    }
    auto loss = [&](const FieldParams& q, std::vector<MatX>* grads) {
        Tape t;
        const FieldVars fv = bind(t, q);
        const Var w = map_latent(fv, t.constant(z));
        const FieldOutput o = eval_field(fv, w, t.constant(x));
        const Var out = ad::concat_rows({o.sigma, o.color});
        if (grads) {
            t.backward(out, cot);
            *grads = collect_grads(t, fv);
        }
        return out.value().cwiseProduct(cot).sum();
    };
    std::vector<MatX> grads;
    loss(p, &grads);
    FieldParams g = p;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        g.tensors[i].value = grads[i];
    }
    FieldParams probe = p;
    const auto rep = finite_diff_check(
        [&](const Eigen::VectorXd& v) {
            unflatten(probe, v);
            return loss(probe, nullptr);
        },
        flatten(p), flatten(g), 400, rng);
    EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(Checkpoint, RoundTripIsBitwiseAfterF32Rounding)
{
    FieldParams p = init_params(7, small_config());
    round_to_f32(p);
    std::stringstream a;
    save_checkpoint(a, p);
    const FieldParams back = load_checkpoint(a);
    ASSERT_EQ(back.size(), p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        EXPECT_EQ(back.tensors[i].name, p.tensors[i].name);
        EXPECT_EQ(back.tensors[i].value, p.tensors[i].value);
    }
    std::stringstream b;
    save_checkpoint(b, back);
    EXPECT_EQ(a.str(), b.str());
    EXPECT_EQ(field_config_to_json(back.config), field_config_to_json(p.config));
}

TEST(Checkpoint, LayoutIsLittleEndianF32)
{
    FieldParams p;
    p.config = small_config();
    MatX m(1, 2);
    m << 1.0, -2.0;
    p.tensors.push_back({"t", m});
    std::stringstream s;
    save_checkpoint(s, p);
    const std::string bytes = s.str();
    EXPECT_EQ(bytes.substr(0, 8), "CGOFKIT1");
    const std::string tail = bytes.substr(bytes.size() - 8);
    const unsigned char one[4] = {0x00, 0x00, 0x80, 0x3f};
    const unsigned char minus_two[4] = {0x00, 0x00, 0x00, 0xc0};
    EXPECT_EQ(std::memcmp(tail.data(), one, 4), 0);
    EXPECT_EQ(std::memcmp(tail.data() + 4, minus_two, 4), 0);
}

TEST(Checkpoint, RejectsGarbage)
{
    std::stringstream s("NOTACKPT0000");
    EXPECT_THROW(load_checkpoint(s), std::runtime_error);
    FieldParams p = init_params(7, small_config());
    std::stringstream full;
    save_checkpoint(full, p);
    std::stringstream cut(full.str().substr(0, full.str().size() - 10));
    EXPECT_THROW(load_checkpoint(cut), std::runtime_error);
    EXPECT_THROW(load_checkpoint(std::string("/nonexistent/ck.bin")), std::runtime_error);
}

TEST(Field, ConfigJsonValidation)
{
    nlohmann::json j = field_config_to_json(FieldConfig{});
    EXPECT_EQ(j.at("octaves"), 6);
    j["width"] = 0;
    EXPECT_THROW(field_config_from_json(j), std::invalid_argument);
}
