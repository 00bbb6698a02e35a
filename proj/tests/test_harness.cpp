#include "cgof/harness.hpp"

#include <gtest/gtest.h>

#include <set>
#include <sstream>

using namespace cgof;

namespace {

TrainConfig tiny_config()
{
    TrainConfig c;
    c.image_size = 16;
    c.n_steps = 3;
    c.batch_rays = 40;
    c.warp_rays = 8;
    c.n_vol = c.n_surf = c.n_fine = 8;
    c.field.width = 16;
    c.field.depth = 2;
    c.field.map_hidden = 8;
    c.field.w_dim = 4;
    c.field.octaves = 2;
    c.normalizer_samples = 2000;
    c.recon.n_samples = 500;
    c.recon.steps = 200;
    c.recon.max_mse = 10.0;
    c.density_warmup = 2;
    return c;
}

class HarnessTest : public ::testing::Test
{
protected:
    static void SetUpTestSuite() { setup_ = new cgof::Setup(make_setup(tiny_config())); }
    static void TearDownTestSuite()
    {
        delete setup_;
        setup_ = nullptr;
    }
    static cgof::Setup* setup_;
};

cgof::Setup* HarnessTest::setup_ = nullptr;

} // namespace

TEST(TrainConfig, JsonRoundTrip)
{
    TrainConfig c = tiny_config();
    c.flags.warp = false;
    c.weights.lambda_d = 50.0;
    const TrainConfig back = train_config_from_json(train_config_to_json(c));
    EXPECT_EQ(train_config_to_json(back), train_config_to_json(c));
    EXPECT_FALSE(back.flags.warp);
    EXPECT_EQ(back.weights.lambda_d, 50.0);
}

TEST(TrainConfig, RejectsInvalid)
{
    nlohmann::json j = train_config_to_json(TrainConfig{});
    j["n_steps"] = 0;
    EXPECT_THROW(train_config_from_json(j), std::invalid_argument);
    j = train_config_to_json(TrainConfig{});
    j["flags"] = {{"photometric", false}, {"recon", false}, {"mgs", true}, {"density_reg", false},
                  {"ldmk", false},        {"warp", false},  {"gan", false}};
    EXPECT_THROW(train_config_from_json(j), std::invalid_argument);
}

TEST(TrainLog, CsvHeaderAndRows)
{
    TrainLog log;
    log.rows.push_back({0, LossTerms{0, 1, 2, 3, 4, 5, 6}, 0.5});
    std::ostringstream out;
    log.write_csv(out);
    EXPECT_EQ(out.str(), "step,gan,recon,density_reg,ldmk,warp,photometric,total,margin\n0,0,1,2,3,4,5,6,0.5\n");
}

TEST(Harness, ChooseWithoutReplacement)
{
    Rng rng = keyed_stream(1, {1});
    const auto idx = detail::choose_without_replacement(100, 30, rng);
    EXPECT_EQ(idx.size(), 30u);
    EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 30u);
    EXPECT_EQ(detail::choose_without_replacement(5, 10, rng).size(), 5u);
}

TEST(Harness, TargetImageShowsFaceOnBackground)
{
    const MorphableModel m = make_toy_model();
    const Camera cam = look_at_camera(kCameraRadius, 0.0, 0.0, kFovDeg, 32, 32);
    const Image img = make_target_image(m, MorphCoeffs::zeros(m.dims), cam);
    for (int c = 0; c < 3; ++c) {
        EXPECT_EQ(img.at(0, 0, c), kBackground);
        EXPECT_EQ(img.at(31, 31, c), kBackground);
    }
    EXPECT_NE(img.at(16, 16, 0), kBackground);
    EXPECT_EQ(make_target_image(m, MorphCoeffs::zeros(m.dims), cam, 3).data, img.data);
}

TEST(Harness, ReconstructorInputIsCentered)
{
    const Eigen::VectorXd x = reconstructor_input(Image(32, 32, kBackground));
    EXPECT_EQ(x.size(), kReconInputs);
    EXPECT_LT(x.cwiseAbs().maxCoeff(), 1e-15);
}

TEST_F(HarnessTest, DrawStepIsDeterministic)
{
    const TrainConfig c = tiny_config();
    const StepSample a = draw_step(*setup_, c, 5), b = draw_step(*setup_, c, 5);
    EXPECT_EQ(a.z, b.z);
    EXPECT_EQ(a.z_prime, b.z_prime);
    EXPECT_NE(draw_step(*setup_, c, 6).z, a.z);
    EXPECT_EQ(a.coeffs_prime.z_shape, a.coeffs.z_shape);
    EXPECT_EQ(a.coeffs_prime.z_tex, a.coeffs.z_tex);
    EXPECT_NE(a.coeffs_prime.z_exp, a.coeffs.z_exp);
    EXPECT_LT((setup_->normalizer.denormalize(a.z_prime) - a.coeffs_prime.flat()).norm(), 1e-10);
    TrainConfig same = c;
    same.same_exp_partner = true;
    EXPECT_EQ(draw_step(*setup_, same, 5).z_prime, a.z);
}

TEST_F(HarnessTest, StepProducesEveryEnabledTerm)
{
    const TrainConfig c = tiny_config();
    const FieldParams p = init_params(c.seed, c.field);
    const StepResult r = train_step(p, *setup_, c, 0);
    EXPECT_GT(r.terms.photometric, 0.0);
    EXPECT_GT(r.terms.density_reg, 0.0);
    EXPECT_GT(r.terms.recon, 0.0);
    EXPECT_GT(r.terms.ldmk, 0.0);
    EXPECT_GT(r.terms.warp, 0.0);
    EXPECT_EQ(r.terms.gan, 0.0);
    ASSERT_EQ(r.grads.size(), p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        EXPECT_TRUE(r.grads[i].allFinite()) << p.tensors[i].name;
        EXPECT_GT(r.grads[i].cwiseAbs().maxCoeff(), 0.0) << p.tensors[i].name;
    }
}

TEST_F(HarnessTest, DisabledTermsStayZero)
{
    TrainConfig c = tiny_config();
    c.flags = AblationFlags{true, false, false, false, false, false, false};
    const StepResult r = train_step(init_params(c.seed, c.field), *setup_, c, 0);
    EXPECT_GT(r.terms.photometric, 0.0);
    EXPECT_EQ(r.terms.recon, 0.0);
    EXPECT_EQ(r.terms.density_reg, 0.0);
    EXPECT_EQ(r.terms.ldmk, 0.0);
    EXPECT_EQ(r.terms.warp, 0.0);
}

TEST_F(HarnessTest, TrainingIsThreadCountIndependent)
{
    TrainConfig c = tiny_config();
    TrainLog log1, log3;
    const FieldParams a = train(*setup_, c, &log1);
    c.threads = 3;
    const FieldParams b = train(*setup_, c, &log3);
    EXPECT_EQ(flatten(a), flatten(b));
    ASSERT_EQ(log1.rows.size(), 3u);
    std::ostringstream s1, s3;
    log1.write_csv(s1);
    log3.write_csv(s3);
    EXPECT_EQ(s1.str(), s3.str());
}

TEST(Harness, AblationLadderAddsOneObjectiveAtATime)
{
    const auto ladder = ablation_ladder();
    ASSERT_EQ(ladder.size(), 6u);
    EXPECT_EQ(ladder[0].first, "photometric");
    EXPECT_FALSE(ladder[0].second.mgs);
    EXPECT_TRUE(ladder[2].second.mgs);
    EXPECT_FALSE(ladder[2].second.density_reg);
    EXPECT_TRUE(ladder[5].second.warp);
    for (const auto& [name, f] : ladder) {
        EXPECT_TRUE(f.photometric) << name;
        EXPECT_FALSE(f.gan) << name;
    }
}

TEST(Harness, ReconstructorJsonRoundTrip)
{
    Reconstructor r;
    r.dims = CoeffDims{};
    r.w0 = MatX::Constant(2, 3, 0.25);
    r.b0 = MatX::Zero(2, 1);
    r.w1 = MatX::Constant(10, 2, -1.5);
    r.b1 = MatX::Ones(10, 1);
    const Reconstructor back = reconstructor_from_json(reconstructor_to_json(r));
    EXPECT_EQ(back.w0, r.w0);
    EXPECT_EQ(back.w1, r.w1);
    EXPECT_EQ(back.b1, r.b1);
    EXPECT_TRUE(back.frozen);
}

TEST(Harness, ReconstructorLearnsCoefficients)
{
    const MorphableModel m = make_toy_model();
    const Normalizer norm = standard_normalizer(m.dims.total(), 5000, 1);
    ReconTrainReport rep;
    const Reconstructor r = pretrain_reconstructor(m, norm, ReconTrainOptions{}, 1, &rep);
    EXPECT_LE(rep.train_mse, 0.5);
    Rng rng = keyed_stream(99, {1});
    const ReconDataset held = make_recon_dataset(m, norm, 200, rng, ReconTrainOptions{});
    Tape t;
    const MatX pred = reconstruct_on_tape(r, t.constant(held.x)).value();
    const double mse = (pred - held.y).squaredNorm() / static_cast<double>(held.y.size());
    const double base = (held.y.colwise() - held.y.rowwise().mean()).squaredNorm() / static_cast<double>(held.y.size());
    EXPECT_LT(mse, 0.5 * base);
    ReconTrainOptions bad;
    bad.n_samples = 100;
    EXPECT_THROW(pretrain_reconstructor(m, norm, bad, 1), std::invalid_argument);
}

TEST(GanSmoke, LossShapesAreSane)
{
    const MorphableModel m = make_toy_model();
    const Camera cam = look_at_camera(kCameraRadius, 0.0, 0.0, kFovDeg, 16, 16);
    const Image real = make_target_image(m, MorphCoeffs::zeros(m.dims), cam);
    const Image fake(16, 16, 0.3);
    Discriminator d = init_discriminator(3);
    AdamState adam;
    adam.lr = 1e-2;
    GanSmokeResult first{}, last{};
    for (int i = 0; i < 50; ++i) {
        last = gan_smoke_step(d, adam, fake, real, 0.1);
        if (i == 0) {
            first = last;
        }
        EXPECT_GE(last.r1, 0.0);
        EXPECT_TRUE(std::isfinite(last.g_loss) && std::isfinite(last.d_loss));
        EXPECT_LE(last.g_loss, 0.0);
    }
    EXPECT_GT(last.d_loss - 0.1 * last.r1, first.d_loss - 0.1 * first.r1);
}
