#include "cgof/morphable.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace cgof;

TEST(ToyModel, Counts)
{
    const MorphableModel m = make_toy_model(1, 4, 2);
    EXPECT_EQ(m.vertex_count(), 642);
    EXPECT_EQ(m.faces.size(), 1280u);
    EXPECT_EQ(m.landmark_indices.size(), 68u);
    EXPECT_EQ(std::set<int>(m.landmark_indices.begin(), m.landmark_indices.end()).size(), 68u);
    EXPECT_EQ(std::count(m.contour_mask.begin(), m.contour_mask.end(), true), 17);
    for (int k = 0; k < 17; ++k) {
        EXPECT_TRUE(m.contour_mask[k]);
    }
    EXPECT_NO_THROW(m.mean_mesh().validate());
    EXPECT_EQ(m.dims.total(), 8);
}

TEST(ToyModel, Deterministic)
{
    EXPECT_EQ(model_to_json(make_toy_model(7)).dump(), model_to_json(make_toy_model(7)).dump());
    EXPECT_NE(model_to_json(make_toy_model(7)).dump(), model_to_json(make_toy_model(8)).dump());
}

TEST(ToyModel, UnitRmsColumnsBeforeScaling)
{
    const MorphableModel m = make_toy_model(1);
    for (int k = 0; k < m.dims.shape; ++k) {
        EXPECT_NEAR(detail::column_rms(m.shape_basis.col(k) / m.shape_amplitude[k]), 1.0, 1e-9);
    }
    for (int k = 0; k < m.dims.exp; ++k) {
        EXPECT_NEAR(detail::column_rms(m.exp_basis.col(k) / m.exp_amplitude[k]), 1.0, 1e-9);
        EXPECT_NEAR(detail::column_peak(m.exp_basis.col(k)), kExpressionPeak, 1e-12);
    }
}

TEST(ToyModel, RejectsTooManyComponents)
{
    EXPECT_THROW(make_toy_model(1, 4, 3), std::invalid_argument);
    EXPECT_THROW(make_toy_model(1, 5, 2), std::invalid_argument);
    EXPECT_THROW(make_toy_model(1, 0, 2), std::invalid_argument);
}

TEST(ToyModel, EllipsoidRadii)
{
    const MorphableModel m = make_toy_model(1);
    for (const Vec3& v : m.mean_mesh().vertices) {
        EXPECT_NEAR(v.cwiseQuotient(kHeadRadii).norm(), 1.0, 1e-12);
    }
}

TEST(Synthesize, ZeroCoefficientsGiveMeanMesh)
{
    const MorphableModel m = make_toy_model(1);
    const Mesh mesh = synthesize_mesh(m, MorphCoeffs::zeros(m.dims));
    const Mesh mean = m.mean_mesh();
    ASSERT_EQ(mesh.vertices.size(), mean.vertices.size());
    for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
        EXPECT_EQ(mesh.vertices[v], mean.vertices[v]);
    }
    EXPECT_EQ(mesh.faces, mean.faces);
}

TEST(Synthesize, Linearity)
{
    const MorphableModel m = make_toy_model(1);
    Rng rng = keyed_stream(9, {1});
    auto draw = [&](int n) {
        VecX v(n);
        for (int i = 0; i < n; ++i) {
            v[i] = normal01(rng);
        }
        return v;
    };
    const VecX as = draw(4), ae = draw(2), bs = draw(4), be = draw(2);
    const Mesh ma = synthesize_mesh(m, as, ae), mb = synthesize_mesh(m, bs, be);
    const Mesh m0 = synthesize_mesh(m, VecX::Zero(4), VecX::Zero(2));
    const Mesh mab = synthesize_mesh(m, as + bs, ae + be);
    for (std::size_t v = 0; v < ma.vertices.size(); ++v) {
        EXPECT_LT((ma.vertices[v] + mb.vertices[v] - m0.vertices[v] - mab.vertices[v]).norm(), 1e-12);
    }
}

TEST(Synthesize, UnitShapeComponentExtractsColumn)
{
    const MorphableModel m = make_toy_model(1);
    for (int k = 0; k < 4; ++k) {
        const Mesh mesh = synthesize_mesh(m, VecX::Unit(4, k), VecX::Zero(2));
        for (int v = 0; v < m.vertex_count(); ++v) {
            const Vec3 expected = m.mean_vertices.segment<3>(3 * v) + m.shape_basis.col(k).segment<3>(3 * v);
            EXPECT_EQ(mesh.vertices[v], expected);
        }
    }
}

TEST(Synthesize, DimensionMismatchThrows)
{
    const MorphableModel m = make_toy_model(1);
    EXPECT_THROW(synthesize_mesh(m, VecX::Zero(3), VecX::Zero(2)), std::invalid_argument);
    EXPECT_THROW(MorphCoeffs::from_flat(VecX::Zero(7), m.dims), std::invalid_argument);
}

TEST(Landmarks, MeanAndTranslation)
{
    const MorphableModel m = make_toy_model(1);
    const Mesh mean = m.mean_mesh();
    const LandmarkSet a = landmarks_of(m, mean);
    ASSERT_EQ(a.positions.size(), 68u);
    for (int k = 0; k < 68; ++k) {
        EXPECT_EQ(a.positions[k], mean.vertices[m.landmark_indices[k]]);
        EXPECT_EQ(a.contour_mask[k], m.contour_mask[k]);
    }
    const Vec3 t(0.1, -0.2, 0.3);
    const LandmarkSet b = landmarks_of(m, mean.translated(t));
    for (int k = 0; k < 68; ++k) {
        EXPECT_LT((b.positions[k] - a.positions[k] - t).norm(), 1e-15);
    }
}

TEST(Landmarks, MouthBumpFollowsGaussianWindow)
{
    const MorphableModel m = make_toy_model(1);
    const LandmarkSet a = landmarks_of(m, m.mean_mesh());
    const LandmarkSet b = landmarks_of(m, synthesize_mesh(m, VecX::Zero(4), VecX::Unit(2, 0)));
    // Each landmark moves along its unit normal by scale * exp(-r^2 / 2w^2).
    std::vector<double> scale;
    for (int k = 0; k < 68; ++k) {
        const double r2 = (a.positions[k] - kExpressionAnchors[0]).squaredNorm();
        const double window = std::exp(-r2 / (2.0 * kExpressionWindow * kExpressionWindow));
        const double shift = (b.positions[k] - a.positions[k]).norm();
        scale.push_back(shift / window);
        if (window * kExpressionPeak * 2.0 < 1e-6) {
            EXPECT_LT(shift, 1e-6);
        }
    }
    for (double s : scale) {
        EXPECT_NEAR(s / scale.front(), 1.0, 1e-9);
    }
    // Scale of the peak displacement, which is close to but not at a vertex.
    EXPECT_GT(scale.front(), kExpressionPeak);
    EXPECT_LT(scale.front(), 1.2 * kExpressionPeak);
}

TEST(Normalizer, StandardNormalSamples)
{
    Rng rng = keyed_stream(9, {2});
    MatX s(100000, 4);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        s.data()[i] = normal01(rng);
    }
    const Normalizer n = fit_normalizer(s);
    EXPECT_LT(n.mu.cwiseAbs().maxCoeff(), 0.05);
    EXPECT_LT((n.chol - MatX::Identity(4, 4)).cwiseAbs().maxCoeff(), 0.05);
}

TEST(Normalizer, ShiftEquivariance)
{
    Rng rng = keyed_stream(9, {3});
    MatX s(500, 3);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        s.data()[i] = normal01(rng);
    }
    const Eigen::RowVector3d c(1.5, -2.0, 0.25);
    const Normalizer a = fit_normalizer(s);
    const Normalizer b = fit_normalizer(s.rowwise() + c);
    EXPECT_LT((b.mu - a.mu - c.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((b.chol - a.chol).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Normalizer, HandCholesky)
{
    // Four points with zero mean and covariance exactly diag(4, 1) (n - 1 = 3).
    const double a = std::sqrt(6.0), b = std::sqrt(1.5);
    MatX s(4, 2);
    s << a, 0, -a, 0, 0, b, 0, -b;
    const Normalizer n = fit_normalizer(s);
    EXPECT_NEAR(n.chol(0, 0), 2.0, 1e-12);
    EXPECT_NEAR(n.chol(1, 1), 1.0, 1e-12);
    EXPECT_NEAR(n.chol(1, 0), 0.0, 1e-12);
    EXPECT_EQ(n.chol(0, 1), 0.0);
}

TEST(Normalizer, SingularCovarianceNamesDeficiency)
{
    MatX s(10, 3);
    for (int i = 0; i < 10; ++i) {
        s(i, 0) = i;
        s(i, 1) = 2.0 * i;
        s(i, 2) = (i * i) % 7;
    }
    try {
        fit_normalizer(s);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("1 deficient"), std::string::npos) << e.what();
    }
    EXPECT_THROW(fit_normalizer(MatX::Zero(2, 3)), std::invalid_argument);
}

TEST(Normalizer, NormalizeDenormalize)
{
    Normalizer n{VecX::Zero(2), MatX::Zero(2, 2)};
    n.chol(0, 0) = 2.0;
    n.chol(1, 1) = 1.0;
    const VecX z = n.normalize(Eigen::Vector2d(2.0, 1.0));
    EXPECT_DOUBLE_EQ(z[0], 1.0);
    EXPECT_DOUBLE_EQ(z[1], 1.0);

    Rng rng = keyed_stream(9, {4});
    MatX s(200, 5);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        s.data()[i] = normal01(rng) * (1 + i % 3);
    }
    const Normalizer f = fit_normalizer(s);
    EXPECT_LT(f.normalize(f.mu).cwiseAbs().maxCoeff(), 1e-15);
    for (int i = 0; i < 50; ++i) {
        VecX x(5);
        for (int k = 0; k < 5; ++k) {
            x[k] = 3.0 * normal01(rng);
        }
        EXPECT_LT((f.denormalize(f.normalize(x)) - x).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LT((f.normalize(f.denormalize(x)) - x).cwiseAbs().maxCoeff(), 1e-10);
    }
    EXPECT_THROW(f.normalize(VecX::Zero(4)), std::invalid_argument);
}

TEST(Normalizer, JsonRoundTrip)
{
    Rng rng = keyed_stream(9, {5});
    MatX s(50, 3);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        s.data()[i] = normal01(rng);
    }
    const Normalizer a = fit_normalizer(s);
    const Normalizer b = normalizer_from_json(normalizer_to_json(a));
    EXPECT_EQ(a.mu, b.mu);
    EXPECT_EQ(a.chol, b.chol);
}

TEST(ModelJson, RoundTrip)
{
    const MorphableModel a = make_toy_model(3);
    const MorphableModel b = model_from_json(model_to_json(a));
    EXPECT_EQ(a.mean_vertices, b.mean_vertices);
    EXPECT_EQ(a.shape_basis, b.shape_basis);
    EXPECT_EQ(a.exp_basis, b.exp_basis);
    EXPECT_EQ(a.landmark_indices, b.landmark_indices);
    EXPECT_EQ(model_to_json(a).dump(), model_to_json(b).dump());
}

TEST(Albedo, RangeAndTextureEffect)
{
    const MorphableModel m = make_toy_model(1);
    const Vec3 p(0.1, 0.2, 0.3);
    EXPECT_EQ(albedo(m, VecX::Zero(2), p), m.texture.base);
    const Vec3 c = albedo(m, Eigen::Vector2d(5.0, -5.0), p);
    EXPECT_TRUE((c.array() >= 0.02).all() && (c.array() <= 0.98).all());
    EXPECT_NE(c, m.texture.base);
}
