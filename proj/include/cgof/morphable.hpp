#pragma once

#include "cgof/geom.hpp"
#include "cgof/mesh.hpp"
#include "cgof/rng.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <json.hpp>

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cgof {

using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

struct CoeffDims
{
    int shape = 4;
    int exp = 2;
    int tex = 2;
    int other = 0;

    int total() const { return shape + exp + tex + other; }
    bool operator==(const CoeffDims&) const = default;
};

/// One coefficient vector split into its blocks. The flattened layout is
/// [shape | exp | tex | else].
struct MorphCoeffs
{
    VecX z_shape, z_exp, z_tex, z_else;

    static MorphCoeffs zeros(const CoeffDims& d)
    {
        return {VecX::Zero(d.shape), VecX::Zero(d.exp), VecX::Zero(d.tex), VecX::Zero(d.other)};
    }

    static MorphCoeffs from_flat(const VecX& flat, const CoeffDims& d)
    {
        if (flat.size() != d.total()) {
            throw std::invalid_argument("coefficient vector has " + std::to_string(flat.size()) + " entries, expected " +
                                        std::to_string(d.total()));
        }
        return {flat.segment(0, d.shape), flat.segment(d.shape, d.exp), flat.segment(d.shape + d.exp, d.tex),
                flat.segment(d.shape + d.exp + d.tex, d.other)};
    }

    VecX flat() const
    {
        VecX out(z_shape.size() + z_exp.size() + z_tex.size() + z_else.size());
        out << z_shape, z_exp, z_tex, z_else;
        return out;
    }

    CoeffDims dims() const
    {
        return {static_cast<int>(z_shape.size()), static_cast<int>(z_exp.size()), static_cast<int>(z_tex.size()),
                static_cast<int>(z_else.size())};
    }
};

/// Procedural albedo: base color plus z_tex-weighted sinusoidal color fields.
struct TextureBasis
{
    Vec3 base = Vec3(0.72, 0.56, 0.46);
    std::vector<Vec3> frequency; // spatial frequency of each field
    std::vector<Vec3> phase;     // per-channel phase of each field
    double amplitude = 0.12;
};

/// Linear face model: vertices = mean + B_shape z_shape + B_exp z_exp.
/// Bases are stored vertex-major (x0 y0 z0 x1 ...) and already scaled; the
/// *_amplitude vectors hold the scale that was applied to each unit-RMS column.
struct MorphableModel
{
    VecX mean_vertices;
    std::vector<Face> faces;
    MatX shape_basis;
    MatX exp_basis;
    VecX shape_amplitude;
    VecX exp_amplitude;
    std::vector<int> landmark_indices;
    std::vector<bool> contour_mask;
    TextureBasis texture;
    CoeffDims dims;

    int vertex_count() const { return static_cast<int>(mean_vertices.size() / 3); }

    Mesh mean_mesh() const
    {
        Mesh m;
        m.faces = faces;
        m.vertices.resize(vertex_count());
        for (int v = 0; v < vertex_count(); ++v) {
            m.vertices[v] = mean_vertices.segment<3>(3 * v);
        }
        return m;
    }
};

namespace detail {

/// Level-n subdivided icosahedron on the unit sphere.
inline Mesh icosphere(int levels)
{
    const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
    Mesh m;
    m.vertices = {{-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0}, {0, -1, phi}, {0, 1, phi},
                  {0, -1, -phi}, {0, 1, -phi}, {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
    for (auto& v : m.vertices) {
        v.normalize();
    }
    m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
               {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
               {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
    for (int level = 0; level < levels; ++level) {
        std::map<std::pair<int, int>, int> midpoint;
        auto mid = [&](int a, int b) {
            const auto key = std::minmax(a, b);
            if (auto it = midpoint.find(key); it != midpoint.end()) {
                return it->second;
            }
            m.vertices.push_back((m.vertices[a] + m.vertices[b]).normalized());
            const int idx = static_cast<int>(m.vertices.size()) - 1;
            midpoint.emplace(key, idx);
            return idx;
        };
        std::vector<Face> next;
        next.reserve(m.faces.size() * 4);
        for (const auto& [a, b, c] : m.faces) {
            const int ab = mid(a, b), bc = mid(b, c), ca = mid(c, a);
            next.push_back({a, ab, ca});
            next.push_back({b, bc, ab});
            next.push_back({c, ca, bc});
            next.push_back({ab, bc, ca});
        }
        m.faces = std::move(next);
    }
    return m;
}

inline double column_rms(const VecX& column)
{
    return std::sqrt(column.squaredNorm() / (column.size() / 3));
}

inline double column_peak(const VecX& column)
{
    double peak = 0.0;
    for (Eigen::Index v = 0; v < column.size() / 3; ++v) {
        peak = std::max(peak, column.segment<3>(3 * v).norm());
    }
    return peak;
}

} // namespace detail

/// Ellipsoid radii of the toy head and the fixed deformation anchors.
inline const Vec3 kHeadRadii(0.30, 0.40, 0.35);
inline const std::array<Vec3, 2> kExpressionAnchors = {Vec3(0.0, -0.15, 0.33), Vec3(0.0, 0.20, 0.30)};
inline constexpr double kExpressionWindow = 0.15;
inline constexpr double kExpressionPeak = 0.05;
inline constexpr double kShapePeak = 0.03;
inline constexpr int kShapeTemplates = 4;
inline constexpr int kTextureTemplates = 2;
inline constexpr double kLandmarkDiskRadius = 0.25;

/// Toy morphable model on a level-3 icosphere (642 vertices, 1280 faces).
/// Geometry is fixed; the seed picks the texture phases.
inline MorphableModel make_toy_model(int seed = 1, int k_shape = 4, int k_exp = 2, int k_tex = 2, int k_other = 0)
{
    if (k_shape < 1 || k_exp < 1) {
        throw std::invalid_argument("make_toy_model: need at least one shape and one expression component");
    }
    if (k_shape > kShapeTemplates) {
        throw std::invalid_argument("make_toy_model: " + std::to_string(k_shape) +
                                    " shape components requested, only " + std::to_string(kShapeTemplates) +
                                    " templates exist");
    }
    if (k_exp > static_cast<int>(kExpressionAnchors.size())) {
        throw std::invalid_argument("make_toy_model: " + std::to_string(k_exp) +
                                    " expression components requested, only " +
                                    std::to_string(kExpressionAnchors.size()) + " anchor templates exist");
    }
    if (k_tex < 0 || k_tex > kTextureTemplates || k_other < 0) {
        throw std::invalid_argument("make_toy_model: texture dimension must lie in [0, 2]");
    }

    Mesh sphere = detail::icosphere(3);
    MorphableModel model;
    model.dims = {k_shape, k_exp, k_tex, k_other};
    model.faces = sphere.faces;
    const int nv = static_cast<int>(sphere.vertices.size());
    model.mean_vertices.resize(3 * nv);
    std::vector<Vec3> normals(nv);
    for (int v = 0; v < nv; ++v) {
        const Vec3 p = sphere.vertices[v].cwiseProduct(kHeadRadii);
        model.mean_vertices.segment<3>(3 * v) = p;
        normals[v] = p.cwiseQuotient(kHeadRadii.cwiseProduct(kHeadRadii)).normalized();
    }

    auto finish_column = [](VecX col, double peak, double& amplitude) {
        col /= detail::column_rms(col);
        amplitude = peak / detail::column_peak(col);
        return VecX(col * amplitude);
    };

    model.shape_basis.resize(3 * nv, k_shape);
    model.shape_amplitude.resize(k_shape);
    for (int k = 0; k < k_shape; ++k) {
        VecX col(3 * nv);
        for (int v = 0; v < nv; ++v) {
            const Vec3 p = model.mean_vertices.segment<3>(3 * v);
            Vec3 d = Vec3::Zero();
            switch (k) {
            case 0: d = Vec3(p.x(), 0, 0); break;
            case 1: d = Vec3(0, p.y(), 0); break;
            case 2: d = Vec3(0, 0, p.z()); break;
            default: d = Vec3(p.x(), 0, p.z()) * (p.y() / kHeadRadii.y()); break; // vertical taper
            }
            col.segment<3>(3 * v) = d;
        }
        model.shape_basis.col(k) = finish_column(col, kShapePeak, model.shape_amplitude[k]);
    }

    model.exp_basis.resize(3 * nv, k_exp);
    model.exp_amplitude.resize(k_exp);
    for (int k = 0; k < k_exp; ++k) {
        VecX col(3 * nv);
        for (int v = 0; v < nv; ++v) {
            const Vec3 p = model.mean_vertices.segment<3>(3 * v);
            const double r2 = (p - kExpressionAnchors[k]).squaredNorm();
            col.segment<3>(3 * v) = std::exp(-r2 / (2.0 * kExpressionWindow * kExpressionWindow)) * normals[v];
        }
        model.exp_basis.col(k) = finish_column(col, kExpressionPeak, model.exp_amplitude[k]);
    }

    // Landmarks: Vogel (Fibonacci) spiral on a frontal disk lifted onto the
    // front of the ellipsoid; each spiral point claims its nearest unused
    // vertex. The outermost 17 points form the contour and come first.
    const int n = LandmarkSet::kCount;
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    std::vector<bool> taken(nv, false);
    std::vector<int> spiral_vertex(n);
    for (int k = 0; k < n; ++k) {
        const double r = kLandmarkDiskRadius * std::sqrt((k + 0.5) / n);
        const double x = r * std::cos(k * golden), y = r * std::sin(k * golden);
        const double zz = 1.0 - (x * x) / (kHeadRadii.x() * kHeadRadii.x()) - (y * y) / (kHeadRadii.y() * kHeadRadii.y());
        const Vec3 target(x, y, kHeadRadii.z() * std::sqrt(std::max(zz, 0.0)));
        int best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (int v = 0; v < nv; ++v) {
            const double d = (model.mean_vertices.segment<3>(3 * v) - target).squaredNorm();
            if (!taken[v] && d < best_d) {
                best_d = d;
                best = v;
            }
        }
        taken[best] = true;
        spiral_vertex[k] = best;
    }
    for (int k = n - LandmarkSet::kContour; k < n; ++k) {
        model.landmark_indices.push_back(spiral_vertex[k]);
        model.contour_mask.push_back(true);
    }
    for (int k = 0; k < n - LandmarkSet::kContour; ++k) {
        model.landmark_indices.push_back(spiral_vertex[k]);
        model.contour_mask.push_back(false);
    }

    model.texture.frequency = {Vec3(9.0, 0.0, 0.0), Vec3(0.0, 7.0, 3.0)};
    model.texture.frequency.resize(k_tex);
    Rng rng = keyed_stream(static_cast<std::uint64_t>(seed), {0x7e47});
    for (int k = 0; k < k_tex; ++k) {
        const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double b = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double c = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        model.texture.phase.emplace_back(a, b, c);
    }
    return model;
}

inline Mesh synthesize_mesh(const MorphableModel& model, const VecX& z_shape, const VecX& z_exp)
{
    if (z_shape.size() != model.shape_basis.cols() || z_exp.size() != model.exp_basis.cols()) {
        throw std::invalid_argument("synthesize_mesh: coefficient sizes (" + std::to_string(z_shape.size()) + ", " +
                                    std::to_string(z_exp.size()) + ") do not match the model (" +
                                    std::to_string(model.shape_basis.cols()) + ", " +
                                    std::to_string(model.exp_basis.cols()) + ")");
    }
    const VecX flat = model.mean_vertices + model.shape_basis * z_shape + model.exp_basis * z_exp;
    Mesh m;
    m.faces = model.faces;
    m.vertices.resize(model.vertex_count());
    for (int v = 0; v < model.vertex_count(); ++v) {
        m.vertices[v] = flat.segment<3>(3 * v);
    }
    return m;
}

inline Mesh synthesize_mesh(const MorphableModel& model, const MorphCoeffs& c)
{
    return synthesize_mesh(model, c.z_shape, c.z_exp);
}

inline LandmarkSet landmarks_of(const MorphableModel& model, const Mesh& mesh)
{
    if (static_cast<int>(mesh.vertices.size()) != model.vertex_count()) {
        throw std::invalid_argument("landmarks_of: mesh topology does not match the model");
    }
    LandmarkSet out;
    out.contour_mask = model.contour_mask;
    for (int idx : model.landmark_indices) {
        out.positions.push_back(mesh.vertices[idx]);
    }
    return out;
}

inline Vec3 albedo(const MorphableModel& model, const VecX& z_tex, const Vec3& p)
{
    Vec3 a = model.texture.base;
    for (Eigen::Index k = 0; k < z_tex.size(); ++k) {
        for (int c = 0; c < 3; ++c) {
            a[c] += z_tex[k] * model.texture.amplitude *
                    std::sin(model.texture.frequency[k].dot(p) + model.texture.phase[k][c]);
        }
    }
    return a.cwiseMax(0.02).cwiseMin(0.98);
}

/// Whitening transform of coefficient vectors: z = L^-1 (z_tilde - mu).
struct Normalizer
{
    VecX mu;
    MatX chol; // lower triangular, positive diagonal

    VecX normalize(const VecX& z_tilde) const
    {
        check(z_tilde);
        return chol.triangularView<Eigen::Lower>().solve(z_tilde - mu);
    }

    VecX denormalize(const VecX& z) const
    {
        check(z);
        return chol.triangularView<Eigen::Lower>() * z + mu;
    }

    static Normalizer identity(int dim) { return {VecX::Zero(dim), MatX::Identity(dim, dim)}; }

private:
    void check(const VecX& z) const
    {
        if (z.size() != mu.size()) {
            throw std::invalid_argument("normalizer: vector has " + std::to_string(z.size()) +
                                        " entries, expected " + std::to_string(mu.size()));
        }
    }
};

/// Sample mean and Cholesky factor of the (unbiased) sample covariance of the rows.
inline Normalizer fit_normalizer(const MatX& samples)
{
    const auto n = samples.rows();
    const auto d = samples.cols();
    if (n <= d) {
        throw std::invalid_argument("fit_normalizer: need more samples (" + std::to_string(n) + ") than dimensions (" +
                                    std::to_string(d) + ")");
    }
    Normalizer out;
    out.mu = samples.colwise().mean().transpose();
    const MatX centered = samples.rowwise() - out.mu.transpose();
    const MatX cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<MatX> eig(cov);
    const double top = std::max(eig.eigenvalues().maxCoeff(), 0.0);
    int deficient = 0;
    for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
        if (eig.eigenvalues()[i] <= 1e-12 * std::max(top, 1e-300)) {
            ++deficient;
        }
    }
    Eigen::LLT<MatX> llt(cov);
    if (deficient > 0 || llt.info() != Eigen::Success) {
        throw std::runtime_error("fit_normalizer: sample covariance is singular (" +
                                 std::to_string(std::max(deficient, 1)) + " deficient direction(s))");
    }
    out.chol = llt.matrixL();
    return out;
}

inline nlohmann::json normalizer_to_json(const Normalizer& n)
{
    std::vector<double> mu(n.mu.data(), n.mu.data() + n.mu.size());
    std::vector<double> chol;
    for (Eigen::Index r = 0; r < n.chol.rows(); ++r) {
        for (Eigen::Index c = 0; c < n.chol.cols(); ++c) {
            chol.push_back(n.chol(r, c));
        }
    }
    return {{"mu", mu}, {"chol", chol}};
}

inline Normalizer normalizer_from_json(const nlohmann::json& j)
{
    const auto mu = j.at("mu").get<std::vector<double>>();
    const auto chol = j.at("chol").get<std::vector<double>>();
    const auto d = static_cast<Eigen::Index>(mu.size());
    if (static_cast<Eigen::Index>(chol.size()) != d * d) {
        throw std::invalid_argument("normalizer json: chol has the wrong size");
    }
    Normalizer n{Eigen::Map<const VecX>(mu.data(), d), MatX(d, d)};
    for (Eigen::Index r = 0; r < d; ++r) {
        for (Eigen::Index c = 0; c < d; ++c) {
            n.chol(r, c) = chol[r * d + c];
        }
    }
    return n;
}

inline nlohmann::json model_to_json(const MorphableModel& m)
{
    auto flat = [](const auto& mat) {
        std::vector<double> out;
        for (Eigen::Index r = 0; r < mat.rows(); ++r) {
            for (Eigen::Index c = 0; c < mat.cols(); ++c) {
                out.push_back(mat(r, c));
            }
        }
        return out;
    };
    auto vec3s = [](const std::vector<Vec3>& vs) {
        std::vector<std::array<double, 3>> out;
        for (const auto& v : vs) {
            out.push_back({v.x(), v.y(), v.z()});
        }
        return out;
    };
    nlohmann::json j;
    j["dims"] = {{"shape", m.dims.shape}, {"exp", m.dims.exp}, {"tex", m.dims.tex}, {"else", m.dims.other}};
    j["vertices"] = vec3s(m.mean_mesh().vertices);
    j["faces"] = m.faces;
    j["shape_basis"] = flat(m.shape_basis);
    j["exp_basis"] = flat(m.exp_basis);
    j["shape_amplitude"] = flat(m.shape_amplitude);
    j["exp_amplitude"] = flat(m.exp_amplitude);
    j["landmark_indices"] = m.landmark_indices;
    j["contour_mask"] = m.contour_mask;
    j["texture"] = {{"base", {m.texture.base.x(), m.texture.base.y(), m.texture.base.z()}},
                    {"frequency", vec3s(m.texture.frequency)},
                    {"phase", vec3s(m.texture.phase)},
                    {"amplitude", m.texture.amplitude}};
    return j;
}

inline MorphableModel model_from_json(const nlohmann::json& j)
{
    MorphableModel m;
    const auto& d = j.at("dims");
    m.dims = {d.at("shape").get<int>(), d.at("exp").get<int>(), d.at("tex").get<int>(), d.at("else").get<int>()};
    const auto verts = j.at("vertices").get<std::vector<std::array<double, 3>>>();
    const int nv = static_cast<int>(verts.size());
    m.mean_vertices.resize(3 * nv);
    for (int v = 0; v < nv; ++v) {
        m.mean_vertices.segment<3>(3 * v) = Vec3(verts[v][0], verts[v][1], verts[v][2]);
    }
    m.faces = j.at("faces").get<std::vector<Face>>();
    auto unflat = [&](const char* key, Eigen::Index cols) {
        const auto vals = j.at(key).get<std::vector<double>>();
        if (static_cast<Eigen::Index>(vals.size()) != 3 * nv * cols) {
            throw std::invalid_argument(std::string("model json: ") + key + " has the wrong size");
        }
        MatX out(3 * nv, cols);
        for (Eigen::Index r = 0; r < out.rows(); ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) {
                out(r, c) = vals[r * cols + c];
            }
        }
        return out;
    };
    m.shape_basis = unflat("shape_basis", m.dims.shape);
    m.exp_basis = unflat("exp_basis", m.dims.exp);
    const auto sa = j.at("shape_amplitude").get<std::vector<double>>();
    const auto ea = j.at("exp_amplitude").get<std::vector<double>>();
    m.shape_amplitude = Eigen::Map<const VecX>(sa.data(), static_cast<Eigen::Index>(sa.size()));
    m.exp_amplitude = Eigen::Map<const VecX>(ea.data(), static_cast<Eigen::Index>(ea.size()));
    m.landmark_indices = j.at("landmark_indices").get<std::vector<int>>();
    m.contour_mask = j.at("contour_mask").get<std::vector<bool>>();
    const auto& t = j.at("texture");
    const auto base = t.at("base").get<std::array<double, 3>>();
    m.texture.base = Vec3(base[0], base[1], base[2]);
    for (const auto& f : t.at("frequency").get<std::vector<std::array<double, 3>>>()) {
        m.texture.frequency.emplace_back(f[0], f[1], f[2]);
    }
    for (const auto& p : t.at("phase").get<std::vector<std::array<double, 3>>>()) {
        m.texture.phase.emplace_back(p[0], p[1], p[2]);
    }
    m.texture.amplitude = t.at("amplitude").get<double>();
    for (int idx : m.landmark_indices) {
        if (idx < 0 || idx >= nv) {
            throw std::invalid_argument("model json: landmark index out of range");
        }
    }
    m.mean_mesh().validate();
    return m;
}

} // namespace cgof
