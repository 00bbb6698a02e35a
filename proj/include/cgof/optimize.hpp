#pragma once

#include "cgof/autodiff.hpp"
#include "cgof/field.hpp"
#include "cgof/geom.hpp"
#include "cgof/image.hpp"
#include "cgof/losses.hpp"
#include "cgof/mesh.hpp"
#include "cgof/rng.hpp"
#include "cgof/volren.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace cgof {

// ---- Adam -----------------------------------------------------------------------

struct AdamState
{
    long step = 0;
    double lr = 2e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<MatX> m;
    std::vector<MatX> v;
};

struct NonFiniteGradient : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

/// Bias-corrected Adam update of every tensor in place.
inline void adam_step(AdamState& s, std::vector<MatX*> params, const std::vector<MatX>& grads,
                      const std::vector<std::string>& names = {})
{
    if (params.size() != grads.size()) {
        throw std::invalid_argument("adam_step: parameter and gradient counts differ");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols()) {
            throw std::invalid_argument("adam_step: gradient shape mismatch for tensor " +
                                        (i < names.size() ? names[i] : std::to_string(i)));
        }
        if (!grads[i].allFinite()) {
            throw NonFiniteGradient("adam_step: non-finite gradient in tensor " +
                                    (i < names.size() ? names[i] : std::to_string(i)));
        }
    }
    if (s.m.empty()) {
        for (const auto* p : params) {
            s.m.push_back(MatX::Zero(p->rows(), p->cols()));
            s.v.push_back(MatX::Zero(p->rows(), p->cols()));
        }
    }
    if (s.m.size() != params.size()) {
        throw std::invalid_argument("adam_step: optimizer state does not match the parameter list");
    }
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i].cwiseProduct(grads[i]);
        params[i]->array() -= s.lr * (s.m[i].array() / c1) / ((s.v[i].array() / c2).sqrt() + s.eps);
    }
}

inline void adam_step(AdamState& s, FieldParams& p, const std::vector<MatX>& grads)
{
    std::vector<MatX*> ptrs;
    std::vector<std::string> names;
    for (auto& t : p.tensors) {
        ptrs.push_back(&t.value);
        names.push_back(t.name);
    }
    adam_step(s, std::move(ptrs), grads, names);
}

// ---- finite differences ------------------------------------------------------------

struct GradProbe
{
    Eigen::Index index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport
{
    std::vector<GradProbe> probes;
    double max_rel_error = 0.0;
    bool pass = true;
};

inline double relative_error(double a, double b)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Central differences against a supplied gradient at randomly chosen
/// coordinates (all coordinates when probes >= dimension).
inline GradCheckReport finite_diff_check(const std::function<double(const Eigen::VectorXd&)>& loss,
                                         const Eigen::VectorXd& x, const Eigen::VectorXd& grad, int probes, Rng& rng,
                                         double step = 1e-5, double tol = 1e-4)
{
    if (grad.size() != x.size()) {
        throw std::invalid_argument("finite_diff_check: gradient and point differ in size");
    }
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.size()));
    std::iota(idx.begin(), idx.end(), 0);
    if (probes < x.size()) {
        for (int k = 0; k < probes; ++k) {
            const auto j = static_cast<std::size_t>(
                k + static_cast<Eigen::Index>(uniform01(rng) * static_cast<double>(x.size() - k)));
            std::swap(idx[k], idx[std::min(j, idx.size() - 1)]);
        }
        idx.resize(static_cast<std::size_t>(std::max(probes, 0)));
    }
    GradCheckReport rep;
    Eigen::VectorXd xp = x;
    for (Eigen::Index i : idx) {
        xp(i) = x(i) + step;
        const double fp = loss(xp);
        xp(i) = x(i) - step;
        const double fm = loss(xp);
        xp(i) = x(i);
        GradProbe p{i, grad(i), (fp - fm) / (2.0 * step), 0.0};
        p.rel_error = relative_error(p.analytic, p.numeric);
        rep.max_rel_error = std::max(rep.max_rel_error, std::isfinite(p.rel_error) ? p.rel_error : 1e300);
        rep.probes.push_back(p);
    }
    rep.pass = rep.max_rel_error < tol;
    return rep;
}

// ---- forward-mode jets for the alignment solver -----------------------------------

template <int N>
struct Jet
{
    double a = 0.0;
    Eigen::Matrix<double, N, 1> v = Eigen::Matrix<double, N, 1>::Zero();

    Jet() = default;
    Jet(double value) : a(value) {}
    Jet(double value, int k) : a(value) { v[k] = 1.0; }
    Jet(double value, const Eigen::Matrix<double, N, 1>& d) : a(value), v(d) {}
};

template <int N> Jet<N> operator+(const Jet<N>& x, const Jet<N>& y) { return {x.a + y.a, x.v + y.v}; }
template <int N> Jet<N> operator-(const Jet<N>& x, const Jet<N>& y) { return {x.a - y.a, x.v - y.v}; }
template <int N> Jet<N> operator-(const Jet<N>& x) { return {-x.a, -x.v}; }
template <int N> Jet<N> operator*(const Jet<N>& x, const Jet<N>& y) { return {x.a * y.a, x.a * y.v + y.a * x.v}; }
template <int N> Jet<N> operator/(const Jet<N>& x, const Jet<N>& y)
{
    return {x.a / y.a, (x.v * y.a - x.a * y.v) / (y.a * y.a)};
}
template <int N> Jet<N> sqrt(const Jet<N>& x)
{
    const double s = std::sqrt(x.a);
    return {s, x.v / (2.0 * s)};
}
template <int N> Jet<N> sin(const Jet<N>& x) { return {std::sin(x.a), std::cos(x.a) * x.v}; }
template <int N> Jet<N> cos(const Jet<N>& x) { return {std::cos(x.a), -std::sin(x.a) * x.v}; }
template <int N> Jet<N> exp(const Jet<N>& x)
{
    const double e = std::exp(x.a);
    return {e, e * x.v};
}
template <int N> Jet<N> abs(const Jet<N>& x)
{
    return x.a > 0.0 ? x : (x.a < 0.0 ? -x : Jet<N>(0.0));
}

inline double jet_value(double x) { return x; }
template <int N> double jet_value(const Jet<N>& x) { return x.a; }

/// Rotation matrix of a rotation vector (Rodrigues), smooth through zero.
template <typename T>
std::array<std::array<T, 3>, 3> rotvec_matrix(const T& rx, const T& ry, const T& rz)
{
    using std::cos;
    using std::sin;
    using std::sqrt;
    const T th2 = rx * rx + ry * ry + rz * rz;
    T a, b; // sin(th)/th, (1 - cos(th))/th^2
    if (jet_value(th2) < 1e-10) {
        a = T(1.0) - th2 / T(6.0);
        b = T(0.5) - th2 / T(24.0);
    } else {
        const T th = sqrt(th2);
        a = sin(th) / th;
        b = (T(1.0) - cos(th)) / th2;
    }
    const std::array<std::array<T, 3>, 3> k = {{{T(0.0), -rz, ry}, {rz, T(0.0), -rx}, {-ry, rx, T(0.0)}}};
    std::array<std::array<T, 3>, 3> r{};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            T kk(0.0);
            for (int m = 0; m < 3; ++m) {
                kk = kk + k[i][m] * k[m][j];
            }
            r[i][j] = T(i == j ? 1.0 : 0.0) + a * k[i][j] + b * kk;
        }
    }
    return r;
}

// ---- coordinate alignment -----------------------------------------------------------

/// Pinhole system with intrinsics K and world-to-camera extrinsics E = [R | t];
/// a point projects to (K E p) dehomogenized. Cameras look along +z.
struct CameraSystem
{
    Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
    Eigen::Matrix<double, 3, 4> E = Eigen::Matrix<double, 3, 4>::Identity();
};

/// Pinhole system equivalent to a Camera: pixel coordinates match project().
inline CameraSystem camera_system(const Camera& cam)
{
    CameraSystem s;
    const double f = cam.focal_px();
    // Camera frame used here: x right, y down, z forward.
    Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
    flip(1, 1) = -1.0;
    flip(2, 2) = -1.0;
    const Eigen::Matrix3d r = flip * cam.rotation.transpose();
    s.K << f, 0, 0.5 * cam.width, 0, f, 0.5 * cam.height, 0, 0, 1;
    s.E.leftCols<3>() = r;
    s.E.col(3) = -r * cam.position;
    return s;
}

inline std::optional<Vec2> project_system(const CameraSystem& s, const Vec3& p)
{
    const Vec3 q = s.K * (s.E.leftCols<3>() * p + s.E.col(3));
    if (!(q.z() > 0.0)) {
        return std::nullopt;
    }
    return Vec2(q.x() / q.z(), q.y() / q.z());
}

struct AlignmentProblem
{
    CameraSystem source;
    CameraSystem target;
    std::vector<Vec3> landmarks;
};

struct AlignOptions
{
    int steps = 5000;
    double lr = 1e-2;
    bool affine = false;
    bool fix_scale = false;
    bool fix_rotation = false;
    double tolerance = 0.0; // stop once the L1 error is at or below this
};

struct AlignResult
{
    SimilarityTransform transform;
    Eigen::Matrix<double, 3, 4> matrix; // linear | translation actually applied
    double final_l1_px = 0.0;
    double initial_l1_px = 0.0;
    int steps_taken = 0;
    std::vector<double> loss_curve; // accepted losses
};

struct AlignmentDiverged : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
T project_l1(const AlignmentProblem& pr, const std::vector<Vec2>& ref, const std::array<std::array<T, 3>, 3>& a,
             const std::array<T, 3>& t)
{
    const Eigen::Matrix3d& K = pr.target.K;
    const auto& E = pr.target.E;
    T loss(0.0);
    for (std::size_t k = 0; k < pr.landmarks.size(); ++k) {
        const Vec3& l = pr.landmarks[k];
        std::array<T, 3> p;
        for (int i = 0; i < 3; ++i) {
            p[i] = a[i][0] * T(l.x()) + a[i][1] * T(l.y()) + a[i][2] * T(l.z()) + t[i];
        }
        std::array<T, 3> c;
        for (int i = 0; i < 3; ++i) {
            c[i] = T(E(i, 0)) * p[0] + T(E(i, 1)) * p[1] + T(E(i, 2)) * p[2] + T(E(i, 3));
        }
        std::array<T, 3> q;
        for (int i = 0; i < 3; ++i) {
            q[i] = T(K(i, 0)) * c[0] + T(K(i, 1)) * c[1] + T(K(i, 2)) * c[2];
        }
        if (!(jet_value(q[2]) > 0.0)) {
            return T(std::numeric_limits<double>::infinity());
        }
        using std::abs;
        loss = loss + abs(q[0] / q[2] - T(ref[k].x())) + abs(q[1] / q[2] - T(ref[k].y()));
    }
    return loss;
}

constexpr int kAlignParams = 12;
using AlignJet = Jet<kAlignParams>;

// theta layout, similarity: [log s, rx, ry, rz, tx, ty, tz]; affine: [A row-major (9), t (3)].
// The translation parameters are relative to `center`: x -> A (x - center) + center + t.
template <typename T>
void transform_of(const Eigen::Matrix<double, kAlignParams, 1>& theta, bool affine, bool as_jet, const Vec3& center,
                  std::array<std::array<T, 3>, 3>& a, std::array<T, 3>& t)
{
    auto var = [&](int i) {
        if constexpr (std::is_same_v<T, double>) {
            return theta[i];
        } else {
            return as_jet ? T(theta[i], i) : T(theta[i]);
        }
    };
    const int t0 = affine ? 9 : 4;
    if (affine) {
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                a[i][j] = var(3 * i + j);
            }
        }
    } else {
        using std::exp;
        const T s = exp(var(0));
        const auto r = rotvec_matrix(var(1), var(2), var(3));
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                a[i][j] = s * r[i][j];
            }
        }
    }
    for (int i = 0; i < 3; ++i) {
        t[i] = var(t0 + i) + T(center[i]);
        for (int j = 0; j < 3; ++j) {
            t[i] = t[i] - a[i][j] * T(center[j]);
        }
    }
}

} // namespace detail

/// Adam on the L1 landmark reprojection error. A step that raises the loss is
/// rejected and halves the learning rate; accepted steps grow it by 10%.
inline AlignResult align_coordinates(const AlignmentProblem& pr, const SimilarityTransform& init,
                                     const AlignOptions& opt = {})
{
    using namespace detail;
    if (pr.landmarks.size() < 4) {
        throw std::invalid_argument("align_coordinates: need at least four landmarks");
    }
    std::vector<Vec2> ref;
    for (const Vec3& l : pr.landmarks) {
        const auto p = project_system(pr.source, l);
        if (!p) {
            throw std::invalid_argument("align_coordinates: landmark behind the source camera");
        }
        ref.push_back(*p);
    }
    // Rotating and scaling about the landmark centroid keeps the translation
    // nearly decoupled from the other parameters.
    Vec3 center = Vec3::Zero();
    for (const Vec3& l : pr.landmarks) {
        center += l;
    }
    center /= static_cast<double>(pr.landmarks.size());
    Eigen::Matrix<double, kAlignParams, 1> theta = Eigen::Matrix<double, kAlignParams, 1>::Zero();
    const Eigen::AngleAxisd aa(init.rotation);
    const Vec3 t_rel = init.translation - center + init.linear() * center;
    if (opt.affine) {
        const Mat3 lin = init.linear();
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                theta[3 * i + j] = lin(i, j);
            }
        }
        theta.segment<3>(9) = t_rel;
    } else {
        theta[0] = std::log(init.scale);
        theta.segment<3>(1) = aa.angle() * aa.axis();
        theta.segment<3>(4) = t_rel;
    }
    const int n_active = opt.affine ? 12 : 7;
    Eigen::Matrix<double, kAlignParams, 1> mask = Eigen::Matrix<double, kAlignParams, 1>::Zero();
    mask.head(n_active).setOnes();
    if (!opt.affine && opt.fix_scale) {
        mask[0] = 0.0;
    }
    if (!opt.affine && opt.fix_rotation) {
        mask.segment<3>(1).setZero();
    }

    auto value_of = [&](const Eigen::Matrix<double, kAlignParams, 1>& th) {
        std::array<std::array<double, 3>, 3> a;
        std::array<double, 3> t;
        transform_of(th, opt.affine, false, center, a, t);
        return project_l1(pr, ref, a, t);
    };
    auto jet_of = [&](const Eigen::Matrix<double, kAlignParams, 1>& th) {
        std::array<std::array<AlignJet, 3>, 3> a;
        std::array<AlignJet, 3> t;
        transform_of(th, opt.affine, true, center, a, t);
        return project_l1(pr, ref, a, t);
    };

    AlignResult res;
    double best = value_of(theta);
    if (!std::isfinite(best)) {
        throw std::invalid_argument("align_coordinates: initial transform puts landmarks behind the target camera");
    }
    res.initial_l1_px = best;
    res.loss_curve.push_back(best);
    double lr = opt.lr;
    Eigen::Matrix<double, kAlignParams, 1> m = Eigen::Matrix<double, kAlignParams, 1>::Zero();
    Eigen::Matrix<double, kAlignParams, 1> v = Eigen::Matrix<double, kAlignParams, 1>::Zero();
    const double b1 = 0.9, b2 = 0.999, eps = 1e-12;
    long t_adam = 0;
    int rejected_in_row = 0;
    for (int step = 0; step < opt.steps && best > opt.tolerance; ++step) {
        res.steps_taken = step + 1;
        const AlignJet j = jet_of(theta);
        const Eigen::Matrix<double, kAlignParams, 1> g = j.v.cwiseProduct(mask);
        if (!g.allFinite()) {
            throw AlignmentDiverged("align_coordinates: non-finite gradient at step " + std::to_string(step) +
                                    " (loss " + std::to_string(best) + ")");
        }
        ++t_adam;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_adam));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_adam));
        const Eigen::Matrix<double, kAlignParams, 1> upd =
            ((m / c1).array() / ((v / c2).array().sqrt() + eps)).matrix().cwiseProduct(mask);
        const Eigen::Matrix<double, kAlignParams, 1> cand = theta - lr * upd;
        const double f = value_of(cand);
        if (std::isfinite(f) && f <= best) {
            theta = cand;
            best = f;
            res.loss_curve.push_back(best);
            rejected_in_row = 0;
            lr *= 1.1;
        } else {
            if (std::isfinite(f) && f > 10.0 * best && ++rejected_in_row > 200) {
                throw AlignmentDiverged("align_coordinates: diverging, candidate loss " + std::to_string(f) +
                                        " vs best " + std::to_string(best) + " at step " + std::to_string(step));
            }
            lr *= 0.5;
            if (lr < 1e-18) {
                break;
            }
        }
    }
    res.final_l1_px = best;
    std::array<std::array<double, 3>, 3> a;
    std::array<double, 3> t;
    transform_of(theta, opt.affine, false, center, a, t);
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 3; ++k) {
            res.matrix(i, k) = a[i][k];
        }
        res.matrix(i, 3) = t[i];
    }
    if (opt.affine) {
        // Closest similarity, for reporting.
        const Mat3 lin = res.matrix.leftCols<3>();
        Eigen::JacobiSVD<Mat3> svd(lin, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat3 rot = svd.matrixU() * svd.matrixV().transpose();
        if (rot.determinant() < 0) {
            Mat3 u = svd.matrixU();
            u.col(2) *= -1.0;
            rot = u * svd.matrixV().transpose();
        }
        res.transform.scale = std::cbrt(std::abs(lin.determinant()));
        res.transform.rotation = Eigen::Quaterniond(rot).normalized();
    } else {
        res.transform.scale = std::exp(theta[0]);
        const Vec3 rv = theta.segment<3>(1);
        res.transform.rotation =
            rv.norm() > 0 ? Eigen::Quaterniond(Eigen::AngleAxisd(rv.norm(), rv.normalized())) : Eigen::Quaterniond::Identity();
    }
    res.transform.translation = res.matrix.col(3);
    return res;
}

inline nlohmann::json align_result_to_json(const AlignResult& r)
{
    nlohmann::json j = transform_to_json(r.transform);
    j["final_l1_px"] = r.final_l1_px;
    return j;
}

inline nlohmann::json camera_system_to_json(const CameraSystem& s)
{
    std::vector<double> k, e;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            k.push_back(s.K(i, j));
        }
        for (int j = 0; j < 4; ++j) {
            e.push_back(s.E(i, j));
        }
    }
    return {{"K", k}, {"E", e}};
}

inline CameraSystem camera_system_from_json(const nlohmann::json& j)
{
    CameraSystem s;
    const auto k = j.at("K").get<std::vector<double>>();
    const auto e = j.at("E").get<std::vector<double>>();
    if (k.size() != 9 || e.size() != 12) {
        throw std::invalid_argument("camera system: K needs 9 and E needs 12 row-major entries");
    }
    for (int i = 0; i < 3; ++i) {
        for (int c = 0; c < 3; ++c) {
            s.K(i, c) = k[3 * i + c];
        }
        for (int c = 0; c < 4; ++c) {
            s.E(i, c) = e[4 * i + c];
        }
    }
    return s;
}

inline nlohmann::json alignment_problem_to_json(const AlignmentProblem& p)
{
    nlohmann::json lms = nlohmann::json::array();
    for (const auto& l : p.landmarks) {
        lms.push_back({l.x(), l.y(), l.z()});
    }
    return {{"source", camera_system_to_json(p.source)}, {"target", camera_system_to_json(p.target)}, {"landmarks", lms}};
}

inline AlignmentProblem alignment_problem_from_json(const nlohmann::json& j)
{
    AlignmentProblem p;
    p.source = camera_system_from_json(j.at("source"));
    p.target = camera_system_from_json(j.at("target"));
    for (const auto& l : j.at("landmarks")) {
        p.landmarks.emplace_back(l.at(0).get<double>(), l.at(1).get<double>(), l.at(2).get<double>());
    }
    return p;
}

/// Target system whose view of T(p) equals the source system's view of p.
inline CameraSystem prewarp_system(const CameraSystem& source, const SimilarityTransform& T)
{
    const SimilarityTransform inv = T.inverse();
    Eigen::Matrix4d h = Eigen::Matrix4d::Identity();
    h.topLeftCorner<3, 3>() = inv.linear();
    h.topRightCorner<3, 1>() = inv.translation;
    CameraSystem out = source;
    out.E = source.E * h;
    return out;
}

// ---- inversion and editing ----------------------------------------------------------

struct InversionOptions
{
    int steps = 500;
    double lr = 0.02;
    int finetune_steps = 0;
    double finetune_lr = 2e-4;
    int patience = 100;
    double tolerance = 0.0; // stop when the photometric loss falls to this value
    RenderConfig render;
};

struct InversionResult
{
    Eigen::VectorXd w;
    std::optional<FieldParams> finetuned;
    std::vector<double> loss_curve;
    double final_loss = 0.0;
    bool early_stopped = false;
};

/// Photometric L1 of a full-image render and its gradients (w, and the field
/// parameters when requested). Sample positions come from a fixed stream.
inline double render_photometric(const FieldParams& params, const Eigen::VectorXd& w, const Image& target,
                                 const Camera& cam, const DepthMap& t_m, const RenderConfig& cfg,
                                 Eigen::VectorXd* grad_w, std::vector<MatX>* grad_params)
{
    const auto rays = pixel_rays(cam);
    const auto field_fn = neural_field(params, w);
    const std::size_t n = rays.size();
    const std::size_t chunk = static_cast<std::size_t>(std::max(cfg.chunk_rays, 1));
    const std::size_t n_chunks = (n + chunk - 1) / chunk;
    std::vector<double> chunk_loss(n_chunks, 0.0);
    std::vector<Eigen::VectorXd> chunk_gw(n_chunks);
    std::vector<std::vector<MatX>> chunk_gp(n_chunks);
    const double norm = 1.0 / (3.0 * static_cast<double>(n));
    parallel_for(n_chunks, cfg.threads, [&](std::size_t c) {
        const std::size_t begin = c * chunk, end = std::min(n, begin + chunk);
        std::vector<Ray> sub(rays.begin() + begin, rays.begin() + end);
        std::vector<double> tm(t_m.depth.begin() + begin, t_m.depth.begin() + end);
        std::vector<std::uint64_t> keys(end - begin);
        std::iota(keys.begin(), keys.end(), begin);
        RayBatch batch = assemble(plan_rays(field_fn, sub, tm, keys, RayPurpose::pixel, cfg, cam.t_near, cam.t_far));
        Tape tape;
        const FieldVars fv = bind(tape, params, grad_params != nullptr);
        const Var wv = grad_w ? tape.leaf(w) : tape.constant(w);
        const TapeRender tr = render_on_tape(fv, wv, std::move(batch), cfg.background);
        MatX tgt(3, static_cast<Eigen::Index>(end - begin));
        for (std::size_t i = begin; i < end; ++i) {
            for (int ch = 0; ch < 3; ++ch) {
                tgt(ch, static_cast<Eigen::Index>(i - begin)) = target.data[3 * i + ch];
            }
        }
        const Var l = ad::scale(ad::sum(ad::abs(ad::add_const(ad::slice_rows(tr.composite, 0, 3), -tgt))), norm);
        chunk_loss[c] = l.value()(0, 0);
        if (grad_w || grad_params) {
            tape.backward(l);
            if (grad_w) {
                chunk_gw[c] = tape.grad(wv).col(0);
            }
            if (grad_params) {
                chunk_gp[c] = collect_grads(tape, fv);
            }
        }
    });
    double loss = 0.0;
    for (std::size_t c = 0; c < n_chunks; ++c) {
        loss += chunk_loss[c];
        if (grad_w) {
            if (c == 0) {
                *grad_w = chunk_gw[c];
            } else {
                *grad_w += chunk_gw[c];
            }
        }
        if (grad_params) {
            if (c == 0) {
                *grad_params = chunk_gp[c];
            } else {
                for (std::size_t k = 0; k < grad_params->size(); ++k) {
                    (*grad_params)[k] += chunk_gp[c][k];
                }
            }
        }
    }
    return loss;
}

/// Phase 1 fits w with the field frozen; the optional phase 2 tunes the field
/// with w held at the pivot.
inline InversionResult invert_image(const FieldParams& params, const Image& target, const Camera& cam,
                                    const Mesh* mesh, const Eigen::VectorXd& w_init, const InversionOptions& opt)
{
    if (target.width != cam.width || target.height != cam.height) {
        throw std::invalid_argument("invert_image: target size does not match the camera");
    }
    const DepthMap t_m = mesh ? ray_mesh_depth(*mesh, cam, opt.render.threads) : empty_depth_map(cam);
    InversionResult res;
    res.w = w_init;
    if (opt.steps <= 0 && opt.finetune_steps <= 0) {
        res.final_loss = render_photometric(params, res.w, target, cam, t_m, opt.render, nullptr, nullptr);
        return res;
    }
    AdamState adam;
    adam.lr = opt.lr;
    MatX w_mat = res.w;
    Eigen::VectorXd best_w = res.w;
    double best = std::numeric_limits<double>::infinity();
    int stale = 0;
    for (int step = 0; step < opt.steps; ++step) {
        Eigen::VectorXd g;
        const double loss = render_photometric(params, w_mat.col(0), target, cam, t_m, opt.render, &g, nullptr);
        res.loss_curve.push_back(loss);
        if (loss < best) {
            best = loss;
            best_w = w_mat.col(0);
            stale = 0;
        } else if (++stale >= opt.patience) {
            res.early_stopped = true;
            break;
        }
        if (loss <= opt.tolerance) {
            break;
        }
        adam_step(adam, {&w_mat}, {MatX(g)}, {"w"});
    }
    if (opt.steps > 0 && !res.early_stopped && (res.loss_curve.empty() || res.loss_curve.back() > opt.tolerance)) {
        const double last = render_photometric(params, w_mat.col(0), target, cam, t_m, opt.render, nullptr, nullptr);
        if (last < best) {
            best = last;
            best_w = w_mat.col(0);
        }
    }
    res.w = best_w;
    res.final_loss = best;
    if (opt.finetune_steps > 0) {
        FieldParams tuned = params;
        AdamState pa;
        pa.lr = opt.finetune_lr;
        for (int step = 0; step < opt.finetune_steps; ++step) {
            std::vector<MatX> g;
            const double loss = render_photometric(tuned, res.w, target, cam, t_m, opt.render, nullptr, &g);
            res.loss_curve.push_back(loss);
            adam_step(pa, tuned, g);
        }
        res.final_loss = render_photometric(tuned, res.w, target, cam, t_m, opt.render, nullptr, nullptr);
        res.finetuned = std::move(tuned);
    }
    return res;
}

/// w_edit = w_hat + (M(z') - M(z)); the difference is formed first so z' = z
/// returns w_hat unchanged.
inline Eigen::VectorXd edit_latent(const Eigen::VectorXd& w_hat, const FieldParams& params, const Eigen::VectorXd& z,
                                   const Eigen::VectorXd& z_prime)
{
    const Eigen::VectorXd delta = map_latent(params, z_prime) - map_latent(params, z);
    return w_hat + delta;
}

} // namespace cgof
