#pragma once

#include "cgof/geom.hpp"
#include "cgof/mesh.hpp"
#include "cgof/meshops.hpp"
#include "cgof/rng.hpp"
#include "cgof/volren.hpp"

#include <json.hpp>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgof {

/// A group of coordinates of the (normalized) factor vector that is swept as
/// one property.
struct FactorSpec
{
    std::string name;
    int begin = 0;
    int count = 0;
};

/// prod_{j != i} s_i / s_j
inline double ds_from_stds(const std::vector<double>& group_std, std::size_t i)
{
    for (double s : group_std) {
        if (!(s >= 1e-9)) {
            throw std::runtime_error("disentanglement_score: degenerate sweep (group std " + std::to_string(s) + ")");
        }
    }
    double ds = 1.0;
    for (std::size_t j = 0; j < group_std.size(); ++j) {
        if (j != i) {
            ds *= group_std[i] / group_std[j];
        }
    }
    return ds;
}

/// Per-dimension standard deviation of the rows of `estimates`, averaged within
/// each factor group.
inline std::vector<double> group_stds(const std::vector<Eigen::VectorXd>& estimates,
                                      const std::vector<FactorSpec>& factors)
{
    const auto n = static_cast<double>(estimates.size());
    if (estimates.size() < 2) {
        throw std::invalid_argument("disentanglement_score: need at least two sweeps");
    }
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(estimates.front().size());
    for (const auto& e : estimates) {
        mean += e;
    }
    mean /= n;
    Eigen::VectorXd var = Eigen::VectorXd::Zero(mean.size());
    for (const auto& e : estimates) {
        var += (e - mean).cwiseAbs2();
    }
    const Eigen::VectorXd sd = (var / (n - 1.0)).cwiseSqrt();
    std::vector<double> out;
    for (const auto& f : factors) {
        out.push_back(sd.segment(f.begin, f.count).mean());
    }
    return out;
}

struct DsResult
{
    std::vector<double> scores; // one per factor, in factor order
};

/// Disentanglement scores. The factor vector has `dim` standard-normal entries;
/// observe(v) generates from v and re-estimates it. For each factor and each
/// anchor only that factor's entries are redrawn across the sweeps.
template <typename Observe>
DsResult disentanglement_scores(const std::vector<FactorSpec>& factors, int dim, Observe&& observe, int n_anchors,
                                int n_sweeps, Rng& rng)
{
    if (n_anchors < 1 || n_sweeps < 2) {
        throw std::invalid_argument("disentanglement_score: need at least one anchor and two sweeps");
    }
    DsResult res;
    for (std::size_t i = 0; i < factors.size(); ++i) {
        double acc = 0.0;
        for (int a = 0; a < n_anchors; ++a) {
            Eigen::VectorXd anchor(dim);
            for (int k = 0; k < dim; ++k) {
                anchor[k] = normal01(rng);
            }
            std::vector<Eigen::VectorXd> est;
            for (int s = 0; s < n_sweeps; ++s) {
                Eigen::VectorXd v = anchor;
                for (int k = 0; k < factors[i].count; ++k) {
                    v[factors[i].begin + k] = normal01(rng);
                }
                est.push_back(observe(v));
            }
            acc += ds_from_stds(group_stds(est, factors), i);
        }
        res.scores.push_back(acc / n_anchors);
    }
    return res;
}

struct SurfaceChamferOptions
{
    int n_views = 8;
    double yaw_min = -0.6;
    double yaw_max = 0.6;
    double pitch = 0.0;
    int resolution = 32;
    double min_opacity = 0.5;
    std::size_t mesh_samples = 4000;
    std::uint64_t seed = 0;
};

/// Yaw-spaced evaluation cameras.
inline std::vector<Camera> view_ring(const SurfaceChamferOptions& o)
{
    std::vector<Camera> cams;
    for (int v = 0; v < o.n_views; ++v) {
        const double s = o.n_views > 1 ? static_cast<double>(v) / (o.n_views - 1) : 0.5;
        cams.push_back(look_at_camera(kCameraRadius, o.yaw_min + s * (o.yaw_max - o.yaw_min), o.pitch, kFovDeg,
                                      o.resolution, o.resolution));
    }
    return cams;
}

/// Area-uniform samples of the mesh kept when they are the first surface hit
/// inside the image of at least one camera.
inline std::vector<Vec3> visible_surface_samples(const Mesh& mesh, const std::vector<Camera>& cams, std::size_t count,
                                                 Rng& rng)
{
    const MeshBvh bvh(mesh);
    std::vector<Vec3> out;
    for (const Vec3& p : sample_surface(mesh, count, rng)) {
        for (const Camera& cam : cams) {
            const auto proj = project(cam, p);
            if (!proj || !in_image(cam, proj->u, proj->v)) {
                continue;
            }
            const Ray ray{cam.position, (p - cam.position).normalized()};
            const TriangleHit hit = bvh.intersect(ray, 0.0, proj->depth + 1.0);
            if (hit.valid() && hit.t >= proj->depth - 1e-6) {
                out.push_back(p);
                break;
            }
        }
    }
    return out;
}

struct SurfaceChamferResult
{
    double cd = 0.0;
    std::size_t generated_points = 0;
    std::size_t reference_points = 0;
};

/// Chamfer distance between the back-projected expected depth of the field
/// (pixels with opacity >= min_opacity) over a ring of views and visible
/// area-uniform samples of the conditioning mesh.
template <typename Field>
SurfaceChamferResult surface_chamfer(const Field& field, const Mesh& mesh, RenderConfig cfg,
                                     const SurfaceChamferOptions& opt = {})
{
    const auto cams = view_ring(opt);
    std::vector<Vec3> generated;
    for (std::size_t v = 0; v < cams.size(); ++v) {
        cfg.step = v;
        const RenderResult r = render_image(field, cams[v], &mesh, cfg);
        const auto rays = pixel_rays(cams[v]);
        for (std::size_t i = 0; i < r.aux.size(); ++i) {
            if (r.aux[i].depth_defined && r.aux[i].opacity >= opt.min_opacity) {
                generated.push_back(rays[i].at(r.aux[i].expected_depth));
            }
        }
    }
    if (generated.empty()) {
        throw std::runtime_error("surface_chamfer: the field produced no opaque pixels");
    }
    Rng rng = keyed_stream(opt.seed, {0xcd});
    const auto reference = visible_surface_samples(mesh, cams, opt.mesh_samples, rng);
    if (reference.empty()) {
        throw std::runtime_error("surface_chamfer: no visible mesh samples");
    }
    return {chamfer(generated, reference), generated.size(), reference.size()};
}

/// Mean Euclidean distance over defined non-contour landmarks.
inline double landmark_distance(const std::vector<std::optional<Vec3>>& field_lms, const LandmarkSet& input)
{
    if (field_lms.size() != input.positions.size()) {
        throw std::invalid_argument("landmark_distance: landmark counts differ");
    }
    double sum = 0.0;
    int n = 0;
    for (std::size_t k = 0; k < field_lms.size(); ++k) {
        if (!input.contour_mask[k] && field_lms[k]) {
            sum += (*field_lms[k] - input.positions[k]).norm();
            ++n;
        }
    }
    if (n == 0) {
        throw std::runtime_error("landmark_distance: no defined landmarks");
    }
    return sum / n;
}

/// Pearson correlation of two equally long vectors; empty when either has zero
/// variance.
inline std::optional<double> pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b)
{
    if (a.size() != b.size() || a.size() < 2) {
        throw std::invalid_argument("pearson: vectors must have equal length >= 2");
    }
    const Eigen::VectorXd da = a.array() - a.mean();
    const Eigen::VectorXd db = b.array() - b.mean();
    const double na = da.norm(), nb = db.norm();
    if (na == 0.0 || nb == 0.0) {
        return std::nullopt;
    }
    return std::clamp(da.dot(db) / (na * nb), -1.0, 1.0);
}

inline Eigen::VectorXd flatten_points(const std::vector<Vec3>& pts)
{
    Eigen::VectorXd out(3 * static_cast<Eigen::Index>(pts.size()));
    for (std::size_t i = 0; i < pts.size(); ++i) {
        out.segment<3>(3 * static_cast<Eigen::Index>(i)) = pts[i];
    }
    return out;
}

struct CorrelationResult
{
    double lc = 0.0;
    int pairs_used = 0;
    int pairs_skipped = 0;
};

/// Pearson correlation between field and mesh landmark displacements per pair,
/// averaged over pairs. Zero-variance pairs are skipped and counted.
inline CorrelationResult landmark_correlation(const std::vector<std::vector<Vec3>>& field_disp,
                                              const std::vector<std::vector<Vec3>>& mesh_disp)
{
    if (field_disp.size() != mesh_disp.size()) {
        throw std::invalid_argument("landmark_correlation: pair counts differ");
    }
    CorrelationResult res;
    double sum = 0.0;
    for (std::size_t p = 0; p < field_disp.size(); ++p) {
        const auto r = pearson(flatten_points(field_disp[p]), flatten_points(mesh_disp[p]));
        if (r) {
            sum += *r;
            ++res.pairs_used;
        } else {
            ++res.pairs_skipped;
        }
    }
    if (res.pairs_used == 0) {
        throw std::runtime_error("landmark_correlation: every pair has zero variance");
    }
    res.lc = sum / res.pairs_used;
    return res;
}

struct MetricReport
{
    std::optional<double> ds_shape, ds_exp, ds_pose, cd, ld, lc;
    nlohmann::json counts = nlohmann::json::object();
    nlohmann::json config = nlohmann::json::object();
};

inline nlohmann::json metric_report_to_json(const MetricReport& r)
{
    nlohmann::json j;
    auto put = [&](const char* key, const std::optional<double>& v) { j[key] = v ? nlohmann::json(*v) : nlohmann::json(); };
    put("ds_shape", r.ds_shape);
    put("ds_exp", r.ds_exp);
    put("ds_pose", r.ds_pose);
    put("cd", r.cd);
    put("ld", r.ld);
    put("lc", r.lc);
    j["counts"] = r.counts;
    j["config"] = r.config;
    return j;
}

} // namespace cgof
