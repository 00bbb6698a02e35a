#pragma once

#include "cgof/autodiff.hpp"
#include "cgof/field.hpp"
#include "cgof/geom.hpp"
#include "cgof/image.hpp"
#include "cgof/meshops.hpp"
#include "cgof/parallel.hpp"
#include "cgof/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace cgof {

enum class SampleKind : std::uint8_t { volume, surface };

/// Sample depths along one ray. delta_i = t_{i+1} - t_i, the last one reaching
/// to t_far.
struct RaySamples
{
    double t_near = kNear;
    double t_far = kFar;
    std::vector<double> t;
    std::vector<SampleKind> kind;
    std::vector<double> delta;

    std::size_t size() const { return t.size(); }

    void update_deltas()
    {
        delta.resize(t.size());
        for (std::size_t i = 0; i + 1 < t.size(); ++i) {
            delta[i] = t[i + 1] - t[i];
        }
        if (!t.empty()) {
            delta.back() = std::max(t_far - t.back(), 0.0);
        }
    }
};

inline RaySamples sample_stratified(double t_near, double t_far, int n, Rng& rng)
{
    if (n < 1) {
        throw std::invalid_argument("sample_stratified: need at least one sample");
    }
    RaySamples s{t_near, t_far, {}, {}, {}};
    s.t.resize(n);
    const double width = (t_far - t_near) / n;
    for (int i = 0; i < n; ++i) {
        s.t[i] = std::min(t_near + (i + uniform01(rng)) * width, t_far);
    }
    s.kind.assign(n, SampleKind::volume);
    s.update_deltas();
    return s;
}

/// Inverse-CDF draws from the piecewise-constant density over the coarse bins
/// [t_i, t_i + delta_i], with an epsilon floor on every bin weight.
inline RaySamples sample_importance(const RaySamples& coarse, const std::vector<double>& weights, int n_fine, Rng& rng,
                                    double eps = 1e-5)
{
    if (weights.size() != coarse.size() || coarse.size() == 0) {
        throw std::invalid_argument("sample_importance: weights must align with non-empty coarse samples");
    }
    const std::size_t n = weights.size();
    std::vector<double> cdf(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(weights[i] >= 0.0)) {
            throw std::invalid_argument("sample_importance: weights must be non-negative");
        }
        cdf[i + 1] = cdf[i] + weights[i] + eps;
    }
    const double total = cdf[n];
    for (auto& c : cdf) {
        c /= total;
    }
    RaySamples s{coarse.t_near, coarse.t_far, {}, {}, {}};
    s.t.reserve(n_fine);
    for (int k = 0; k < n_fine; ++k) {
        const double u = uniform01(rng);
        const std::size_t j =
            std::min<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin(), n) - 1;
        const double p = cdf[j + 1] - cdf[j];
        const double frac = p > 0.0 ? std::clamp((u - cdf[j]) / p, 0.0, 1.0) : 0.0;
        s.t.push_back(std::clamp(coarse.t[j] + frac * coarse.delta[j], coarse.t_near, coarse.t_far));
    }
    std::sort(s.t.begin(), s.t.end());
    s.kind.assign(s.t.size(), SampleKind::volume);
    s.update_deltas();
    return s;
}

/// Width of the surface band around the mesh intersection, shrinking linearly
/// from start_fraction to end_fraction of the ray-depth range.
struct MarginSchedule
{
    double start_fraction = 0.5;
    double end_fraction = 0.05;
    long total_steps = 1000;

    double margin(long step, double t_near = kNear, double t_far = kFar) const
    {
        const double range = t_far - t_near;
        if (total_steps <= 0 || step >= total_steps) {
            return end_fraction * range;
        }
        const double s = static_cast<double>(std::max(step, 0L)) / static_cast<double>(total_steps);
        return (start_fraction + s * (end_fraction - start_fraction)) * range;
    }
};

/// Sample i (1-based) uniform in [t_m + ((i-1)/N - 1/2) delta, t_m + (i/N - 1/2) delta],
/// clipped to the ray bounds.
inline RaySamples sample_mesh_guided(double t_m, double margin, int n, Rng& rng, double t_near = kNear,
                                     double t_far = kFar)
{
    if (n < 1 || !std::isfinite(t_m)) {
        throw std::invalid_argument("sample_mesh_guided: need a finite t_m and at least one sample");
    }
    RaySamples s{t_near, t_far, {}, {}, {}};
    s.t.resize(n);
    for (int i = 0; i < n; ++i) {
        const double lo = t_m + (static_cast<double>(i) / n - 0.5) * margin;
        s.t[i] = std::clamp(lo + uniform01(rng) * margin / n, t_near, t_far);
    }
    s.kind.assign(n, SampleKind::surface);
    s.update_deltas();
    return s;
}

inline RaySamples merge_samples(const RaySamples& a, const RaySamples& b)
{
    if (a.size() == 0) {
        return b;
    }
    if (b.size() == 0) {
        return a;
    }
    RaySamples out{a.t_near, a.t_far, {}, {}, {}};
    out.t.reserve(a.size() + b.size());
    out.kind.reserve(a.size() + b.size());
    std::size_t i = 0, j = 0;
    while (i < a.size() || j < b.size()) {
        if (j == b.size() || (i < a.size() && a.t[i] <= b.t[j])) {
            out.t.push_back(a.t[i]);
            out.kind.push_back(a.kind[i++]);
        } else {
            out.t.push_back(b.t[j]);
            out.kind.push_back(b.kind[j++]);
        }
    }
    out.update_deltas();
    return out;
}

struct CompositeResult
{
    Vec3 color = Vec3::Zero();
    std::vector<double> weights; // last entry is the residual background weight
    double residual = 1.0;
    double opacity = 0.0;        // sum of weights before the last sample
    double expected_depth = std::numeric_limits<double>::quiet_NaN();
    bool depth_defined = false;
};

inline constexpr double kMinDepthOpacity = 1e-6;

/// w_i = T_i (1 - exp(-sigma_i delta_i)) for i < N, the last weight being the
/// residual 1 - sum of the others.
inline CompositeResult composite(const RaySamples& s, const double* sigmas, const double* colors_rgb)
{
    const std::size_t n = s.size();
    CompositeResult r;
    r.weights.resize(n);
    if (n == 0) {
        return r;
    }
    double log_t = 0.0, sum = 0.0, depth_num = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double a = sigmas[i] * s.delta[i];
        const double w = std::exp(log_t) * -std::expm1(-a);
        log_t -= a;
        r.weights[i] = w;
        sum += w;
        depth_num += w * s.t[i];
    }
    r.residual = 1.0 - sum;
    r.weights[n - 1] = r.residual;
    r.opacity = sum;
    for (std::size_t i = 0; i < n; ++i) {
        r.color += r.weights[i] * Vec3(colors_rgb[3 * i], colors_rgb[3 * i + 1], colors_rgb[3 * i + 2]);
    }
    if (sum >= kMinDepthOpacity) {
        r.expected_depth = depth_num / sum;
        r.depth_defined = true;
    }
    return r;
}

inline CompositeResult composite(const RaySamples& s, const std::vector<double>& sigmas, const std::vector<Vec3>& colors)
{
    if (sigmas.size() != s.size() || colors.size() != s.size()) {
        throw std::invalid_argument("composite: arrays must align with the samples");
    }
    std::vector<double> rgb(3 * colors.size());
    for (std::size_t i = 0; i < colors.size(); ++i) {
        for (int c = 0; c < 3; ++c) {
            rgb[3 * i + c] = colors[i][c];
        }
    }
    return composite(s, sigmas.data(), rgb.data());
}

// ---- batched rendering --------------------------------------------------------

struct RenderConfig
{
    int n_vol = 48;
    int n_surf = 48;
    int n_fine = 48;
    double margin = 0.05 * (kFar - kNear);
    bool mesh_guided = true;
    bool importance = true;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    int threads = 1;
    int chunk_rays = 64;
    std::optional<double> background; // fixed color of the residual weight, else the last sample's color
};

/// Stream tags keep per-ray randomness of different query kinds apart.
enum class RayPurpose : std::uint64_t { pixel = 1, point = 2, train = 3, landmark = 4 };

struct RayPlan
{
    Ray ray;
    double t_m = std::numeric_limits<double>::quiet_NaN();
    RaySamples samples;

    bool mesh_hit() const { return std::isfinite(t_m); }
};

/// All sample points of a set of rays stacked column-wise.
struct RayBatch
{
    std::vector<RayPlan> plans;
    std::vector<std::size_t> offsets; // plans.size() + 1 entries
    MatX points;
    MatX dirs;

    std::size_t ray_count() const { return plans.size(); }
    std::size_t sample_count() const { return offsets.empty() ? 0 : offsets.back(); }
};

inline RayBatch assemble(std::vector<RayPlan> plans)
{
    RayBatch b;
    b.plans = std::move(plans);
    b.offsets.assign(b.plans.size() + 1, 0);
    for (std::size_t r = 0; r < b.plans.size(); ++r) {
        b.offsets[r + 1] = b.offsets[r] + b.plans[r].samples.size();
    }
    b.points.resize(3, static_cast<Eigen::Index>(b.sample_count()));
    b.dirs.resize(3, static_cast<Eigen::Index>(b.sample_count()));
    for (std::size_t r = 0; r < b.plans.size(); ++r) {
        const auto& p = b.plans[r];
        for (std::size_t i = 0; i < p.samples.size(); ++i) {
            const auto col = static_cast<Eigen::Index>(b.offsets[r] + i);
            b.points.col(col) = p.ray.at(p.samples.t[i]);
            b.dirs.col(col) = p.ray.direction;
        }
    }
    return b;
}

/// Field callables map (points 3xN, dirs 3xN) to (sigma 1xN, colors 3xN).
using FieldEval = std::pair<Eigen::RowVectorXd, MatX>;

inline auto neural_field(const FieldParams& p, const Eigen::VectorXd& w)
{
    return [&p, w](const MatX& x, const MatX& d) -> FieldEval {
        Tape tape;
        const FieldVars fv = bind(tape, p, false);
        const FieldOutput out = eval_field(fv, tape.constant(w), tape.constant(x), &d);
        return {out.sigma.value().row(0), out.color.value()};
    };
}

/// Replaces the color of every ray's last sample with a constant gray.
inline void apply_background(const RayBatch& b, MatX& color, double background)
{
    for (std::size_t r = 0; r < b.ray_count(); ++r) {
        if (b.offsets[r + 1] > b.offsets[r]) {
            color.col(static_cast<Eigen::Index>(b.offsets[r + 1] - 1)).setConstant(background);
        }
    }
}

inline std::vector<CompositeResult> composite_batch(const RayBatch& b, const Eigen::RowVectorXd& sigma, const MatX& color)
{
    std::vector<CompositeResult> out(b.ray_count());
    for (std::size_t r = 0; r < b.ray_count(); ++r) {
        const auto o = static_cast<Eigen::Index>(b.offsets[r]);
        out[r] = composite(b.plans[r].samples, sigma.data() + o, color.data() + 3 * o);
    }
    return out;
}

/// Builds per-ray samples: stratified volume samples plus mesh-guided surface
/// samples where the ray hits the mesh (and mesh guidance is on), otherwise
/// plus importance samples drawn from a coarse pass of the field.
template <typename Field>
std::vector<RayPlan> plan_rays(const Field& field, const std::vector<Ray>& rays, const std::vector<double>& t_m,
                               const std::vector<std::uint64_t>& keys, RayPurpose purpose, const RenderConfig& cfg,
                               double t_near, double t_far)
{
    const std::size_t n = rays.size();
    std::vector<RayPlan> plans(n);
    std::vector<Rng> streams;
    streams.reserve(n);
    std::vector<std::size_t> coarse_only;
    for (std::size_t r = 0; r < n; ++r) {
        streams.push_back(keyed_stream(cfg.seed, {cfg.step, static_cast<std::uint64_t>(purpose), keys[r]}));
        plans[r].ray = rays[r];
        plans[r].t_m = t_m[r];
        plans[r].samples = sample_stratified(t_near, t_far, cfg.n_vol, streams[r]);
        if (cfg.mesh_guided && plans[r].mesh_hit() && cfg.n_surf > 0) {
            plans[r].samples = merge_samples(
                plans[r].samples, sample_mesh_guided(t_m[r], cfg.margin, cfg.n_surf, streams[r], t_near, t_far));
        } else if (cfg.importance && cfg.n_fine > 0) {
            coarse_only.push_back(r);
        }
    }
    if (!coarse_only.empty()) {
        std::vector<RayPlan> coarse;
        coarse.reserve(coarse_only.size());
        for (std::size_t r : coarse_only) {
            coarse.push_back(plans[r]);
        }
        const RayBatch cb = assemble(std::move(coarse));
        const auto [sigma, color] = field(cb.points, cb.dirs);
        const auto comp = composite_batch(cb, sigma, color);
        for (std::size_t k = 0; k < coarse_only.size(); ++k) {
            const std::size_t r = coarse_only[k];
            plans[r].samples = merge_samples(
                plans[r].samples, sample_importance(plans[r].samples, comp[k].weights, cfg.n_fine, streams[r]));
        }
    }
    return plans;
}

/// Renders rays in fixed-size chunks; chunk boundaries do not depend on the
/// thread count.
template <typename Field>
std::vector<CompositeResult> render_rays(const Field& field, const std::vector<Ray>& rays,
                                         const std::vector<double>& t_m, const std::vector<std::uint64_t>& keys,
                                         RayPurpose purpose, const RenderConfig& cfg, double t_near, double t_far)
{
    std::vector<CompositeResult> out(rays.size());
    const std::size_t chunk = static_cast<std::size_t>(std::max(cfg.chunk_rays, 1));
    const std::size_t n_chunks = (rays.size() + chunk - 1) / chunk;
    parallel_for(n_chunks, cfg.threads, [&](std::size_t c) {
        const std::size_t begin = c * chunk, end = std::min(rays.size(), begin + chunk);
        const std::vector<Ray> sub_rays(rays.begin() + begin, rays.begin() + end);
        const std::vector<double> sub_tm(t_m.begin() + begin, t_m.begin() + end);
        const std::vector<std::uint64_t> sub_keys(keys.begin() + begin, keys.begin() + end);
        const RayBatch b = assemble(plan_rays(field, sub_rays, sub_tm, sub_keys, purpose, cfg, t_near, t_far));
        auto [sigma, color] = field(b.points, b.dirs);
        if (cfg.background) {
            apply_background(b, color, *cfg.background);
        }
        auto comp = composite_batch(b, sigma, color);
        for (std::size_t i = 0; i < comp.size(); ++i) {
            out[begin + i] = std::move(comp[i]);
        }
    });
    return out;
}

struct RenderResult
{
    Image image;
    std::vector<CompositeResult> aux;
    DepthMap t_m;
};

inline DepthMap empty_depth_map(const Camera& cam)
{
    const std::size_t n = static_cast<std::size_t>(cam.width) * cam.height;
    return DepthMap{cam.width, cam.height, cam.t_near, cam.t_far, std::vector<double>(n, std::nan("")),
                    std::vector<bool>(n, false)};
}

inline std::vector<Ray> pixel_rays(const Camera& cam)
{
    std::vector<Ray> rays;
    rays.reserve(static_cast<std::size_t>(cam.width) * cam.height);
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            rays.push_back(ray_through_pixel(cam, x + 0.5, y + 0.5));
        }
    }
    return rays;
}

template <typename Field>
RenderResult render_image(const Field& field, const Camera& cam, const Mesh* mesh, const RenderConfig& cfg)
{
    RenderResult res;
    res.t_m = mesh ? ray_mesh_depth(*mesh, cam, cfg.threads) : empty_depth_map(cam);
    const auto rays = pixel_rays(cam);
    std::vector<std::uint64_t> keys(rays.size());
    std::iota(keys.begin(), keys.end(), 0);
    res.aux = render_rays(field, rays, res.t_m.depth, keys, RayPurpose::pixel, cfg, cam.t_near, cam.t_far);
    res.image = Image(cam.width, cam.height);
    for (std::size_t i = 0; i < res.aux.size(); ++i) {
        for (int c = 0; c < 3; ++c) {
            res.image.data[3 * i + c] = res.aux[i].color[c];
        }
    }
    return res;
}

struct DepthQuery
{
    double depth = std::numeric_limits<double>::quiet_NaN();
    bool defined = false;
    Vec3 point = Vec3::Constant(std::numeric_limits<double>::quiet_NaN());
};

/// Expected depth along the rays through continuous pixel coordinates, with
/// back-projection to 3D.
template <typename Field>
std::vector<DepthQuery> render_depth_at(const Field& field, const Camera& cam, const std::vector<Vec2>& points2d,
                                        const Mesh* mesh, const RenderConfig& cfg)
{
    std::vector<Ray> rays;
    std::vector<double> t_m;
    std::vector<std::uint64_t> keys;
    std::unique_ptr<MeshBvh> bvh = mesh ? std::make_unique<MeshBvh>(*mesh) : nullptr;
    for (std::size_t i = 0; i < points2d.size(); ++i) {
        const Vec2& p = points2d[i];
        if (!in_image(cam, p.x(), p.y())) {
            throw std::invalid_argument("render_depth_at: point outside the image bounds");
        }
        rays.push_back(ray_through_pixel(cam, p.x(), p.y()));
        const TriangleHit hit = bvh ? bvh->intersect(rays.back(), cam.t_near, cam.t_far) : TriangleHit{};
        t_m.push_back(hit.valid() ? hit.t : std::nan(""));
        keys.push_back(i);
    }
    const auto comp = render_rays(field, rays, t_m, keys, RayPurpose::point, cfg, cam.t_near, cam.t_far);
    std::vector<DepthQuery> out(comp.size());
    for (std::size_t i = 0; i < comp.size(); ++i) {
        if (comp[i].depth_defined) {
            out[i] = {comp[i].expected_depth, true, rays[i].at(comp[i].expected_depth)};
        }
    }
    return out;
}

// ---- differentiable compositing ---------------------------------------------

/// Row layout of composite_on_tape's output.
inline constexpr Eigen::Index kRowDepthNum = 3, kRowOpacity = 4;

/// Composites every ray of the batch on the tape. Output is 5 x R with rows
/// (r, g, b, sum_{i<N} w_i t_i, sum_{i<N} w_i). Sample positions are constants.
inline Var composite_on_tape(std::shared_ptr<const RayBatch> batch, Var sigma, Var color)
{
    const RayBatch& b = *batch;
    const auto n = static_cast<Eigen::Index>(b.sample_count());
    if (sigma.rows() != 1 || sigma.cols() != n || color.rows() != 3 || color.cols() != n) {
        throw std::invalid_argument("composite_on_tape: field outputs do not match the batch");
    }
    const auto R = static_cast<Eigen::Index>(b.ray_count());
    MatX out = MatX::Zero(5, R);
    MatX weights(1, n);
    MatX trans_after(1, n); // T_{i+1} = T_i exp(-a_i)
    const MatX& s = sigma.value();
    const MatX& c = color.value();
    for (Eigen::Index r = 0; r < R; ++r) {
        const auto& smp = b.plans[r].samples;
        const auto o = static_cast<Eigen::Index>(b.offsets[r]);
        const auto m = static_cast<Eigen::Index>(smp.size());
        double log_t = 0.0, sum = 0.0, num = 0.0;
        for (Eigen::Index i = 0; i + 1 < m; ++i) {
            const double a = s(0, o + i) * smp.delta[i];
            const double w = std::exp(log_t) * -std::expm1(-a);
            log_t -= a;
            weights(0, o + i) = w;
            trans_after(0, o + i) = std::exp(log_t);
            sum += w;
            num += w * smp.t[i];
        }
        if (m > 0) {
            weights(0, o + m - 1) = 1.0 - sum;
            trans_after(0, o + m - 1) = 0.0;
        }
        for (Eigen::Index i = 0; i < m; ++i) {
            out.col(r).head<3>() += weights(0, o + i) * c.col(o + i);
        }
        out(kRowDepthNum, r) = num;
        out(kRowOpacity, r) = sum;
    }
    Tape& tape = *sigma.tape;
    return tape.record({sigma, color}, std::move(out), [&tape, batch, sigma, color, weights, trans_after](const MatX& g) {
        const RayBatch& b = *batch;
        const MatX& c = color.value();
        const auto R = static_cast<Eigen::Index>(b.ray_count());
        MatX g_sigma = MatX::Zero(1, c.cols());
        MatX g_color = MatX::Zero(3, c.cols());
        for (Eigen::Index r = 0; r < R; ++r) {
            const auto& smp = b.plans[r].samples;
            const auto o = static_cast<Eigen::Index>(b.offsets[r]);
            const auto m = static_cast<Eigen::Index>(smp.size());
            if (m == 0) {
                continue;
            }
            const Eigen::Vector3d gc = g.col(r).head<3>();
            const double gn = g(kRowDepthNum, r), gs = g(kRowOpacity, r);
            for (Eigen::Index i = 0; i < m; ++i) {
                g_color.col(o + i) = weights(0, o + i) * gc;
            }
            // Suffix sums over later samples: colors include the residual
            // sample, depths stop before it.
            const double t_last = weights(0, o + m - 1);
            double suffix_c = gc.dot(c.col(o + m - 1)) * t_last;
            double suffix_t = 0.0;
            for (Eigen::Index i = m - 2; i >= 0; --i) {
                const double d_color = trans_after(0, o + i) * gc.dot(c.col(o + i)) - suffix_c;
                const double d_num = trans_after(0, o + i) * smp.t[i] - suffix_t;
                const double d_a = d_color + gn * d_num + gs * t_last;
                g_sigma(0, o + i) = d_a * smp.delta[i];
                suffix_c += weights(0, o + i) * gc.dot(c.col(o + i));
                suffix_t += weights(0, o + i) * smp.t[i];
            }
        }
        tape.accumulate(sigma, g_sigma);
        tape.accumulate(color, g_color);
    });
}

/// Evaluates the field at every sample of a batch and composites on the tape.
struct TapeRender
{
    std::shared_ptr<const RayBatch> batch;
    FieldOutput field;
    Var composite; // 5 x R, see composite_on_tape
};

inline TapeRender render_on_tape(const FieldVars& fv, Var w, RayBatch batch,
                                 std::optional<double> background = std::nullopt)
{
    Tape& tape = *w.tape;
    TapeRender tr{std::make_shared<const RayBatch>(std::move(batch)), {}, {}};
    tr.field = eval_field(fv, w, tape.constant(tr.batch->points), &tr.batch->dirs);
    Var color = tr.field.color;
    if (background) {
        MatX mask = MatX::Ones(3, color.cols());
        apply_background(*tr.batch, mask, 0.0);
        MatX fill = MatX::Zero(3, color.cols());
        apply_background(*tr.batch, fill, *background);
        color = ad::add_const(ad::mul_const(color, mask), fill);
    }
    tr.composite = composite_on_tape(tr.batch, tr.field.sigma, color);
    return tr;
}

} // namespace cgof
