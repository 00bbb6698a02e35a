#pragma once

#include "cgof/autodiff.hpp"
#include "cgof/field.hpp"
#include "cgof/harness.hpp"
#include "cgof/losses.hpp"
#include "cgof/optimize.hpp"
#include "cgof/volren.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cgof {

struct GradSuiteEntry
{
    std::string name;
    int probes = 0;
    double max_rel_error = 0.0;
    bool pass = false;
};

namespace detail {

/// Scalar function with its analytic gradient.
using ValueGrad = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

inline GradSuiteEntry check_case(const std::string& name, const ValueGrad& f, const Eigen::VectorXd& x, int probes,
                                 Rng& rng, double tol)
{
    Eigen::VectorXd g;
    f(x, &g);
    const auto rep =
        finite_diff_check([&](const Eigen::VectorXd& v) { return f(v, nullptr); }, x, g, probes, rng, 1e-5, tol);
    return {name, static_cast<int>(rep.probes.size()), rep.max_rel_error, rep.pass};
}

inline Eigen::VectorXd flat_grads(const std::vector<MatX>& g)
{
    Eigen::Index n = 0;
    for (const auto& m : g) {
        n += m.size();
    }
    Eigen::VectorXd out(n);
    Eigen::Index k = 0;
    for (const auto& m : g) {
        out.segment(k, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
        k += m.size();
    }
    return out;
}

inline MatX random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double lo, double hi)
{
    MatX m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = uniform(rng, lo, hi);
    }
    return m;
}

/// Field-parameter case: build(tape, field vars) returns a 1x1 loss.
inline ValueGrad field_case(const FieldParams& base, std::function<Var(Tape&, const FieldVars&)> build)
{
    return [base, build](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
        FieldParams p = base;
        unflatten(p, x);
        Tape t;
        const FieldVars fv = bind(t, p);
        const Var l = build(t, fv);
        if (g) {
            t.backward(l);
            *g = flat_grads(collect_grads(t, fv));
        }
        return l.value()(0, 0);
    };
}

} // namespace detail

/// Finite-difference checks of every differentiable piece of the pipeline.
inline std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, double tol = 1e-4)
{
    using namespace detail;
    Rng rng = keyed_stream(seed, {0x9c4e});
    std::vector<GradSuiteEntry> out;

    FieldConfig fc;
    fc.width = 24;
    fc.depth = 3;
    fc.map_hidden = 12;
    fc.w_dim = 6;
    fc.octaves = 4;
    const FieldParams params = init_params(seed, fc);
    const Eigen::VectorXd x0 = flatten(params);
    const int field_probes = 160;

    const MorphableModel model = make_toy_model(1);
    const Normalizer norm = standard_normalizer(model.dims.total(), 2000, seed);
    Eigen::VectorXd z(model.dims.total());
    for (Eigen::Index k = 0; k < z.size(); ++k) {
        z[k] = normal01(rng);
    }
    const MorphCoeffs coeffs = MorphCoeffs::from_flat(norm.denormalize(z), model.dims);
    const Mesh mesh = synthesize_mesh(model, coeffs);
    const Camera cam = look_at_camera(kCameraRadius, 0.2, 0.1, kFovDeg, 16, 16);
    const DepthMap t_m = ray_mesh_depth(mesh, cam);

    // A fixed ray batch: half mesh-hit rays with surface samples.
    RenderConfig rc;
    rc.n_vol = 10;
    rc.n_surf = 6;
    rc.n_fine = 0;
    rc.margin = 0.2;
    rc.seed = seed;
    const auto rays = pixel_rays(cam);
    std::vector<Ray> sel_rays;
    std::vector<double> sel_tm;
    std::vector<std::uint64_t> keys;
    for (std::size_t i = 0; i < rays.size(); i += 11) {
        sel_rays.push_back(rays[i]);
        sel_tm.push_back(t_m.depth[i]);
        keys.push_back(i);
    }
    const auto no_field = [](const MatX& x, const MatX&) -> FieldEval {
        return {Eigen::RowVectorXd::Zero(x.cols()), MatX::Zero(3, x.cols())};
    };
    const auto batch = std::make_shared<const RayBatch>(
        assemble(plan_rays(no_field, sel_rays, sel_tm, keys, RayPurpose::train, rc, kNear, kFar)));
    const auto R = static_cast<Eigen::Index>(batch->ray_count());
    const auto S = static_cast<Eigen::Index>(batch->sample_count());

    // Mapping network.
    {
        const MatX cot = random_mat(rng, fc.w_dim, 1, -1, 1);
        out.push_back(check_case("mapping", field_case(params, [&](Tape& t, const FieldVars& fv) {
                                     return ad::sum(ad::mul_const(map_latent(fv, t.constant(z)), cot));
                                 }),
                                 x0, field_probes, rng, tol));
    }
    // Field evaluation, parameters and latent.
    {
        const MatX pts = random_mat(rng, 3, 12, -0.5, 0.5);
        const MatX cot = random_mat(rng, 4, 12, -1, 1);
        out.push_back(check_case("field_eval", field_case(params, [&](Tape& t, const FieldVars& fv) {
                                     const FieldOutput o = eval_field(fv, map_latent(fv, t.constant(z)), t.constant(pts));
                                     return ad::sum(ad::mul_const(ad::concat_rows({o.sigma, o.color}), cot));
                                 }),
                                 x0, field_probes, rng, tol));
        const Eigen::VectorXd w0 = map_latent(params, z);
        out.push_back(check_case(
            "field_eval_latent",
            [&](const Eigen::VectorXd& w, Eigen::VectorXd* g) {
                Tape t;
                const FieldVars fv = bind(t, params, false);
                const Var wv = t.leaf(w);
                const FieldOutput o = eval_field(fv, wv, t.constant(pts));
                const Var l = ad::sum(ad::mul_const(ad::concat_rows({o.sigma, o.color}), cot));
                if (g) {
                    t.backward(l);
                    *g = t.grad(wv).col(0);
                }
                return l.value()(0, 0);
            },
            w0, static_cast<int>(w0.size()), rng, tol));
    }
    // Compositing with respect to densities and colors.
    {
        Eigen::VectorXd x(4 * S);
        x.head(S) = random_mat(rng, S, 1, 0.0, 8.0);
        x.tail(3 * S) = random_mat(rng, 3 * S, 1, 0.0, 1.0);
        const MatX cot = random_mat(rng, 5, R, -1, 1);
        out.push_back(check_case(
            "composite",
            [&](const Eigen::VectorXd& v, Eigen::VectorXd* g) {
                Tape t;
                const Var s = t.leaf(v.head(S).transpose());
                const Var c = t.leaf(Eigen::Map<const MatX>(v.data() + S, 3, S));
                const Var l = ad::sum(ad::mul_const(composite_on_tape(batch, s, c), cot));
                if (g) {
                    t.backward(l);
                    g->resize(4 * S);
                    g->head(S) = t.grad(s).transpose();
                    g->tail(3 * S) = Eigen::Map<const Eigen::VectorXd>(t.grad(c).data(), 3 * S);
                }
                return l.value()(0, 0);
            },
            x, static_cast<int>(x.size()), rng, tol));
    }
    // Photometric L1 through the full render.
    {
        const MatX target = random_mat(rng, 3, R, 0.0, 1.0);
        out.push_back(check_case("photometric", field_case(params, [&](Tape& t, const FieldVars& fv) {
                                     const TapeRender tr = render_on_tape(fv, map_latent(fv, t.constant(z)), *batch);
                                     return photometric_loss_on_tape(ad::slice_rows(tr.composite, 0, 3), target);
                                 }),
                                 x0, field_probes, rng, tol));
    }
    // Density regularizer.
    {
        out.push_back(check_case("density_reg", field_case(params, [&](Tape& t, const FieldVars& fv) {
                                     const TapeRender tr = render_on_tape(fv, map_latent(fv, t.constant(z)), *batch);
                                     return density_regularizer_on_tape(tr.field.sigma, *tr.batch, rc.margin, 20.0);
                                 }),
                                 x0, field_probes, rng, tol));
    }
    // Coefficient reconstruction loss: directly, and through a frozen
    // reconstructor applied to a 16x16 render.
    Reconstructor recon;
    recon.dims = model.dims;
    recon.w0 = random_mat(rng, 16, kReconInputs, -0.1, 0.1);
    recon.b0 = random_mat(rng, 16, 1, -0.1, 0.1);
    recon.w1 = random_mat(rng, recon.output_dim(), 16, -0.5, 0.5);
    recon.b1 = random_mat(rng, recon.output_dim(), 1, -0.1, 0.1);
    recon.frozen = true;
    const auto full_batch = std::make_shared<const RayBatch>(
        assemble(plan_rays(no_field, rays, t_m.depth, std::vector<std::uint64_t>(rays.size(), 0), RayPurpose::train,
                           [&] {
                               RenderConfig r = rc;
                               r.n_vol = 6;
                               r.n_surf = 4;
                               return r;
                           }(),
                           kNear, kFar)));
    auto predicted = [&](Tape& t, const FieldVars& fv) {
        const TapeRender tr = render_on_tape(fv, map_latent(fv, t.constant(z)), *full_batch);
        const Var gray = ad::scale(ad::sum_rows(ad::slice_rows(tr.composite, 0, 3)), 1.0 / 3.0);
        const Var x = ad::add_const(ad::transpose(gray), MatX::Constant(kReconInputs, 1, -kBackground));
        return ad::slice_rows(reconstruct_on_tape(recon, x), 0, model.dims.total());
    };
    {
        const Eigen::VectorXd zp = norm.denormalize(z) + random_mat(rng, z.size(), 1, -0.5, 0.5);
        out.push_back(check_case(
            "recon",
            [&](const Eigen::VectorXd& v, Eigen::VectorXd* g) {
                Tape t;
                const Var p = t.leaf(v);
                const Var l = recon_loss_on_tape(p, z, norm);
                if (g) {
                    t.backward(l);
                    *g = t.grad(p).col(0);
                }
                return l.value()(0, 0);
            },
            zp, static_cast<int>(zp.size()), rng, tol));
        out.push_back(check_case("recon_through_render", field_case(params, [&](Tape& t, const FieldVars& fv) {
                                     return recon_loss_on_tape(predicted(t, fv), z, norm);
                                 }),
                                 x0, field_probes, rng, tol));
    }
    // Landmark loss: the estimated-landmark term and the field back-projection term.
    {
        const LandmarkLinearMap map = landmark_linear_map(model);
        const LandmarkSet input = landmarks_of(model, mesh);
        out.push_back(check_case("ldmk_estimated", field_case(params, [&](Tape& t, const FieldVars& fv) {
                                     return estimated_landmark_l1_on_tape(predicted(t, fv), map, input);
                                 }),
                                 x0, field_probes, rng, tol));
        std::vector<Ray> lm_rays;
        std::vector<double> lm_tm;
        std::vector<std::uint64_t> lm_keys;
        std::vector<Vec3> targets;
        const MeshBvh bvh(mesh);
        for (int k = LandmarkSet::kContour; k < LandmarkSet::kCount; k += 3) {
            const auto p = project(cam, input.positions[k]);
            if (!p) {
                continue;
            }
            lm_rays.push_back(ray_through_pixel(cam, p->u, p->v));
            const TriangleHit h = bvh.intersect(lm_rays.back(), kNear, kFar);
            lm_tm.push_back(h.valid() ? h.t : std::nan(""));
            lm_keys.push_back(static_cast<std::uint64_t>(k));
            targets.push_back(input.positions[k]);
        }
        const RayBatch lm_batch = assemble(plan_rays(no_field, lm_rays, lm_tm, lm_keys, RayPurpose::landmark, rc, kNear, kFar));
        out.push_back(check_case("ldmk_field", field_case(params, [&](Tape& t, const FieldVars& fv) {
                                     const TapeRender tr = render_on_tape(fv, map_latent(fv, t.constant(z)), lm_batch);
                                     return backprojection_l1_on_tape(tr.composite, lm_rays, targets);
                                 }),
                                 x0, field_probes, rng, tol));
    }
    // Warping loss with both latents produced by the mapping network.
    {
        MorphCoeffs c2 = coeffs;
        for (Eigen::Index k = 0; k < c2.z_exp.size(); ++k) {
            c2.z_exp[k] = normal01(rng);
        }
        const Eigen::VectorXd z2 = norm.normalize(c2.flat());
        const DisplacementMap F =
            displacement_map(mesh, vertex_displacements(mesh, synthesize_mesh(model, c2)), cam);
        std::vector<RayPlan> plans;
        std::vector<Vec3> disp;
        for (std::size_t r = 0; r < batch->ray_count(); ++r) {
            if (batch->plans[r].mesh_hit()) {
                plans.push_back(batch->plans[r]);
                disp.push_back(F.disp[keys[r]] + Vec3(0.01, -0.02, 0.015));
            }
        }
        const auto wb = std::make_shared<const RayBatch>(assemble(plans));
        out.push_back(check_case("warp", field_case(params, [&](Tape& t, const FieldVars& fv) {
                                     auto field = [&fv](Var lat, Var x) { return eval_field(fv, lat, x); };
                                     return warp_loss_on_tape(field, map_latent(fv, t.constant(z)),
                                                              map_latent(fv, t.constant(z2)), wb, disp, 1.0, 1.0, 1.0)
                                         .total;
                                 }),
                                 x0, field_probes, rng, tol));
    }
    // Adversarial pair with R1 on the discriminator parameters.
    {
        const Discriminator d0 = init_discriminator(seed);
        const Eigen::VectorXd fake = disc_input(make_target_image(model, MorphCoeffs::zeros(model.dims), cam));
        const Eigen::VectorXd real = disc_input(make_target_image(model, coeffs, cam));
        const std::vector<MatX> shapes = {d0.w0, d0.b0, d0.w1, d0.b1};
        const Eigen::VectorXd x = flat_grads(shapes);
        out.push_back(check_case(
            "gan_r1",
            [&](const Eigen::VectorXd& v, Eigen::VectorXd* g) {
                Tape t;
                std::vector<Var> leaves;
                Eigen::Index k = 0;
                for (const auto& s : shapes) {
                    leaves.push_back(t.leaf(Eigen::Map<const MatX>(v.data() + k, s.rows(), s.cols())));
                    k += s.size();
                }
                const DiscVars dv{leaves[0], leaves[1], leaves[2], leaves[3]};
                const auto [s_fake, gx_fake] = disc_score_and_input_grad(dv, t.constant(fake));
                const auto [s_real, gx_real] = disc_score_and_input_grad(dv, t.constant(real));
                // -f(d_fake) - f(-d_real) + lambda |grad D(real)|^2 with f(u) = -softplus(-u).
                const Var l = ad::weighted_sum({ad::softplus(ad::scale(s_fake, -1.0)), ad::softplus(s_real),
                                                ad::sum(ad::square(gx_real))},
                                               {1.0, 1.0, 0.5});
                if (g) {
                    t.backward(l);
                    std::vector<MatX> gs;
                    for (const Var& lv : leaves) {
                        gs.push_back(t.grad(lv));
                    }
                    *g = flat_grads(gs);
                }
                return l.value()(0, 0);
            },
            x, static_cast<int>(x.size()), rng, tol));
    }
    return out;
}

} // namespace cgof
