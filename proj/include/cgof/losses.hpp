#pragma once

#include "cgof/autodiff.hpp"
#include "cgof/field.hpp"
#include "cgof/image.hpp"
#include "cgof/mesh.hpp"
#include "cgof/morphable.hpp"
#include "cgof/volren.hpp"

#include <json.hpp>

#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

namespace cgof {

struct LossWeights
{
    double lambda_gan = 1.0;
    double lambda_recon = 4.0;
    double lambda_d = 100.0;
    double lambda_ldmk = 20.0;
    double lambda_warp = 20.0;
    double lambda_pho = 1.0;
    double alpha = 20.0;
    double beta_d = 1.0;
    double beta_c = 1.0;
    double beta_I = 1.0;
    double lambda_r1 = 1.0;
};

inline nlohmann::json loss_weights_to_json(const LossWeights& w)
{
    return {{"lambda_gan", w.lambda_gan}, {"lambda_recon", w.lambda_recon}, {"lambda_d", w.lambda_d},
            {"lambda_ldmk", w.lambda_ldmk}, {"lambda_warp", w.lambda_warp}, {"lambda_pho", w.lambda_pho},
            {"alpha", w.alpha},           {"beta_d", w.beta_d},             {"beta_c", w.beta_c},
            {"beta_I", w.beta_I},         {"lambda_r1", w.lambda_r1}};
}

inline LossWeights loss_weights_from_json(const nlohmann::json& j)
{
    LossWeights w;
    auto read = [&](const char* key, double& v) {
        v = j.value(key, v);
        if (!(v >= 0.0)) {
            throw std::invalid_argument(std::string("loss weight ") + key + " must be non-negative");
        }
    };
    read("lambda_gan", w.lambda_gan);
    read("lambda_recon", w.lambda_recon);
    read("lambda_d", w.lambda_d);
    read("lambda_ldmk", w.lambda_ldmk);
    read("lambda_warp", w.lambda_warp);
    read("lambda_pho", w.lambda_pho);
    read("alpha", w.alpha);
    read("beta_d", w.beta_d);
    read("beta_c", w.beta_c);
    read("beta_I", w.beta_I);
    read("lambda_r1", w.lambda_r1);
    return w;
}

struct LossTerms
{
    double gan = 0.0;
    double recon = 0.0;
    double density_reg = 0.0;
    double ldmk = 0.0;
    double warp = 0.0;
    double photometric = 0.0;
    double total = 0.0;
};

inline double total_loss(const LossTerms& t, const LossWeights& w)
{
    return w.lambda_gan * t.gan + w.lambda_recon * t.recon + w.lambda_d * t.density_reg + w.lambda_ldmk * t.ldmk +
           w.lambda_warp * t.warp + w.lambda_pho * t.photometric;
}

// ---- density regularizer ----------------------------------------------------------

inline double density_penalty_factor(double distance, double margin, double alpha)
{
    return std::expm1(alpha * std::max(distance - 0.5 * margin, 0.0));
}

/// sum_i sigma_i (exp(alpha max(d_i - margin/2, 0)) - 1)
inline double density_regularizer(const std::vector<double>& sigmas, const std::vector<double>& distances,
                                  double margin, double alpha)
{
    if (sigmas.size() != distances.size()) {
        throw std::invalid_argument("density_regularizer: sigma and distance arrays differ in length");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
        sum += sigmas[i] * density_penalty_factor(distances[i], margin, alpha);
    }
    return sum;
}

/// Per-sample penalty factors for a batch: volume-kind samples on mesh-hit rays
/// get exp(alpha max(|t - t_m| - margin/2, 0)) - 1, everything else 0.
inline MatX density_penalty_factors(const RayBatch& b, double margin, double alpha)
{
    MatX f = MatX::Zero(1, static_cast<Eigen::Index>(b.sample_count()));
    for (std::size_t r = 0; r < b.ray_count(); ++r) {
        const RayPlan& p = b.plans[r];
        if (!p.mesh_hit()) {
            continue;
        }
        for (std::size_t i = 0; i < p.samples.size(); ++i) {
            if (p.samples.kind[i] == SampleKind::volume) {
                f(0, static_cast<Eigen::Index>(b.offsets[r] + i)) =
                    density_penalty_factor(std::abs(p.samples.t[i] - p.t_m), margin, alpha);
            }
        }
    }
    return f;
}

/// Regularizer summed per ray and averaged over the rays of the batch.
inline Var density_regularizer_on_tape(Var sigma, const RayBatch& b, double margin, double alpha)
{
    const MatX f = density_penalty_factors(b, margin, alpha);
    return ad::scale(ad::sum(ad::mul_const(sigma, f)), 1.0 / std::max<double>(1.0, b.ray_count()));
}

// ---- landmark loss ----------------------------------------------------------------

/// Sum over all landmarks of |estimated - input|_1 plus, over non-contour
/// landmarks with a defined field depth, |field - input|_1.
inline double landmark_loss(const LandmarkSet& input, const LandmarkSet& estimated,
                            const std::vector<std::optional<Vec3>>& field_lms)
{
    if (input.positions.size() != LandmarkSet::kCount || estimated.positions.size() != LandmarkSet::kCount ||
        field_lms.size() != LandmarkSet::kCount) {
        throw std::invalid_argument("landmark_loss: expected 68 landmarks in every set");
    }
    double loss = 0.0;
    for (std::size_t k = 0; k < LandmarkSet::kCount; ++k) {
        loss += (estimated.positions[k] - input.positions[k]).lpNorm<1>();
        if (!input.contour_mask[k] && field_lms[k]) {
            loss += (*field_lms[k] - input.positions[k]).lpNorm<1>();
        }
    }
    return loss;
}

/// sum_k |o_k + (num_k / S_k) d_k - target_k|_1 over the given rays, where num
/// and S are the depth rows of a composite_on_tape output.
inline Var backprojection_l1_on_tape(Var composite, const std::vector<Ray>& rays, const std::vector<Vec3>& targets)
{
    const Eigen::Index n = composite.cols();
    if (static_cast<Eigen::Index>(rays.size()) != n || static_cast<Eigen::Index>(targets.size()) != n) {
        throw std::invalid_argument("backprojection_l1_on_tape: rays and targets must match the composite");
    }
    Tape& t = *composite.tape;
    const MatX& v = composite.value();
    MatX out = MatX::Zero(1, 1);
    MatX sign(3, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const double depth = v(kRowDepthNum, k) / v(kRowOpacity, k);
        const Vec3 diff = rays[k].at(depth) - targets[k];
        out(0, 0) += diff.lpNorm<1>();
        for (int c = 0; c < 3; ++c) {
            sign(c, k) = diff[c] > 0.0 ? 1.0 : (diff[c] < 0.0 ? -1.0 : 0.0);
        }
    }
    return t.record({composite}, std::move(out), [&t, composite, rays, sign](const MatX& g) {
        const MatX& v = composite.value();
        MatX gc = MatX::Zero(v.rows(), v.cols());
        for (Eigen::Index k = 0; k < v.cols(); ++k) {
            const double s = v(kRowOpacity, k);
            const double dd = g(0, 0) * sign.col(k).dot(rays[k].direction);
            gc(kRowDepthNum, k) = dd / s;
            gc(kRowOpacity, k) = -dd * v(kRowDepthNum, k) / (s * s);
        }
        t.accumulate(composite, gc);
    });
}

/// Landmark positions as an affine function of predicted raw coefficients:
/// rows 3k..3k+2 of (A z + b) hold landmark k.
struct LandmarkLinearMap
{
    MatX A; // 204 x D (shape and expression columns, zero elsewhere)
    Eigen::VectorXd b;
};

inline LandmarkLinearMap landmark_linear_map(const MorphableModel& m)
{
    const int D = m.dims.total();
    LandmarkLinearMap map{MatX::Zero(3 * LandmarkSet::kCount, D), Eigen::VectorXd(3 * LandmarkSet::kCount)};
    for (std::size_t k = 0; k < LandmarkSet::kCount; ++k) {
        const int v = m.landmark_indices[k];
        for (int c = 0; c < 3; ++c) {
            const auto row = static_cast<Eigen::Index>(3 * k + c);
            map.b(row) = m.mean_vertices(3 * v + c);
            map.A.row(row).segment(0, m.dims.shape) = m.shape_basis.row(3 * v + c);
            map.A.row(row).segment(m.dims.shape, m.dims.exp) = m.exp_basis.row(3 * v + c);
        }
    }
    return map;
}

/// First landmark term: sum_k |l_hat_k(z_pred) - l_k|_1 with l_hat affine in the
/// predicted raw coefficients (D x 1).
inline Var estimated_landmark_l1_on_tape(Var z_pred_raw, const LandmarkLinearMap& map, const LandmarkSet& input)
{
    Eigen::VectorXd target(3 * LandmarkSet::kCount);
    for (std::size_t k = 0; k < LandmarkSet::kCount; ++k) {
        target.segment<3>(3 * k) = input.positions[k];
    }
    const Var lhat = ad::add_const(ad::lmul_const(map.A, z_pred_raw), map.b - target);
    return ad::sum(ad::abs(lhat));
}

// ---- coefficient reconstruction loss ------------------------------------------------

inline double recon_loss(const Eigen::VectorXd& z_input, const Eigen::VectorXd& z_pred_raw, const Normalizer& norm)
{
    return (norm.normalize(z_pred_raw) - z_input).lpNorm<1>();
}

/// |L^-1 (z_pred - mu) - z_input|_1 on the tape.
inline Var recon_loss_on_tape(Var z_pred_raw, const Eigen::VectorXd& z_input, const Normalizer& norm)
{
    const MatX l_inv = norm.chol.triangularView<Eigen::Lower>().solve(MatX::Identity(norm.chol.rows(), norm.chol.cols()));
    const Var z = ad::add_const(ad::lmul_const(l_inv, z_pred_raw), MatX(-(l_inv * norm.mu) - z_input));
    return ad::sum(ad::abs(z));
}

// ---- adversarial losses -------------------------------------------------------------

/// f(u) = -log(1 + exp(-u)), evaluated stably.
inline double gan_f(double u)
{
    return -(std::max(-u, 0.0) + std::log1p(std::exp(-std::abs(u))));
}

inline double gan_f_prime(double u) { return ad::detail::sigmoid(-u); }

struct GanLosses
{
    double g_loss = 0.0;
    double d_loss = 0.0;
};

inline GanLosses gan_losses(double d_fake, double d_real, double real_grad_sqnorm, double lambda_r1)
{
    return {gan_f(d_fake), gan_f(d_fake) + gan_f(-d_real) + lambda_r1 * real_grad_sqnorm};
}

// ---- photometric ------------------------------------------------------------------

inline double photometric_loss(const Image& image, const Image& target)
{
    if (!image.same_size(target)) {
        throw std::invalid_argument("photometric_loss: image sizes differ");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < image.data.size(); ++i) {
        sum += std::abs(image.data[i] - target.data[i]);
    }
    return image.data.empty() ? 0.0 : sum / static_cast<double>(image.data.size());
}

/// Mean absolute difference between predicted colors (3 x R) and targets.
inline Var photometric_loss_on_tape(Var colors, const MatX& target)
{
    if (colors.rows() != target.rows() || colors.cols() != target.cols()) {
        throw std::invalid_argument("photometric_loss: image sizes differ");
    }
    return ad::mean(ad::abs(ad::add_const(colors, -target)));
}

// ---- warping loss -------------------------------------------------------------------

struct WarpBreakdown
{
    Var density;
    Var color;
    Var image;
    Var total;
};

/// Warping loss over a batch of mesh-hit rays. Every sample of ray r is moved by
/// displacement[r] and queried under w_prime; the warped render reuses the
/// original t-ordering and spacings. Terms are means over samples (density,
/// color) and over pixel channels (image). field(w, x) returns a FieldOutput.
template <typename FieldFn>
WarpBreakdown warp_loss_on_tape(const FieldFn& field, Var w, Var w_prime, std::shared_ptr<const RayBatch> batch,
                                const std::vector<Vec3>& displacement, double beta_d, double beta_c, double beta_I)
{
    const RayBatch& b = *batch;
    if (displacement.size() != b.ray_count()) {
        throw std::invalid_argument("warp_loss: one displacement per ray is required");
    }
    Tape& tape = *w.tape;
    MatX shift(3, static_cast<Eigen::Index>(b.sample_count()));
    for (std::size_t r = 0; r < b.ray_count(); ++r) {
        for (std::size_t i = b.offsets[r]; i < b.offsets[r + 1]; ++i) {
            shift.col(static_cast<Eigen::Index>(i)) = displacement[r];
        }
    }
    const FieldOutput orig = field(w, tape.constant(b.points));
    const FieldOutput warped = field(w_prime, tape.constant(b.points + shift));
    const Var img = composite_on_tape(batch, orig.sigma, orig.color);
    const Var img_w = composite_on_tape(batch, warped.sigma, warped.color);
    WarpBreakdown out;
    out.density = ad::mean(ad::abs(ad::sub(warped.sigma, orig.sigma)));
    out.color = ad::mean(ad::abs(ad::sub(warped.color, orig.color)));
    out.image = ad::mean(ad::abs(ad::sub(ad::slice_rows(img_w, 0, 3), ad::slice_rows(img, 0, 3))));
    out.total = ad::weighted_sum({out.density, out.color, out.image}, {beta_d, beta_c, beta_I});
    return out;
}

} // namespace cgof
