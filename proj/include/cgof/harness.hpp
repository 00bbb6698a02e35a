#pragma once

#include "cgof/autodiff.hpp"
#include "cgof/field.hpp"
#include "cgof/geom.hpp"
#include "cgof/image.hpp"
#include "cgof/losses.hpp"
#include "cgof/mesh.hpp"
#include "cgof/meshops.hpp"
#include "cgof/metrics.hpp"
#include "cgof/morphable.hpp"
#include "cgof/optimize.hpp"
#include "cgof/parallel.hpp"
#include "cgof/rng.hpp"
#include "cgof/volren.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgof {

// ---- synthetic targets -----------------------------------------------------------------

inline const Vec3 kLightDir = Vec3(1, 1, 1).normalized();
inline constexpr double kBackground = 0.5;

/// Lambertian render of a conditioning mesh with the procedural albedo on a
/// mid-gray background.
inline Image shade_mesh(const MorphableModel& model, const Mesh& mesh, const Eigen::VectorXd& z_tex, const Camera& cam,
                        int threads = 1)
{
    const HitMap hits = cast_pixel_rays(mesh, cam, threads);
    const auto normals = vertex_normals(mesh);
    Image img(cam.width, cam.height, kBackground);
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            const TriangleHit& h = hits.at(x, y);
            if (!h.valid()) {
                continue;
            }
            const Vec3 p = ray_through_pixel(cam, x + 0.5, y + 0.5).at(h.t);
            const Vec3 n = interpolate_at(mesh, h, normals).normalized();
            const Vec3 c = albedo(model, z_tex, p) * std::max(n.dot(kLightDir), 0.0);
            for (int ch = 0; ch < 3; ++ch) {
                img.at(x, y, ch) = c[ch];
            }
        }
    }
    return img;
}

inline Image make_target_image(const MorphableModel& model, const MorphCoeffs& coeffs, const Camera& cam,
                               int threads = 1)
{
    return shade_mesh(model, synthesize_mesh(model, coeffs), coeffs.z_tex, cam, threads);
}

// ---- toy reconstructor ------------------------------------------------------------------

inline constexpr int kReconInputSide = 16;
inline constexpr int kReconInputs = kReconInputSide * kReconInputSide;

/// Two affine layers from a 16x16 grayscale image (centered at 0.5) to raw
/// coefficients followed by (yaw, pitch).
struct Reconstructor
{
    MatX w0, b0, w1, b1;
    CoeffDims dims;
    bool frozen = false;

    int output_dim() const { return dims.total() + 2; }
};

inline Eigen::VectorXd reconstructor_input(const Image& img)
{
    const auto g = grayscale_downsample(img, kReconInputSide, kReconInputSide);
    Eigen::VectorXd x(kReconInputs);
    for (int i = 0; i < kReconInputs; ++i) {
        x[i] = g[static_cast<std::size_t>(i)] - kBackground;
    }
    return x;
}

/// Forward pass on the tape; x is kReconInputs x B. Output rows: coefficients,
/// then yaw and pitch.
inline Var reconstruct_on_tape(const Reconstructor& r, Var x)
{
    Tape& t = *x.tape;
    const Var h = ad::silu(ad::affine(t.constant(r.w0), x, t.constant(r.b0)));
    return ad::affine(t.constant(r.w1), h, t.constant(r.b1));
}

inline Eigen::VectorXd reconstruct(const Reconstructor& r, const Image& img)
{
    Tape t;
    return reconstruct_on_tape(r, t.constant(reconstructor_input(img))).value().col(0);
}

struct ReconEstimate
{
    MorphCoeffs coeffs;
    double yaw = 0.0;
    double pitch = 0.0;
};

inline ReconEstimate split_estimate(const Reconstructor& r, const Eigen::VectorXd& out)
{
    const int d = r.dims.total();
    return {MorphCoeffs::from_flat(out.head(d), r.dims), out[d], out[d + 1]};
}

struct PoseRange
{
    double yaw_min = -0.6, yaw_max = 0.6;
    double pitch_min = -0.3, pitch_max = 0.3;

    double yaw_std() const { return (yaw_max - yaw_min) / std::sqrt(12.0); }
    double pitch_std() const { return (pitch_max - pitch_min) / std::sqrt(12.0); }
};

struct ReconTrainOptions
{
    int n_samples = 1000;
    int steps = 1500;
    double lr = 3e-3;
    int hidden = 64;
    double weight_decay = 1e-4;
    int image_size = 32;
    double max_mse = 0.5;
    int threads = 1;
    PoseRange poses;
};

struct ReconDataset
{
    MatX x; // inputs x N
    MatX y; // outputs x N
};

inline ReconDataset make_recon_dataset(const MorphableModel& model, const Normalizer& norm, int n, Rng& rng,
                                       const ReconTrainOptions& opt)
{
    const int d = model.dims.total();
    ReconDataset ds{MatX(kReconInputs, n), MatX(d + 2, n)};
    std::vector<MorphCoeffs> coeffs;
    std::vector<Camera> cams;
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd z(d);
        for (int k = 0; k < d; ++k) {
            z[k] = normal01(rng);
        }
        const Eigen::VectorXd zt = norm.denormalize(z);
        const double yaw = uniform(rng, opt.poses.yaw_min, opt.poses.yaw_max);
        const double pitch = uniform(rng, opt.poses.pitch_min, opt.poses.pitch_max);
        coeffs.push_back(MorphCoeffs::from_flat(zt, model.dims));
        cams.push_back(look_at_camera(kCameraRadius, yaw, pitch, kFovDeg, opt.image_size, opt.image_size));
        ds.y.col(i).head(d) = zt;
        ds.y(d, i) = yaw;
        ds.y(d + 1, i) = pitch;
    }
    parallel_for(static_cast<std::size_t>(n), opt.threads, [&](std::size_t i) {
        ds.x.col(static_cast<Eigen::Index>(i)) = reconstructor_input(make_target_image(model, coeffs[i], cams[i]));
    });
    return ds;
}

struct ReconTrainReport
{
    double train_mse = 0.0;
};

/// Full-batch Adam on the mean squared error; the result is frozen.
inline Reconstructor pretrain_reconstructor(const MorphableModel& model, const Normalizer& norm,
                                            const ReconTrainOptions& opt, std::uint64_t seed,
                                            ReconTrainReport* report = nullptr)
{
    if (opt.n_samples < 500) {
        throw std::invalid_argument("pretrain_reconstructor: need at least 500 samples");
    }
    Rng data_rng = keyed_stream(seed, {0x5ec0, 1});
    const ReconDataset ds = make_recon_dataset(model, norm, opt.n_samples, data_rng, opt);
    Reconstructor r;
    r.dims = model.dims;
    Rng init_rng = keyed_stream(seed, {0x5ec0, 2});
    auto init = [&](int out, int in) {
        const double a = std::sqrt(6.0 / in);
        MatX w(out, in);
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            w.data()[i] = uniform(init_rng, -a, a);
        }
        return w;
    };
    r.w0 = init(opt.hidden, kReconInputs);
    r.b0 = MatX::Zero(opt.hidden, 1);
    r.w1 = init(r.output_dim(), opt.hidden) * 0.1;
    r.b1 = MatX::Zero(r.output_dim(), 1);
    AdamState adam;
    adam.lr = opt.lr;
    const double scale = 1.0 / static_cast<double>(ds.y.size());
    double mse = 0.0;
    for (int step = 0; step <= opt.steps; ++step) {
        Tape t;
        const Var w0 = t.leaf(r.w0), b0 = t.leaf(r.b0), w1 = t.leaf(r.w1), b1 = t.leaf(r.b1);
        const Var h = ad::silu(ad::affine(w0, t.constant(ds.x), b0));
        const Var out = ad::affine(w1, h, b1);
        const Var err = ad::scale(ad::sum(ad::square(ad::add_const(out, -ds.y))), scale);
        mse = err.value()(0, 0);
        if (step == opt.steps) {
            break;
        }
        const Var reg = ad::scale(ad::add(ad::sum(ad::square(w0)), ad::sum(ad::square(w1))), opt.weight_decay);
        t.backward(ad::add(err, reg));
        adam_step(adam, {&r.w0, &r.b0, &r.w1, &r.b1}, {t.grad(w0), t.grad(b0), t.grad(w1), t.grad(b1)},
                  {"recon.w0", "recon.b0", "recon.w1", "recon.b1"});
    }
    if (!(mse <= opt.max_mse)) {
        throw std::runtime_error("pretrain_reconstructor: training MSE " + std::to_string(mse) + " exceeds " +
                                 std::to_string(opt.max_mse));
    }
    r.frozen = true;
    if (report) {
        report->train_mse = mse;
    }
    return r;
}

inline nlohmann::json reconstructor_to_json(const Reconstructor& r)
{
    auto mat = [](const MatX& m) {
        return nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()},
                              {"data", std::vector<double>(m.data(), m.data() + m.size())}};
    };
    return {{"dims", {r.dims.shape, r.dims.exp, r.dims.tex, r.dims.other}},
            {"w0", mat(r.w0)},
            {"b0", mat(r.b0)},
            {"w1", mat(r.w1)},
            {"b1", mat(r.b1)}};
}

inline Reconstructor reconstructor_from_json(const nlohmann::json& j)
{
    auto mat = [](const nlohmann::json& m) {
        const auto data = m.at("data").get<std::vector<double>>();
        MatX out(m.at("rows").get<Eigen::Index>(), m.at("cols").get<Eigen::Index>());
        if (static_cast<Eigen::Index>(data.size()) != out.size()) {
            throw std::invalid_argument("reconstructor: matrix data has the wrong length");
        }
        std::copy(data.begin(), data.end(), out.data());
        return out;
    };
    Reconstructor r;
    const auto d = j.at("dims");
    r.dims = {d.at(0), d.at(1), d.at(2), d.at(3)};
    r.w0 = mat(j.at("w0"));
    r.b0 = mat(j.at("b0"));
    r.w1 = mat(j.at("w1"));
    r.b1 = mat(j.at("b1"));
    r.frozen = true;
    return r;
}

// ---- training -----------------------------------------------------------------------------

struct AblationFlags
{
    bool photometric = true;
    bool recon = true;
    bool mgs = true;
    bool density_reg = true;
    bool ldmk = true;
    bool warp = true;
    bool gan = false;
};

struct TrainConfig
{
    std::uint64_t seed = 1;
    int image_size = 32;
    int n_steps = 1500;
    int batch_rays = 256;
    int warp_rays = 64;
    int aux_every = 1; // steps between recon / landmark / warp evaluations
    double lr = 2e-3;
    double grad_clip = 1.0; // global gradient-norm ceiling, 0 disables
    int density_delay = 300; // steps trained with lambda_d = 0
    int density_warmup = 700; // steps over which lambda_d then ramps geometrically up to its value
    double density_ramp_start = 1e-10; // fraction of lambda_d at the start of the ramp
    int threads = 1;
    LossWeights weights;
    AblationFlags flags;
    PoseRange poses;
    MarginSchedule margin{0.5, 0.05, 1500};
    int n_vol = 48;
    int n_surf = 48;
    int n_fine = 48;
    FieldConfig field;
    int model_seed = 1;
    int normalizer_samples = 10000;
    ReconTrainOptions recon;
    bool same_exp_partner = false; // warp partner keeps the expression code
};

inline nlohmann::json train_config_to_json(const TrainConfig& c)
{
    return {{"seed", c.seed},
            {"image_size", c.image_size},
            {"n_steps", c.n_steps},
            {"batch_rays", c.batch_rays},
            {"warp_rays", c.warp_rays},
            {"aux_every", c.aux_every},
            {"lr", c.lr},
            {"grad_clip", c.grad_clip},
            {"density_delay", c.density_delay},
            {"density_warmup", c.density_warmup},
            {"density_ramp_start", c.density_ramp_start},
            {"threads", c.threads},
            {"weights", loss_weights_to_json(c.weights)},
            {"flags",
             {{"photometric", c.flags.photometric},
              {"recon", c.flags.recon},
              {"mgs", c.flags.mgs},
              {"density_reg", c.flags.density_reg},
              {"ldmk", c.flags.ldmk},
              {"warp", c.flags.warp},
              {"gan", c.flags.gan}}},
            {"poses",
             {{"yaw", {c.poses.yaw_min, c.poses.yaw_max}}, {"pitch", {c.poses.pitch_min, c.poses.pitch_max}}}},
            {"margin_start", c.margin.start_fraction},
            {"margin_end", c.margin.end_fraction},
            {"margin_steps", c.margin.total_steps},
            {"n_vol", c.n_vol},
            {"n_surf", c.n_surf},
            {"n_fine", c.n_fine},
            {"field", field_config_to_json(c.field)},
            {"model_seed", c.model_seed},
            {"normalizer_samples", c.normalizer_samples},
            {"recon_samples", c.recon.n_samples},
            {"recon_steps", c.recon.steps},
            {"same_exp_partner", c.same_exp_partner}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j)
{
    TrainConfig c;
    c.seed = j.value("seed", c.seed);
    c.image_size = j.value("image_size", c.image_size);
    c.n_steps = j.value("n_steps", c.n_steps);
    c.batch_rays = j.value("batch_rays", c.batch_rays);
    c.warp_rays = j.value("warp_rays", c.warp_rays);
    c.aux_every = j.value("aux_every", c.aux_every);
    c.lr = j.value("lr", c.lr);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.density_delay = j.value("density_delay", c.density_delay);
    c.density_warmup = j.value("density_warmup", c.density_warmup);
    c.density_ramp_start = j.value("density_ramp_start", c.density_ramp_start);
    c.threads = j.value("threads", c.threads);
    if (j.contains("weights")) {
        c.weights = loss_weights_from_json(j.at("weights"));
    }
    if (j.contains("flags")) {
        const auto& f = j.at("flags");
        c.flags.photometric = f.value("photometric", c.flags.photometric);
        c.flags.recon = f.value("recon", c.flags.recon);
        c.flags.mgs = f.value("mgs", c.flags.mgs);
        c.flags.density_reg = f.value("density_reg", c.flags.density_reg);
        c.flags.ldmk = f.value("ldmk", c.flags.ldmk);
        c.flags.warp = f.value("warp", c.flags.warp);
        c.flags.gan = f.value("gan", c.flags.gan);
    }
    if (j.contains("poses")) {
        const auto& p = j.at("poses");
        c.poses.yaw_min = p.at("yaw").at(0);
        c.poses.yaw_max = p.at("yaw").at(1);
        c.poses.pitch_min = p.at("pitch").at(0);
        c.poses.pitch_max = p.at("pitch").at(1);
    }
    c.margin.start_fraction = j.value("margin_start", c.margin.start_fraction);
    c.margin.end_fraction = j.value("margin_end", c.margin.end_fraction);
    c.margin.total_steps = j.value("margin_steps", static_cast<long>(c.n_steps));
    c.n_vol = j.value("n_vol", c.n_vol);
    c.n_surf = j.value("n_surf", c.n_surf);
    c.n_fine = j.value("n_fine", c.n_fine);
    if (j.contains("field")) {
        c.field = field_config_from_json(j.at("field"));
    }
    c.model_seed = j.value("model_seed", c.model_seed);
    c.normalizer_samples = j.value("normalizer_samples", c.normalizer_samples);
    c.recon.n_samples = j.value("recon_samples", c.recon.n_samples);
    c.recon.steps = j.value("recon_steps", c.recon.steps);
    c.same_exp_partner = j.value("same_exp_partner", c.same_exp_partner);
    if (c.n_steps < 1) {
        throw std::invalid_argument("train config: n_steps must be at least 1");
    }
    if (!(c.density_ramp_start > 0.0 && c.density_ramp_start <= 1.0)) {
        throw std::invalid_argument("train config: density_ramp_start must lie in (0, 1]");
    }
    const auto& f = c.flags;
    if (!(f.photometric || f.recon || f.density_reg || f.ldmk || f.warp || f.gan)) {
        throw std::invalid_argument("train config: every objective is disabled");
    }
    if (!(c.margin.start_fraction >= c.margin.end_fraction && c.margin.end_fraction > 0.0)) {
        throw std::invalid_argument("train config: margin fractions must satisfy start >= end > 0");
    }
    return c;
}

struct TrainLogRow
{
    int step = 0;
    LossTerms terms;
    double margin = 0.0;
};

struct TrainLog
{
    std::vector<TrainLogRow> rows;

    static constexpr const char* kHeader = "step,gan,recon,density_reg,ldmk,warp,photometric,total,margin";

    void write_csv(std::ostream& out) const
    {
        out << kHeader << "\n";
        for (const auto& r : rows) {
            char buf[512];
            std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.terms.gan,
                          r.terms.recon, r.terms.density_reg, r.terms.ldmk, r.terms.warp, r.terms.photometric,
                          r.terms.total, r.margin);
            out << buf;
        }
    }
};

/// Shared fixtures of a training run: the toy model, the coefficient
/// normalizer and the frozen reconstructor.
struct Setup
{
    MorphableModel model;
    Normalizer normalizer;
    Reconstructor reconstructor;
    LandmarkLinearMap landmark_map;
};

inline Normalizer standard_normalizer(int dim, int n, std::uint64_t seed)
{
    Rng rng = keyed_stream(seed, {0x40e3});
    MatX samples(n, dim);
    for (Eigen::Index i = 0; i < samples.size(); ++i) {
        samples.data()[i] = normal01(rng);
    }
    return fit_normalizer(samples);
}

inline Setup make_setup(const TrainConfig& cfg)
{
    Setup s;
    s.model = make_toy_model(cfg.model_seed);
    if (s.model.dims.total() != cfg.field.coeff_dim) {
        throw std::invalid_argument("train config: field coeff_dim does not match the toy model");
    }
    s.normalizer = standard_normalizer(s.model.dims.total(), cfg.normalizer_samples, cfg.seed);
    ReconTrainOptions ro = cfg.recon;
    ro.poses = cfg.poses;
    ro.threads = cfg.threads;
    s.reconstructor = pretrain_reconstructor(s.model, s.normalizer, ro, cfg.seed);
    s.landmark_map = landmark_linear_map(s.model);
    return s;
}

inline RenderConfig render_config_of(const TrainConfig& c, double margin)
{
    RenderConfig r;
    r.n_vol = c.n_vol;
    r.n_surf = c.n_surf;
    r.n_fine = c.n_fine;
    r.margin = margin;
    r.mesh_guided = c.flags.mgs;
    r.importance = true;
    r.seed = c.seed;
    r.threads = c.threads;
    r.background = kBackground;
    return r;
}

struct TrainingDiverged : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

namespace detail {

/// Gradient contribution of one independently taped piece of a step.
struct StepPart
{
    LossTerms terms;
    std::vector<MatX> grads;
};

inline void add_grads(std::vector<MatX>& acc, const std::vector<MatX>& g)
{
    if (g.empty()) {
        return;
    }
    if (acc.empty()) {
        acc = g;
        return;
    }
    for (std::size_t i = 0; i < acc.size(); ++i) {
        acc[i] += g[i];
    }
}

inline std::vector<std::size_t> choose_without_replacement(std::size_t n, std::size_t k, Rng& rng)
{
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    k = std::min(k, n);
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n - i));
        std::swap(idx[i], idx[std::min(j, n - 1)]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

} // namespace detail

/// Multiplier on lambda_d: zero during the delay, then a geometric ramp from
/// 1e-6 to 1 over the warmup.
inline double density_ramp_of(const TrainConfig& cfg, int step)
{
    if (step < cfg.density_delay) {
        return 0.0;
    }
    const int s = step - cfg.density_delay;
    if (s >= cfg.density_warmup) {
        return 1.0;
    }
    return std::pow(cfg.density_ramp_start, 1.0 - static_cast<double>(s) / cfg.density_warmup);
}

/// Everything drawn for one training step.
struct StepSample
{
    Eigen::VectorXd z;       // normalized code
    Eigen::VectorXd z_tilde; // raw coefficients
    MorphCoeffs coeffs;
    Camera camera;
    Eigen::VectorXd z_prime; // normalized code of the expression partner
    MorphCoeffs coeffs_prime;
};

inline StepSample draw_step(const Setup& s, const TrainConfig& cfg, int step)
{
    Rng rng = keyed_stream(cfg.seed, {0x57e9, static_cast<std::uint64_t>(step)});
    const int d = s.model.dims.total();
    StepSample out;
    out.z.resize(d);
    for (int k = 0; k < d; ++k) {
        out.z[k] = normal01(rng);
    }
    out.z_tilde = s.normalizer.denormalize(out.z);
    out.coeffs = MorphCoeffs::from_flat(out.z_tilde, s.model.dims);
    out.camera = look_at_camera(kCameraRadius, uniform(rng, cfg.poses.yaw_min, cfg.poses.yaw_max),
                                uniform(rng, cfg.poses.pitch_min, cfg.poses.pitch_max), kFovDeg, cfg.image_size,
                                cfg.image_size);
    out.coeffs_prime = out.coeffs;
    out.z_prime = out.z;
    if (!cfg.same_exp_partner) {
        for (Eigen::Index k = 0; k < out.coeffs_prime.z_exp.size(); ++k) {
            out.coeffs_prime.z_exp[k] = normal01(rng);
        }
        out.z_prime = s.normalizer.normalize(out.coeffs_prime.flat());
    }
    return out;
}

/// One optimisation step's losses and parameter gradients.
struct StepResult
{
    LossTerms terms;
    std::vector<MatX> grads;
};

inline StepResult train_step(const FieldParams& params, const Setup& s, const TrainConfig& cfg, int step)
{
    const StepSample smp = draw_step(s, cfg, step);
    const double margin = cfg.margin.margin(step, kNear, kFar);
    RenderConfig rc = render_config_of(cfg, margin);
    rc.step = static_cast<std::uint64_t>(step);
    const Mesh mesh = synthesize_mesh(s.model, smp.coeffs);
    const Camera& cam = smp.camera;
    const Image target = make_target_image(s.model, smp.coeffs, cam);
    const DepthMap t_m = ray_mesh_depth(mesh, cam);
    const Eigen::VectorXd w = map_latent(params, smp.z);
    const auto field_fn = neural_field(params, w);
    const LossWeights& lw = cfg.weights;
    const AblationFlags& fl = cfg.flags;
    const bool aux = cfg.aux_every <= 1 || step % cfg.aux_every == 0;
    const double density_ramp = density_ramp_of(cfg, step);

    std::vector<std::function<detail::StepPart()>> jobs;

    // Photometric and density terms on a random pixel batch, split into chunks.
    Rng pick = keyed_stream(cfg.seed, {0x9a7c, static_cast<std::uint64_t>(step)});
    const auto all_rays = pixel_rays(cam);
    const auto chosen = detail::choose_without_replacement(all_rays.size(), static_cast<std::size_t>(cfg.batch_rays), pick);
    const std::size_t chunk = 64;
    const double inv_batch = 1.0 / static_cast<double>(chosen.size());
    if (fl.photometric || fl.density_reg) {
        for (std::size_t begin = 0; begin < chosen.size(); begin += chunk) {
            const std::size_t end = std::min(chosen.size(), begin + chunk);
            jobs.push_back([&, begin, end]() {
                std::vector<Ray> rays;
                std::vector<double> tm;
                std::vector<std::uint64_t> keys;
                MatX tgt(3, static_cast<Eigen::Index>(end - begin));
                for (std::size_t k = begin; k < end; ++k) {
                    const std::size_t px = chosen[k];
                    rays.push_back(all_rays[px]);
                    tm.push_back(t_m.depth[px]);
                    keys.push_back(px);
                    for (int c = 0; c < 3; ++c) {
                        tgt(c, static_cast<Eigen::Index>(k - begin)) = target.data[3 * px + c];
                    }
                }
                RayBatch batch = assemble(plan_rays(field_fn, rays, tm, keys, RayPurpose::train, rc, kNear, kFar));
                Tape tape;
                const FieldVars fv = bind(tape, params, true);
                const Var wv = map_latent(fv, tape.constant(smp.z));
                const TapeRender tr = render_on_tape(fv, wv, std::move(batch), rc.background);
                std::vector<Var> terms;
                std::vector<double> weights;
                detail::StepPart part;
                if (fl.photometric) {
                    const Var pho = ad::scale(
                        ad::sum(ad::abs(ad::add_const(ad::slice_rows(tr.composite, 0, 3), -tgt))), inv_batch / 3.0);
                    part.terms.photometric = pho.value()(0, 0);
                    terms.push_back(pho);
                    weights.push_back(lw.lambda_pho);
                }
                if (fl.density_reg) {
                    const MatX f = density_penalty_factors(*tr.batch, margin, lw.alpha);
                    const Var reg = ad::scale(ad::sum(ad::mul_const(tr.field.sigma, f)), inv_batch);
                    part.terms.density_reg = reg.value()(0, 0);
                    terms.push_back(reg);
                    weights.push_back(lw.lambda_d * density_ramp);
                }
                tape.backward(ad::weighted_sum(terms, weights));
                part.grads = collect_grads(tape, fv);
                return part;
            });
        }
    }

    // The reconstructor sees a full low-resolution render. Its estimate also
    // feeds the landmark terms.
    const bool need_recon_image = aux && (fl.recon || fl.ldmk);
    const Camera cam_lo = with_resolution(cam, kReconInputSide, kReconInputSide);
    const LandmarkSet input_lms = landmarks_of(s.model, mesh);
    Eigen::VectorXd z_pred_raw;
    detail::StepPart recon_part;
    if (need_recon_image) {
        const DepthMap t_m_lo = ray_mesh_depth(mesh, cam_lo);
        const auto rays = pixel_rays(cam_lo);
        std::vector<std::uint64_t> keys(rays.size());
        std::iota(keys.begin(), keys.end(), 1u << 20);
        RayBatch batch = assemble(plan_rays(field_fn, rays, t_m_lo.depth, keys, RayPurpose::train, rc, kNear, kFar));
        Tape tape;
        const FieldVars fv = bind(tape, params, true);
        const TapeRender tr = render_on_tape(fv, map_latent(fv, tape.constant(smp.z)), std::move(batch), rc.background);
        const Var gray = ad::scale(ad::sum_rows(ad::slice_rows(tr.composite, 0, 3)), 1.0 / 3.0);
        const Var x = ad::add_const(ad::transpose(gray), MatX::Constant(kReconInputs, 1, -kBackground));
        const Var out = reconstruct_on_tape(s.reconstructor, x);
        const Var zp = ad::slice_rows(out, 0, s.model.dims.total());
        z_pred_raw = zp.value().col(0);
        std::vector<Var> terms;
        std::vector<double> weights;
        if (fl.recon) {
            const Var rl = recon_loss_on_tape(zp, smp.z, s.normalizer);
            recon_part.terms.recon = rl.value()(0, 0);
            terms.push_back(rl);
            weights.push_back(lw.lambda_recon);
        }
        if (fl.ldmk) {
            const Var l1 = estimated_landmark_l1_on_tape(zp, s.landmark_map, input_lms);
            recon_part.terms.ldmk = l1.value()(0, 0);
            terms.push_back(l1);
            weights.push_back(lw.lambda_ldmk);
        }
        tape.backward(ad::weighted_sum(terms, weights));
        recon_part.grads = collect_grads(tape, fv);
    }

    if (aux && fl.ldmk) {
        // Field landmarks: expected depth along the rays through the projected
        // estimated landmarks (non-contour only).
        jobs.push_back([&]() {
            const Mesh est_mesh = synthesize_mesh(s.model, MorphCoeffs::from_flat(z_pred_raw, s.model.dims));
            const LandmarkSet est = landmarks_of(s.model, est_mesh);
            const MeshBvh bvh(mesh);
            std::vector<Ray> rays;
            std::vector<double> tm;
            std::vector<std::uint64_t> keys;
            std::vector<Vec3> targets;
            for (int k = 0; k < LandmarkSet::kCount; ++k) {
                if (est.contour_mask[k]) {
                    continue;
                }
                const auto p = project(cam, est.positions[k]);
                if (!p || !in_image(cam, p->u, p->v)) {
                    continue;
                }
                rays.push_back(ray_through_pixel(cam, p->u, p->v));
                const TriangleHit h = bvh.intersect(rays.back(), kNear, kFar);
                tm.push_back(h.valid() ? h.t : std::nan(""));
                keys.push_back(static_cast<std::uint64_t>(k));
                targets.push_back(input_lms.positions[k]);
            }
            detail::StepPart part;
            if (rays.empty()) {
                return part;
            }
            RayBatch batch = assemble(plan_rays(field_fn, rays, tm, keys, RayPurpose::landmark, rc, kNear, kFar));
            Tape tape;
            const FieldVars fv = bind(tape, params, true);
            const TapeRender tr = render_on_tape(fv, map_latent(fv, tape.constant(smp.z)), std::move(batch), rc.background);
            // Rays whose opacity is too small have no defined depth.
            std::vector<Eigen::Index> keep;
            std::vector<Ray> keep_rays;
            std::vector<Vec3> keep_targets;
            for (Eigen::Index r = 0; r < tr.composite.cols(); ++r) {
                if (tr.composite.value()(kRowOpacity, r) >= kMinDepthOpacity) {
                    keep.push_back(r);
                    keep_rays.push_back(rays[static_cast<std::size_t>(r)]);
                    keep_targets.push_back(targets[static_cast<std::size_t>(r)]);
                }
            }
            if (keep.empty()) {
                return part;
            }
            const Var l2 = backprojection_l1_on_tape(ad::gather_cols(tr.composite, keep), keep_rays, keep_targets);
            part.terms.ldmk = l2.value()(0, 0);
            tape.backward(ad::scale(l2, lw.lambda_ldmk));
            part.grads = collect_grads(tape, fv);
            return part;
        });
    }

    if (aux && fl.warp) {
        jobs.push_back([&]() {
            detail::StepPart part;
            const Mesh mesh_prime = synthesize_mesh(s.model, smp.coeffs_prime);
            const DisplacementMap F = displacement_map(mesh, vertex_displacements(mesh, mesh_prime), cam);
            std::vector<std::size_t> hit_pixels;
            for (std::size_t i = 0; i < F.hit_mask.size(); ++i) {
                if (F.hit_mask[i]) {
                    hit_pixels.push_back(i);
                }
            }
            if (hit_pixels.empty()) {
                return part;
            }
            Rng wr = keyed_stream(cfg.seed, {0x3a29, static_cast<std::uint64_t>(step)});
            const auto sel = detail::choose_without_replacement(hit_pixels.size(), static_cast<std::size_t>(cfg.warp_rays), wr);
            std::vector<Ray> rays;
            std::vector<double> tm;
            std::vector<std::uint64_t> keys;
            std::vector<Vec3> disp;
            for (std::size_t k : sel) {
                const std::size_t px = hit_pixels[k];
                rays.push_back(all_rays[px]);
                tm.push_back(t_m.depth[px]);
                keys.push_back(px);
                disp.push_back(F.disp[px]);
            }
            auto batch = std::make_shared<const RayBatch>(
                assemble(plan_rays(field_fn, rays, tm, keys, RayPurpose::train, rc, kNear, kFar)));
            Tape tape;
            const FieldVars fv = bind(tape, params, true);
            const Var wv = map_latent(fv, tape.constant(smp.z));
            const Var wv_prime = cfg.same_exp_partner ? wv : map_latent(fv, tape.constant(smp.z_prime));
            auto field = [&fv](Var lat, Var x) { return eval_field(fv, lat, x); };
            const WarpBreakdown wl =
                warp_loss_on_tape(field, wv, wv_prime, batch, disp, lw.beta_d, lw.beta_c, lw.beta_I);
            part.terms.warp = wl.total.value()(0, 0);
            tape.backward(ad::scale(wl.total, lw.lambda_warp));
            part.grads = collect_grads(tape, fv);
            return part;
        });
    }

    std::vector<detail::StepPart> parts(jobs.size());
    parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) { parts[i] = jobs[i](); });

    StepResult res;
    auto fold = [&](const detail::StepPart& p) {
        res.terms.photometric += p.terms.photometric;
        res.terms.density_reg += p.terms.density_reg;
        res.terms.recon += p.terms.recon;
        res.terms.ldmk += p.terms.ldmk;
        res.terms.warp += p.terms.warp;
        res.terms.gan += p.terms.gan;
        detail::add_grads(res.grads, p.grads);
    };
    fold(recon_part);
    for (const auto& p : parts) {
        fold(p);
    }
    if (res.grads.empty()) {
        for (const auto& t : params.tensors) {
            res.grads.push_back(MatX::Zero(t.value.rows(), t.value.cols()));
        }
    }
    res.terms.total = total_loss(res.terms, cfg.weights);
    return res;
}

using StepCallback = std::function<void(const TrainLogRow&)>;

inline FieldParams train(const Setup& s, const TrainConfig& cfg, TrainLog* log = nullptr,
                         const StepCallback& on_step = {})
{
    FieldParams params = init_params(cfg.seed, cfg.field);
    AdamState adam;
    adam.lr = cfg.lr;
    for (int step = 0; step < cfg.n_steps; ++step) {
        StepResult r = train_step(params, s, cfg, step);
        const LossTerms& t = r.terms;
        if (!std::isfinite(t.total)) {
            std::ostringstream msg;
            msg << "training diverged at step " << step << ": photometric " << t.photometric << ", recon " << t.recon
                << ", density_reg " << t.density_reg << ", ldmk " << t.ldmk << ", warp " << t.warp;
            throw TrainingDiverged(msg.str());
        }
        if (cfg.grad_clip > 0.0) {
            double sq = 0.0;
            for (const auto& g : r.grads) {
                sq += g.squaredNorm();
            }
            if (std::sqrt(sq) > cfg.grad_clip) {
                const double k = cfg.grad_clip / std::sqrt(sq);
                for (auto& g : r.grads) {
                    g *= k;
                }
            }
        }
        try {
            adam_step(adam, params, r.grads);
        } catch (const NonFiniteGradient& e) {
            throw TrainingDiverged(std::string(e.what()) + " at step " + std::to_string(step));
        }
        const TrainLogRow row{step, t, cfg.margin.margin(step, kNear, kFar)};
        if (log) {
            log->rows.push_back(row);
        }
        if (on_step) {
            on_step(row);
        }
    }
    return params;
}

// ---- evaluation ------------------------------------------------------------------------

struct EvalOptions
{
    int n_pairs = 10;
    int resolution = 32;
    SurfaceChamferOptions chamfer;
    std::uint64_t seed = 7;
};

/// Field landmarks of one conditioning code: render the field, re-estimate the
/// landmarks with the reconstructor, and back-project the field's expected
/// depth along the rays through their projections.
inline std::vector<std::optional<Vec3>> field_landmarks(const FieldParams& params, const Eigen::VectorXd& w,
                                                        const Setup& s, const Mesh& mesh, const Camera& cam,
                                                        const RenderConfig& rc)
{
    const auto field = neural_field(params, w);
    const RenderResult img = render_image(field, cam, &mesh, rc);
    const auto est = split_estimate(s.reconstructor, reconstruct(s.reconstructor, img.image));
    const LandmarkSet lms = landmarks_of(s.model, synthesize_mesh(s.model, est.coeffs));
    std::vector<Vec2> pts;
    std::vector<int> which;
    for (int k = 0; k < LandmarkSet::kCount; ++k) {
        const auto p = project(cam, lms.positions[k]);
        if (!lms.contour_mask[k] && p && in_image(cam, p->u, p->v)) {
            pts.emplace_back(p->u, p->v);
            which.push_back(k);
        }
    }
    std::vector<std::optional<Vec3>> out(LandmarkSet::kCount);
    const auto q = render_depth_at(field, cam, pts, &mesh, rc);
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i].defined) {
            out[static_cast<std::size_t>(which[i])] = q[i].point;
        }
    }
    return out;
}

struct EvalResult
{
    double cd = 0.0;
    double ld = 0.0;
    double lc = 0.0;
    int lc_pairs_used = 0;
};

/// CD on a held-out code, and LD / LC over random expression pairs seen from
/// a frontal camera.
inline EvalResult evaluate_field(const FieldParams& params, const Setup& s, const TrainConfig& cfg,
                                 const EvalOptions& opt = {})
{
    RenderConfig rc = render_config_of(cfg, cfg.margin.end_fraction * (kFar - kNear));
    rc.seed = opt.seed;
    Rng rng = keyed_stream(opt.seed, {0xe7a1});
    const int d = s.model.dims.total();
    auto draw_code = [&]() {
        Eigen::VectorXd z(d);
        for (int k = 0; k < d; ++k) {
            z[k] = normal01(rng);
        }
        return z;
    };
    EvalResult res;
    {
        const Eigen::VectorXd z = draw_code();
        const Mesh mesh = synthesize_mesh(s.model, MorphCoeffs::from_flat(s.normalizer.denormalize(z), s.model.dims));
        SurfaceChamferOptions co = opt.chamfer;
        co.seed = opt.seed;
        res.cd = surface_chamfer(neural_field(params, map_latent(params, z)), mesh, rc, co).cd;
    }
    const Camera cam = look_at_camera(kCameraRadius, 0.0, 0.0, kFovDeg, opt.resolution, opt.resolution);
    std::vector<std::vector<Vec3>> field_disp, mesh_disp;
    double ld_sum = 0.0;
    int ld_n = 0;
    for (int p = 0; p < opt.n_pairs; ++p) {
        const Eigen::VectorXd z = draw_code();
        const MorphCoeffs c = MorphCoeffs::from_flat(s.normalizer.denormalize(z), s.model.dims);
        MorphCoeffs c2 = c;
        for (Eigen::Index k = 0; k < c2.z_exp.size(); ++k) {
            c2.z_exp[k] = normal01(rng);
        }
        const Eigen::VectorXd z2 = s.normalizer.normalize(c2.flat());
        const Mesh m1 = synthesize_mesh(s.model, c), m2 = synthesize_mesh(s.model, c2);
        const LandmarkSet l1 = landmarks_of(s.model, m1), l2 = landmarks_of(s.model, m2);
        const auto f1 = field_landmarks(params, map_latent(params, z), s, m1, cam, rc);
        const auto f2 = field_landmarks(params, map_latent(params, z2), s, m2, cam, rc);
        ld_sum += landmark_distance(f1, l1);
        ++ld_n;
        std::vector<Vec3> fd, md;
        for (int k = 0; k < LandmarkSet::kCount; ++k) {
            if (l1.contour_mask[k] || !f1[k] || !f2[k]) {
                continue;
            }
            fd.push_back(*f2[k] - *f1[k]);
            md.push_back(l2.positions[k] - l1.positions[k]);
        }
        if (fd.size() >= 2) {
            field_disp.push_back(fd);
            mesh_disp.push_back(md);
        }
    }
    res.ld = ld_sum / std::max(ld_n, 1);
    const CorrelationResult lc = landmark_correlation(field_disp, mesh_disp);
    res.lc = lc.lc;
    res.lc_pairs_used = lc.pairs_used;
    return res;
}

/// Disentanglement scores of a trained field. The factor vector is the
/// normalized code followed by two standardized pose coordinates; each
/// observation renders the field and re-estimates code and pose with the
/// reconstructor.
inline DsResult field_disentanglement(const FieldParams& params, const Setup& s, const TrainConfig& cfg, int n_anchors,
                                      int n_sweeps, std::uint64_t seed, int resolution = 32)
{
    const CoeffDims& dims = s.model.dims;
    const int d = dims.total();
    const PoseRange& pr = cfg.poses;
    const double yaw_mid = 0.5 * (pr.yaw_min + pr.yaw_max), pitch_mid = 0.5 * (pr.pitch_min + pr.pitch_max);
    RenderConfig rc = render_config_of(cfg, cfg.margin.end_fraction * (kFar - kNear));
    rc.seed = seed;
    auto observe = [&](const Eigen::VectorXd& v) {
        const Eigen::VectorXd z = v.head(d);
        const double yaw = std::clamp(yaw_mid + v[d] * pr.yaw_std(), pr.yaw_min, pr.yaw_max);
        const double pitch = std::clamp(pitch_mid + v[d + 1] * pr.pitch_std(), pr.pitch_min, pr.pitch_max);
        const Camera cam = look_at_camera(kCameraRadius, yaw, pitch, kFovDeg, resolution, resolution);
        const Mesh mesh = synthesize_mesh(s.model, MorphCoeffs::from_flat(s.normalizer.denormalize(z), dims));
        const Image img = render_image(neural_field(params, map_latent(params, z)), cam, &mesh, rc).image;
        const ReconEstimate est = split_estimate(s.reconstructor, reconstruct(s.reconstructor, img));
        Eigen::VectorXd out(d + 2);
        out.head(d) = s.normalizer.normalize(est.coeffs.flat());
        out[d] = (est.yaw - yaw_mid) / pr.yaw_std();
        out[d + 1] = (est.pitch - pitch_mid) / pr.pitch_std();
        return out;
    };
    const std::vector<FactorSpec> factors = {{"shape", 0, dims.shape}, {"exp", dims.shape, dims.exp}, {"pose", d, 2}};
    Rng rng = keyed_stream(seed, {0xd15e});
    return disentanglement_scores(factors, d + 2, observe, n_anchors, n_sweeps, rng);
}

struct AblationRow
{
    std::string name;
    AblationFlags flags;
    EvalResult eval;
};

/// The objective ladder: photometric only, then recon, mesh-guided sampling,
/// density regularizer, landmark loss and warping loss added one at a time.
inline std::vector<std::pair<std::string, AblationFlags>> ablation_ladder()
{
    std::vector<std::pair<std::string, AblationFlags>> out;
    AblationFlags f{true, false, false, false, false, false, false};
    out.emplace_back("photometric", f);
    f.recon = true;
    out.emplace_back("+recon", f);
    f.mgs = true;
    out.emplace_back("+mgs", f);
    f.density_reg = true;
    out.emplace_back("+density_reg", f);
    f.ldmk = true;
    out.emplace_back("+ldmk", f);
    f.warp = true;
    out.emplace_back("+warp", f);
    return out;
}

inline std::vector<AblationRow> run_ablation(const Setup& s, const TrainConfig& base, const EvalOptions& eval = {},
                                             const std::function<void(const AblationRow&)>& on_row = {})
{
    std::vector<AblationRow> rows;
    for (const auto& [name, flags] : ablation_ladder()) {
        TrainConfig cfg = base;
        cfg.flags = flags;
        const FieldParams p = train(s, cfg);
        rows.push_back({name, flags, evaluate_field(p, s, cfg, eval)});
        if (on_row) {
            on_row(rows.back());
        }
    }
    return rows;
}

// ---- adversarial smoke path -------------------------------------------------------------

inline constexpr int kDiscSide = 8;

/// Two-layer discriminator on an 8x8 grayscale image.
struct Discriminator
{
    MatX w0, b0, w1, b1;
};

inline Discriminator init_discriminator(std::uint64_t seed, int hidden = 16)
{
    Rng rng = keyed_stream(seed, {0xd15c});
    auto init = [&](int out, int in) {
        const double a = std::sqrt(6.0 / in);
        MatX w(out, in);
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            w.data()[i] = uniform(rng, -a, a);
        }
        return w;
    };
    return {init(hidden, kDiscSide * kDiscSide), MatX::Zero(hidden, 1), init(1, hidden), MatX::Zero(1, 1)};
}

inline Eigen::VectorXd disc_input(const Image& img)
{
    const auto g = grayscale_downsample(img, kDiscSide, kDiscSide);
    return Eigen::Map<const Eigen::VectorXd>(g.data(), static_cast<Eigen::Index>(g.size())).array() - kBackground;
}

struct DiscVars
{
    Var w0, b0, w1, b1;
};

/// Discriminator score and its input gradient, both on the tape.
inline std::pair<Var, Var> disc_score_and_input_grad(const DiscVars& d, Var x)
{
    const Var pre = ad::affine(d.w0, x, d.b0);
    const Var score = ad::affine(d.w1, ad::silu(pre), d.b1);
    const Var gx = ad::matmul(ad::transpose(d.w0), ad::mul(ad::transpose(d.w1), ad::silu_grad(pre)));
    return {score, gx};
}

struct GanSmokeResult
{
    double g_loss = 0.0;
    double d_loss = 0.0;
    double r1 = 0.0;
    double d_real = 0.0;
    double d_fake = 0.0;
};

/// One discriminator update on (fake, real): ascend the adversarial terms and
/// descend the R1 penalty on the real input gradient.
inline GanSmokeResult gan_smoke_step(Discriminator& disc, AdamState& adam, const Image& fake, const Image& real,
                                     double lambda_r1)
{
    Tape t;
    const DiscVars d{t.leaf(disc.w0), t.leaf(disc.b0), t.leaf(disc.w1), t.leaf(disc.b1)};
    const auto [s_fake, gx_fake] = disc_score_and_input_grad(d, t.constant(disc_input(fake)));
    const auto [s_real, gx_real] = disc_score_and_input_grad(d, t.constant(disc_input(real)));
    const Var r1 = ad::sum(ad::square(gx_real));
    GanSmokeResult res;
    res.d_fake = s_fake.value()(0, 0);
    res.d_real = s_real.value()(0, 0);
    res.r1 = r1.value()(0, 0);
    const GanLosses gl = gan_losses(res.d_fake, res.d_real, res.r1, lambda_r1);
    res.g_loss = gl.g_loss;
    res.d_loss = gl.d_loss;
    // d/du f(u) = sigmoid(-u); the objective is -(f(d_fake) + f(-d_real)) + lambda R1.
    const Var obj = ad::weighted_sum({s_fake, s_real, r1}, {-gan_f_prime(res.d_fake), gan_f_prime(-res.d_real), lambda_r1});
    t.backward(obj);
    adam_step(adam, {&disc.w0, &disc.b0, &disc.w1, &disc.b1}, {t.grad(d.w0), t.grad(d.b0), t.grad(d.w1), t.grad(d.b1)},
              {"disc.w0", "disc.b0", "disc.w1", "disc.b1"});
    return res;
}

} // namespace cgof
