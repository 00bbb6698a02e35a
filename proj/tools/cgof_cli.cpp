// Command-line front end: toy model generation, rendering, training,
// metrics, alignment, inversion and editing.
#include "cgof/gradsuite.hpp"
#include "cgof/harness.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

using namespace cgof;
namespace fs = std::filesystem;

namespace {

/// Bad flags, unreadable inputs or malformed files: exit code 1.
struct UsageError : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

void require_file(const std::string& path)
{
    if (!fs::is_regular_file(path)) {
        throw UsageError("missing file: " + path);
    }
}

nlohmann::json read_json(const std::string& path)
{
    require_file(path);
    std::ifstream in(path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(path + ": " + e.what());
    }
}

void write_text(const std::string& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw UsageError("cannot write " + path);
    }
    out << text;
}

void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

std::string ppm_bytes(const Image& img)
{
    std::ostringstream s;
    write_ppm(s, img);
    return s.str();
}

std::vector<double> parse_list(const std::string& text, const char* what)
{
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) {
                throw std::invalid_argument(item);
            }
        } catch (const std::exception&) {
            throw UsageError(std::string("bad number in ") + what + ": '" + item + "'");
        }
    }
    return out;
}

/// Everything a trained field needs besides its weights, stored next to the
/// checkpoint as <ckpt>.json.
struct TrainedField
{
    FieldParams params;
    TrainConfig cfg;
    Setup setup;
};

std::string sidecar_path(const std::string& ckpt) { return ckpt + ".json"; }

nlohmann::json sidecar_json(const TrainConfig& cfg, const Setup& s)
{
    return {{"train_config", train_config_to_json(cfg)},
            {"normalizer", normalizer_to_json(s.normalizer)},
            {"reconstructor", reconstructor_to_json(s.reconstructor)}};
}

TrainedField load_trained(const std::string& ckpt, const MorphableModel* model = nullptr)
{
    require_file(ckpt);
    const nlohmann::json side = read_json(sidecar_path(ckpt));
    TrainedField t;
    try {
        t.params = load_checkpoint(ckpt);
        t.cfg = train_config_from_json(side.at("train_config"));
        t.setup.model = model ? *model : make_toy_model(t.cfg.model_seed);
        t.setup.normalizer = normalizer_from_json(side.at("normalizer"));
        t.setup.reconstructor = reconstructor_from_json(side.at("reconstructor"));
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(sidecar_path(ckpt) + ": " + e.what());
    } catch (const std::runtime_error& e) {
        throw UsageError(ckpt + ": " + e.what());
    }
    if (t.setup.model.dims.total() != t.params.config.coeff_dim) {
        throw UsageError("model coefficient count does not match the checkpoint");
    }
    t.setup.landmark_map = landmark_linear_map(t.setup.model);
    return t;
}

MorphableModel load_model(const std::string& path)
{
    const nlohmann::json j = read_json(path);
    try {
        return model_from_json(j);
    } catch (const std::exception& e) {
        throw UsageError(path + ": " + e.what());
    }
}

/// Inline flags form the base; keys present in the file override them.
TrainConfig merged_config(const std::string& path, const TrainConfig& inline_cfg)
{
    nlohmann::json j = train_config_to_json(inline_cfg);
    const nlohmann::json file = read_json(path);
    if (!file.is_object()) {
        throw UsageError(path + ": expected a JSON object");
    }
    j.merge_patch(file);
    try {
        return train_config_from_json(j);
    } catch (const std::exception& e) {
        throw UsageError(path + ": " + e.what());
    }
}

RenderConfig eval_render_config(const TrainConfig& cfg, std::uint64_t seed, int threads)
{
    RenderConfig rc = render_config_of(cfg, cfg.margin.end_fraction * (kFar - kNear));
    rc.seed = seed;
    rc.threads = threads;
    return rc;
}

// ---- subcommands ---------------------------------------------------------------------

struct Common
{
    int threads = 1;
};

struct ToygenArgs
{
    std::uint64_t seed = 0;
    std::string out, obj;
};

int run_toygen(const ToygenArgs& a)
{
    const MorphableModel m = make_toy_model(static_cast<int>(a.seed));
    write_json(a.out, model_to_json(m));
    if (!a.obj.empty()) {
        std::ostringstream s;
        write_obj(s, m.mean_mesh());
        write_text(a.obj, s.str());
    }
    return 0;
}

struct RenderArgs
{
    std::string model, coeffs, coeffs_file, out, depth, ckpt;
    double yaw = 0.0, pitch = 0.0;
    int size = 64;
    std::optional<std::uint64_t> seed;
};

int run_render(const RenderArgs& a, const Common& c)
{
    const MorphableModel model = load_model(a.model);
    std::vector<double> raw;
    if (!a.coeffs_file.empty()) {
        const nlohmann::json j = read_json(a.coeffs_file);
        raw = j.is_object() ? j.at("coeffs").get<std::vector<double>>() : j.get<std::vector<double>>();
    } else if (!a.coeffs.empty()) {
        raw = parse_list(a.coeffs, "--coeffs");
    } else {
        raw.assign(static_cast<std::size_t>(model.dims.total()), 0.0);
    }
    if (static_cast<int>(raw.size()) != model.dims.total()) {
        throw UsageError("expected " + std::to_string(model.dims.total()) + " coefficients, got " +
                         std::to_string(raw.size()));
    }
    if (a.size < 1) {
        throw UsageError("--size must be positive");
    }
    std::optional<TrainedField> tf;
    if (!a.ckpt.empty()) {
        if (!a.seed) {
            throw UsageError("render with --ckpt samples rays randomly and needs --seed");
        }
        tf = load_trained(a.ckpt, &model);
    }
    const Eigen::VectorXd flat = Eigen::Map<const Eigen::VectorXd>(raw.data(), static_cast<Eigen::Index>(raw.size()));
    const MorphCoeffs coeffs = MorphCoeffs::from_flat(flat, model.dims);
    const Camera cam = look_at_camera(kCameraRadius, a.yaw, a.pitch, kFovDeg, a.size, a.size);
    const Mesh mesh = synthesize_mesh(model, coeffs);
    Image img;
    DepthMap depth;
    if (tf) {
        const Eigen::VectorXd z = tf->setup.normalizer.normalize(flat);
        const RenderResult r = render_image(neural_field(tf->params, map_latent(tf->params, z)), cam, &mesh,
                                            eval_render_config(tf->cfg, *a.seed, c.threads));
        img = r.image;
        depth = empty_depth_map(cam);
        for (std::size_t i = 0; i < r.aux.size(); ++i) {
            if (r.aux[i].depth_defined) {
                depth.depth[i] = r.aux[i].expected_depth;
                depth.hit_mask[i] = true;
            }
        }
    } else {
        img = make_target_image(model, coeffs, cam, c.threads);
        depth = ray_mesh_depth(mesh, cam, c.threads);
    }
    write_text(a.out, ppm_bytes(img));
    if (!a.depth.empty()) {
        std::ostringstream s;
        write_depth_pgm(s, depth);
        write_text(a.depth, s.str());
    }
    return 0;
}

struct FitArgs
{
    std::string config, out, log;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
};

TrainConfig fit_config(const FitArgs& a, const Common& c)
{
    TrainConfig base;
    base.threads = c.threads;
    if (a.seed) {
        base.seed = *a.seed;
    }
    if (a.steps) {
        base.n_steps = *a.steps;
        base.margin.total_steps = *a.steps;
    }
    const nlohmann::json file = read_json(a.config);
    if (!a.seed && !(file.is_object() && file.contains("seed"))) {
        throw UsageError("training is randomized: pass --seed or set \"seed\" in " + a.config);
    }
    return merged_config(a.config, base);
}

int run_fit(const FitArgs& a, const Common& c)
{
    const TrainConfig cfg = fit_config(a, c);
    const Setup s = make_setup(cfg);
    TrainLog log;
    FieldParams p = train(s, cfg, &log);
    round_to_f32(p);
    save_checkpoint(a.out, p);
    write_json(sidecar_path(a.out), sidecar_json(cfg, s));
    if (!a.log.empty()) {
        std::ostringstream s2;
        log.write_csv(s2);
        write_text(a.log, s2.str());
    }
    return 0;
}

struct AblateArgs
{
    FitArgs fit;
    std::string outdir;
};

int run_ablate(const AblateArgs& a, const Common& c)
{
    const TrainConfig cfg = fit_config(a.fit, c);
    const Setup s = make_setup(cfg);
    fs::create_directories(a.outdir);
    nlohmann::json rows = nlohmann::json::array();
    std::ostringstream csv;
    csv << "name,cd,ld,lc,lc_pairs\n";
    run_ablation(s, cfg, {}, [&](const AblationRow& r) {
        rows.push_back({{"name", r.name},
                        {"cd", r.eval.cd},
                        {"ld", r.eval.ld},
                        {"lc", r.eval.lc},
                        {"lc_pairs", r.eval.lc_pairs_used}});
        csv << r.name << ',' << r.eval.cd << ',' << r.eval.ld << ',' << r.eval.lc << ',' << r.eval.lc_pairs_used << '\n';
        std::cerr << r.name << ": cd " << r.eval.cd << " lc " << r.eval.lc << '\n';
    });
    write_json((fs::path(a.outdir) / "ablation.json").string(), {{"config", train_config_to_json(cfg)}, {"rows", rows}});
    write_text((fs::path(a.outdir) / "ablation.csv").string(), csv.str());
    return 0;
}

struct MetricsArgs
{
    std::string ckpt, model, suite = "ds,cd,ld,lc", out;
    std::optional<std::uint64_t> seed;
    int anchors = 10, sweeps = 10;
    bool lc_percent = false;
};

/// Fixed-order table: DS_s, DS_e, DS_p, CD, LD, LC; "-" for metrics not run.
void print_metric_table(const MetricReport& r, bool lc_percent)
{
    auto cell = [](const std::optional<double>& v, double scale) {
        std::ostringstream os;
        if (v) {
            os << std::setprecision(5) << *v * scale;
        } else {
            os << '-';
        }
        return os.str();
    };
    std::cout << std::left << std::setw(10) << "DS_s" << std::setw(10) << "DS_e" << std::setw(10) << "DS_p"
              << std::setw(10) << "CD" << std::setw(10) << "LD" << (lc_percent ? "LC(%)" : "LC") << '\n'
              << std::setw(10) << cell(r.ds_shape, 1.0) << std::setw(10) << cell(r.ds_exp, 1.0) << std::setw(10)
              << cell(r.ds_pose, 1.0) << std::setw(10) << cell(r.cd, 1.0) << std::setw(10) << cell(r.ld, 1.0)
              << cell(r.lc, lc_percent ? 100.0 : 1.0) << '\n';
}

int run_metrics(const MetricsArgs& a, const Common& c)
{
    std::set<std::string> want;
    for (std::stringstream ss(a.suite); ;) {
        std::string item;
        if (!std::getline(ss, item, ',')) {
            break;
        }
        if (item != "ds" && item != "cd" && item != "ld" && item != "lc") {
            throw UsageError("unknown metric '" + item + "' (choose from ds,cd,ld,lc)");
        }
        want.insert(item);
    }
    if (want.empty()) {
        throw UsageError("--suite is empty");
    }
    if (!a.seed) {
        throw UsageError("metrics are randomized: pass --seed");
    }
    std::optional<MorphableModel> model;
    if (!a.model.empty()) {
        model = load_model(a.model);
    }
    TrainedField tf = load_trained(a.ckpt, model ? &*model : nullptr);
    tf.cfg.threads = c.threads;
    MetricReport rep;
    rep.config = {{"suite", a.suite}, {"seed", *a.seed}, {"anchors", a.anchors}, {"sweeps", a.sweeps}};
    if (want.count("ds")) {
        const DsResult ds = field_disentanglement(tf.params, tf.setup, tf.cfg, a.anchors, a.sweeps, *a.seed);
        rep.ds_shape = ds.scores[0];
        rep.ds_exp = ds.scores[1];
        rep.ds_pose = ds.scores[2];
    }
    if (want.count("cd") || want.count("ld") || want.count("lc")) {
        EvalOptions eo;
        eo.seed = *a.seed;
        const EvalResult e = evaluate_field(tf.params, tf.setup, tf.cfg, eo);
        if (want.count("cd")) {
            rep.cd = e.cd;
        }
        if (want.count("ld")) {
            rep.ld = e.ld;
        }
        if (want.count("lc")) {
            rep.lc = e.lc;
            rep.counts["lc_pairs_used"] = e.lc_pairs_used;
        }
    }
    write_json(a.out, metric_report_to_json(rep));
    print_metric_table(rep, a.lc_percent);
    return 0;
}

struct AlignArgs
{
    std::string problem, init, out;
    int steps = 5000;
    bool affine = false;
};

int run_align(const AlignArgs& a, const Common&)
{
    const nlohmann::json pj = read_json(a.problem);
    AlignmentProblem pr;
    SimilarityTransform init = SimilarityTransform::identity();
    try {
        pr = alignment_problem_from_json(pj);
        if (!a.init.empty()) {
            init = transform_from_json(read_json(a.init));
        }
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(a.problem + ": " + e.what());
    }
    AlignOptions opt;
    opt.steps = a.steps;
    opt.affine = a.affine;
    const AlignResult r = align_coordinates(pr, init, opt);
    nlohmann::json j = align_result_to_json(r);
    j["initial_l1_px"] = r.initial_l1_px;
    j["steps_taken"] = r.steps_taken;
    if (a.affine) {
        std::vector<double> m;
        for (int i = 0; i < 3; ++i) {
            for (int k = 0; k < 4; ++k) {
                m.push_back(r.matrix(i, k));
            }
        }
        j["matrix_3x4"] = m;
    }
    write_json(a.out, j);
    return 0;
}

struct InvertArgs
{
    std::string ckpt, target, out, render;
    int steps = 500;
    double lr = 0.02, yaw = 0.0, pitch = 0.0;
    std::optional<std::uint64_t> seed;
};

/// Renders the field at latent w with the settings stored in an inversion record.
Image render_latent(const TrainedField& tf, const Eigen::VectorXd& w, const Eigen::VectorXd& z_raw, const Camera& cam,
                    const RenderConfig& rc)
{
    const Mesh mesh = synthesize_mesh(tf.setup.model, MorphCoeffs::from_flat(z_raw, tf.setup.model.dims));
    return render_image(neural_field(tf.params, w), cam, &mesh, rc).image;
}

nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vec(const nlohmann::json& j)
{
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

int run_invert(const InvertArgs& a, const Common& c)
{
    if (!a.seed) {
        throw UsageError("inversion samples rays randomly: pass --seed");
    }
    if (a.steps < 0) {
        throw UsageError("--steps must be non-negative");
    }
    require_file(a.target);
    const TrainedField tf = load_trained(a.ckpt);
    Image target;
    try {
        target = read_ppm(a.target);
    } catch (const std::runtime_error& e) {
        throw UsageError(a.target + ": " + e.what());
    }
    if (target.width != target.height || target.width % kReconInputSide != 0) {
        throw UsageError(a.target + ": image must be square with a side that is a multiple of 16");
    }
    const Camera cam = look_at_camera(kCameraRadius, a.yaw, a.pitch, kFovDeg, target.width, target.height);
    const ReconEstimate est = split_estimate(tf.setup.reconstructor, reconstruct(tf.setup.reconstructor, target));
    const Eigen::VectorXd z_raw = est.coeffs.flat();
    const Eigen::VectorXd z = tf.setup.normalizer.normalize(z_raw);
    const Mesh mesh = synthesize_mesh(tf.setup.model, est.coeffs);
    InversionOptions opt;
    opt.steps = a.steps;
    opt.lr = a.lr;
    opt.render = eval_render_config(tf.cfg, *a.seed, c.threads);
    const InversionResult r = invert_image(tf.params, target, cam, &mesh, map_latent(tf.params, z), opt);
    if (!std::isfinite(r.final_loss)) {
        throw TrainingDiverged("inversion produced a non-finite loss");
    }
    const nlohmann::json rec = {{"ckpt", fs::absolute(a.ckpt).string()},
                                {"w_hat", vec_json(r.w)},
                                {"z", vec_json(z)},
                                {"z_raw", vec_json(z_raw)},
                                {"camera", camera_to_json(cam)},
                                {"seed", *a.seed},
                                {"final_loss", r.final_loss},
                                {"steps_taken", static_cast<int>(r.loss_curve.size())}};
    std::string img;
    if (!a.render.empty()) {
        img = ppm_bytes(render_latent(tf, r.w, z_raw, cam, opt.render));
    }
    write_json(a.out, rec);
    if (!a.render.empty()) {
        write_text(a.render, img);
    }
    return 0;
}

struct EditArgs
{
    std::string inv, exp, out;
};

int run_edit(const EditArgs& a, const Common& c)
{
    const nlohmann::json rec = read_json(a.inv);
    TrainedField tf;
    Eigen::VectorXd w_hat, z, z_raw;
    Camera cam;
    std::uint64_t seed = 0;
    try {
        tf = load_trained(rec.at("ckpt").get<std::string>());
        w_hat = json_vec(rec.at("w_hat"));
        z = json_vec(rec.at("z"));
        z_raw = json_vec(rec.at("z_raw"));
        cam = camera_from_json(rec.at("camera"));
        seed = rec.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(a.inv + ": " + e.what());
    }
    const CoeffDims& dims = tf.setup.model.dims;
    Eigen::VectorXd raw_prime = z_raw;
    if (!a.exp.empty()) {
        const auto e = parse_list(a.exp, "--exp");
        if (static_cast<int>(e.size()) != dims.exp) {
            throw UsageError("--exp needs " + std::to_string(dims.exp) + " values");
        }
        for (int k = 0; k < dims.exp; ++k) {
            raw_prime[dims.shape + k] = e[static_cast<std::size_t>(k)];
        }
    }
    // An unchanged code is reused as stored so the edit reduces to w_hat.
    const Eigen::VectorXd z_prime = raw_prime == z_raw ? z : tf.setup.normalizer.normalize(raw_prime);
    const Eigen::VectorXd w = edit_latent(w_hat, tf.params, z, z_prime);
    write_text(a.out, ppm_bytes(render_latent(tf, w, raw_prime, cam, eval_render_config(tf.cfg, seed, c.threads))));
    return 0;
}

int run_gradcheck(std::uint64_t seed)
{
    bool ok = true;
    for (const auto& e : run_gradient_suite(seed)) {
        std::printf("%-22s probes %5d  max rel err %.3e  %s\n", e.name.c_str(), e.probes, e.max_rel_error,
                    e.pass ? "ok" : "FAIL");
        ok = ok && e.pass;
    }
    return ok ? 0 : 2;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Mesh-conditioned neural field toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    Common common;
    app.add_option("--threads", common.threads, "Worker threads")->check(CLI::PositiveNumber);

    ToygenArgs tg;
    auto* toygen = app.add_subcommand("toygen", "Write the toy morphable model");
    toygen->add_option("--seed", tg.seed, "Model seed")->required();
    toygen->add_option("--out", tg.out, "Model JSON")->required();
    toygen->add_option("--obj", tg.obj, "Also write the mean mesh as OBJ");

    RenderArgs ra;
    std::uint64_t render_seed = 0;
    auto* render = app.add_subcommand("render", "Render the conditioning mesh or a trained field");
    render->add_option("--model", ra.model, "Model JSON")->required();
    render->add_option("--coeffs", ra.coeffs, "Comma-separated raw coefficients (default zeros)");
    render->add_option("--coeffs-file", ra.coeffs_file, "JSON coefficient array; wins over --coeffs");
    render->add_option("--yaw", ra.yaw);
    render->add_option("--pitch", ra.pitch);
    render->add_option("--size", ra.size, "Image side in pixels");
    render->add_option("--out", ra.out, "Output PPM")->required();
    render->add_option("--depth", ra.depth, "Output 16-bit depth PGM");
    render->add_option("--ckpt", ra.ckpt, "Field checkpoint");
    auto* render_seed_opt = render->add_option("--seed", render_seed, "Sampling seed (needed with --ckpt)");

    FitArgs fa;
    std::uint64_t fit_seed = 0;
    int fit_steps = 0;
    auto* fit = app.add_subcommand("fit", "Train a field on the toy model");
    fit->add_option("--config", fa.config, "Training config JSON")->required();
    fit->add_option("--out", fa.out, "Checkpoint path")->required();
    fit->add_option("--log", fa.log, "Loss log CSV");
    auto* fit_seed_opt = fit->add_option("--seed", fit_seed, "Training seed");
    auto* fit_steps_opt = fit->add_option("--steps", fit_steps, "Training steps");

    AblateArgs ab;
    std::uint64_t ab_seed = 0;
    int ab_steps = 0;
    auto* ablate = app.add_subcommand("ablate", "Train and evaluate the objective ladder");
    ablate->add_option("--config", ab.fit.config, "Training config JSON")->required();
    ablate->add_option("--outdir", ab.outdir, "Output directory")->required();
    auto* ab_seed_opt = ablate->add_option("--seed", ab_seed, "Training seed");
    auto* ab_steps_opt = ablate->add_option("--steps", ab_steps, "Training steps per run");

    MetricsArgs ma;
    std::uint64_t metrics_seed = 0;
    auto* metrics = app.add_subcommand("metrics", "Evaluate a trained field");
    metrics->add_option("--ckpt", ma.ckpt, "Field checkpoint")->required();
    metrics->add_option("--model", ma.model, "Model JSON (default: the training model)");
    metrics->add_option("--suite", ma.suite, "Subset of ds,cd,ld,lc");
    metrics->add_option("--out", ma.out, "Report JSON")->required();
    metrics->add_option("--anchors", ma.anchors)->check(CLI::PositiveNumber);
    metrics->add_option("--sweeps", ma.sweeps)->check(CLI::Range(2, 1000));
    metrics->add_flag("--lc-percent", ma.lc_percent, "Print LC in percentage points");
    auto* metrics_seed_opt = metrics->add_option("--seed", metrics_seed, "Evaluation seed");

    AlignArgs al;
    auto* align = app.add_subcommand("align", "Fit the similarity between two camera systems");
    align->add_option("--problem", al.problem, "Alignment problem JSON")->required();
    align->add_option("--init", al.init, "Initial transform JSON");
    align->add_option("--steps", al.steps)->check(CLI::PositiveNumber);
    align->add_flag("--affine", al.affine, "Free 3x3 linear part instead of a similarity");
    align->add_option("--out", al.out, "Transform JSON")->required();

    InvertArgs iv;
    std::uint64_t inv_seed = 0;
    auto* invert = app.add_subcommand("invert", "Fit a latent to a target image");
    invert->add_option("--ckpt", iv.ckpt, "Field checkpoint")->required();
    invert->add_option("--target", iv.target, "Target PPM")->required();
    invert->add_option("--steps", iv.steps, "Adam steps");
    invert->add_option("--lr", iv.lr);
    invert->add_option("--yaw", iv.yaw);
    invert->add_option("--pitch", iv.pitch);
    invert->add_option("--out", iv.out, "Inversion record JSON")->required();
    invert->add_option("--render", iv.render, "Also write the inversion render");
    auto* inv_seed_opt = invert->add_option("--seed", inv_seed, "Sampling seed");

    EditArgs ed;
    auto* edit = app.add_subcommand("edit", "Re-render an inversion with new expression coefficients");
    edit->add_option("--inv", ed.inv, "Inversion record JSON")->required();
    edit->add_option("--exp", ed.exp, "Comma-separated raw expression coefficients (default: unchanged)");
    edit->add_option("--out", ed.out, "Output PPM")->required();

    std::uint64_t gc_seed = 0;
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable piece");
    gradcheck->add_option("--seed", gc_seed, "Seed")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*toygen) {
            return run_toygen(tg);
        }
        if (*render) {
            if (*render_seed_opt) {
                ra.seed = render_seed;
            }
            return run_render(ra, common);
        }
        if (*fit) {
            if (*fit_seed_opt) {
                fa.seed = fit_seed;
            }
            if (*fit_steps_opt) {
                fa.steps = fit_steps;
            }
            return run_fit(fa, common);
        }
        if (*ablate) {
            if (*ab_seed_opt) {
                ab.fit.seed = ab_seed;
            }
            if (*ab_steps_opt) {
                ab.fit.steps = ab_steps;
            }
            return run_ablate(ab, common);
        }
        if (*metrics) {
            if (*metrics_seed_opt) {
                ma.seed = metrics_seed;
            }
            return run_metrics(ma, common);
        }
        if (*align) {
            return run_align(al, common);
        }
        if (*invert) {
            if (*inv_seed_opt) {
                iv.seed = inv_seed;
            }
            return run_invert(iv, common);
        }
        if (*edit) {
            return run_edit(ed, common);
        }
        if (*gradcheck) {
            return run_gradcheck(gc_seed);
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
