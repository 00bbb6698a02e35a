// Expression editing on a briefly trained field.
//
//   demo_edit OUTDIR [STEPS]
//
// Trains a small field on the toy model, renders a conditioning code, inverts
// that render, then swaps in a new expression and writes every stage as PPM.
#include "cgof/harness.hpp"

#include <filesystem>
#include <iostream>

using namespace cgof;

int main(int argc, char** argv)
{
    if (argc < 2) {
        std::cerr << "usage: demo_edit OUTDIR [STEPS]\n";
        return 1;
    }
    const std::filesystem::path dir = argv[1];
    std::filesystem::create_directories(dir);

    TrainConfig cfg;
    cfg.n_steps = argc > 2 ? std::atoi(argv[2]) : 200;
    cfg.margin.total_steps = cfg.n_steps;
    cfg.image_size = 32;
    cfg.batch_rays = 128;
    cfg.n_vol = cfg.n_surf = cfg.n_fine = 24;
    cfg.flags.density_reg = false;
    cfg.flags.warp = false;
    const Setup s = make_setup(cfg);
    const FieldParams params = train(s, cfg, nullptr, [&](const TrainLogRow& r) {
        if (r.step % 50 == 0) {
            std::cout << "step " << r.step << " photometric " << r.terms.photometric << '\n';
        }
    });

    const int d = s.model.dims.total();
    Eigen::VectorXd z = Eigen::VectorXd::Zero(d);
    z[0] = 0.8;
    const MorphCoeffs c = MorphCoeffs::from_flat(s.normalizer.denormalize(z), s.model.dims);
    const Camera cam = look_at_camera(kCameraRadius, 0.25, 0.05, kFovDeg, 32, 32);
    RenderConfig rc = render_config_of(cfg, cfg.margin.end_fraction * (kFar - kNear));
    rc.seed = 3;
    const Mesh mesh = synthesize_mesh(s.model, c);
    const Image target = render_image(neural_field(params, map_latent(params, z)), cam, &mesh, rc).image;
    write_ppm((dir / "target.ppm").string(), target);
    write_ppm((dir / "mesh_target.ppm").string(), make_target_image(s.model, c, cam));

    InversionOptions opt;
    opt.steps = 200;
    opt.render = rc;
    const InversionResult inv = invert_image(params, target, cam, &mesh, map_latent(params, Eigen::VectorXd::Zero(d)), opt);
    std::cout << "inversion L1 " << inv.final_loss << " after " << inv.loss_curve.size() << " steps\n";
    write_ppm((dir / "inverted.ppm").string(), render_image(neural_field(params, inv.w), cam, &mesh, rc).image);

    for (int k = 0; k < 2; ++k) {
        MorphCoeffs c2 = c;
        c2.z_exp.setZero();
        c2.z_exp[k] = 2.5;
        const Eigen::VectorXd z2 = s.normalizer.normalize(c2.flat());
        const Eigen::VectorXd w2 = edit_latent(inv.w, params, z, z2);
        const Mesh m2 = synthesize_mesh(s.model, c2);
        const std::string name = "edit_exp" + std::to_string(k) + ".ppm";
        write_ppm((dir / name).string(), render_image(neural_field(params, w2), cam, &m2, rc).image);
        write_ppm((dir / ("mesh_" + name)).string(), make_target_image(s.model, c2, cam));
    }
    std::cout << "wrote " << dir.string() << '\n';
    return 0;
}
