#include "cgof/image.hpp"
#include "cgof/meshops.hpp"
#include "cgof/morphable.hpp"
#include "cgof/volren.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace cgof;

TEST(Ppm, HeaderAndBytes)
{
    Image img(2, 1);
    img.data = {0.0, 1.0, 0.5, 2.0, -1.0, 0.2};
    std::ostringstream out;
    write_ppm(out, img);
    const std::string s = out.str();
    EXPECT_EQ(s.substr(0, 11), "P6\n2 1\n255\n");
    const std::string px = s.substr(11);
    ASSERT_EQ(px.size(), 6u);
    EXPECT_EQ(static_cast<unsigned char>(px[0]), 0);
    EXPECT_EQ(static_cast<unsigned char>(px[1]), 255);
    EXPECT_EQ(static_cast<unsigned char>(px[2]), 128);
    EXPECT_EQ(static_cast<unsigned char>(px[3]), 255);
    EXPECT_EQ(static_cast<unsigned char>(px[4]), 0);
    EXPECT_EQ(static_cast<unsigned char>(px[5]), 51);
}

TEST(Ppm, ByteRoundingIsHalfUp)
{
    EXPECT_EQ(to_byte(0.5 / 255.0), 1);
    EXPECT_EQ(to_byte(0.49 / 255.0), 0);
    EXPECT_EQ(to_byte(254.5 / 255.0), 255);
}

TEST(Ppm, ReadBackQuantized)
{
    Image img(3, 2);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        img.data[i] = static_cast<double>(i * 37 % 256) / 255.0;
    }
    std::stringstream s;
    write_ppm(s, img);
    const Image back = read_ppm(s);
    EXPECT_EQ(back.width, 3);
    EXPECT_EQ(back.height, 2);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        EXPECT_NEAR(back.data[i], img.data[i], 1e-12);
    }
    std::stringstream bad("P3\n1 1\n255\n0 0 0");
    EXPECT_THROW(read_ppm(bad), std::runtime_error);
}

TEST(Pgm16, RoundTripBigEndian)
{
    const std::vector<std::uint16_t> v = {0, 1, 256, 65535};
    std::stringstream s;
    write_pgm16(s, 2, 2, v);
    const std::string bytes = s.str();
    EXPECT_EQ(bytes.substr(0, 13), "P5\n2 2\n65535\n");
    ASSERT_EQ(bytes.size(), 21u);
    EXPECT_EQ(bytes[15], '\x00');
    EXPECT_EQ(bytes[16], '\x01');
    EXPECT_EQ(bytes[17], '\x01');
    EXPECT_EQ(bytes[18], '\x00');
    int w = 0, h = 0;
    EXPECT_EQ(read_pgm16(s, w, h), v);
    EXPECT_EQ(w, 2);
    EXPECT_EQ(h, 2);
}

TEST(Image, GrayscaleDownsample)
{
    Image img(4, 2, 0.0);
    for (int c = 0; c < 3; ++c) {
        img.at(0, 0, c) = 1.0;
        img.at(3, 1, c) = 0.5;
    }
    const auto g = grayscale_downsample(img, 2, 1);
    ASSERT_EQ(g.size(), 2u);
    EXPECT_NEAR(g[0], 0.25, 1e-15);
    EXPECT_NEAR(g[1], 0.125, 1e-15);
    EXPECT_THROW(grayscale_downsample(img, 3, 1), std::invalid_argument);
}

TEST(Outputs, ByteStableAcrossRunsAndThreads)
{
    const MorphableModel m = make_toy_model();
    const Mesh mesh = m.mean_mesh();
    const Camera cam = look_at_camera(kCameraRadius, 0.3, 0.1, kFovDeg, 24, 24);
    const FieldParams p = init_params(5);
    const Eigen::VectorXd w = map_latent(p, Eigen::VectorXd::Zero(8));
    auto outputs = [&](int threads) {
        RenderConfig cfg;
        cfg.n_vol = cfg.n_surf = cfg.n_fine = 12;
        cfg.threads = threads;
        std::ostringstream ppm, pgm, obj;
        write_ppm(ppm, render_image(neural_field(p, w), cam, &mesh, cfg).image);
        write_depth_pgm(pgm, ray_mesh_depth(mesh, cam, threads));
        write_obj(obj, mesh);
        return ppm.str() + pgm.str() + obj.str();
    };
    const std::string a = outputs(1);
    EXPECT_EQ(outputs(1), a);
    EXPECT_EQ(outputs(4), a);
}
