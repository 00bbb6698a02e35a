#pragma once

#include "cgof/autodiff.hpp"
#include "cgof/geom.hpp"
#include "cgof/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgof {

using ad::MatX;
using ad::Tape;
using ad::Var;

struct FieldConfig
{
    int coeff_dim = 8;
    int w_dim = 16;
    int map_hidden = 32;
    int width = 64;
    int depth = 4;
    int octaves = 6;
    double pe_base = 1.0; // angular frequency of the lowest octave
    bool use_view_dirs = false;
    double init_density = 0.5; // mean density over the sampling volume at initialization

    int encoded_dim() const { return 3 * (1 + 2 * octaves); }
    int trunk_input_dim() const { return encoded_dim() + w_dim; }
};

inline nlohmann::json field_config_to_json(const FieldConfig& c)
{
    return {{"coeff_dim", c.coeff_dim}, {"w_dim", c.w_dim},     {"map_hidden", c.map_hidden},
            {"width", c.width},         {"depth", c.depth},     {"octaves", c.octaves},
            {"pe_base", c.pe_base},     {"use_view_dirs", c.use_view_dirs}, {"init_density", c.init_density}};
}

inline FieldConfig field_config_from_json(const nlohmann::json& j)
{
    FieldConfig c;
    c.coeff_dim = j.value("coeff_dim", c.coeff_dim);
    c.w_dim = j.value("w_dim", c.w_dim);
    c.map_hidden = j.value("map_hidden", c.map_hidden);
    c.width = j.value("width", c.width);
    c.depth = j.value("depth", c.depth);
    c.octaves = j.value("octaves", c.octaves);
    c.pe_base = j.value("pe_base", c.pe_base);
    c.use_view_dirs = j.value("use_view_dirs", c.use_view_dirs);
    c.init_density = j.value("init_density", c.init_density);
    if (c.coeff_dim < 1 || c.w_dim < 1 || c.map_hidden < 1 || c.width < 1 || c.depth < 1 || c.octaves < 0) {
        throw std::invalid_argument("field config: dimensions must be positive");
    }
    return c;
}

struct NamedTensor
{
    std::string name;
    MatX value;
};

/// Mapping network, trunk and the two output heads as an ordered tensor list.
struct FieldParams
{
    FieldConfig config;
    std::vector<NamedTensor> tensors;

    std::size_t size() const { return tensors.size(); }

    const MatX& get(const std::string& name) const
    {
        for (const auto& t : tensors) {
            if (t.name == name) {
                return t.value;
            }
        }
        throw std::out_of_range("no field tensor named " + name);
    }
    MatX& get(const std::string& name) { return const_cast<MatX&>(std::as_const(*this).get(name)); }

    Eigen::Index scalar_count() const
    {
        Eigen::Index n = 0;
        for (const auto& t : tensors) {
            n += t.value.size();
        }
        return n;
    }
};

/// Tensors of a FieldParams placed on a tape, in the same order.
struct FieldVars
{
    const FieldConfig* config = nullptr;
    std::vector<Var> vars;

    Var at(std::size_t i) const { return vars[i]; }
};

namespace field_layout {

// Index layout of FieldParams::tensors.
inline constexpr std::size_t kMapW0 = 0, kMapB0 = 1, kMapW1 = 2, kMapB1 = 3, kTrunk = 4;

inline std::size_t sigma_w(const FieldConfig& c) { return kTrunk + 2 * c.depth; }
inline std::size_t color_w(const FieldConfig& c) { return sigma_w(c) + 2; }

} // namespace field_layout

inline FieldVars bind(Tape& tape, const FieldParams& p, bool requires_grad = true)
{
    FieldVars fv{&p.config, {}};
    fv.vars.reserve(p.size());
    for (const auto& t : p.tensors) {
        fv.vars.push_back(requires_grad ? tape.leaf(t.value) : tape.constant(t.value));
    }
    return fv;
}

/// Mapping network: coeff_dim -> map_hidden (SiLU) -> w_dim (linear).
inline Var map_latent(const FieldVars& fv, Var z)
{
    using namespace field_layout;
    const Var h = ad::silu(ad::affine(fv.at(kMapW0), z, fv.at(kMapB0)));
    return ad::affine(fv.at(kMapW1), h, fv.at(kMapB1));
}

struct FieldOutput
{
    Var sigma; // 1 x B
    Var color; // 3 x B
};

/// Batched field query: x (3 x B), w (w_dim x 1), dirs (3 x B) used only with
/// use_view_dirs; otherwise the constant direction (0, 0, -1) is fed.
inline FieldOutput eval_field(const FieldVars& fv, Var w, Var x, const MatX* dirs = nullptr)
{
    using namespace field_layout;
    const FieldConfig& c = *fv.config;
    Tape& tape = *x.tape;
    const Eigen::Index n = x.cols();
    const Var enc = ad::positional_encoding(x, c.octaves, c.pe_base);
    Var h = ad::concat_rows({enc, ad::broadcast_cols(w, n)});
    for (int l = 0; l < c.depth; ++l) {
        h = ad::silu(ad::affine(fv.at(kTrunk + 2 * l), h, fv.at(kTrunk + 2 * l + 1)));
    }
    const Var sigma = ad::softplus(ad::affine(fv.at(sigma_w(c)), h, fv.at(sigma_w(c) + 1)));
    MatX d;
    if (c.use_view_dirs && dirs) {
        if (dirs->rows() != 3 || dirs->cols() != n) {
            throw std::invalid_argument("eval_field: direction batch shape mismatch");
        }
        d = *dirs;
    } else {
        d = Eigen::Vector3d(0, 0, -1).replicate(1, n);
    }
    const Var hc = ad::concat_rows({h, tape.constant(std::move(d))});
    const Var color = ad::sigmoid(ad::affine(fv.at(color_w(c)), hc, fv.at(color_w(c) + 1)));
    return {sigma, color};
}

inline Eigen::VectorXd map_latent(const FieldParams& p, const Eigen::VectorXd& z)
{
    if (z.size() != p.config.coeff_dim) {
        throw std::invalid_argument("map_latent: coefficient vector has " + std::to_string(z.size()) +
                                    " entries, expected " + std::to_string(p.config.coeff_dim));
    }
    Tape tape;
    const FieldVars fv = bind(tape, p, false);
    return map_latent(fv, tape.constant(z)).value().col(0);
}

struct FieldSample
{
    double sigma = 0.0;
    Vec3 color = Vec3::Zero();
};

inline FieldSample eval_field(const FieldParams& p, const Eigen::VectorXd& w, const Vec3& x, const Vec3& d)
{
    Tape tape;
    const FieldVars fv = bind(tape, p, false);
    const MatX dirs = d;
    const FieldOutput out = eval_field(fv, tape.constant(w), tape.constant(x), &dirs);
    return {out.sigma.value()(0, 0), out.color.value().col(0)};
}

/// Densities and colors for a batch of points, without recording gradients.
inline std::pair<Eigen::RowVectorXd, MatX> eval_field_batch(const FieldParams& p, const Eigen::VectorXd& w,
                                                            const MatX& x)
{
    Tape tape;
    const FieldVars fv = bind(tape, p, false);
    const FieldOutput out = eval_field(fv, tape.constant(w), tape.constant(x));
    return {out.sigma.value().row(0), out.color.value()};
}

inline FieldParams init_params(std::uint64_t seed, const FieldConfig& config = {})
{
    FieldParams p;
    p.config = config;
    Rng rng = keyed_stream(seed, {0xf1e1d});
    auto layer = [&](const std::string& name, int out, int in) {
        const double a = std::sqrt(6.0 / in);
        MatX w(out, in);
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            w.data()[i] = uniform(rng, -a, a);
        }
        p.tensors.push_back({name + ".w", std::move(w)});
        p.tensors.push_back({name + ".b", MatX::Zero(out, 1)});
    };
    layer("map0", config.map_hidden, config.coeff_dim);
    layer("map1", config.w_dim, config.map_hidden);
    int in = config.trunk_input_dim();
    for (int l = 0; l < config.depth; ++l) {
        layer("trunk" + std::to_string(l), config.width, in);
        in = config.width;
    }
    layer("sigma", 1, config.width);
    layer("color", 3, config.width + 3);

    // Calibrate the density bias to the configured mean initial density over
    // the sampling volume.
    Rng probe = keyed_stream(seed, {0xca1b});
    MatX x(3, 2048);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        x.data()[i] = uniform(probe, -0.5, 0.5);
    }
    const Eigen::VectorXd w = map_latent(p, Eigen::VectorXd::Zero(config.coeff_dim));
    MatX& bias = p.get("sigma.b");
    double lo = -20.0, hi = 20.0;
    for (int it = 0; it < 60; ++it) {
        bias(0, 0) = 0.5 * (lo + hi);
        const double mean_sigma = eval_field_batch(p, w, x).first.mean();
        (mean_sigma > config.init_density ? hi : lo) = bias(0, 0);
    }
    bias(0, 0) = 0.5 * (lo + hi);
    return p;
}

/// Flattened parameter vector (tensor order, column-major within tensors).
inline Eigen::VectorXd flatten(const FieldParams& p)
{
    Eigen::VectorXd out(p.scalar_count());
    Eigen::Index k = 0;
    for (const auto& t : p.tensors) {
        out.segment(k, t.value.size()) = Eigen::Map<const Eigen::VectorXd>(t.value.data(), t.value.size());
        k += t.value.size();
    }
    return out;
}

inline void unflatten(FieldParams& p, const Eigen::VectorXd& flat)
{
    if (flat.size() != p.scalar_count()) {
        throw std::invalid_argument("unflatten: size mismatch");
    }
    Eigen::Index k = 0;
    for (auto& t : p.tensors) {
        Eigen::Map<Eigen::VectorXd>(t.value.data(), t.value.size()) = flat.segment(k, t.value.size());
        k += t.value.size();
    }
}

inline std::vector<MatX> collect_grads(const Tape& tape, const FieldVars& fv)
{
    std::vector<MatX> g;
    g.reserve(fv.vars.size());
    for (const Var& v : fv.vars) {
        g.push_back(tape.grad(v));
    }
    return g;
}

// ---- checkpoint -------------------------------------------------------------

inline constexpr char kCheckpointMagic[9] = "CGOFKIT1";

namespace detail {

inline void put_u32_le(std::ostream& out, std::uint32_t v)
{
    const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                       static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

inline std::uint32_t get_u32_le(const unsigned char* b)
{
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace detail

/// Tensors are stored row-major as little-endian f32.
inline void save_checkpoint(std::ostream& out, const FieldParams& p)
{
    nlohmann::json header;
    header["config"] = field_config_to_json(p.config);
    header["tensors"] = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& t : p.tensors) {
        header["tensors"].push_back({{"name", t.name},
                                     {"shape", {t.value.rows(), t.value.cols()}},
                                     {"dtype", "f32"},
                                     {"offset", offset}});
        offset += static_cast<std::size_t>(t.value.size()) * 4;
    }
    const std::string text = header.dump();
    out.write(kCheckpointMagic, 8);
    detail::put_u32_le(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : p.tensors) {
        for (Eigen::Index r = 0; r < t.value.rows(); ++r) {
            for (Eigen::Index c = 0; c < t.value.cols(); ++c) {
                const float f = static_cast<float>(t.value(r, c));
                std::uint32_t bits;
                std::memcpy(&bits, &f, 4);
                detail::put_u32_le(out, bits);
            }
        }
    }
}

inline FieldParams load_checkpoint(std::istream& in)
{
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw std::runtime_error("not a CGOFKIT1 checkpoint");
    }
    unsigned char len_bytes[4];
    in.read(reinterpret_cast<char*>(len_bytes), 4);
    std::string text(detail::get_u32_le(len_bytes), '\0');
    in.read(text.data(), static_cast<std::streamsize>(text.size()));
    if (!in) {
        throw std::runtime_error("truncated checkpoint header");
    }
    const nlohmann::json header = nlohmann::json::parse(text);
    FieldParams p;
    p.config = field_config_from_json(header.at("config"));
    const std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    for (const auto& t : header.at("tensors")) {
        if (t.at("dtype") != "f32") {
            throw std::runtime_error("unsupported checkpoint dtype");
        }
        const Eigen::Index rows = t.at("shape").at(0), cols = t.at("shape").at(1);
        const std::size_t offset = t.at("offset");
        if (offset + static_cast<std::size_t>(rows * cols) * 4 > payload.size()) {
            throw std::runtime_error("checkpoint payload is truncated");
        }
        MatX m(rows, cols);
        const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data()) + offset;
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) {
                const std::uint32_t bits = detail::get_u32_le(bytes + 4 * (r * cols + c));
                float f;
                std::memcpy(&f, &bits, 4);
                m(r, c) = f;
            }
        }
        p.tensors.push_back({t.at("name").get<std::string>(), std::move(m)});
    }
    return p;
}

inline void save_checkpoint(const std::string& path, const FieldParams& p)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    save_checkpoint(out, p);
}

inline FieldParams load_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path);
    }
    return load_checkpoint(in);
}

/// Rounds every parameter to the nearest f32, the precision checkpoints keep.
inline void round_to_f32(FieldParams& p)
{
    for (auto& t : p.tensors) {
        t.value = t.value.cast<float>().cast<double>();
    }
}

} // namespace cgof
