#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgof {

/// Linear RGB image, row-major, channels interleaved.
struct Image
{
    int width = 0;
    int height = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, double fill = 0.0) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

    double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

    bool same_size(const Image& other) const { return width == other.width && height == other.height; }
};

/// Linear value in [0,1] to a byte, rounding half up.
inline std::uint8_t to_byte(double v)
{
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

inline void write_ppm(std::ostream& out, const Image& img)
{
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<char> bytes(img.data.size());
    std::transform(img.data.begin(), img.data.end(), bytes.begin(),
                   [](double v) { return static_cast<char>(to_byte(v)); });
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline void write_ppm(const std::string& path, const Image& img)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    write_ppm(out, img);
}

namespace detail {

inline int read_pnm_int(std::istream& in)
{
    int c = in.peek();
    while (in && (std::isspace(c) || c == '#')) {
        if (c == '#') {
            std::string comment;
            std::getline(in, comment);
        } else {
            in.get();
        }
        c = in.peek();
    }
    int value = -1;
    in >> value;
    if (!in || value < 0) {
        throw std::runtime_error("malformed PNM header");
    }
    return value;
}

} // namespace detail

inline Image read_ppm(std::istream& in)
{
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P6") {
        throw std::runtime_error("not a binary PPM (P6) stream");
    }
    const int w = detail::read_pnm_int(in);
    const int h = detail::read_pnm_int(in);
    const int maxval = detail::read_pnm_int(in);
    if (maxval != 255) {
        throw std::runtime_error("only maxval 255 PPM is supported");
    }
    in.get(); // single whitespace after maxval
    Image img(w, h);
    std::vector<unsigned char> bytes(img.data.size());
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
        throw std::runtime_error("truncated PPM payload");
    }
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        img.data[i] = bytes[i] / 255.0;
    }
    return img;
}

inline Image read_ppm(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path);
    }
    return read_ppm(in);
}

/// 16-bit binary PGM (P5), samples big-endian.
inline void write_pgm16(std::ostream& out, int width, int height, const std::vector<std::uint16_t>& samples)
{
    out << "P5\n" << width << " " << height << "\n65535\n";
    std::vector<char> bytes(samples.size() * 2);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        bytes[2 * i] = static_cast<char>(samples[i] >> 8);
        bytes[2 * i + 1] = static_cast<char>(samples[i] & 0xff);
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint16_t> read_pgm16(std::istream& in, int& width, int& height)
{
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P5") {
        throw std::runtime_error("not a binary PGM (P5) stream");
    }
    width = detail::read_pnm_int(in);
    height = detail::read_pnm_int(in);
    if (detail::read_pnm_int(in) != 65535) {
        throw std::runtime_error("expected a 16-bit PGM");
    }
    in.get();
    std::vector<unsigned char> bytes(static_cast<std::size_t>(width) * height * 2);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    std::vector<std::uint16_t> samples(bytes.size() / 2);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        samples[i] = static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]);
    }
    return samples;
}

/// Mean-of-channels grayscale, box-averaged down to (out_w, out_h). The
/// source size must be an integer multiple of the target size.
inline std::vector<double> grayscale_downsample(const Image& img, int out_w, int out_h)
{
    if (img.width % out_w != 0 || img.height % out_h != 0) {
        throw std::invalid_argument("grayscale_downsample: size " + std::to_string(img.width) + "x" +
                                    std::to_string(img.height) + " is not a multiple of " + std::to_string(out_w) +
                                    "x" + std::to_string(out_h));
    }
    const int fx = img.width / out_w, fy = img.height / out_h;
    const double norm = 1.0 / (3.0 * fx * fy);
    std::vector<double> out(static_cast<std::size_t>(out_w) * out_h, 0.0);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            out[(y / fy) * out_w + x / fx] += (img.at(x, y, 0) + img.at(x, y, 1) + img.at(x, y, 2)) * norm;
        }
    }
    return out;
}

} // namespace cgof
