#pragma once

#include "cgof/geom.hpp"
#include "cgof/image.hpp"
#include "cgof/mesh.hpp"
#include "cgof/parallel.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <ostream>
#include <stdexcept>
#include <vector>

namespace cgof {

/// Per-pixel nearest mesh intersection for a camera (pixel centers).
struct HitMap
{
    int width = 0;
    int height = 0;
    std::vector<TriangleHit> hits;

    const TriangleHit& at(int x, int y) const { return hits[static_cast<std::size_t>(y) * width + x]; }
};

struct DepthMap
{
    int width = 0;
    int height = 0;
    double t_near = kNear;
    double t_far = kFar;
    std::vector<double> depth; // t_m along each pixel ray; NaN where missed
    std::vector<bool> hit_mask;

    bool hit(int x, int y) const { return hit_mask[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return depth[static_cast<std::size_t>(y) * width + x]; }
};

struct DisplacementMap
{
    int width = 0;
    int height = 0;
    std::vector<Vec3> disp;
    std::vector<bool> hit_mask;

    bool hit(int x, int y) const { return hit_mask[static_cast<std::size_t>(y) * width + x]; }
    const Vec3& at(int x, int y) const { return disp[static_cast<std::size_t>(y) * width + x]; }
};

inline HitMap cast_pixel_rays(const Mesh& mesh, const Camera& cam, int threads = 1)
{
    HitMap out{cam.width, cam.height, std::vector<TriangleHit>(static_cast<std::size_t>(cam.width) * cam.height)};
    if (mesh.faces.empty()) {
        return out;
    }
    const MeshBvh bvh(mesh);
    parallel_for(static_cast<std::size_t>(cam.height), threads, [&](std::size_t y) {
        for (int x = 0; x < cam.width; ++x) {
            const Ray ray = ray_through_pixel(cam, x + 0.5, y + 0.5);
            out.hits[y * cam.width + x] = bvh.intersect(ray, cam.t_near, cam.t_far);
        }
    });
    return out;
}

inline DepthMap depth_from_hits(const HitMap& hits, const Camera& cam)
{
    DepthMap out{hits.width, hits.height, cam.t_near, cam.t_far, {}, {}};
    out.depth.resize(hits.hits.size());
    out.hit_mask.resize(hits.hits.size());
    for (std::size_t i = 0; i < hits.hits.size(); ++i) {
        out.hit_mask[i] = hits.hits[i].valid();
        out.depth[i] = out.hit_mask[i] ? hits.hits[i].t : std::nan("");
    }
    return out;
}

inline DepthMap ray_mesh_depth(const Mesh& mesh, const Camera& cam, int threads = 1)
{
    return depth_from_hits(cast_pixel_rays(mesh, cam, threads), cam);
}

/// Barycentric interpolation of per-vertex values at a hit.
template <typename T>
T interpolate_at(const Mesh& mesh, const TriangleHit& hit, const std::vector<T>& values)
{
    const auto& [a, b, c] = mesh.faces[hit.face];
    return hit.b0() * values[a] + hit.b1 * values[b] + hit.b2 * values[c];
}

/// Renders per-vertex displacements of mesh_m into image space: each hit pixel
/// receives the displacement interpolated at its intersection point.
inline DisplacementMap displacement_map(const Mesh& mesh_m, const std::vector<Vec3>& delta_vertices,
                                        const Camera& cam, int threads = 1)
{
    if (delta_vertices.size() != mesh_m.vertices.size()) {
        throw std::invalid_argument("displacement_map: " + std::to_string(delta_vertices.size()) +
                                    " displacements for " + std::to_string(mesh_m.vertices.size()) + " vertices");
    }
    const HitMap hits = cast_pixel_rays(mesh_m, cam, threads);
    DisplacementMap out{hits.width, hits.height, std::vector<Vec3>(hits.hits.size(), Vec3::Zero()),
                        std::vector<bool>(hits.hits.size(), false)};
    for (std::size_t i = 0; i < hits.hits.size(); ++i) {
        if (hits.hits[i].valid()) {
            out.hit_mask[i] = true;
            out.disp[i] = interpolate_at(mesh_m, hits.hits[i], delta_vertices);
        }
    }
    return out;
}

inline std::vector<Vec3> vertex_displacements(const Mesh& from, const Mesh& to)
{
    if (from.vertices.size() != to.vertices.size()) {
        throw std::invalid_argument("vertex_displacements: meshes differ in vertex count");
    }
    std::vector<Vec3> out(from.vertices.size());
    for (std::size_t v = 0; v < out.size(); ++v) {
        out[v] = to.vertices[v] - from.vertices[v];
    }
    return out;
}

/// Symmetric chamfer distance: half the sum of the two mean nearest-neighbour
/// Euclidean distances (unsquared).
inline double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b)
{
    if (a.empty() || b.empty()) {
        throw std::invalid_argument("chamfer: point sets must be non-empty");
    }
    auto directed = [](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
        double sum = 0.0;
        for (const auto& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : to) {
                best = std::min(best, (p - q).squaredNorm());
            }
            sum += std::sqrt(best);
        }
        return sum / static_cast<double>(from.size());
    };
    return 0.5 * (directed(a, b) + directed(b, a));
}

/// Pixel coordinates of every landmark; entries behind the camera are empty.
inline std::vector<std::optional<Vec2>> project_landmarks(const LandmarkSet& lms, const Camera& cam)
{
    std::vector<std::optional<Vec2>> out;
    out.reserve(lms.positions.size());
    for (const auto& p : lms.positions) {
        if (auto proj = project(cam, p)) {
            out.emplace_back(Vec2(proj->u, proj->v));
        } else {
            out.emplace_back(std::nullopt);
        }
    }
    return out;
}

/// Linear [t_near, t_far] -> [0, 65535]; misses map to 0.
inline std::vector<std::uint16_t> depth_to_u16(const DepthMap& dm)
{
    std::vector<std::uint16_t> out(dm.depth.size(), 0);
    for (std::size_t i = 0; i < dm.depth.size(); ++i) {
        if (dm.hit_mask[i]) {
            const double s = std::clamp((dm.depth[i] - dm.t_near) / (dm.t_far - dm.t_near), 0.0, 1.0);
            out[i] = static_cast<std::uint16_t>(std::floor(s * 65535.0 + 0.5));
        }
    }
    return out;
}

inline void write_depth_pgm(std::ostream& out, const DepthMap& dm)
{
    write_pgm16(out, dm.width, dm.height, depth_to_u16(dm));
}

/// Raw little-endian f32 triplets, row-major; unmasked pixels are zero.
inline void write_displacement_raw(std::ostream& out, const DisplacementMap& dm)
{
    std::vector<char> bytes;
    bytes.reserve(dm.disp.size() * 12);
    for (std::size_t i = 0; i < dm.disp.size(); ++i) {
        for (int c = 0; c < 3; ++c) {
            const float f = dm.hit_mask[i] ? static_cast<float>(dm.disp[i][c]) : 0.0f;
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            for (int k = 0; k < 4; ++k) {
                bytes.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
            }
        }
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline nlohmann::json displacement_sidecar(const DisplacementMap& dm, const std::string& raw_name)
{
    std::vector<int> mask(dm.hit_mask.begin(), dm.hit_mask.end());
    return {{"file", raw_name},  {"dtype", "f32"},   {"endianness", "little"},
            {"layout", "HWC"},   {"shape", {dm.height, dm.width, 3}},
            {"hit_mask", mask}};
}

} // namespace cgof
