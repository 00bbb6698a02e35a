#pragma once

#include "cgof/geom.hpp"
#include "cgof/rng.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgof {

using Face = std::array<int, 3>;

struct Mesh
{
    std::vector<Vec3> vertices;
    std::vector<Face> faces;

    /// Throws when an index is out of range or a face has (near) zero area.
    void validate(double min_area = 1e-12) const
    {
        const int n = static_cast<int>(vertices.size());
        for (std::size_t f = 0; f < faces.size(); ++f) {
            for (int idx : faces[f]) {
                if (idx < 0 || idx >= n) {
                    throw std::invalid_argument("mesh face " + std::to_string(f) + " references vertex " +
                                                std::to_string(idx) + " of " + std::to_string(n));
                }
            }
            if (face_area(f) <= min_area) {
                throw std::invalid_argument("mesh face " + std::to_string(f) + " is degenerate");
            }
        }
    }

    double face_area(std::size_t f) const
    {
        const auto& [a, b, c] = faces[f];
        return 0.5 * (vertices[b] - vertices[a]).cross(vertices[c] - vertices[a]).norm();
    }

    Mesh translated(const Vec3& t) const
    {
        Mesh out = *this;
        for (auto& v : out.vertices) {
            v += t;
        }
        return out;
    }
};

/// 68 landmark positions; entries flagged in contour_mask (numbers 1-17 of the
/// usual 68-point layout) are the jawline points.
struct LandmarkSet
{
    static constexpr int kCount = 68;
    static constexpr int kContour = 17;

    std::vector<Vec3> positions;
    std::vector<bool> contour_mask;
};

/// Area-weighted vertex normals.
inline std::vector<Vec3> vertex_normals(const Mesh& mesh)
{
    std::vector<Vec3> normals(mesh.vertices.size(), Vec3::Zero());
    for (const auto& [a, b, c] : mesh.faces) {
        const Vec3 n = (mesh.vertices[b] - mesh.vertices[a]).cross(mesh.vertices[c] - mesh.vertices[a]);
        normals[a] += n;
        normals[b] += n;
        normals[c] += n;
    }
    for (auto& n : normals) {
        const double len = n.norm();
        if (len > 0.0) {
            n /= len;
        }
    }
    return normals;
}

struct TriangleHit
{
    double t = std::numeric_limits<double>::infinity();
    int face = -1;
    double b1 = 0.0; // barycentric weight of the face's second vertex
    double b2 = 0.0; // barycentric weight of the face's third vertex

    bool valid() const { return face >= 0; }
    double b0() const { return 1.0 - b1 - b2; }
};

/// Möller–Trumbore; returns the ray parameter in [t_min, t_max] on a hit.
inline std::optional<TriangleHit> intersect_triangle(const Ray& ray, const Vec3& v0, const Vec3& v1, const Vec3& v2,
                                                     double t_min, double t_max)
{
    const Vec3 e1 = v1 - v0;
    const Vec3 e2 = v2 - v0;
    const Vec3 p = ray.direction.cross(e2);
    const double det = e1.dot(p);
    if (std::abs(det) < 1e-15) {
        return std::nullopt;
    }
    const double inv = 1.0 / det;
    const Vec3 s = ray.origin - v0;
    const double u = s.dot(p) * inv;
    if (u < 0.0 || u > 1.0) {
        return std::nullopt;
    }
    const Vec3 q = s.cross(e1);
    const double v = ray.direction.dot(q) * inv;
    if (v < 0.0 || u + v > 1.0) {
        return std::nullopt;
    }
    const double t = e2.dot(q) * inv;
    if (t < t_min || t > t_max) {
        return std::nullopt;
    }
    return TriangleHit{t, -1, u, v};
}

inline bool closer(const TriangleHit& candidate, const TriangleHit& best)
{
    return candidate.t < best.t || (candidate.t == best.t && candidate.face < best.face);
}

/// Nearest hit over every face; ties go to the lowest face index.
inline TriangleHit intersect_brute_force(const Mesh& mesh, const Ray& ray, double t_min, double t_max)
{
    TriangleHit best;
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
        const auto& [a, b, c] = mesh.faces[f];
        if (auto hit = intersect_triangle(ray, mesh.vertices[a], mesh.vertices[b], mesh.vertices[c], t_min, t_max)) {
            hit->face = static_cast<int>(f);
            if (closer(*hit, best)) {
                best = *hit;
            }
        }
    }
    return best;
}

/// Closest point on triangle abc to p (Ericson, Real-Time Collision Detection 5.1.5).
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c)
{
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) {
        return a;
    }
    const Vec3 bp = p - b;
    const double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3) {
        return b;
    }
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
        return a + (d1 / (d1 - d3)) * ab;
    }
    const Vec3 cp = p - c;
    const double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6) {
        return c;
    }
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
        return a + (d2 / (d2 - d6)) * ac;
    }
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
        return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
    }
    const double denom = 1.0 / (va + vb + vc);
    return a + ab * (vb * denom) + ac * (vc * denom);
}

/// Bounding-volume hierarchy over a mesh snapshot. Hit selection matches
/// intersect_brute_force exactly: the same per-triangle arithmetic and the
/// same (t, face index) ordering.
class MeshBvh
{
public:
    explicit MeshBvh(const Mesh& mesh) : mesh_(&mesh)
    {
        const std::size_t n = mesh.faces.size();
        order_.resize(n);
        std::iota(order_.begin(), order_.end(), 0);
        centroids_.resize(n);
        for (std::size_t f = 0; f < n; ++f) {
            const auto& [a, b, c] = mesh.faces[f];
            centroids_[f] = (mesh.vertices[a] + mesh.vertices[b] + mesh.vertices[c]) / 3.0;
        }
        if (n > 0) {
            nodes_.reserve(2 * n);
            build(0, n);
        }
    }

    TriangleHit intersect(const Ray& ray, double t_min, double t_max) const
    {
        TriangleHit best;
        if (nodes_.empty()) {
            return best;
        }
        const Vec3 inv_dir = ray.direction.cwiseInverse();
        int stack[128];
        int top = 0;
        stack[top++] = 0;
        while (top > 0) {
            const Node& node = nodes_[stack[--top]];
            if (!box_hit(node, ray, inv_dir, t_min, std::min(t_max, best.t))) {
                continue;
            }
            if (node.count > 0) {
                for (int i = node.first; i < node.first + node.count; ++i) {
                    const int f = order_[i];
                    const auto& [a, b, c] = mesh_->faces[f];
                    auto hit = intersect_triangle(ray, mesh_->vertices[a], mesh_->vertices[b], mesh_->vertices[c],
                                                  t_min, t_max);
                    if (hit) {
                        hit->face = f;
                        if (closer(*hit, best)) {
                            best = *hit;
                        }
                    }
                }
            } else {
                stack[top++] = node.left;
                stack[top++] = node.right;
            }
        }
        return best;
    }

    struct ClosestPoint
    {
        Vec3 point = Vec3::Zero();
        double distance = std::numeric_limits<double>::infinity();
        int face = -1;
    };

    ClosestPoint closest_point(const Vec3& p) const
    {
        ClosestPoint best;
        if (nodes_.empty()) {
            return best;
        }
        int stack[128];
        int top = 0;
        stack[top++] = 0;
        while (top > 0) {
            const Node& node = nodes_[stack[--top]];
            const double box_d2 = (p - p.cwiseMax(node.lo).cwiseMin(node.hi)).squaredNorm();
            if (box_d2 > best.distance * best.distance) {
                continue;
            }
            if (node.count > 0) {
                for (int i = node.first; i < node.first + node.count; ++i) {
                    const int f = order_[i];
                    const auto& [a, b, c] = mesh_->faces[f];
                    const Vec3 q = closest_point_on_triangle(p, mesh_->vertices[a], mesh_->vertices[b],
                                                             mesh_->vertices[c]);
                    const double d = (q - p).norm();
                    if (d < best.distance) {
                        best = {q, d, f};
                    }
                }
            } else {
                stack[top++] = node.left;
                stack[top++] = node.right;
            }
        }
        return best;
    }

    const Mesh& mesh() const { return *mesh_; }

private:
    struct Node
    {
        Vec3 lo, hi;
        int left = -1, right = -1;
        int first = 0, count = 0;
    };

    static bool box_hit(const Node& node, const Ray& ray, const Vec3& inv_dir, double t_min, double t_max)
    {
        constexpr double pad = 1e-9;
        double t0 = t_min - pad, t1 = t_max + pad;
        for (int k = 0; k < 3; ++k) {
            double a = (node.lo[k] - pad - ray.origin[k]) * inv_dir[k];
            double b = (node.hi[k] + pad - ray.origin[k]) * inv_dir[k];
            if (std::isnan(a) || std::isnan(b)) {
                continue; // ray parallel to and inside the slab
            }
            if (a > b) {
                std::swap(a, b);
            }
            t0 = std::max(t0, a);
            t1 = std::min(t1, b);
            if (t0 > t1) {
                return false;
            }
        }
        return true;
    }

    int build(std::size_t begin, std::size_t end)
    {
        const int index = static_cast<int>(nodes_.size());
        nodes_.push_back({});
        Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
        Vec3 hi = -lo;
        Vec3 clo = lo, chi = hi;
        for (std::size_t i = begin; i < end; ++i) {
            const auto& [a, b, c] = mesh_->faces[order_[i]];
            for (int v : {a, b, c}) {
                lo = lo.cwiseMin(mesh_->vertices[v]);
                hi = hi.cwiseMax(mesh_->vertices[v]);
            }
            clo = clo.cwiseMin(centroids_[order_[i]]);
            chi = chi.cwiseMax(centroids_[order_[i]]);
        }
        nodes_[index].lo = lo;
        nodes_[index].hi = hi;
        if (end - begin <= 4) {
            nodes_[index].first = static_cast<int>(begin);
            nodes_[index].count = static_cast<int>(end - begin);
            return index;
        }
        int axis = 0;
        (chi - clo).maxCoeff(&axis);
        const std::size_t mid = begin + (end - begin) / 2;
        std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end, [&](int x, int y) {
            const double cx = centroids_[x][axis], cy = centroids_[y][axis];
            return cx < cy || (cx == cy && x < y);
        });
        const int left = build(begin, mid);
        const int right = build(mid, end);
        nodes_[index].left = left;
        nodes_[index].right = right;
        return index;
    }

    const Mesh* mesh_;
    std::vector<int> order_;
    std::vector<Vec3> centroids_;
    std::vector<Node> nodes_;
};

/// Area-uniform random points on the mesh surface.
inline std::vector<Vec3> sample_surface(const Mesh& mesh, std::size_t count, Rng& rng)
{
    std::vector<double> cdf(mesh.faces.size());
    double total = 0.0;
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
        total += mesh.face_area(f);
        cdf[f] = total;
    }
    std::vector<Vec3> points;
    points.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const double r = uniform01(rng) * total;
        const auto it = std::upper_bound(cdf.begin(), cdf.end(), r);
        const std::size_t f = std::min<std::size_t>(it - cdf.begin(), cdf.size() - 1);
        const double s = std::sqrt(uniform01(rng));
        const double r2 = uniform01(rng);
        const auto& [a, b, c] = mesh.faces[f];
        points.push_back((1.0 - s) * mesh.vertices[a] + s * (1.0 - r2) * mesh.vertices[b] +
                         s * r2 * mesh.vertices[c]);
    }
    return points;
}

/// Wavefront OBJ with v/f records only, 1-based indices.
inline void write_obj(std::ostream& out, const Mesh& mesh)
{
    char line[128];
    for (const auto& v : mesh.vertices) {
        std::snprintf(line, sizeof(line), "v %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
        out << line;
    }
    for (const auto& [a, b, c] : mesh.faces) {
        std::snprintf(line, sizeof(line), "f %d %d %d\n", a + 1, b + 1, c + 1);
        out << line;
    }
}

} // namespace cgof
