#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <json.hpp>

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>

namespace cgof {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;

/// Default camera and ray-bound constants of the face-centric setup.
inline constexpr double kCameraRadius = 2.7;
inline constexpr double kFovDeg = 13.373;
inline constexpr double kNear = 2.25;
inline constexpr double kFar = 3.30;

struct Ray
{
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3(0, 0, -1);

    Vec3 at(double t) const { return origin + t * direction; }
};

/// Pinhole camera orbiting the origin. The rotation columns are the camera's
/// right, up and back axes in world space; the camera looks along -back.
/// Pixel centers sit at k + 0.5 and the principal point is the image center.
struct Camera
{
    Vec3 position = Vec3(0, 0, kCameraRadius);
    Mat3 rotation = Mat3::Identity();
    double fov_deg = kFovDeg;
    int width = 64;
    int height = 64;
    double t_near = kNear;
    double t_far = kFar;
    // Spherical parameters the camera was built from (kept for serialization).
    double radius = kCameraRadius;
    double yaw = 0.0;
    double pitch = 0.0;

    Vec3 forward() const { return -rotation.col(2); }

    /// Focal length in pixels; the field of view is measured horizontally.
    double focal_px() const { return 0.5 * width / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0); }
};

inline Camera look_at_camera(double radius, double yaw, double pitch, double fov_deg = kFovDeg, int width = 64,
                             int height = 64, double t_near = kNear, double t_far = kFar)
{
    if (!(radius > 0.0)) {
        throw std::invalid_argument("look_at_camera: radius must be positive");
    }
    if (std::abs(pitch) >= 0.5 * std::numbers::pi) {
        throw std::invalid_argument("look_at_camera: |pitch| must be below pi/2");
    }
    if (!(fov_deg > 0.0 && fov_deg < 180.0)) {
        throw std::invalid_argument("look_at_camera: fov_deg must lie in (0, 180)");
    }
    if (!(t_near < t_far)) {
        throw std::invalid_argument("look_at_camera: t_near must be below t_far");
    }
    if (width <= 0 || height <= 0) {
        throw std::invalid_argument("look_at_camera: image size must be positive");
    }
    Camera cam;
    cam.position = radius * Vec3(std::sin(yaw) * std::cos(pitch), std::sin(pitch), std::cos(yaw) * std::cos(pitch));
    const Vec3 back = cam.position.normalized();
    const Vec3 right = Vec3::UnitY().cross(back).normalized();
    const Vec3 up = back.cross(right);
    cam.rotation.col(0) = right;
    cam.rotation.col(1) = up;
    cam.rotation.col(2) = back;
    cam.fov_deg = fov_deg;
    cam.width = width;
    cam.height = height;
    cam.t_near = t_near;
    cam.t_far = t_far;
    cam.radius = radius;
    cam.yaw = yaw;
    cam.pitch = pitch;
    return cam;
}

/// Same pose and intrinsics at a different resolution.
inline Camera with_resolution(const Camera& cam, int width, int height)
{
    return look_at_camera(cam.radius, cam.yaw, cam.pitch, cam.fov_deg, width, height, cam.t_near, cam.t_far);
}

inline Ray ray_through_pixel(const Camera& cam, double u, double v)
{
    const double f = cam.focal_px();
    const Vec3 dir_cam((u - 0.5 * cam.width) / f, -(v - 0.5 * cam.height) / f, -1.0);
    return Ray{cam.position, (cam.rotation * dir_cam).normalized()};
}

struct Projection
{
    double u = 0.0;
    double v = 0.0;
    double depth = 0.0; // distance from the camera center along the pixel ray
};

/// Perspective projection; empty when p lies on or behind the image plane.
inline std::optional<Projection> project(const Camera& cam, const Vec3& p)
{
    const Vec3 q = cam.rotation.transpose() * (p - cam.position);
    if (!(-q.z() > 0.0)) {
        return std::nullopt;
    }
    const double f = cam.focal_px();
    return Projection{0.5 * cam.width + f * q.x() / -q.z(), 0.5 * cam.height - f * q.y() / -q.z(), q.norm()};
}

inline bool in_image(const Camera& cam, double u, double v)
{
    return u >= 0.0 && v >= 0.0 && u <= cam.width && v <= cam.height;
}

inline nlohmann::json camera_to_json(const Camera& cam)
{
    return {{"radius", cam.radius}, {"yaw", cam.yaw},       {"pitch", cam.pitch},   {"fov_deg", cam.fov_deg},
            {"width", cam.width},   {"height", cam.height}, {"t_near", cam.t_near}, {"t_far", cam.t_far}};
}

inline Camera camera_from_json(const nlohmann::json& j)
{
    return look_at_camera(j.at("radius").get<double>(), j.at("yaw").get<double>(), j.at("pitch").get<double>(),
                          j.value("fov_deg", kFovDeg), j.value("width", 64), j.value("height", 64),
                          j.value("t_near", kNear), j.value("t_far", kFar));
}

/// x -> scale * R x + t
struct SimilarityTransform
{
    double scale = 1.0;
    Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
    Vec3 translation = Vec3::Zero();

    static SimilarityTransform identity() { return {}; }

    Mat3 linear() const { return scale * rotation.toRotationMatrix(); }

    SimilarityTransform inverse() const
    {
        SimilarityTransform inv;
        inv.scale = 1.0 / scale;
        inv.rotation = rotation.conjugate();
        inv.translation = -(inv.scale * (inv.rotation * translation));
        return inv;
    }
};

inline Vec3 apply_transform(const SimilarityTransform& T, const Vec3& p)
{
    return T.scale * (T.rotation * p) + T.translation;
}

/// (a ∘ b)(p) = a(b(p))
inline SimilarityTransform compose(const SimilarityTransform& a, const SimilarityTransform& b)
{
    SimilarityTransform out;
    out.scale = a.scale * b.scale;
    out.rotation = (a.rotation * b.rotation).normalized();
    out.translation = a.scale * (a.rotation * b.translation) + a.translation;
    return out;
}

inline nlohmann::json transform_to_json(const SimilarityTransform& T)
{
    return {{"scale", T.scale},
            {"quaternion", {T.rotation.w(), T.rotation.x(), T.rotation.y(), T.rotation.z()}},
            {"translation", {T.translation.x(), T.translation.y(), T.translation.z()}}};
}

inline SimilarityTransform transform_from_json(const nlohmann::json& j)
{
    SimilarityTransform T;
    T.scale = j.at("scale").get<double>();
    const auto& q = j.at("quaternion");
    T.rotation = Eigen::Quaterniond(q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(),
                                    q.at(3).get<double>())
                     .normalized();
    const auto& t = j.at("translation");
    T.translation = Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>());
    return T;
}

} // namespace cgof
