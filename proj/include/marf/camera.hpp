#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace marf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;
using Mat4 = Eigen::Matrix4d;

/// Pinhole intrinsics in pixels. The principal point is measured from the
/// top-left corner of the image.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  Mat3 matrix() const;
  /// Throws ArgumentError when a focal length is not positive or the
  /// principal point lies outside the sensor.
  void validate() const;
};

/// Camera-to-world rigid transform. In the camera frame +z looks forward,
/// +x to the right of the image and +y down the image.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();  // camera center in world coordinates

  static Pose from_matrix(const Mat4& c2w);
  Mat4 matrix() const;
  /// World-to-camera rotation and translation (x_cam = R_wc x + t_wc).
  Mat3 world_to_camera_rotation() const { return rotation.transpose(); }
  Vec3 world_to_camera_translation() const { return -(rotation.transpose() * translation); }
  /// Throws ArgumentError unless R^T R = I and det R = +1 within 1e-6.
  void validate() const;
};

struct Aabb {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Ones();

  static Aabb unit() { return {}; }
  bool valid() const { return (min.array() < max.array()).all(); }
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double t_near = 0.0;
  double t_far = 1.0;

  Vec3 point_at(double t) const { return origin + t * direction; }
};

/// P = K R_wc [I | -c] for camera center c.
Mat34 projection_matrix(const Intrinsics& K, const Pose& pose);

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
  bool behind = false;  // depth <= 0; u and v are meaningless then
};

Projection project(const Intrinsics& K, const Pose& pose, const Vec3& world_point);

/// Slab-method intersection; returns [t_near, t_far] with t_near clamped to
/// zero when the origin is inside the box, or nothing on a miss.
std::optional<std::pair<double, double>> intersect_aabb(const Vec3& origin, const Vec3& direction,
                                                        const Aabb& box);

/// Ray through continuous pixel coordinates (u, v); pass x + 0.5, y + 0.5
/// for the center of integer pixel (x, y). Returns nothing when the ray
/// misses the box.
std::optional<Ray> generate_ray(const Intrinsics& K, const Pose& pose, double u, double v, const Aabb& box);

/// Unit direction of the ray through (u, v), in world coordinates.
Vec3 pixel_direction(const Intrinsics& K, const Pose& pose, double u, double v);

struct SceneEntry {
  std::filesystem::path image;
  Intrinsics intrinsics;
  Pose pose;
};

/// Uniform scale followed by translation: x' = scale * x + offset.
struct SimilarityTransform {
  double scale = 1.0;
  Vec3 offset = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return scale * x + offset; }
  Vec3 invert(const Vec3& x) const { return (x - offset) / scale; }
};

struct SceneManifest {
  std::vector<SceneEntry> entries;
  Aabb aabb;
  /// Transform from the original world frame into this manifest's frame.
  SimilarityTransform normalization;

  /// Throws ArgumentError when empty, when a pose or intrinsics is invalid,
  /// or when the box is degenerate.
  void validate() const;
};

/// Reads a COLMAP text model (cameras.txt + images.txt). Image names are
/// resolved under `image_dir` (defaults to the model directory); entries
/// whose image is missing are skipped with a warning. Only PINHOLE and
/// SIMPLE_PINHOLE cameras are accepted, images must be undistorted.
SceneManifest import_colmap(const std::filesystem::path& model_dir,
                            const std::optional<std::filesystem::path>& image_dir = std::nullopt);

/// Writes cameras.txt and images.txt (one PINHOLE camera per entry).
void export_colmap(const SceneManifest& manifest, const std::filesystem::path& model_dir);

/// Maps the centroid of the camera centers to (0.5, 0.5, 0.5) and scales so
/// every center lies in [0.25, 0.75]^3; the box becomes the unit cube.
/// Throws DegenerateSceneError for fewer than two or coincident cameras.
SceneManifest normalize_scene(const SceneManifest& manifest);

// Native manifest format:
//
//   marf-scene 1
//   aabb <minx> <miny> <minz> <maxx> <maxy> <maxz>
//   normalization <scale> <ox> <oy> <oz>
//   view <image path, rest of line>
//   intrinsics <fx> <fy> <cx> <cy> <width> <height>
//   c2w <16 values, row-major 4x4>
//
// `view` starts a record and must be followed by its intrinsics and c2w
// lines. Relative image paths are relative to the manifest file.
void write_scene_manifest(const SceneManifest& manifest, const std::filesystem::path& path);
SceneManifest read_scene_manifest(const std::filesystem::path& path);

/// Camera at `eye` looking at `target`; `up` gives the world direction that
/// should appear toward the top of the image.
Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up);

}  // namespace marf
