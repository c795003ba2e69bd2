#include "marf/camera.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "marf/error.hpp"

namespace marf {

Mat3 Intrinsics::matrix() const {
  Mat3 K;
  K << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return K;
}

void Intrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw ArgumentError("focal lengths must be positive");
  if (width <= 0 || height <= 0) throw ArgumentError("sensor size must be positive");
  if (cx < 0.0 || cx > width || cy < 0.0 || cy > height) {
    throw ArgumentError("principal point lies outside the sensor");
  }
}

Pose Pose::from_matrix(const Mat4& c2w) {
  Pose pose;
  pose.rotation = c2w.topLeftCorner<3, 3>();
  pose.translation = c2w.topRightCorner<3, 1>();
  return pose;
}

Mat4 Pose::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

void Pose::validate() const {
  constexpr double kTol = 1e-6;
  if (!rotation.allFinite() || !translation.allFinite()) throw ArgumentError("pose has non-finite entries");
  if (((rotation.transpose() * rotation) - Mat3::Identity()).cwiseAbs().maxCoeff() > kTol) {
    throw ArgumentError("pose rotation is not orthonormal");
  }
  if (std::abs(rotation.determinant() - 1.0) > kTol) throw ArgumentError("pose rotation is not proper (det != +1)");
}

Mat34 projection_matrix(const Intrinsics& K, const Pose& pose) {
  Mat34 extrinsic;
  extrinsic.leftCols<3>() = Mat3::Identity();
  extrinsic.col(3) = -pose.translation;
  return K.matrix() * pose.world_to_camera_rotation() * extrinsic;
}

Projection project(const Intrinsics& K, const Pose& pose, const Vec3& world_point) {
  const Vec3 cam = pose.world_to_camera_rotation() * (world_point - pose.translation);
  Projection p;
  p.depth = cam.z();
  if (!(cam.z() > 0.0)) {
    p.behind = true;
    return p;
  }
  p.u = K.fx * cam.x() / cam.z() + K.cx;
  p.v = K.fy * cam.y() / cam.z() + K.cy;
  return p;
}

std::optional<std::pair<double, double>> intersect_aabb(const Vec3& origin, const Vec3& direction,
                                                        const Aabb& box) {
  double t0 = 0.0;
  double t1 = std::numeric_limits<double>::infinity();
  for (int axis = 0; axis < 3; ++axis) {
    const double o = origin[axis], d = direction[axis];
    if (d == 0.0) {
      if (o < box.min[axis] || o > box.max[axis]) return std::nullopt;
      continue;
    }
    double ta = (box.min[axis] - o) / d;
    double tb = (box.max[axis] - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::nullopt;
  }
  if (!(t1 > t0)) return std::nullopt;
  return std::make_pair(t0, t1);
}

Vec3 pixel_direction(const Intrinsics& K, const Pose& pose, double u, double v) {
  const Vec3 cam((u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0);
  return (pose.rotation * cam).normalized();
}

std::optional<Ray> generate_ray(const Intrinsics& K, const Pose& pose, double u, double v, const Aabb& box) {
  Ray ray;
  ray.origin = pose.translation;
  ray.direction = pixel_direction(K, pose, u, v);
  const auto hit = intersect_aabb(ray.origin, ray.direction, box);
  if (!hit) return std::nullopt;
  ray.t_near = hit->first;
  ray.t_far = hit->second;
  return ray;
}

void SceneManifest::validate() const {
  if (entries.empty()) throw ArgumentError("scene manifest has no entries");
  if (!aabb.valid()) throw ArgumentError("scene bounding box is degenerate");
  for (const auto& e : entries) {
    e.intrinsics.validate();
    e.pose.validate();
  }
}

// --- COLMAP -------------------------------------------------------------------

namespace {

bool is_comment_or_blank(const std::string& line) {
  const auto first = line.find_first_not_of(" \t\r");
  return first == std::string::npos || line[first] == '#';
}

std::map<long, Intrinsics> read_colmap_cameras(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  std::map<long, Intrinsics> cameras;
  std::string line;
  while (std::getline(in, line)) {
    if (is_comment_or_blank(line)) continue;
    std::istringstream ls(line);
    long id = 0;
    std::string model;
    Intrinsics K;
    if (!(ls >> id >> model >> K.width >> K.height)) throw FormatError("malformed camera line: " + line);
    if (model == "SIMPLE_PINHOLE") {
      double f = 0.0;
      if (!(ls >> f >> K.cx >> K.cy)) throw FormatError("malformed SIMPLE_PINHOLE parameters: " + line);
      K.fx = K.fy = f;
    } else if (model == "PINHOLE") {
      if (!(ls >> K.fx >> K.fy >> K.cx >> K.cy)) throw FormatError("malformed PINHOLE parameters: " + line);
    } else {
      throw FormatError("unsupported COLMAP camera model " + model +
                        " (only PINHOLE and SIMPLE_PINHOLE; undistort the images first)");
    }
    K.validate();
    cameras[id] = K;
  }
  return cameras;
}

}  // namespace

SceneManifest import_colmap(const std::filesystem::path& model_dir,
                            const std::optional<std::filesystem::path>& image_dir) {
  const auto cameras = read_colmap_cameras(model_dir / "cameras.txt");
  const auto images_file = model_dir / "images.txt";
  std::ifstream in(images_file);
  if (!in) throw IoError("cannot read " + images_file.string());
  const auto root = image_dir.value_or(model_dir);

  SceneManifest manifest;
  std::string line;
  while (std::getline(in, line)) {
    if (is_comment_or_blank(line)) continue;
    std::istringstream ls(line);
    long image_id = 0, camera_id = 0;
    double qw, qx, qy, qz, tx, ty, tz;
    if (!(ls >> image_id >> qw >> qx >> qy >> qz >> tx >> ty >> tz >> camera_id)) {
      throw FormatError("malformed image line: " + line);
    }
    std::string name;
    std::getline(ls >> std::ws, name);
    while (!name.empty() && (name.back() == '\r' || name.back() == ' ')) name.pop_back();
    // The following line lists 2D observations (possibly empty); skip it.
    std::string points;
    std::getline(in, points);

    const auto cam = cameras.find(camera_id);
    if (cam == cameras.end()) throw FormatError("image " + name + " references unknown camera");
    const auto path = root / name;
    if (!std::filesystem::exists(path)) {
      spdlog::warn("COLMAP image {} not found under {}, skipping", name, root.string());
      continue;
    }
    const Mat3 r_wc = Eigen::Quaterniond(qw, qx, qy, qz).normalized().toRotationMatrix();
    const Vec3 t_wc(tx, ty, tz);
    SceneEntry entry;
    entry.image = path;
    entry.intrinsics = cam->second;
    entry.pose.rotation = r_wc.transpose();
    entry.pose.translation = -(r_wc.transpose() * t_wc);
    entry.pose.validate();
    manifest.entries.push_back(std::move(entry));
  }

  // Bounds of the camera centers, padded; normalize_scene replaces them.
  if (!manifest.entries.empty()) {
    Vec3 lo = manifest.entries.front().pose.translation, hi = lo;
    for (const auto& e : manifest.entries) {
      lo = lo.cwiseMin(e.pose.translation);
      hi = hi.cwiseMax(e.pose.translation);
    }
    const double pad = std::max(1.0, (hi - lo).maxCoeff());
    manifest.aabb = {lo.array() - pad, hi.array() + pad};
  }
  return manifest;
}

void export_colmap(const SceneManifest& manifest, const std::filesystem::path& model_dir) {
  std::filesystem::create_directories(model_dir);
  std::ofstream cams(model_dir / "cameras.txt");
  std::ofstream imgs(model_dir / "images.txt");
  if (!cams || !imgs) throw IoError("cannot write COLMAP model to " + model_dir.string());
  cams << std::setprecision(17);
  imgs << std::setprecision(17);
  cams << "# Camera list with one line of data per camera:\n"
       << "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n";
  imgs << "# Image list with two lines of data per image:\n"
       << "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n"
       << "#   POINTS2D[] as (X, Y, POINT3D_ID)\n";
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    const auto& K = e.intrinsics;
    cams << i + 1 << " PINHOLE " << K.width << " " << K.height << " " << K.fx << " " << K.fy << " " << K.cx
         << " " << K.cy << "\n";
    Eigen::Quaterniond q(e.pose.world_to_camera_rotation());
    if (q.w() < 0.0) q.coeffs() *= -1.0;
    const Vec3 t = e.pose.world_to_camera_translation();
    imgs << i + 1 << " " << q.w() << " " << q.x() << " " << q.y() << " " << q.z() << " " << t.x() << " "
         << t.y() << " " << t.z() << " " << i + 1 << " " << e.image.filename().string() << "\n\n";
  }
}

SceneManifest normalize_scene(const SceneManifest& manifest) {
  if (manifest.entries.size() < 2) throw DegenerateSceneError("scene normalization needs at least two cameras");
  Vec3 centroid = Vec3::Zero();
  for (const auto& e : manifest.entries) centroid += e.pose.translation;
  centroid /= static_cast<double>(manifest.entries.size());
  double extent = 0.0;
  for (const auto& e : manifest.entries) {
    extent = std::max(extent, (e.pose.translation - centroid).cwiseAbs().maxCoeff());
  }
  if (!(extent > 0.0)) throw DegenerateSceneError("all camera centers coincide");

  SimilarityTransform step;
  step.scale = 0.25 / extent;
  step.offset = Vec3::Constant(0.5) - step.scale * centroid;

  SceneManifest out = manifest;
  for (auto& e : out.entries) e.pose.translation = step.apply(e.pose.translation);
  out.aabb = Aabb::unit();
  out.normalization.scale = step.scale * manifest.normalization.scale;
  out.normalization.offset = step.scale * manifest.normalization.offset + step.offset;
  return out;
}

// --- native manifest -------------------------------------------------------------

void write_scene_manifest(const SceneManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write scene manifest " + path.string());
  const auto base = path.parent_path().empty() ? std::filesystem::current_path()
                                               : std::filesystem::absolute(path.parent_path());
  out << std::setprecision(17);
  out << "marf-scene 1\n";
  out << "aabb " << manifest.aabb.min.transpose() << " " << manifest.aabb.max.transpose() << "\n";
  out << "normalization " << manifest.normalization.scale << " " << manifest.normalization.offset.transpose()
      << "\n";
  for (const auto& e : manifest.entries) {
    const auto image = std::filesystem::absolute(e.image).lexically_proximate(base);
    const auto& K = e.intrinsics;
    out << "view " << image.generic_string() << "\n";
    out << "intrinsics " << K.fx << " " << K.fy << " " << K.cx << " " << K.cy << " " << K.width << " "
        << K.height << "\n";
    out << "c2w";
    const Mat4 m = e.pose.matrix();
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) out << " " << m(r, c);
    }
    out << "\n";
  }
  if (!out) throw IoError("failed writing scene manifest " + path.string());
}

SceneManifest read_scene_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read scene manifest " + path.string());
  const auto base = path.parent_path();
  SceneManifest manifest;
  std::string line;
  int line_no = 0;
  bool header = false;
  // Tracks which parts of the current record have been seen.
  bool have_intrinsics = true, have_pose = true;
  auto fail = [&](const std::string& what) {
    throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + what);
  };
  auto finish_record = [&] {
    if (!have_intrinsics || !have_pose) fail("view record is missing intrinsics or c2w");
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (is_comment_or_blank(line)) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (!header) {
      int version = 0;
      if (key != "marf-scene" || !(ls >> version)) fail("missing 'marf-scene' header");
      if (version != 1) fail("unsupported scene manifest version " + std::to_string(version));
      header = true;
      continue;
    }
    if (key == "aabb") {
      auto& b = manifest.aabb;
      if (!(ls >> b.min.x() >> b.min.y() >> b.min.z() >> b.max.x() >> b.max.y() >> b.max.z())) fail("bad aabb");
    } else if (key == "normalization") {
      auto& n = manifest.normalization;
      if (!(ls >> n.scale >> n.offset.x() >> n.offset.y() >> n.offset.z())) fail("bad normalization");
    } else if (key == "view") {
      finish_record();
      std::string rest;
      std::getline(ls >> std::ws, rest);
      while (!rest.empty() && rest.back() == '\r') rest.pop_back();
      if (rest.empty()) fail("view without image path");
      std::filesystem::path image(rest);
      manifest.entries.push_back({image.is_relative() ? (base / image).lexically_normal() : image, {}, {}});
      have_intrinsics = have_pose = false;
    } else if (key == "intrinsics") {
      if (manifest.entries.empty()) fail("intrinsics before any view");
      auto& K = manifest.entries.back().intrinsics;
      if (!(ls >> K.fx >> K.fy >> K.cx >> K.cy >> K.width >> K.height)) fail("bad intrinsics");
      have_intrinsics = true;
    } else if (key == "c2w") {
      if (manifest.entries.empty()) fail("c2w before any view");
      Mat4 m;
      for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
          if (!(ls >> m(r, c))) fail("c2w needs 16 values");
        }
      }
      manifest.entries.back().pose = Pose::from_matrix(m);
      have_pose = true;
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  if (!header) throw FormatError(path.string() + ": empty scene manifest");
  finish_record();
  try {
    manifest.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return manifest;
}

Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-12) right = forward.unitOrthogonal();
  right.normalize();
  const Vec3 down = forward.cross(right);
  Pose pose;
  pose.rotation.col(0) = right;
  pose.rotation.col(1) = down;
  pose.rotation.col(2) = forward;
  pose.translation = eye;
  return pose;
}

}  // namespace marf
