#include "synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace marf::testing {

double BoxScene::sigma(const Vec3& x) const {
  for (int a = 0; a < 3; ++a) {
    if (x[a] < lo[a] || x[a] > hi[a]) return 0.0;
  }
  return density;
}

std::array<double, 3> BoxScene::color(const Vec3& x) const {
  const Vec3 center = 0.5 * (lo + hi);
  const Vec3 half = 0.5 * (hi - lo);
  int axis = 0;
  double best = -1.0;
  for (int a = 0; a < 3; ++a) {
    const double r = std::abs(x[a] - center[a]) / half[a];
    if (r > best) {
      best = r;
      axis = a;
    }
  }
  return face_color[axis];
}

namespace {

// Independent slab test against the unit cube.
bool unit_cube_span(const Vec3& o, const Vec3& d, double& t0, double& t1) {
  t0 = 0.0;
  t1 = 1e30;
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < 0.0 || o[a] > 1.0) return false;
      continue;
    }
    double ta = (0.0 - o[a]) / d[a], tb = (1.0 - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t1 > t0;
}

}  // namespace

ReferenceImage render_reference(const BoxScene& scene, const Intrinsics& K, const Pose& pose, int samples) {
  ReferenceImage out{ImageBuffer(K.width, K.height, 3), ImageBuffer(K.width, K.height, 1)};
  for (int y = 0; y < K.height; ++y) {
    for (int x = 0; x < K.width; ++x) {
      const Vec3 cam((x + 0.5 - K.cx) / K.fx, (y + 0.5 - K.cy) / K.fy, 1.0);
      const Vec3 d = (pose.rotation * cam).normalized();
      const Vec3 o = pose.translation;
      std::array<double, 3> c{0, 0, 0};
      double T = 1.0;
      double t0, t1;
      if (unit_cube_span(o, d, t0, t1)) {
        const double w = (t1 - t0) / samples;
        for (int k = 0; k < samples; ++k) {
          const double t = t0 + (k + 0.5) * w;
          const double dt = k + 1 < samples ? w : t1 - t;
          const Vec3 p = o + t * d;
          const double s = scene.sigma(p);
          if (s == 0.0) continue;
          const double alpha = 1.0 - std::exp(-s * dt);
          const auto col = scene.color(p);
          for (int ch = 0; ch < 3; ++ch) c[ch] += T * alpha * col[ch];
          T *= 1.0 - alpha;
        }
      }
      for (int ch = 0; ch < 3; ++ch) {
        out.rgb.at(x, y, ch) = static_cast<float>(std::clamp(c[ch] + T * scene.background[ch], 0.0, 1.0));
      }
      out.opacity.at(x, y, 0) = static_cast<float>(1.0 - T);
    }
  }
  return out;
}

Intrinsics default_intrinsics(int size, double focal) {
  Intrinsics K;
  K.width = K.height = size;
  K.fx = K.fy = focal * size / 64.0;
  K.cx = K.cy = size / 2.0;
  return K;
}

Pose orbit_pose(double azimuth_deg, double elevation_deg, double radius) {
  const double az = azimuth_deg * std::numbers::pi / 180.0;
  const double el = elevation_deg * std::numbers::pi / 180.0;
  const Vec3 center(0.5, 0.5, 0.5);
  const Vec3 eye = center + radius * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
  return look_at(eye, center, Vec3::UnitZ());
}

TrainingView make_view(const BoxScene& scene, const Intrinsics& K, const Pose& pose, const std::string& name) {
  return {name, render_reference(scene, K, pose).rgb, K, pose};
}

SceneViews circle_scene(const BoxScene& scene, int size) {
  SceneViews out;
  const Intrinsics K = default_intrinsics(size);
  for (int i = 0; i < 24; ++i) {
    out.train.views.push_back(make_view(scene, K, orbit_pose(15.0 * i, 30.0), "train_" + std::to_string(i) + ".png"));
  }
  const double held_az[4] = {7.5, 97.5, 187.5, 277.5};
  const double held_el[4] = {20.0, 40.0, 25.0, 35.0};
  for (int i = 0; i < 4; ++i) {
    out.heldout.views.push_back(
        make_view(scene, K, orbit_pose(held_az[i], held_el[i]), "heldout_" + std::to_string(i) + ".png"));
  }
  out.train.box = out.heldout.box = Aabb::unit();
  return out;
}

TrainingSet hemisphere_scene(const BoxScene& scene, int size) {
  TrainingSet out;
  out.box = Aabb::unit();
  const Intrinsics K = default_intrinsics(size);
  for (int i = 0; i < 24; ++i) {
    const double az = 15.0 + 150.0 * (i % 12) / 11.0;
    const double el = i < 12 ? 20.0 : 45.0;
    out.views.push_back(make_view(scene, K, orbit_pose(az, el), "hemi_" + std::to_string(i) + ".png"));
  }
  return out;
}

std::filesystem::path write_scene(const TrainingSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  SceneManifest manifest;
  manifest.aabb = set.box;
  for (const auto& v : set.views) {
    const auto path = dir / "images" / v.name;
    save_image(v.image, path);
    manifest.entries.push_back({path, v.intrinsics, v.pose});
  }
  const auto out = dir / "scene.marf";
  write_scene_manifest(manifest, out);
  return out;
}

}  // namespace marf::testing
