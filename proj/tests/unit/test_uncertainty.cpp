#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "helpers.hpp"
#include "marf/error.hpp"
#include "marf/uncertainty.hpp"
#include "synthetic.hpp"

using namespace marf;

namespace {

ImageBuffer gray(std::initializer_list<float> values, int width) {
  const int height = static_cast<int>(values.size()) / width;
  return ImageBuffer(width, height, 1, std::vector<float>(values));
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.grid.levels = 4;
  c.grid.min_resolution = 4;
  c.grid.max_resolution = 32;
  c.grid.table_size = 1u << 10;
  c.field.hidden_width = 8;
  c.field.geo_features = 3;
  c.field.dir_frequencies = 1;
  c.batch_rays = 32;
  c.samples = 16;
  c.max_steps = 5;
  c.threads = 1;
  c.deterministic = true;
  return c;
}

}  // namespace

TEST_CASE("uncertainty map statistics") {
  SUBCASE("mean and population deviation per pixel") {
    const ReplicaStack stack{gray({0.0f, 0.5f}, 2), gray({1.0f, 0.5f}, 2)};
    const UncertaintyMap m = uncertainty_map(stack);
    CHECK(m.mean.at(0, 0) == doctest::Approx(0.5));
    CHECK(m.sigma.at(0, 0) == doctest::Approx(0.5));
    CHECK(m.mean.at(1, 0) == doctest::Approx(0.5));
    CHECK(m.sigma.at(1, 0) == 0.0f);
  }
  SUBCASE("three replicas") {
    const ReplicaStack stack{gray({0.2f}, 1), gray({0.4f}, 1), gray({0.9f}, 1)};
    const UncertaintyMap m = uncertainty_map(stack);
    const double mean = 0.5;
    const double var = (0.09 + 0.01 + 0.16) / 3.0;
    CHECK(m.mean.at(0, 0) == doctest::Approx(mean).epsilon(1e-6));
    CHECK(m.sigma.at(0, 0) == doctest::Approx(std::sqrt(var)).epsilon(1e-6));
  }
  SUBCASE("a single replica has zero spread") {
    const ImageBuffer img = test::random_image(5, 4, 1, 3);
    const UncertaintyMap m = uncertainty_map({img});
    CHECK(m.mean == img);
    for (float v : m.sigma.data()) CHECK(v == 0.0f);
  }
  SUBCASE("identical replicas have zero spread") {
    const ImageBuffer img = test::random_image(6, 6, 1, 4);
    const UncertaintyMap m = uncertainty_map({img, img, img, img});
    for (float v : m.sigma.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-6));
  }
  SUBCASE("replica order does not matter and scaling scales sigma") {
    ReplicaStack stack;
    for (unsigned s = 0; s < 5; ++s) stack.push_back(test::random_image(7, 3, 1, 10 + s));
    const UncertaintyMap m = uncertainty_map(stack);
    ReplicaStack shuffled = stack;
    std::mt19937 rng(2);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const UncertaintyMap p = uncertainty_map(shuffled);
    ReplicaStack halved = stack;
    for (auto& img : halved)
      for (float& v : img.data()) v *= 0.5f;
    const UncertaintyMap h = uncertainty_map(halved);
    for (std::size_t i = 0; i < m.sigma.data().size(); ++i) {
      CHECK(p.sigma.data()[i] == doctest::Approx(m.sigma.data()[i]).epsilon(1e-5));
      CHECK(p.mean.data()[i] == doctest::Approx(m.mean.data()[i]).epsilon(1e-5));
      CHECK(h.sigma.data()[i] == doctest::Approx(0.5 * m.sigma.data()[i]).epsilon(1e-5));
      CHECK(m.sigma.data()[i] >= 0.0f);
    }
  }
  SUBCASE("bad stacks") {
    CHECK_THROWS_AS(uncertainty_map({}), ArgumentError);
    CHECK_THROWS_AS(uncertainty_map({gray({0.1f}, 1), gray({0.1f, 0.2f}, 2)}), ArgumentError);
    CHECK_THROWS_AS(uncertainty_map({ImageBuffer(2, 2, 3)}), ArgumentError);
  }
}

TEST_CASE("pose interpolation") {
  const Pose a = look_at(Vec3(2, 0, 0.5), Vec3(0.5, 0.5, 0.5), Vec3(0, 0, 1));
  const Pose b = look_at(Vec3(0, 2, 1.0), Vec3(0.5, 0.5, 0.5), Vec3(0, 0, 1));
  CHECK(interpolate_pose(a, b, 0.0).matrix() == a.matrix());
  CHECK(interpolate_pose(a, b, 1.0).matrix() == b.matrix());
  const Pose mid = interpolate_pose(a, b, 0.5);
  CHECK((mid.translation - 0.5 * (a.translation + b.translation)).norm() < 1e-12);
  CHECK_NOTHROW(mid.validate());
  // Equal angular steps from each end.
  const double to_a = Eigen::AngleAxisd(a.rotation.transpose() * mid.rotation).angle();
  const double to_b = Eigen::AngleAxisd(b.rotation.transpose() * mid.rotation).angle();
  CHECK(to_a == doctest::Approx(to_b).epsilon(1e-9));

  const Pose same = interpolate_pose(a, a, 0.3);
  CHECK((same.matrix() - a.matrix()).norm() < 1e-12);

  const auto path = interpolate_path(a, b, 5);
  REQUIRE(path.size() == 5);
  CHECK(path.front().matrix() == a.matrix());
  CHECK(path.back().matrix() == b.matrix());
  CHECK(interpolate_path(a, b, 1).size() == 1);
  CHECK_THROWS_AS(interpolate_path(a, b, 0), ArgumentError);
}

TEST_CASE("fly-through frames") {
  test::TempDir dir;
  std::vector<UncertaintyMap> maps;
  maps.push_back({gray({0.1f, 0.2f}, 2), gray({0.0f, 0.1f}, 2)});
  maps.push_back({gray({0.3f, 0.4f}, 2), gray({0.2f, 0.05f}, 2)});
  const FlythroughFrames f = write_flythrough(maps, dir.path());
  CHECK(f.sigma_scale == doctest::Approx(0.2));
  REQUIRE(f.mean.size() == 2);
  CHECK(f.mean[1].filename() == "mean_00001.png");
  CHECK(f.sigma[0].filename() == "sigma_00000.png");
  const ImageBuffer s1 = load_image(f.sigma[1]);
  CHECK(s1.at(0, 0) == 1.0f);
  CHECK(s1.at(1, 0) == doctest::Approx(0.25).epsilon(0.01));
  CHECK(std::stod(test::read_file(dir / "sigma_scale.txt")) == doctest::Approx(0.2));

  CHECK_THROWS_AS(write_flythrough({}, dir.path()), ArgumentError);

  SUBCASE("all-zero sigma is written as zeros") {
    test::TempDir other;
    const FlythroughFrames z = write_flythrough({{gray({0.5f}, 1), gray({0.0f}, 1)}}, other.path());
    CHECK(z.sigma_scale == 0.0);
    CHECK(load_image(z.sigma[0]).at(0, 0) == 0.0f);
  }
}

TEST_CASE("bootstrap training") {
  const TrainingSet data = testing::circle_scene({}, 16).train;
  BootstrapOptions opt;
  opt.replicas = 3;
  opt.base_seed = 40;
  CHECK(replica_seed(opt, 2) == 42);

  std::vector<int> seen;
  const BootstrapSet set = bootstrap_train(data, tiny_config(), opt, [&](int r, const Checkpoint&) { seen.push_back(r); });
  REQUIRE(set.size() == 3);
  CHECK(set.failures.empty());
  CHECK(set.seeds == std::vector<std::uint64_t>{40, 41, 42});
  CHECK(set.checkpoints[0].config.seed == 40);
  CHECK_FALSE(set.checkpoints[0] == set.checkpoints[1]);
  std::sort(seen.begin(), seen.end());
  CHECK(seen == std::vector<int>{0, 1, 2});

  SUBCASE("a fixed seed collapses the spread") {
    BootstrapOptions same = opt;
    same.replicas = 2;
    same.vary_seed = false;
    const BootstrapSet s = bootstrap_train(data, tiny_config(), same);
    REQUIRE(s.size() == 2);
    CHECK(s.checkpoints[0] == s.checkpoints[1]);
    const Viewpoint vp{testing::default_intrinsics(12, 14.0), testing::orbit_pose(45, 30)};
    const auto stacks = render_replicas(s.checkpoints, {vp}, data.box);
    const UncertaintyMap m = uncertainty_map(stacks[0]);
    for (float v : m.sigma.data()) CHECK(v == 0.0f);
  }

  SUBCASE("distinct seeds give nonzero spread somewhere") {
    const Viewpoint vp{testing::default_intrinsics(12, 14.0), testing::orbit_pose(45, 30)};
    const auto stacks = render_replicas(set.checkpoints, {vp, vp}, data.box, 8);
    REQUIRE(stacks.size() == 2);
    REQUIRE(stacks[0].size() == 3);
    CHECK(stacks[0][1] == stacks[1][1]);
    const UncertaintyMap m = uncertainty_map(stacks[0]);
    CHECK(*std::max_element(m.sigma.data().begin(), m.sigma.data().end()) > 0.0f);
  }

  SUBCASE("concurrent replicas match serial ones") {
    BootstrapOptions par = opt;
    par.concurrent = 3;
    const BootstrapSet p = bootstrap_train(data, tiny_config(), par);
    REQUIRE(p.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(p.checkpoints[i] == set.checkpoints[i]);
  }

  SUBCASE("failing replicas are reported, not fatal") {
    TrainConfig broken = tiny_config();
    broken.learning_rate = 1e30;
    broken.final_learning_rate = 1e30;
    BootstrapOptions two = opt;
    two.replicas = 2;
    const BootstrapSet b = bootstrap_train(data, broken, two);
    CHECK(b.size() == 0);
    REQUIRE(b.failures.size() == 2);
    CHECK(b.failures[1].seed == 41);
    CHECK_FALSE(b.failures[0].message.empty());
  }

  CHECK_THROWS_AS(bootstrap_train(data, tiny_config(), BootstrapOptions{.replicas = 0}), ConfigError);
}
