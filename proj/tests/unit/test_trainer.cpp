#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "helpers.hpp"
#include "marf/error.hpp"
#include "marf/trainer.hpp"
#include "synthetic.hpp"

using namespace marf;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.grid.levels = 6;
  c.grid.min_resolution = 8;
  c.grid.max_resolution = 64;
  c.grid.table_size = 1u << 12;
  c.field.hidden_width = 16;
  c.field.geo_features = 7;
  c.field.dir_frequencies = 2;
  c.batch_rays = 64;
  c.samples = 24;
  c.threads = 1;
  c.max_steps = 10;
  c.seed = 3;
  return c;
}

const testing::SceneViews& scene() {
  static const testing::SceneViews views = testing::circle_scene({}, 24);
  return views;
}

double train_psnr(const Checkpoint& ck, const TrainingSet& set) {
  return evaluate_psnr(ck, set);
}

}  // namespace

TEST_CASE("mse loss") {
  Eigen::MatrixXd a(3, 2), b(3, 2), g;
  a << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6;
  b = a;
  CHECK(mse_loss<double>(a, b, &g) == 0.0);
  CHECK(g.cwiseAbs().maxCoeff() == 0.0);
  b(0, 0) += 0.6;
  CHECK(mse_loss<double>(a, b, &g) == doctest::Approx(0.36 / 6));
  CHECK(g(0, 0) == doctest::Approx(2 * -0.6 / 6));
  CHECK(g(1, 1) == 0.0);
}

TEST_CASE("psnr") {
  const ImageBuffer zero(4, 4, 3);
  ImageBuffer tenth = test::constant_image(4, 4, 3, 0.1f);
  CHECK(psnr(zero, tenth) == doctest::Approx(20.0).epsilon(1e-6));
  CHECK(std::isinf(psnr(zero, zero)));
  CHECK(psnr(zero, test::constant_image(4, 4, 3, 1.0f)) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(psnr(zero, tenth) == psnr(tenth, zero));
  CHECK_THROWS_AS(psnr(zero, ImageBuffer(4, 3, 3)), ArgumentError);

  SUBCASE("larger errors never raise the score") {
    double last = std::numeric_limits<double>::infinity();
    for (float v : {0.01f, 0.05f, 0.2f, 0.6f}) {
      const double p = psnr(zero, test::constant_image(4, 4, 3, v));
      CHECK(p < last);
      last = p;
    }
  }
  SUBCASE("scene mean skips identical views") {
    const std::vector<ImageBuffer> truth{zero, zero, zero};
    const std::vector<ImageBuffer> rendered{tenth, zero, test::constant_image(4, 4, 3, 0.01f)};
    CHECK(scene_psnr(truth, rendered) == doctest::Approx(30.0).epsilon(1e-6));
    const std::vector<ImageBuffer> same{zero};
    CHECK(std::isinf(scene_psnr(same, same)));
    CHECK_THROWS_AS(scene_psnr(truth, same), ArgumentError);
  }
  CHECK(format_psnr(std::numeric_limits<double>::infinity()) == "inf");
  CHECK(format_psnr(27.5) == "27.500");
}

TEST_CASE("train config validation and text round trip") {
  TrainConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.max_steps.reset();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.deterministic = true;
  c.max_seconds = 5;
  c.max_steps.reset();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.learning_rate = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  TrainConfig d = small_config();
  d.max_seconds = 12.5;
  d.background = {0.25, 0.5, 1.0};
  d.learning_rate = 0.0123456789;
  KeyValueConfig kv;
  d.write(kv);
  const TrainConfig back = TrainConfig::read(KeyValueConfig::parse(kv.to_text()));
  CHECK(back == d);

  KeyValueConfig unknown = KeyValueConfig::parse("[train]\nlearnin_rate = 0.1\n");
  CHECK_THROWS_AS(TrainConfig::read(unknown), ConfigError);
}

TEST_CASE("checkpoint serialization") {
  const Checkpoint ck = initial_checkpoint(small_config());
  const std::string bytes = serialize_checkpoint(ck);
  CHECK(bytes.substr(0, 4) == "MARF");
  CHECK(deserialize_checkpoint(bytes) == ck);
  CHECK(serialize_checkpoint(deserialize_checkpoint(bytes)) == bytes);

  test::TempDir dir;
  save_checkpoint(ck, dir / "a.marf");
  CHECK(load_checkpoint(dir / "a.marf") == ck);

  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), FormatError);
  CHECK_THROWS_AS(deserialize_checkpoint("XXXX" + bytes.substr(4)), FormatError);
  std::string future = bytes;
  future[4] = 9;
  CHECK_THROWS_AS(deserialize_checkpoint(future), FormatError);
  CHECK_THROWS(load_checkpoint(dir / "missing.marf"));

  SUBCASE("initialization is seeded") {
    CHECK(initial_checkpoint(small_config()) == ck);
    TrainConfig other = small_config();
    other.seed = 4;
    CHECK_FALSE(initial_checkpoint(other) == ck);
  }
}

TEST_CASE("view split") {
  const ViewSplit s = split_views(10, 0.2, 5);
  CHECK(s.heldout.size() == 2);
  CHECK(s.train.size() == 8);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.heldout.begin(), s.heldout.end());
  CHECK(all.size() == 10);
  CHECK(split_views(10, 0.2, 5).heldout == s.heldout);
  CHECK(split_views(3, 0.01, 1).heldout.size() == 1);
  CHECK(split_views(3, 0.99, 1).train.size() == 1);
  CHECK_THROWS_AS(split_views(1, 0.5, 0), ConfigError);
  CHECK_THROWS_AS(split_views(5, 0.0, 0), ConfigError);
}

TEST_CASE("learning rate follows a cosine from start to final value") {
  const TrainingSet& data = scene().train;
  Trainer t(data, small_config());
  t.set_progress(0.0);
  CHECK(t.learning_rate() == doctest::Approx(1e-2));
  t.set_progress(0.5);
  CHECK(t.learning_rate() == doctest::Approx((1e-2 + 1e-4) / 2));
  t.set_progress(1.0);
  CHECK(t.learning_rate() == doctest::Approx(1e-4));
  t.set_progress(3.0);
  CHECK(t.learning_rate() == doctest::Approx(1e-4));
}

TEST_CASE("training steps") {
  const TrainingSet& data = scene().train;

  SUBCASE("zero learning rate leaves parameters unchanged") {
    TrainConfig c = small_config();
    c.learning_rate = c.final_learning_rate = 0.0;
    Trainer t(data, c);
    const Checkpoint before = t.checkpoint();
    for (int i = 0; i < 3; ++i) t.step();
    CHECK(t.grid() == before.grid);
    CHECK(t.params() == before.params);
    CHECK(t.steps() == 3);
  }

  SUBCASE("repeating one batch lowers its loss") {
    Trainer t(data, small_config());
    std::mt19937_64 rng(1);
    const RayBatch batch = sample_ray_batch(data, 128, rng);
    const double first = t.step(batch);
    double last = first;
    for (int i = 0; i < 40; ++i) last = t.step(batch);
    CHECK(last < 0.5 * first);
  }

  SUBCASE("zero steps returns the initialization") {
    TrainConfig c = small_config();
    c.max_steps = 0;
    const Checkpoint ck = train(data, c);
    CHECK(ck.grid == initial_checkpoint(c).grid);
    CHECK(ck.params == initial_checkpoint(c).params);
    CHECK(ck.step == 0);
  }

  SUBCASE("deterministic runs are bit-identical") {
    TrainConfig c = small_config();
    c.deterministic = true;
    c.max_steps = 15;
    const std::string a = serialize_checkpoint(train(data, c));
    const std::string b = serialize_checkpoint(train(data, c));
    CHECK(a == b);
    c.seed = 99;
    CHECK(serialize_checkpoint(train(data, c)) != a);
  }

  SUBCASE("the step callback sees every step") {
    TrainConfig c = small_config();
    c.max_steps = 5;
    std::vector<std::uint64_t> steps;
    TrainCallbacks cb;
    cb.on_step = [&](const TrainEvent& e) {
      steps.push_back(e.step);
      CHECK(std::isfinite(e.loss));
    };
    train(data, c, cb);
    CHECK(steps == std::vector<std::uint64_t>{1, 2, 3, 4, 5});
  }
}

TEST_CASE("short training beats the initialization on its views") {
  TrainingSet eight;
  eight.box = scene().train.box;
  for (std::size_t i = 0; i < 24; i += 3) eight.views.push_back(scene().train.views[i]);
  TrainConfig c = small_config();
  c.max_steps = 1500;
  c.batch_rays = 128;
  const double baseline = train_psnr(initial_checkpoint(c), eight);
  const double trained = train_psnr(train(eight, c), eight);
  MESSAGE("baseline " << baseline << " dB, trained " << trained << " dB");
  CHECK(trained >= baseline + 5.0);
}

TEST_CASE("random search") {
  const TrainingSet& data = scene().train;
  SearchSpace space;
  TrainConfig base = small_config();

  SUBCASE("sampled configurations stay in range") {
    std::mt19937_64 rng(4);
    std::set<int> levels;
    for (int i = 0; i < 200; ++i) {
      const TrainConfig c = sample_config(base, space, rng);
      CHECK(c.learning_rate >= space.learning_rate[0]);
      CHECK(c.learning_rate <= space.learning_rate[1]);
      CHECK(c.grid.table_size >= space.table_size[0]);
      CHECK(c.grid.table_size <= space.table_size[1]);
      CHECK(std::has_single_bit(c.grid.table_size));
      CHECK(c.grid.levels >= 8);
      CHECK(c.grid.levels <= 16);
      CHECK(c.samples >= 64);
      CHECK(c.samples <= 128);
      CHECK(c.batch_rays == base.batch_rays);
      levels.insert(c.grid.levels);
    }
    CHECK(levels.size() > 4);
  }

  SUBCASE("the best trial wins and decreases are flagged") {
    SearchOptions opt;
    opt.trials = 4;
    opt.seed = 11;
    int calls = 0;
    const SearchResult r = random_search(data, base, space, opt, [&](const TrainConfig& c) {
      ++calls;
      TrialOutcome o;
      o.psnr = 20.0 + 100.0 * c.learning_rate;
      o.checkpoint_psnr = {o.psnr + (calls == 2 ? 1.0 : -1.0)};
      return o;
    });
    CHECK(calls == 4);
    REQUIRE(r.trials.size() == 4);
    int best = 0;
    for (int i = 1; i < 4; ++i)
      if (r.trials[i].config.learning_rate > r.trials[best].config.learning_rate) best = i;
    CHECK(r.best_trial == best);
    CHECK(r.best == r.trials[best].config);
    CHECK(r.trials[1].psnr_decreased);
    CHECK_FALSE(r.trials[0].psnr_decreased);

    const std::string table = trial_table(r);
    CHECK(table.rfind("trial\tlearning_rate", 0) == 0);
    CHECK(std::count(table.begin(), table.end(), '\n') == 5);
    CHECK(table.find("psnr_decreased") != std::string::npos);
  }

  SUBCASE("failed trials are recorded and skipped") {
    SearchOptions opt;
    opt.trials = 3;
    int calls = 0;
    const SearchResult r = random_search(data, base, space, opt, [&](const TrainConfig&) -> TrialOutcome {
      if (++calls == 1) throw NumericalError("diverged");
      return {15.0, {}};
    });
    CHECK(r.best_trial == 1);
    CHECK(r.trials[0].error.find("diverged") != std::string::npos);
    CHECK(trial_table(r).find("nan") != std::string::npos);
  }

  SUBCASE("one trial with the default evaluator") {
    SearchOptions opt;
    opt.trials = 1;
    SearchSpace narrow;
    narrow.levels = {4, 4};
    narrow.samples = {16, 16};
    narrow.table_size = {1u << 10, 1u << 10};
    base.max_steps = 20;
    const SearchResult r = random_search(data, base, narrow, opt);
    CHECK(r.best_trial == 0);
    CHECK(std::isfinite(r.trials[0].outcome.psnr));
  }

  SUBCASE("bad input") {
    SearchOptions opt;
    opt.trials = 0;
    CHECK_THROWS_AS(random_search(data, base, space, opt, [](const TrainConfig&) { return TrialOutcome{}; }),
                    ConfigError);
    SearchSpace bad;
    bad.table_size = {1000, 1u << 14};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}
