#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "corpus.hpp"
#include "helpers.hpp"
#include "marf/error.hpp"
#include "marf/pipeline.hpp"
#include "synthetic.hpp"

// After the Eigen-based headers: resolv.h defines a _res macro.
#include <httplib.h>

using namespace marf;
namespace fs = std::filesystem;

namespace {

// Local HTTP server for fetch tests; serves /a.png, /b.png, /flaky.png
// (503 on the first request) and 404 elsewhere.
class StubServer {
 public:
  StubServer() {
    server_.Get("/a.png", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("AAAA", "image/png");
    });
    server_.Get("/b.png", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("BBBBBB", "image/png");
    });
    server_.Get("/flaky.png", [this](const httplib::Request& req, httplib::Response& res) {
      if (req.method == "GET" && flaky_hits_++ == 0) {
        res.status = 503;
        return;
      }
      res.set_content("FLAKY", "image/png");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port_) + path; }
  int flaky_hits() const { return flaky_hits_; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> flaky_hits_{0};
};

FetchOptions quick() {
  FetchOptions o;
  o.backoff_seconds = 0.01;
  o.timeout_seconds = 5;
  return o;
}

PipelineConfig small_pipeline(const fs::path& root) {
  PipelineConfig c;
  c.workspace = root;
  c.train.grid.levels = 4;
  c.train.grid.min_resolution = 4;
  c.train.grid.max_resolution = 32;
  c.train.grid.table_size = 1u << 10;
  c.train.field.hidden_width = 8;
  c.train.field.geo_features = 3;
  c.train.field.dir_frequencies = 1;
  c.train.batch_rays = 32;
  c.train.samples = 16;
  c.train.max_steps = 5;
  c.train.max_seconds.reset();
  c.train.deterministic = true;
  c.train.threads = 1;
  c.render_threads = 1;
  c.heldout_fraction = 0.25;
  c.bootstrap.replicas = 2;
  return c;
}

TrainingSet tiny_scene() {
  TrainingSet set = testing::circle_scene({}, 16).train;
  set.views.resize(6);
  return set;
}

}  // namespace

TEST_CASE("budget parsing") {
  CHECK(parse_budget("300s").seconds == 300.0);
  CHECK(parse_budget("5m").seconds == 300.0);
  CHECK(parse_budget("1.5m").seconds == 90.0);
  CHECK(parse_budget("1h").seconds == 3600.0);
  CHECK(parse_budget("2000").steps == 2000u);
  CHECK(parse_budget("150steps").steps == 150u);
  CHECK_FALSE(parse_budget("2000").seconds);
  for (const char* bad : {"", "fast", "10x", "-5s", "s", "steps", "1.5"}) {
    CHECK_THROWS_AS(parse_budget(bad), ArgumentError);
  }
  TrainConfig c;
  apply_budget(c, parse_budget("40steps"));
  CHECK(c.max_steps == 40u);
  CHECK_FALSE(c.max_seconds);
}

TEST_CASE("URL handling") {
  CHECK(url_basename("https://example.org/photos/IMG_1.jpg") == "IMG_1.jpg");
  CHECK(url_basename("http://host/a/b.png?size=large#top") == "b.png");
  CHECK(url_basename("http://host") == "");
  CHECK(url_basename("http://host/dir/") == "");

  test::TempDir dir;
  test::write_file(dir / "urls.txt", "# photos\nhttp://h/a.png\n\n  https://h/b.jpg  \n");
  CHECK(read_url_manifest(dir / "urls.txt") == std::vector<std::string>{"http://h/a.png", "https://h/b.jpg"});
  test::write_file(dir / "bad.txt", "http://h/a.png\nftp://h/b.png\n");
  try {
    read_url_manifest(dir / "bad.txt");
    FAIL("expected ArgumentError");
  } catch (const ArgumentError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  CHECK_THROWS_AS(read_url_manifest(dir / "none.txt"), IoError);
}

TEST_CASE("fetching from a local server") {
  StubServer server;
  test::TempDir dir;

  SUBCASE("successes and a permanent failure") {
    const FetchReport r =
        fetch({server.url("/a.png"), server.url("/missing.png"), server.url("/b.png")}, dir / "raw", quick());
    REQUIRE(r.records.size() == 3);
    CHECK(r.count(FetchStatus::Fetched) == 2);
    CHECK(r.count(FetchStatus::Failed) == 1);
    CHECK(r.records[1].attempts == 1);
    CHECK(r.records[1].message.find("404") != std::string::npos);
    CHECK_FALSE(r.all_failed());
    CHECK(test::read_file(dir / "raw" / "a.png") == "AAAA");
    CHECK(test::read_file(dir / "raw" / "b.png") == "BBBBBB");
    CHECK_FALSE(fs::exists(dir / "raw" / "missing.png"));
    CHECK_FALSE(fs::exists(dir / "raw" / "missing.png.part"));
    const std::string table = r.to_table();
    CHECK(table.find("fetched") != std::string::npos);
    CHECK(table.find("failed") != std::string::npos);

    SUBCASE("a second run skips files with matching size") {
      const FetchReport again = fetch({server.url("/a.png")}, dir / "raw", quick());
      CHECK(again.records[0].status == FetchStatus::Skipped);
      test::write_file(dir / "raw" / "b.png", "short");
      const FetchReport changed = fetch({server.url("/b.png")}, dir / "raw", quick());
      CHECK(changed.records[0].status == FetchStatus::Fetched);
      CHECK(test::read_file(dir / "raw" / "b.png") == "BBBBBB");
    }
  }

  SUBCASE("transient errors are retried") {
    const FetchReport r = fetch({server.url("/flaky.png")}, dir / "raw", quick());
    CHECK(r.records[0].status == FetchStatus::Fetched);
    CHECK(r.records[0].attempts == 2);
    CHECK(server.flaky_hits() == 2);
  }

  SUBCASE("unreachable host fails after every attempt") {
    FetchOptions o = quick();
    o.attempts = 2;
    o.timeout_seconds = 1;
    const FetchReport r = fetch({"http://127.0.0.1:1/x.png"}, dir / "raw", o);
    CHECK(r.records[0].status == FetchStatus::Failed);
    CHECK(r.records[0].attempts == 2);
    CHECK(r.all_failed());
  }

  SUBCASE("empty manifest") {
    const FetchReport r = fetch({}, dir / "raw", quick());
    CHECK(r.records.empty());
    CHECK_FALSE(r.all_failed());
  }
}

TEST_CASE("run records") {
  RunRecord r;
  r.stage = "train";
  r.status = "ran";
  r.config_hash = "0123456789abcdef";
  r.input_hash = "fedcba9876543210";
  r.output_hash = "00000000000000ff";
  r.seed = 42;
  r.seconds = 1.25;
  r.version = version_string();
  r.command = "marf run\t--stages train";
  const RunRecord back = RunRecord::parse(r.to_line());
  CHECK(back.stage == r.stage);
  CHECK(back.config_hash == r.config_hash);
  CHECK(back.output_hash == r.output_hash);
  CHECK(back.seed == 42);
  CHECK(back.seconds == 1.25);
  CHECK(back.command == "marf run --stages train");

  test::TempDir dir;
  append_run_record(dir / "sub" / "log", r);
  append_run_record(dir / "sub" / "log", back);
  CHECK(read_run_records(dir / "sub" / "log").size() == 2);
  CHECK(read_run_records(dir / "absent").empty());

  test::write_file(dir / "x", "1");
  test::write_file(dir / "y", "2");
  CHECK(hash_files({dir / "x", dir / "y"}) != hash_files({dir / "y", dir / "x"}));
  CHECK(hash_files({dir / "x"}) == hash_files({dir / "x"}));
  CHECK(hash_files({}).size() == 16);
}

TEST_CASE("stage names") {
  CHECK(parse_stages("train,render") == std::vector<Stage>{Stage::Train, Stage::Render});
  CHECK(parse_stage("bootstrap") == Stage::Bootstrap);
  CHECK_THROWS_AS(parse_stage("fetch"), ArgumentError);
  CHECK_THROWS_AS(parse_stages(""), ArgumentError);
}

TEST_CASE("pipeline configuration") {
  PipelineConfig c;
  CHECK(c.train.max_seconds == 300.0);
  c.search_trials = 3;
  c.filter.blur_threshold = 123.5;
  c.train.learning_rate = 0.02;
  c.bootstrap.replicas = 7;
  const PipelineConfig back = PipelineConfig::read(KeyValueConfig::parse(c.to_config().to_text()));
  CHECK(back.search_trials == 3);
  CHECK(back.filter.blur_threshold == 123.5);
  CHECK(back.train == c.train);
  CHECK(back.bootstrap.replicas == 7);
  CHECK_THROWS_AS(PipelineConfig::read(KeyValueConfig::parse("[nonsense]\nx = 1\n")), ConfigError);
  // Reading does not validate, since command-line flags may still override values.
  const PipelineConfig zero = PipelineConfig::read(KeyValueConfig::parse("[bootstrap]\nreplicas = 0\n"));
  CHECK_THROWS_AS(zero.validate(), ConfigError);

  CHECK(resolve_workspace(fs::path("/given")) == "/given");
  ::setenv("MARF_WORKSPACE", "/from/env", 1);
  CHECK(resolve_workspace(std::nullopt) == "/from/env");
  ::unsetenv("MARF_WORKSPACE");
  CHECK(resolve_workspace(std::nullopt) == fs::current_path());
}

TEST_CASE("pipeline prerequisites") {
  test::TempDir dir;
  const PipelineConfig c = small_pipeline(dir.path());
  try {
    run_pipeline(c, {Stage::Filter});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("fetch") != std::string::npos);
  }
  CHECK_THROWS_AS(run_pipeline(c, {Stage::Train}), ConfigError);
  testing::write_scene(tiny_scene(), dir / "scene");
  try {
    run_pipeline(c, {Stage::Render});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train") != std::string::npos);
  }
  CHECK_FALSE(fs::exists(Workspace{dir.path()}.run_manifest()));
}

TEST_CASE("filter stage on the designed corpus") {
  test::TempDir dir;
  const auto corpus = testing::build_filter_corpus(dir / "raw");
  const auto records = run_pipeline(small_pipeline(dir.path()), {Stage::Filter});
  REQUIRE(records.size() == 1);
  CHECK(records[0].status == "ran");
  const std::string survivors = test::read_file(dir / "filter" / "survivors.txt");
  std::size_t expected = 0;
  for (const auto& e : corpus) expected += !e.expected;
  CHECK(static_cast<std::size_t>(std::count(survivors.begin(), survivors.end(), '\n')) == expected);
}

TEST_CASE("full run is idempotent") {
  test::TempDir dir;
  testing::write_scene(tiny_scene(), dir / "scene");
  const PipelineConfig c = small_pipeline(dir.path());
  const std::set<Stage> stages{Stage::Train, Stage::Render, Stage::Bootstrap};
  const auto first = run_pipeline(c, stages);
  REQUIRE(first.size() == 3);
  for (const auto& r : first) CHECK(r.status == "ran");
  const Workspace ws{dir.path()};
  const std::string checkpoint = test::read_file(ws.checkpoint());
  const std::string psnr = test::read_file(ws.render_dir() / "psnr.tsv");
  CHECK(fs::exists(ws.bootstrap_dir() / "replica_001.marf"));
  CHECK(fs::exists(ws.render_dir() / "heldout_000.png"));

  const auto second = run_pipeline(c, stages);
  for (const auto& r : second) CHECK(r.status == "skipped");
  CHECK(test::read_file(ws.checkpoint()) == checkpoint);
  CHECK(test::read_file(ws.render_dir() / "psnr.tsv") == psnr);
  CHECK(read_run_records(ws.run_manifest()).size() == 6);

  SUBCASE("a config change reruns the stage and what depends on it") {
    PipelineConfig changed = c;
    changed.train.max_steps = 6;
    const auto third = run_pipeline(changed, {Stage::Train, Stage::Render});
    CHECK(third[0].status == "ran");
    CHECK(third[1].status == "ran");
  }
  SUBCASE("a deleted output is rebuilt") {
    fs::remove(ws.render_dir() / "heldout_000.png");
    const auto again = run_pipeline(c, {Stage::Render});
    CHECK(again[0].status == "ran");
    CHECK(fs::exists(ws.render_dir() / "heldout_000.png"));
  }
}
