#include "marf/pipeline.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "marf/error.hpp"
#include "marf/parallel.hpp"

#ifndef MARF_VERSION
#define MARF_VERSION "0.0.0"
#endif

namespace marf {

namespace fs = std::filesystem;

const char* version_string() { return MARF_VERSION; }

// --- fetch -----------------------------------------------------------------------

const char* to_string(FetchStatus status) {
  switch (status) {
    case FetchStatus::Fetched: return "fetched";
    case FetchStatus::Skipped: return "skipped";
    case FetchStatus::Failed: return "failed";
  }
  return "?";
}

std::size_t FetchReport::count(FetchStatus status) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const FetchRecord& r) { return r.status == status; }));
}

bool FetchReport::all_failed() const { return !records.empty() && count(FetchStatus::Failed) == records.size(); }

std::string FetchReport::to_table() const {
  std::string out = "status\tattempts\turl\tpath\tmessage\n";
  for (const auto& r : records) {
    out += std::string(to_string(r.status)) + "\t" + std::to_string(r.attempts) + "\t" + r.url + "\t" +
           r.path.string() + "\t" + r.message + "\n";
  }
  return out;
}

std::vector<std::string> read_url_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read URL manifest " + path.string());
  std::vector<std::string> urls;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    std::string url = line.substr(b, e - b + 1);
    if (url.rfind("http://", 0) != 0 && url.rfind("https://", 0) != 0) {
      throw ArgumentError(path.string() + ":" + std::to_string(line_no) + ": not an absolute http(s) URL: " + url);
    }
    urls.push_back(std::move(url));
  }
  return urls;
}

namespace {

struct UrlParts {
  std::string origin;  // scheme://host[:port]
  std::string target;  // path[?query]
};

UrlParts split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ArgumentError("not an absolute URL: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  UrlParts parts;
  parts.origin = url.substr(0, path_start);
  parts.target = path_start == std::string::npos ? "/" : url.substr(path_start);
  const auto hash = parts.target.find('#');
  if (hash != std::string::npos) parts.target.resize(hash);
  return parts;
}

bool retryable(int status) { return status == 408 || status == 429 || status >= 500; }

FetchRecord fetch_one(const std::string& url, const fs::path& dest, const FetchOptions& options) {
  FetchRecord rec;
  rec.url = url;
  const std::string name = url_basename(url);
  if (name.empty()) {
    rec.message = "URL has no file name";
    return rec;
  }
  rec.path = dest / name;
  UrlParts parts;
  try {
    parts = split_url(url);
  } catch (const ArgumentError& e) {
    rec.message = e.what();
    return rec;
  }

  const auto timeout = std::chrono::duration<double>(options.timeout_seconds);
  auto make_client = [&] {
    auto cli = std::make_unique<httplib::Client>(parts.origin);
    cli->set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    cli->set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    cli->set_follow_location(true);
    return cli;
  };

  std::error_code ec;
  if (fs::exists(rec.path, ec)) {
    auto cli = make_client();
    if (cli->is_valid()) {
      const auto head = cli->Head(parts.target);
      if (head && head->status == 200 && head->has_header("Content-Length")) {
        const auto remote = std::strtoull(head->get_header_value("Content-Length").c_str(), nullptr, 10);
        if (remote == fs::file_size(rec.path, ec) && !ec) {
          rec.status = FetchStatus::Skipped;
          rec.message = "present with matching size";
          return rec;
        }
      }
    }
  }

  const fs::path tmp = rec.path.string() + ".part";
  double backoff = options.backoff_seconds;
  for (int attempt = 1; attempt <= options.attempts; ++attempt) {
    rec.attempts = attempt;
    auto cli = make_client();
    if (!cli->is_valid()) {
      rec.message = "unsupported URL scheme";
      return rec;
    }
    bool transient = false;
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) {
        rec.message = "cannot write " + tmp.string();
        return rec;
      }
      int status = 0;
      const auto res = cli->Get(
          parts.target,
          [&](const httplib::Response& response) {
            status = response.status;
            return true;
          },
          [&](const char* data, std::size_t len) {
            if (status == 200) out.write(data, static_cast<std::streamsize>(len));
            return static_cast<bool>(out);
          });
      out.close();
      if (!res) {
        transient = true;
        rec.message = "network error: " + httplib::to_string(res.error());
      } else if (res->status == 200 && out) {
        fs::rename(tmp, rec.path, ec);
        if (ec) {
          rec.message = "cannot move download into place: " + ec.message();
          fs::remove(tmp, ec);
          return rec;
        }
        rec.status = FetchStatus::Fetched;
        rec.message.clear();
        return rec;
      } else if (retryable(res->status)) {
        transient = true;
        rec.message = "HTTP " + std::to_string(res->status);
      } else {
        rec.message = "HTTP " + std::to_string(res->status) + " (permanent)";
      }
    }
    fs::remove(tmp, ec);
    if (!transient) return rec;
    if (attempt < options.attempts) {
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      backoff *= 2.0;
    }
  }
  rec.message += " after " + std::to_string(rec.attempts) + " attempts";
  return rec;
}

}  // namespace

std::string url_basename(const std::string& url) {
  std::string path = url;
  const auto scheme_end = path.find("://");
  if (scheme_end != std::string::npos) {
    const auto slash = path.find('/', scheme_end + 3);
    path = slash == std::string::npos ? std::string() : path.substr(slash);
  }
  path = path.substr(0, path.find_first_of("?#"));
  const auto last = path.find_last_of('/');
  return last == std::string::npos ? path : path.substr(last + 1);
}

FetchReport fetch(const std::vector<std::string>& urls, const fs::path& dest, const FetchOptions& options) {
  if (options.concurrency < 1) throw ArgumentError("fetch concurrency must be >= 1");
  if (options.attempts < 1) throw ArgumentError("fetch attempts must be >= 1");
  FetchReport report;
  report.records.resize(urls.size());
  if (urls.empty()) return report;
  fs::create_directories(dest);
  std::atomic<std::size_t> next{0};
  const int workers = std::min<int>(options.concurrency, static_cast<int>(urls.size()));
  parallel_chunks(static_cast<std::size_t>(workers), workers, [&](std::size_t, std::size_t, int) {
    for (std::size_t i = next++; i < urls.size(); i = next++) report.records[i] = fetch_one(urls[i], dest, options);
  });
  return report;
}

// --- configuration ---------------------------------------------------------------

Budget parse_budget(const std::string& text) {
  Budget b;
  std::string t = text;
  if (t.empty()) throw ArgumentError("empty budget");
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::logic_error&) {
      throw ArgumentError("cannot parse budget '" + text + "'");
    }
    if (used != s.size() || !(v >= 0)) throw ArgumentError("cannot parse budget '" + text + "'");
    return v;
  };
  if (t.size() > 5 && t.substr(t.size() - 5) == "steps") t.resize(t.size() - 5);
  if (!t.empty() && std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    b.steps = std::stoull(t);
    return b;
  }
  const char unit = t.back();
  const double scale = unit == 's' ? 1.0 : unit == 'm' ? 60.0 : unit == 'h' ? 3600.0 : 0.0;
  if (scale == 0.0) throw ArgumentError("cannot parse budget '" + text + "' (use e.g. 300s, 5m or 2000)");
  b.seconds = number(t.substr(0, t.size() - 1)) * scale;
  return b;
}

void apply_budget(TrainConfig& config, const Budget& budget) {
  config.max_steps = budget.steps;
  config.max_seconds = budget.seconds;
}

void write_filter_config(const FilterConfig& c, KeyValueConfig& out, const std::string& section) {
  const std::string p = section + ".";
  out.set(p + "min_file_bytes", std::to_string(c.min_file_bytes));
  out.set(p + "min_width", std::to_string(c.min_width));
  out.set(p + "min_height", std::to_string(c.min_height));
  out.set(p + "phash_hamming_threshold", std::to_string(c.phash_hamming_threshold));
  out.set(p + "blur_threshold", format_double(c.blur_threshold));
  out.set(p + "histogram_std_multiplier", format_double(c.histogram_std_multiplier));
  out.set(p + "histogram_pixel_fraction", format_double(c.histogram_pixel_fraction));
}

FilterConfig read_filter_config(const KeyValueConfig& in, const std::string& section) {
  in.require_known(section, {"min_file_bytes", "min_width", "min_height", "phash_hamming_threshold",
                             "blur_threshold", "histogram_std_multiplier", "histogram_pixel_fraction"});
  const std::string p = section + ".";
  FilterConfig c;
  c.min_file_bytes = in.get_u64(p + "min_file_bytes", c.min_file_bytes);
  c.min_width = static_cast<int>(in.get_int(p + "min_width", c.min_width));
  c.min_height = static_cast<int>(in.get_int(p + "min_height", c.min_height));
  c.phash_hamming_threshold = static_cast<int>(in.get_int(p + "phash_hamming_threshold", c.phash_hamming_threshold));
  c.blur_threshold = in.get_double(p + "blur_threshold", c.blur_threshold);
  c.histogram_std_multiplier = in.get_double(p + "histogram_std_multiplier", c.histogram_std_multiplier);
  c.histogram_pixel_fraction = in.get_double(p + "histogram_pixel_fraction", c.histogram_pixel_fraction);
  return c;
}

PipelineConfig::PipelineConfig() { train.max_seconds = 300.0; }

void PipelineConfig::validate() const {
  filter.validate();
  train.validate();
  search.validate();
  if (search_trials < 1) throw ConfigError("search trials must be >= 1");
  if (!(heldout_fraction > 0 && heldout_fraction < 1)) throw ConfigError("held-out fraction must be in (0,1)");
  if (bootstrap.replicas < 1) throw ConfigError("bootstrap replicas must be >= 1");
}

PipelineConfig PipelineConfig::read(const KeyValueConfig& in) {
  for (const auto& [key, value] : in.values()) {
    const auto dot = key.find('.');
    const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    if (section != "workspace" && section != "filter" && section != "train" && section != "search" &&
        section != "bootstrap") {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  PipelineConfig c;
  in.require_known("workspace", {"path", "render_threads"});
  if (const auto p = in.get("workspace.path")) c.workspace = *p;
  c.render_threads = static_cast<int>(in.get_int("workspace.render_threads", c.render_threads));
  c.filter = read_filter_config(in);
  const TrainConfig defaults = c.train;
  c.train = TrainConfig::read(in);
  if (!c.train.max_steps && !c.train.max_seconds) c.train.max_seconds = defaults.max_seconds;
  c.search = SearchSpace::read(in);
  c.search_trials = static_cast<int>(in.get_int("search.trials", c.search_trials));
  c.heldout_fraction = in.get_double("search.heldout_fraction", c.heldout_fraction);
  in.require_known("bootstrap", {"replicas", "base_seed", "vary_seed", "resample_views", "concurrent"});
  c.bootstrap.replicas = static_cast<int>(in.get_int("bootstrap.replicas", c.bootstrap.replicas));
  c.bootstrap.base_seed = in.get_u64("bootstrap.base_seed", c.bootstrap.base_seed);
  c.bootstrap.vary_seed = in.get_bool("bootstrap.vary_seed", c.bootstrap.vary_seed);
  c.bootstrap.resample_views = in.get_bool("bootstrap.resample_views", c.bootstrap.resample_views);
  c.bootstrap.concurrent = static_cast<int>(in.get_int("bootstrap.concurrent", c.bootstrap.concurrent));
  return c;
}

KeyValueConfig PipelineConfig::to_config() const {
  KeyValueConfig out;
  out.set("workspace.path", workspace.string());
  out.set("workspace.render_threads", std::to_string(render_threads));
  write_filter_config(filter, out);
  train.write(out);
  search.write(out);
  out.set("search.trials", std::to_string(search_trials));
  out.set("search.heldout_fraction", format_double(heldout_fraction));
  out.set("bootstrap.replicas", std::to_string(bootstrap.replicas));
  out.set("bootstrap.base_seed", std::to_string(bootstrap.base_seed));
  out.set("bootstrap.vary_seed", bootstrap.vary_seed ? "true" : "false");
  out.set("bootstrap.resample_views", bootstrap.resample_views ? "true" : "false");
  out.set("bootstrap.concurrent", std::to_string(bootstrap.concurrent));
  return out;
}

fs::path resolve_workspace(const std::optional<fs::path>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("MARF_WORKSPACE"); env && *env) return env;
  return fs::current_path();
}

// --- run manifest ----------------------------------------------------------------

namespace {

std::string sanitize(std::string s) {
  std::replace(s.begin(), s.end(), '\t', ' ');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

std::string RunRecord::to_line() const {
  char secs[32];
  std::snprintf(secs, sizeof(secs), "%.3f", seconds);
  return "stage=" + sanitize(stage) + "\tstatus=" + sanitize(status) + "\tconfig=" + config_hash +
         "\tinputs=" + input_hash + "\toutputs=" + output_hash + "\tseed=" + std::to_string(seed) +
         "\tseconds=" + secs + "\tversion=" + sanitize(version) + "\tcommand=" + sanitize(command);
}

RunRecord RunRecord::parse(const std::string& line) {
  RunRecord r;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, '\t')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "stage") r.stage = value;
    else if (key == "status") r.status = value;
    else if (key == "config") r.config_hash = value;
    else if (key == "inputs") r.input_hash = value;
    else if (key == "outputs") r.output_hash = value;
    else if (key == "seed") r.seed = std::strtoull(value.c_str(), nullptr, 10);
    else if (key == "seconds") r.seconds = std::strtod(value.c_str(), nullptr);
    else if (key == "version") r.version = value;
    else if (key == "command") r.command = value;
  }
  return r;
}

void append_run_record(const fs::path& manifest, const RunRecord& record) {
  if (manifest.has_parent_path()) fs::create_directories(manifest.parent_path());
  std::ofstream out(manifest, std::ios::app);
  if (!out) throw IoError("cannot append to run manifest " + manifest.string());
  out << record.to_line() << "\n";
}

std::vector<RunRecord> read_run_records(const fs::path& manifest) {
  std::vector<RunRecord> out;
  std::ifstream in(manifest);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(RunRecord::parse(line));
  }
  return out;
}

std::string hash_files(const std::vector<fs::path>& files) {
  std::uint64_t h = fnv1a("files");
  for (const auto& f : files) {
    h = fnv1a(f.filename().string(), h);
    const std::uint64_t content = fnv1a_file(f);
    h = fnv1a({reinterpret_cast<const char*>(&content), sizeof(content)}, h);
  }
  return hex64(h);
}

// --- stages ----------------------------------------------------------------------

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::Filter: return "filter";
    case Stage::Train: return "train";
    case Stage::Render: return "render";
    case Stage::Bootstrap: return "bootstrap";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : {Stage::Filter, Stage::Train, Stage::Render, Stage::Bootstrap}) {
    if (name == to_string(s)) return s;
  }
  throw ArgumentError("unknown stage '" + name + "' (expected filter, train, render or bootstrap)");
}

std::vector<Stage> parse_stages(const std::string& comma_list) {
  std::vector<Stage> out;
  std::stringstream ss(comma_list);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) out.push_back(parse_stage(part));
  }
  if (out.empty()) throw ArgumentError("no stages given");
  return out;
}

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

struct StageJob {
  std::string config_text;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;  // checked for existence before skipping
  std::uint64_t seed = 0;
};

std::string section_text(const KeyValueConfig& all, const std::vector<std::string>& sections) {
  std::string out;
  for (const auto& s : sections) {
    for (const auto& [k, v] : all.section(s)) out += s + "." + k + "=" + v + "\n";
  }
  return out;
}

ViewSplit read_split(const fs::path& path, std::size_t views) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing view split " + path.string() + "; run the train stage first");
  ViewSplit split;
  std::string kind;
  std::size_t index = 0;
  while (in >> kind >> index) {
    if (index >= views) throw FormatError("view split refers to view " + std::to_string(index));
    (kind == "heldout" ? split.heldout : split.train).push_back(index);
  }
  return split;
}

}  // namespace

std::vector<RunRecord> run_pipeline(const PipelineConfig& config, const std::set<Stage>& stages,
                                    const std::string& command) {
  config.validate();
  const Workspace ws{config.workspace};
  const KeyValueConfig all = config.to_config();
  const auto history = read_run_records(ws.run_manifest());
  std::vector<RunRecord> records;

  auto scene_inputs = [&]() -> std::pair<SceneManifest, std::vector<fs::path>> {
    SceneManifest scene = read_scene_manifest(ws.scene_manifest());
    std::vector<fs::path> inputs{ws.scene_manifest()};
    for (const auto& e : scene.entries) inputs.push_back(e.image);
    return {scene, inputs};
  };
  auto require_scene = [&](Stage stage) {
    if (!fs::exists(ws.scene_manifest())) {
      throw ConfigError(std::string("stage '") + to_string(stage) + "' needs imported camera poses at " +
                        ws.scene_manifest().string() + "; run import-poses first");
    }
  };
  auto require_checkpoint = [&](Stage stage) {
    if (!fs::exists(ws.checkpoint()) || !fs::exists(ws.split_file())) {
      throw ConfigError(std::string("stage '") + to_string(stage) + "' needs a trained checkpoint at " +
                        ws.checkpoint().string() + "; run the train stage first");
    }
  };

  // Validate prerequisites up front so nothing runs when a later stage would fail.
  const bool train_requested = stages.count(Stage::Train) != 0;
  if (stages.count(Stage::Filter) && list_images(ws.raw_dir()).empty()) {
    throw ConfigError("stage 'filter' needs images in " + ws.raw_dir().string() + "; run fetch first");
  }
  if (train_requested) require_scene(Stage::Train);
  if (stages.count(Stage::Render)) {
    require_scene(Stage::Render);
    if (!train_requested) require_checkpoint(Stage::Render);
  }
  if (stages.count(Stage::Bootstrap)) require_scene(Stage::Bootstrap);

  auto run_stage = [&](Stage stage, StageJob job, const std::function<void()>& body) {
    RunRecord rec;
    rec.stage = to_string(stage);
    rec.config_hash = hex64(fnv1a(job.config_text));
    rec.input_hash = hash_files(job.inputs);
    rec.seed = job.seed;
    rec.version = version_string();
    rec.command = command;
    const RunRecord* last = nullptr;
    for (const auto& h : history) {
      if (h.stage == rec.stage && h.status == "ran") last = &h;
    }
    for (const auto& r : records) {
      if (r.stage == rec.stage && r.status == "ran") last = &r;
    }
    const bool outputs_present =
        std::all_of(job.outputs.begin(), job.outputs.end(), [](const fs::path& p) { return fs::exists(p); });
    if (last && last->config_hash == rec.config_hash && last->input_hash == rec.input_hash && outputs_present &&
        hash_files(job.outputs) == last->output_hash) {
      rec.status = "skipped";
      rec.output_hash = last->output_hash;
      spdlog::info("stage {}: inputs unchanged, skipping", rec.stage);
    } else {
      const auto t0 = std::chrono::steady_clock::now();
      body();
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      rec.status = "ran";
      rec.output_hash = hash_files(job.outputs);
    }
    append_run_record(ws.run_manifest(), rec);
    records.push_back(rec);
  };

  if (stages.count(Stage::Filter)) {
    const auto images = list_images(ws.raw_dir());
    StageJob job{section_text(all, {"filter"}), images,
                 {ws.filter_dir() / "report.tsv", ws.filter_dir() / "survivors.txt"}, 0};
    run_stage(Stage::Filter, job, [&] {
      const FilterReport report = run_filter_bank(images, config.filter, resolve_threads(config.render_threads));
      write_text(ws.filter_dir() / "report.tsv", report.to_key_value());
      std::string survivors;
      for (const auto& s : report.survivors()) survivors += s + "\n";
      write_text(ws.filter_dir() / "survivors.txt", survivors);
      spdlog::info("filter: {} of {} images kept", report.survivors().size(), report.verdicts.size());
    });
  }

  if (stages.count(Stage::Train)) {
    auto [scene, inputs] = scene_inputs();
    StageJob job{section_text(all, {"train"}) + "heldout_fraction=" + format_double(config.heldout_fraction), inputs,
                 {ws.checkpoint(), ws.split_file(), ws.train_dir() / "psnr.tsv"}, config.train.seed};
    run_stage(Stage::Train, job, [&] {
      const TrainingSet data = load_training_set(scene);
      const ViewSplit split = split_views(data.views.size(), config.heldout_fraction, config.train.seed);
      const TrainingSet train_set = data.subset(split.train);
      const TrainingSet heldout = data.subset(split.heldout);
      std::string split_text;
      for (auto i : split.train) split_text += "train " + std::to_string(i) + "\n";
      for (auto i : split.heldout) split_text += "heldout " + std::to_string(i) + "\n";
      std::string table = "seconds\tstep\theldout_psnr\n";
      TrainCallbacks cb;
      cb.on_checkpoint = [&](const Checkpoint& ck, double mark) {
        const double p = evaluate_psnr(ck, heldout, resolve_threads(config.render_threads));
        table += format_double(mark) + "\t" + std::to_string(ck.step) + "\t" + format_psnr(p) + "\n";
        spdlog::info("train: {:.0f}s step {} held-out PSNR {}", mark, ck.step, format_psnr(p));
      };
      const Checkpoint ck = train(train_set, config.train, cb);
      const double final_psnr = evaluate_psnr(ck, heldout, resolve_threads(config.render_threads));
      table += "final\t" + std::to_string(ck.step) + "\t" + format_psnr(final_psnr) + "\n";
      save_checkpoint(ck, ws.checkpoint());
      write_text(ws.split_file(), split_text);
      write_text(ws.train_dir() / "psnr.tsv", table);
    });
  }

  if (stages.count(Stage::Render)) {
    require_checkpoint(Stage::Render);
    auto [scene, inputs] = scene_inputs();
    inputs.push_back(ws.checkpoint());
    inputs.push_back(ws.split_file());
    const ViewSplit split = read_split(ws.split_file(), scene.entries.size());
    StageJob job{"render", inputs, {ws.render_dir() / "psnr.tsv"}, 0};
    for (std::size_t k = 0; k < split.heldout.size(); ++k) {
      char name[32];
      std::snprintf(name, sizeof(name), "heldout_%03zu.png", k);
      job.outputs.push_back(ws.render_dir() / name);
    }
    run_stage(Stage::Render, job, [&] {
      fs::create_directories(ws.render_dir());
      const TrainingSet data = load_training_set(scene);
      const Checkpoint ck = load_checkpoint(ws.checkpoint());
      RenderOptions options = ck.config.render_options();
      options.threads = resolve_threads(config.render_threads);
      std::string table = "view\tname\tpsnr\n";
      std::vector<ImageBuffer> truth, rendered;
      for (std::size_t k = 0; k < split.heldout.size(); ++k) {
        const auto& v = data.views[split.heldout[k]];
        const RenderedView r = render_view(ck.grid, ck.params, v.intrinsics, v.pose, data.box, options);
        save_image(r.image, job.outputs[k + 1]);
        table += std::to_string(split.heldout[k]) + "\t" + v.name + "\t" + format_psnr(psnr(v.image, r.image)) + "\n";
        truth.push_back(v.image);
        rendered.push_back(r.image);
      }
      table += "mean\t-\t" + format_psnr(scene_psnr(truth, rendered)) + "\n";
      write_text(ws.render_dir() / "psnr.tsv", table);
    });
  }

  if (stages.count(Stage::Bootstrap)) {
    auto [scene, inputs] = scene_inputs();
    StageJob job{section_text(all, {"train", "bootstrap"}), inputs, {ws.bootstrap_dir() / "failures.txt"},
                 config.bootstrap.base_seed};
    for (int b = 0; b < config.bootstrap.replicas; ++b) {
      char name[32];
      std::snprintf(name, sizeof(name), "replica_%03d.marf", b);
      job.outputs.push_back(ws.bootstrap_dir() / name);
    }
    run_stage(Stage::Bootstrap, job, [&] {
      const TrainingSet data = load_training_set(scene);
      const BootstrapSet set = bootstrap_train(data, config.train, config.bootstrap);
      fs::create_directories(ws.bootstrap_dir());
      for (std::size_t i = 0; i < set.size(); ++i) {
        save_checkpoint(set.checkpoints[i], job.outputs[static_cast<std::size_t>(set.replica[i]) + 1]);
      }
      std::string failures;
      for (const auto& f : set.failures) {
        failures += std::to_string(f.replica) + "\t" + std::to_string(f.seed) + "\t" + sanitize(f.message) + "\n";
      }
      write_text(ws.bootstrap_dir() / "failures.txt", failures);
      if (set.size() == 0) throw NumericalError("every bootstrap replica failed");
    });
  }
  return records;
}

}  // namespace marf
