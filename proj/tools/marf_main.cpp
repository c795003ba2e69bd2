// marf: command-line front end for the reconstruction pipeline.
//
// Exit codes: 0 success, 1 user or configuration error, 2 internal or
// numerical error.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "marf/camera.hpp"
#include "marf/config.hpp"
#include "marf/error.hpp"
#include "marf/filters.hpp"
#include "marf/parallel.hpp"
#include "marf/pipeline.hpp"
#include "marf/renderer.hpp"
#include "marf/trainer.hpp"
#include "marf/uncertainty.hpp"

namespace fs = std::filesystem;
using namespace marf;

namespace {

struct GlobalOptions {
  std::optional<fs::path> config_file;
  std::optional<fs::path> workspace;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::optional<std::string> budget;
  std::optional<std::string> background;
  std::optional<int> threads;
  bool verbose = false;
  bool quiet = false;
};

struct FilterOverrides {
  std::optional<std::uintmax_t> min_bytes;
  std::optional<int> min_width, min_height, hash_threshold;
  std::optional<double> blur_threshold, saturation_k, saturation_fraction;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--min-bytes", min_bytes, "Reject files smaller than this many bytes");
    cmd->add_option("--min-width", min_width, "Reject images narrower than this");
    cmd->add_option("--min-height", min_height, "Reject images shorter than this");
    cmd->add_option("--hash-threshold", hash_threshold, "Hamming distance below which images are duplicates");
    cmd->add_option("--blur-threshold", blur_threshold, "Minimum Laplacian variance (0-255 scale)");
    cmd->add_option("--saturation-k", saturation_k, "Saturation outlier band, in standard deviations");
    cmd->add_option("--saturation-fraction", saturation_fraction, "Outlier pixel fraction that rejects an image");
  }
  void apply(FilterConfig& c) const {
    if (min_bytes) c.min_file_bytes = *min_bytes;
    if (min_width) c.min_width = *min_width;
    if (min_height) c.min_height = *min_height;
    if (hash_threshold) c.phash_hamming_threshold = *hash_threshold;
    if (blur_threshold) c.blur_threshold = *blur_threshold;
    if (saturation_k) c.histogram_std_multiplier = *saturation_k;
    if (saturation_fraction) c.histogram_pixel_fraction = *saturation_fraction;
  }
};

PipelineConfig effective_config(const GlobalOptions& g) {
  PipelineConfig c;
  std::optional<fs::path> config_workspace;
  if (g.config_file) {
    const KeyValueConfig kv = KeyValueConfig::load(*g.config_file);
    c = PipelineConfig::read(kv);
    if (kv.contains("workspace.path")) config_workspace = c.workspace;
  }
  c.workspace = g.workspace ? *g.workspace : config_workspace ? *config_workspace : resolve_workspace(std::nullopt);
  if (g.seed) {
    c.train.seed = *g.seed;
    c.bootstrap.base_seed = *g.seed;
  }
  if (g.deterministic) c.train.deterministic = true;
  if (g.budget) apply_budget(c.train, parse_budget(*g.budget));
  if (c.train.deterministic && !c.train.max_steps) {
    throw ConfigError("--deterministic needs a step budget, e.g. --budget 2000");
  }
  if (g.background) c.train.background = parse_triplet(*g.background);
  if (g.threads) {
    c.train.threads = *g.threads;
    c.render_threads = *g.threads;
  }
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

std::string joined_command(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) out += (i ? " " : "") + std::string(argv[i]);
  return out;
}

/// Stores the effective configuration under runs/ and logs the invocation.
void record_run(const PipelineConfig& c, const std::string& stage, const std::vector<fs::path>& inputs,
                const std::vector<fs::path>& outputs, double seconds, const std::string& command) {
  const std::string text = c.to_config().to_text();
  const Workspace ws{c.workspace};
  RunRecord rec;
  rec.stage = stage;
  rec.status = "ran";
  rec.config_hash = hex64(fnv1a(text));
  std::vector<fs::path> existing_inputs, existing_outputs;
  for (const auto& p : inputs) {
    if (fs::is_regular_file(p)) existing_inputs.push_back(p);
  }
  for (const auto& p : outputs) {
    if (fs::is_regular_file(p)) existing_outputs.push_back(p);
  }
  rec.input_hash = hash_files(existing_inputs);
  rec.output_hash = hash_files(existing_outputs);
  rec.seed = c.train.seed;
  rec.seconds = seconds;
  rec.version = version_string();
  rec.command = command;
  const fs::path config_copy = ws.root / "runs" / (rec.config_hash + ".conf");
  if (!fs::exists(config_copy)) write_text(config_copy, text);
  append_run_record(ws.run_manifest(), rec);
}

std::vector<fs::path> scene_files(const fs::path& manifest) {
  std::vector<fs::path> out{manifest};
  for (const auto& e : read_scene_manifest(manifest).entries) out.push_back(e.image);
  return out;
}

std::vector<fs::path> replica_files(const fs::path& dir) {
  std::vector<fs::path> out;
  if (fs::is_directory(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("replica_", 0) == 0 && e.path().extension() == ".marf") out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> parse_indices(const std::string& list, std::size_t count) {
  std::vector<std::size_t> out;
  if (list.empty()) {
    for (std::size_t i = 0; i < count; ++i) out.push_back(i);
    return out;
  }
  std::stringstream ss(list);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(part, &used);
    } catch (const std::logic_error&) {
      throw ArgumentError("bad view index '" + part + "'");
    }
    if (used != part.size() || v >= count) throw ArgumentError("view index '" + part + "' out of range");
    out.push_back(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"marf: view synthesis from calibrated image collections"};
  app.set_version_flag("--version", std::string(version_string()));
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  app.add_option("--config", g.config_file, "key = value configuration file")->check(CLI::ExistingFile);
  app.add_option("--workspace", g.workspace, "Workspace directory (default: $MARF_WORKSPACE or .)");
  app.add_option("--seed", g.seed, "Seed for initialization and sampling");
  app.add_flag("--deterministic", g.deterministic, "Single-threaded, bit-reproducible training");
  app.add_option("--budget", g.budget, "Training budget: 300s, 5m, 1h or a step count");
  app.add_option("--background", g.background, "Background color r,g,b in [0,1]");
  app.add_option("--threads", g.threads, "Worker threads (0: all cores)");
  app.add_flag("-v,--verbose", g.verbose, "Debug logging");
  app.add_flag("-q,--quiet", g.quiet, "Warnings and errors only");

  // fetch
  auto* fetch_cmd = app.add_subcommand("fetch", "Download images listed in a URL manifest");
  fs::path fetch_manifest;
  std::optional<fs::path> fetch_dest;
  FetchOptions fetch_options;
  fetch_cmd->add_option("manifest", fetch_manifest, "Text file with one URL per line")->required();
  fetch_cmd->add_option("--dest", fetch_dest, "Destination directory (default: <workspace>/raw)");
  fetch_cmd->add_option("--concurrency", fetch_options.concurrency, "Parallel downloads")->capture_default_str();
  fetch_cmd->add_option("--attempts", fetch_options.attempts, "Attempts per URL")->capture_default_str();
  fetch_cmd->add_option("--backoff", fetch_options.backoff_seconds, "First retry delay in seconds")
      ->capture_default_str();

  // filter
  auto* filter_cmd = app.add_subcommand("filter", "Run the image filter bank");
  std::optional<fs::path> filter_input, filter_output;
  FilterOverrides filter_overrides;
  filter_cmd->add_option("--input", filter_input, "Image directory or path manifest (default: <workspace>/raw)");
  filter_cmd->add_option("--output", filter_output, "Report directory (default: <workspace>/filter)");
  filter_overrides.add_to(filter_cmd);

  // import-poses
  auto* import_cmd = app.add_subcommand("import-poses", "Import a COLMAP text model as a scene manifest");
  fs::path colmap_dir;
  std::optional<fs::path> import_images, import_output;
  bool no_normalize = false;
  import_cmd->add_option("model", colmap_dir, "Directory with cameras.txt and images.txt")->required();
  import_cmd->add_option("--images", import_images, "Image directory (default: the model directory)");
  import_cmd->add_option("--output", import_output, "Manifest path (default: <workspace>/scene/scene.marf)");
  import_cmd->add_flag("--no-normalize", no_normalize, "Keep the original world frame");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a field on a scene");
  std::optional<fs::path> train_scene, train_output;
  double train_holdout = 0.0;
  train_cmd->add_option("--scene", train_scene, "Scene manifest (default: <workspace>/scene/scene.marf)");
  train_cmd->add_option("--output", train_output, "Checkpoint path (default: <workspace>/train/checkpoint.marf)");
  train_cmd->add_option("--holdout", train_holdout, "Fraction of views held out and scored at checkpoints")
      ->check(CLI::Range(0.0, 0.9));

  // render
  auto* render_cmd = app.add_subcommand("render", "Render scene viewpoints from a checkpoint");
  std::optional<fs::path> render_ckpt, render_scene, render_output;
  std::string render_views_list;
  std::optional<int> render_samples;
  bool render_opacity = false;
  render_cmd->add_option("--checkpoint", render_ckpt, "Checkpoint (default: <workspace>/train/checkpoint.marf)");
  render_cmd->add_option("--scene", render_scene, "Scene manifest supplying the viewpoints");
  render_cmd->add_option("--views", render_views_list, "Comma-separated view indices (default: all)");
  render_cmd->add_option("--output", render_output, "Output directory (default: <workspace>/render)");
  render_cmd->add_option("--samples", render_samples, "Samples per ray (default: from the checkpoint)");
  render_cmd->add_flag("--opacity", render_opacity, "Also write per-pixel opacity images");

  // psnr
  auto* psnr_cmd = app.add_subcommand("psnr", "PSNR between image pairs (truth rendered ...)");
  std::vector<fs::path> psnr_files;
  psnr_cmd->add_option("images", psnr_files, "Pairs of images")->required()->check(CLI::ExistingFile);

  // search
  auto* search_cmd = app.add_subcommand("search", "Random hyper-parameter search");
  std::optional<fs::path> search_scene, search_output;
  std::optional<int> search_trials;
  search_cmd->add_option("--scene", search_scene, "Scene manifest (default: <workspace>/scene/scene.marf)");
  search_cmd->add_option("--trials", search_trials, "Number of trials");
  search_cmd->add_option("--output", search_output, "Output directory (default: <workspace>/search)");

  // bootstrap
  auto* boot_cmd = app.add_subcommand("bootstrap", "Train bootstrap replicas");
  std::optional<fs::path> boot_scene, boot_output;
  std::optional<int> boot_replicas, boot_concurrent;
  bool boot_resample = false, boot_same_seed = false;
  boot_cmd->add_option("--scene", boot_scene, "Scene manifest (default: <workspace>/scene/scene.marf)");
  boot_cmd->add_option("--replicas", boot_replicas, "Replica count B");
  boot_cmd->add_option("--concurrent", boot_concurrent, "Replicas trained at once");
  boot_cmd->add_option("--output", boot_output, "Output directory (default: <workspace>/bootstrap)");
  boot_cmd->add_flag("--resample-views", boot_resample, "Redraw training views with replacement per replica");
  boot_cmd->add_flag("--same-seed", boot_same_seed, "Use the base seed for every replica");

  // flythrough
  auto* fly_cmd = app.add_subcommand("flythrough", "Mean and uncertainty frames along a camera path");
  std::optional<fs::path> fly_replicas, fly_scene, fly_output, fly_poses;
  std::size_t fly_from = 0;
  std::optional<std::size_t> fly_to;
  int fly_frames = 30;
  std::optional<int> fly_samples;
  fly_cmd->add_option("--replicas", fly_replicas, "Directory of replica_*.marf (default: <workspace>/bootstrap)");
  fly_cmd->add_option("--scene", fly_scene, "Scene manifest (default: <workspace>/scene/scene.marf)");
  fly_cmd->add_option("--poses", fly_poses, "Scene manifest whose views form the path, in order");
  fly_cmd->add_option("--from", fly_from, "Start view index for an interpolated path");
  fly_cmd->add_option("--to", fly_to, "End view index (default: last view)");
  fly_cmd->add_option("--frames", fly_frames, "Frames along the interpolated path")->capture_default_str();
  fly_cmd->add_option("--samples", fly_samples, "Samples per ray (default: from the checkpoints)");
  fly_cmd->add_option("--output", fly_output, "Frame directory (default: <workspace>/flythrough)");

  // run
  auto* run_cmd = app.add_subcommand("run", "Run pipeline stages with per-stage caching");
  std::string run_stages = "filter,train,render,bootstrap";
  FilterOverrides run_overrides;
  run_cmd->add_option("--stages", run_stages, "Comma-separated subset of filter,train,render,bootstrap")
      ->capture_default_str();
  run_overrides.add_to(run_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  spdlog::set_level(g.verbose ? spdlog::level::debug : g.quiet ? spdlog::level::warn : spdlog::level::info);
  const std::string command = joined_command(argc, argv);

  try {
    PipelineConfig cfg = effective_config(g);
    const Workspace ws{cfg.workspace};
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

    if (*fetch_cmd) {
      const auto urls = read_url_manifest(fetch_manifest);
      const fs::path dest = fetch_dest.value_or(ws.raw_dir());
      const FetchReport report = fetch(urls, dest, fetch_options);
      std::cout << report.to_table();
      write_text(ws.root / "fetch_report.tsv", report.to_table());
      std::vector<fs::path> outputs;
      for (const auto& r : report.records) outputs.push_back(r.path);
      record_run(cfg, "fetch", {fetch_manifest}, outputs, elapsed(), command);
      spdlog::info("fetch: {} fetched, {} skipped, {} failed", report.count(FetchStatus::Fetched),
                   report.count(FetchStatus::Skipped), report.count(FetchStatus::Failed));
      return report.all_failed() ? 1 : 0;
    }

    if (*filter_cmd) {
      filter_overrides.apply(cfg.filter);
      cfg.filter.validate();
      const fs::path input = filter_input.value_or(ws.raw_dir());
      std::vector<fs::path> images;
      if (fs::is_directory(input)) {
        for (const auto& e : fs::directory_iterator(input)) {
          std::string ext = e.path().extension().string();
          std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
          if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) images.push_back(e.path());
        }
        std::sort(images.begin(), images.end());
      } else {
        images = read_path_manifest(input);
      }
      const FilterReport report = run_filter_bank(images, cfg.filter, resolve_threads(cfg.render_threads));
      const fs::path out = filter_output.value_or(ws.filter_dir());
      write_text(out / "report.tsv", report.to_key_value());
      std::string survivors;
      for (const auto& s : report.survivors()) survivors += s + "\n";
      write_text(out / "survivors.txt", survivors);
      std::cout << report.to_table();
      record_run(cfg, "filter", images, {out / "report.tsv", out / "survivors.txt"}, elapsed(), command);
      return 0;
    }

    if (*import_cmd) {
      SceneManifest scene = import_colmap(colmap_dir, import_images);
      if (!no_normalize) scene = normalize_scene(scene);
      const fs::path out = import_output.value_or(ws.scene_manifest());
      write_scene_manifest(scene, out);
      spdlog::info("imported {} views into {}", scene.entries.size(), out.string());
      record_run(cfg, "import-poses", {colmap_dir / "cameras.txt", colmap_dir / "images.txt"}, {out}, elapsed(),
                 command);
      return 0;
    }

    if (*train_cmd) {
      const fs::path scene_path = train_scene.value_or(ws.scene_manifest());
      const TrainingSet data = load_training_set(read_scene_manifest(scene_path));
      TrainingSet train_set = data, heldout;
      TrainCallbacks cb;
      if (train_holdout > 0.0) {
        const ViewSplit split = split_views(data.views.size(), train_holdout, cfg.train.seed);
        train_set = data.subset(split.train);
        heldout = data.subset(split.heldout);
        cb.on_checkpoint = [&](const Checkpoint& ck, double mark) {
          const double p = evaluate_psnr(ck, heldout, resolve_threads(cfg.render_threads));
          std::printf("%.0fs\tstep %llu\theld-out PSNR %s\n", mark, static_cast<unsigned long long>(ck.step),
                      format_psnr(p).c_str());
        };
      }
      const Checkpoint ck = train(train_set, cfg.train, cb);
      const fs::path out = train_output.value_or(ws.checkpoint());
      save_checkpoint(ck, out);
      std::printf("steps %llu\ttraining PSNR %s\n", static_cast<unsigned long long>(ck.step),
                  format_psnr(ck.running_psnr).c_str());
      if (train_holdout > 0.0) {
        std::printf("final held-out PSNR %s\n",
                    format_psnr(evaluate_psnr(ck, heldout, resolve_threads(cfg.render_threads))).c_str());
      }
      record_run(cfg, "train", scene_files(scene_path), {out}, elapsed(), command);
      return 0;
    }

    if (*render_cmd) {
      const fs::path ckpt_path = render_ckpt.value_or(ws.checkpoint());
      const fs::path scene_path = render_scene.value_or(ws.scene_manifest());
      const Checkpoint ck = load_checkpoint(ckpt_path);
      const SceneManifest scene = read_scene_manifest(scene_path);
      RenderOptions options = ck.config.render_options();
      if (render_samples) options.samples = *render_samples;
      options.threads = cfg.train.deterministic ? 1 : resolve_threads(cfg.render_threads);
      const fs::path out = render_output.value_or(ws.render_dir());
      std::vector<fs::path> outputs;
      for (std::size_t i : parse_indices(render_views_list, scene.entries.size())) {
        const auto& e = scene.entries[i];
        const RenderedView view = render_view(ck.grid, ck.params, e.intrinsics, e.pose, scene.aabb, options);
        char name[48];
        std::snprintf(name, sizeof(name), "view_%03zu.png", i);
        outputs.push_back(out / name);
        fs::create_directories(out);
        save_image(view.image, outputs.back());
        if (render_opacity) {
          std::snprintf(name, sizeof(name), "opacity_%03zu.png", i);
          outputs.push_back(out / name);
          save_image(view.opacity, outputs.back());
        }
      }
      spdlog::info("rendered {} images into {}", outputs.size(), out.string());
      record_run(cfg, "render", {ckpt_path, scene_path}, outputs, elapsed(), command);
      return 0;
    }

    if (*psnr_cmd) {
      if (psnr_files.size() % 2 != 0) throw ArgumentError("psnr expects pairs of images");
      std::vector<ImageBuffer> truth, rendered;
      for (std::size_t i = 0; i < psnr_files.size(); i += 2) {
        truth.push_back(load_image(psnr_files[i]));
        rendered.push_back(load_image(psnr_files[i + 1]));
        std::printf("%s\t%s\t%s\n", psnr_files[i].string().c_str(), psnr_files[i + 1].string().c_str(),
                    format_psnr(psnr(truth.back(), rendered.back())).c_str());
      }
      if (truth.size() > 1) std::printf("mean\t%s\n", format_psnr(scene_psnr(truth, rendered)).c_str());
      record_run(cfg, "psnr", psnr_files, {}, elapsed(), command);
      return 0;
    }

    if (*search_cmd) {
      const fs::path scene_path = search_scene.value_or(ws.scene_manifest());
      const TrainingSet data = load_training_set(read_scene_manifest(scene_path));
      SearchOptions options;
      options.trials = search_trials.value_or(cfg.search_trials);
      options.seed = cfg.train.seed;
      options.heldout_fraction = cfg.heldout_fraction;
      options.render_threads = resolve_threads(cfg.render_threads);
      const SearchResult result = random_search(data, cfg.train, cfg.search, options);
      const fs::path out = search_output.value_or(ws.root / "search");
      write_text(out / "trials.tsv", trial_table(result));
      KeyValueConfig best;
      result.best.write(best);
      write_text(out / "best.conf", best.to_text());
      std::cout << trial_table(result);
      std::printf("best trial %d: held-out PSNR %s\n", result.best_trial,
                  format_psnr(result.trials[static_cast<std::size_t>(result.best_trial)].outcome.psnr).c_str());
      record_run(cfg, "search", scene_files(scene_path), {out / "trials.tsv", out / "best.conf"}, elapsed(),
                 command);
      return 0;
    }

    if (*boot_cmd) {
      const fs::path scene_path = boot_scene.value_or(ws.scene_manifest());
      const TrainingSet data = load_training_set(read_scene_manifest(scene_path));
      if (boot_replicas) cfg.bootstrap.replicas = *boot_replicas;
      if (boot_concurrent) cfg.bootstrap.concurrent = *boot_concurrent;
      if (boot_resample) cfg.bootstrap.resample_views = true;
      if (boot_same_seed) cfg.bootstrap.vary_seed = false;
      const fs::path out = boot_output.value_or(ws.bootstrap_dir());
      fs::create_directories(out);
      std::vector<fs::path> outputs;
      const BootstrapSet set = bootstrap_train(data, cfg.train, cfg.bootstrap, [&](int b, const Checkpoint& ck) {
        char name[32];
        std::snprintf(name, sizeof(name), "replica_%03d.marf", b);
        save_checkpoint(ck, out / name);
        outputs.push_back(out / name);
        spdlog::info("replica {} done ({} steps)", b, ck.step);
      });
      std::string failures;
      for (const auto& f : set.failures) failures += std::to_string(f.replica) + "\t" + std::to_string(f.seed) + "\t" + f.message + "\n";
      write_text(out / "failures.txt", failures);
      std::sort(outputs.begin(), outputs.end());
      record_run(cfg, "bootstrap", scene_files(scene_path), outputs, elapsed(), command);
      if (set.size() == 0) throw NumericalError("every bootstrap replica failed");
      return 0;
    }

    if (*fly_cmd) {
      const fs::path scene_path = fly_scene.value_or(ws.scene_manifest());
      const SceneManifest scene = read_scene_manifest(scene_path);
      const auto files = replica_files(fly_replicas.value_or(ws.bootstrap_dir()));
      if (files.empty()) throw ConfigError("no replica_*.marf checkpoints found; run bootstrap first");
      std::vector<Checkpoint> replicas;
      for (const auto& f : files) replicas.push_back(load_checkpoint(f));
      std::vector<Viewpoint> path;
      if (fly_poses) {
        for (const auto& e : read_scene_manifest(*fly_poses).entries) path.push_back({e.intrinsics, e.pose});
      } else {
        if (scene.entries.empty()) throw ConfigError("scene has no views to build a path from");
        const std::size_t to = fly_to.value_or(scene.entries.size() - 1);
        if (fly_from >= scene.entries.size() || to >= scene.entries.size()) {
          throw ArgumentError("path endpoints out of range");
        }
        const auto& a = scene.entries[fly_from];
        for (const Pose& p : interpolate_path(a.pose, scene.entries[to].pose, fly_frames)) {
          path.push_back({a.intrinsics, p});
        }
      }
      if (path.empty()) throw ArgumentError("empty camera path");
      const auto stacks = render_replicas(replicas, path, scene.aabb, fly_samples, resolve_threads(cfg.render_threads));
      std::vector<UncertaintyMap> maps;
      for (const auto& s : stacks) maps.push_back(uncertainty_map(s));
      const fs::path out = fly_output.value_or(ws.root / "flythrough");
      const FlythroughFrames frames = write_flythrough(maps, out);
      spdlog::info("wrote {} frames to {} (sigma scale {})", frames.mean.size(), out.string(), frames.sigma_scale);
      std::vector<fs::path> outputs = frames.mean;
      outputs.insert(outputs.end(), frames.sigma.begin(), frames.sigma.end());
      record_run(cfg, "flythrough", files, outputs, elapsed(), command);
      return 0;
    }

    if (*run_cmd) {
      run_overrides.apply(cfg.filter);
      const auto list = parse_stages(run_stages);
      const std::set<Stage> stages(list.begin(), list.end());
      const std::string text = cfg.to_config().to_text();
      const fs::path config_copy = ws.root / "runs" / (hex64(fnv1a(text)) + ".conf");
      if (!fs::exists(config_copy)) write_text(config_copy, text);
      for (const auto& r : run_pipeline(cfg, stages, command)) {
        std::printf("%s\t%s\t%.1fs\n", r.stage.c_str(), r.status.c_str(), r.seconds);
      }
      return 0;
    }
  } catch (const UserError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return 2;
  }
  return 0;
}
