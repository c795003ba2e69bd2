#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "marf/config.hpp"
#include "marf/filters.hpp"
#include "marf/trainer.hpp"
#include "marf/uncertainty.hpp"

namespace marf {

const char* version_string();

// --- fetch -----------------------------------------------------------------------

struct FetchOptions {
  int concurrency = 4;
  int attempts = 3;
  double backoff_seconds = 0.5;  // doubled after each failed attempt
  double timeout_seconds = 30.0;
};

enum class FetchStatus { Fetched, Skipped, Failed };
const char* to_string(FetchStatus status);

struct FetchRecord {
  std::string url;
  std::filesystem::path path;
  FetchStatus status = FetchStatus::Failed;
  int attempts = 0;
  std::string message;
};

struct FetchReport {
  std::vector<FetchRecord> records;  // manifest order

  std::size_t count(FetchStatus status) const;
  /// True when there was something to fetch and nothing succeeded.
  bool all_failed() const;
  std::string to_table() const;
};

/// One absolute http(s) URL per line; '#' comments and blank lines skipped.
std::vector<std::string> read_url_manifest(const std::filesystem::path& path);

/// Last path segment of the URL, without query or fragment.
std::string url_basename(const std::string& url);

/// Downloads each URL into `dest` under its basename. Existing files whose
/// size matches the server's Content-Length are skipped. Network errors,
/// 408, 429 and 5xx are retried; other statuses fail at once.
FetchReport fetch(const std::vector<std::string>& urls, const std::filesystem::path& dest,
                  const FetchOptions& options = {});

// --- configuration ---------------------------------------------------------------

/// "300s", "5m", "1h", "1.5m" set a time budget; "2000" or "2000steps" a
/// step budget. Throws ArgumentError otherwise.
struct Budget {
  std::optional<std::uint64_t> steps;
  std::optional<double> seconds;
};
Budget parse_budget(const std::string& text);
void apply_budget(TrainConfig& config, const Budget& budget);

void write_filter_config(const FilterConfig& config, KeyValueConfig& out, const std::string& section = "filter");
FilterConfig read_filter_config(const KeyValueConfig& in, const std::string& section = "filter");

struct PipelineConfig {
  std::filesystem::path workspace = ".";
  FilterConfig filter;
  TrainConfig train;
  SearchSpace search;
  int search_trials = 8;
  double heldout_fraction = 0.1;
  BootstrapOptions bootstrap;
  int render_threads = 0;

  PipelineConfig();
  void validate() const;
  /// Sections [workspace], [filter], [train], [search], [bootstrap].
  static PipelineConfig read(const KeyValueConfig& in);
  KeyValueConfig to_config() const;
};

/// Resolution order: explicit flag, MARF_WORKSPACE, current directory.
std::filesystem::path resolve_workspace(const std::optional<std::filesystem::path>& flag);

// --- workspace and run manifest --------------------------------------------------

struct Workspace {
  std::filesystem::path root;

  std::filesystem::path raw_dir() const { return root / "raw"; }
  std::filesystem::path filter_dir() const { return root / "filter"; }
  std::filesystem::path scene_manifest() const { return root / "scene" / "scene.marf"; }
  std::filesystem::path train_dir() const { return root / "train"; }
  std::filesystem::path checkpoint() const { return train_dir() / "checkpoint.marf"; }
  std::filesystem::path split_file() const { return train_dir() / "split.txt"; }
  std::filesystem::path render_dir() const { return root / "render"; }
  std::filesystem::path bootstrap_dir() const { return root / "bootstrap"; }
  std::filesystem::path run_manifest() const { return root / "run_manifest.log"; }
};

/// One line of the append-only run manifest.
struct RunRecord {
  std::string stage;
  std::string status;  // "ran" or "skipped"
  std::string config_hash;
  std::string input_hash;
  std::string output_hash;
  std::uint64_t seed = 0;
  double seconds = 0.0;
  std::string version;
  std::string command;

  std::string to_line() const;
  static RunRecord parse(const std::string& line);
};

void append_run_record(const std::filesystem::path& manifest, const RunRecord& record);
std::vector<RunRecord> read_run_records(const std::filesystem::path& manifest);

/// Combined FNV-1a hash of the files' names and contents, in the given order.
std::string hash_files(const std::vector<std::filesystem::path>& files);

// --- stages ----------------------------------------------------------------------

enum class Stage { Filter, Train, Render, Bootstrap };
const char* to_string(Stage stage);
Stage parse_stage(const std::string& name);
std::vector<Stage> parse_stages(const std::string& comma_list);

/// Runs the requested stages in pipeline order. A stage whose config and
/// inputs match its last recorded run, and whose outputs still exist, is
/// skipped. Missing prerequisites throw ConfigError naming the gap.
std::vector<RunRecord> run_pipeline(const PipelineConfig& config, const std::set<Stage>& stages,
                                    const std::string& command = "run");

}  // namespace marf
