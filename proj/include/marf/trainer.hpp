#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "marf/camera.hpp"
#include "marf/config.hpp"
#include "marf/field.hpp"
#include "marf/hashgrid.hpp"
#include "marf/image.hpp"
#include "marf/renderer.hpp"

namespace marf {

struct TrainConfig {
  double learning_rate = 1e-2;
  double final_learning_rate = 1e-4;  // cosine decay target
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-15;
  int batch_rays = 256;
  int samples = 128;
  /// Stop after this many optimizer steps and/or this much training time,
  /// whichever comes first. At least one must be set.
  std::optional<std::uint64_t> max_steps;
  std::optional<double> max_seconds;
  /// Elapsed training times at which intermediate checkpoints are reported.
  std::vector<double> checkpoint_seconds{10, 60, 300, 600, 900};
  HashGridConfig grid;
  FieldConfig field;
  std::uint64_t seed = 0;
  std::array<double, 3> background{0.0, 0.0, 0.0};
  /// Single worker, step budget only; identical seeds give identical bits.
  bool deterministic = false;
  int threads = 0;  // <= 0: all hardware threads
  double grid_init_scale = 1e-4;
  bool early_termination = true;
  double termination_threshold = 1e-4;

  void validate() const;  // throws ConfigError
  int worker_count() const;
  RenderOptions render_options() const;

  void write(KeyValueConfig& out, const std::string& section = "train") const;
  /// Reads the keys present under `section` on top of the defaults.
  static TrainConfig read(const KeyValueConfig& in, const std::string& section = "train");
  static std::vector<std::string> keys();
  bool operator==(const TrainConfig&) const = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  HashGrid<float> grid;
  MlpParams<float> params;
  std::uint64_t step = 0;
  double running_psnr = 0.0;  // from an exponential average of the training loss
  std::uint32_t version = kCheckpointVersion;

  bool operator==(const Checkpoint&) const = default;
};

/// Freshly initialized grid and MLP, drawn from config.seed.
Checkpoint initial_checkpoint(const TrainConfig& config);

// Container layout, little-endian:
//   "MARF", u32 version, u64 step, f64 running_psnr,
//   u32 length + config text (key = value),
//   u32 section count, then per section:
//     u32 length + name, u32 rank, u64 dims[rank], f32 values[prod(dims)]
// Sections are "grid" [entries, features] followed by "mlp.W<l>" [rows, cols]
// (column-major values) and "mlp.b<l>" [rows] for l = 0..4.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Mean over all components of (rendered - truth)^2; writes
/// 2 (rendered - truth) / count into `gradient` when given.
template <typename Real>
Real mse_loss(const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>& rendered,
              const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>& truth,
              Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>* gradient = nullptr);

/// 10 log10(1 / MSE) for intensities in [0,1]; +inf for identical images.
double psnr(const ImageBuffer& a, const ImageBuffer& b);
/// Mean of per-image PSNR; infinite entries are skipped with a warning.
double scene_psnr(std::span<const ImageBuffer> truth, std::span<const ImageBuffer> rendered);
/// "inf" for the identical-image sentinel, fixed-point decibels otherwise.
std::string format_psnr(double db);

struct TrainingView {
  std::string name;
  ImageBuffer image;  // RGB
  Intrinsics intrinsics;
  Pose pose;
};

struct TrainingSet {
  std::vector<TrainingView> views;
  Aabb box;

  std::size_t pixel_count() const;
  TrainingSet subset(const std::vector<std::size_t>& indices) const;
};

/// Loads every image of the manifest. Throws ConfigError when an image
/// does not match its intrinsics or the manifest is empty.
TrainingSet load_training_set(const SceneManifest& manifest);

/// Seeded split into training and held-out views; the held-out side gets
/// round(fraction * n) views, at least one. Needs n >= 2.
struct ViewSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
};
ViewSplit split_views(std::size_t count, double heldout_fraction, std::uint64_t seed);

/// Rays with their ground-truth colors (3 x R).
struct RayBatch {
  std::vector<std::optional<Ray>> rays;
  Eigen::MatrixXf colors;
};

/// Pixels drawn uniformly over all views, with replacement.
RayBatch sample_ray_batch(const TrainingSet& data, int count, std::mt19937_64& rng);

/// Optimizer state around one grid + MLP pair.
class Trainer {
 public:
  Trainer(const TrainingSet& data, const TrainConfig& config);
  Trainer(const TrainingSet& data, Checkpoint start);

  /// One update on a seeded random batch; returns the batch loss.
  double step();
  /// One update on the given batch; returns its loss. Throws NumericalError
  /// on a non-finite loss.
  double step(const RayBatch& batch);

  /// Fraction of the budget consumed, in [0,1]; drives the learning rate.
  void set_progress(double progress) { progress_ = progress; }
  double learning_rate() const;

  std::uint64_t steps() const { return step_; }
  const HashGrid<float>& grid() const { return grid_; }
  const MlpParams<float>& params() const { return params_; }
  const TrainConfig& config() const { return config_; }
  Checkpoint checkpoint() const;

 private:
  struct Worker {
    VolumeBatch<float> batch;
    MlpParams<float> grad;
    GridGradient<float> grid_grad;
    std::mt19937_64 rng;
  };
  void setup();
  void apply_adam(float lr);

  const TrainingSet* data_;
  TrainConfig config_;
  HashGrid<float> grid_;
  MlpParams<float> params_;
  std::vector<float> grid_m_, grid_v_, mlp_m_, mlp_v_;
  std::vector<Worker> workers_;
  std::mt19937_64 rng_;
  std::uint64_t step_ = 0;
  double progress_ = 0.0;
  double mse_average_ = -1.0;
};

struct TrainEvent {
  std::uint64_t step = 0;
  double elapsed_seconds = 0.0;
  double loss = 0.0;
  double learning_rate = 0.0;
};

struct TrainCallbacks {
  /// Called when the elapsed training time passes each configured mark
  /// within the budget. Time spent in the callback is not counted.
  std::function<void(const Checkpoint&, double mark_seconds)> on_checkpoint;
  std::function<void(const TrainEvent&)> on_step;
};

Checkpoint train(const TrainingSet& data, const TrainConfig& config, const TrainCallbacks& callbacks = {});

/// Deterministic renders of `views` with the checkpoint's settings.
std::vector<ImageBuffer> render_views(const Checkpoint& checkpoint, const std::vector<TrainingView>& views,
                                      const Aabb& box, int threads = 1);
double evaluate_psnr(const Checkpoint& checkpoint, const TrainingSet& heldout, int threads = 1);

// --- random search -------------------------------------------------------------

/// Ranges sampled per trial: learning rate and table size log-uniformly
/// (table size as a power of two), levels and samples uniformly.
struct SearchSpace {
  std::array<double, 2> learning_rate{1e-3, 3e-2};
  std::array<std::uint32_t, 2> table_size{1u << 14, 1u << 17};
  std::array<int, 2> levels{8, 16};
  std::array<int, 2> samples{64, 128};

  void validate() const;
  void write(KeyValueConfig& out, const std::string& section = "search") const;
  static SearchSpace read(const KeyValueConfig& in, const std::string& section = "search");
};

/// Draws one configuration from `space` on top of `base`.
TrainConfig sample_config(const TrainConfig& base, const SearchSpace& space, std::mt19937_64& rng);

struct TrialOutcome {
  double psnr = 0.0;
  /// Held-out PSNR at intermediate checkpoints, in time order.
  std::vector<double> checkpoint_psnr;
};

struct Trial {
  int id = 0;
  TrainConfig config;
  TrialOutcome outcome;
  double wall_seconds = 0.0;
  bool psnr_decreased = false;
  std::string error;
};

struct SearchResult {
  int best_trial = -1;
  TrainConfig best;
  std::vector<Trial> trials;
};

/// Trains and scores one configuration. The default evaluator trains on the
/// training split and scores scene PSNR on the held-out split.
using TrialEvaluator = std::function<TrialOutcome(const TrainConfig&)>;

struct SearchOptions {
  int trials = 8;
  std::uint64_t seed = 0;
  double heldout_fraction = 0.1;
  int render_threads = 1;
};

SearchResult random_search(const TrainingSet& data, const TrainConfig& base, const SearchSpace& space,
                           const SearchOptions& options, TrialEvaluator evaluator = {});

/// Tab-separated table: trial, hyper-parameters, held-out PSNR, wall time,
/// warning.
std::string trial_table(const SearchResult& result);

}  // namespace marf
