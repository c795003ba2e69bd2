#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "marf/camera.hpp"
#include "marf/image.hpp"
#include "marf/trainer.hpp"

namespace marf {

struct BootstrapOptions {
  int replicas = 5;
  std::uint64_t base_seed = 0;
  /// When false every replica uses base_seed (degenerate bootstrap).
  bool vary_seed = true;
  /// Redraw the training views with replacement for each replica.
  bool resample_views = false;
  /// Replicas trained at the same time.
  int concurrent = 1;
};

struct BootstrapFailure {
  int replica = 0;
  std::uint64_t seed = 0;
  std::string message;
};

/// Successfully trained replicas (ordered by replica index) and the ones
/// that aborted.
struct BootstrapSet {
  std::vector<int> replica;
  std::vector<std::uint64_t> seeds;
  std::vector<Checkpoint> checkpoints;
  std::vector<BootstrapFailure> failures;

  std::size_t size() const { return checkpoints.size(); }
};

/// Seed of replica b: base_seed + b, or base_seed when seeds do not vary.
std::uint64_t replica_seed(const BootstrapOptions& options, int replica);

/// Trains options.replicas copies of `config` that differ only in seed.
/// A replica that throws NumericalError or ConfigError is listed in
/// `failures`; the others are still returned.
BootstrapSet bootstrap_train(const TrainingSet& data, const TrainConfig& config, const BootstrapOptions& options,
                             const std::function<void(int replica, const Checkpoint&)>& on_replica = {});

struct Viewpoint {
  Intrinsics intrinsics;
  Pose pose;
};

/// B grayscale renders of one viewpoint, replica-major.
using ReplicaStack = std::vector<ImageBuffer>;

/// Deterministic render of every replica at every viewpoint, converted to
/// grayscale. `samples` overrides the per-checkpoint sample count.
std::vector<ReplicaStack> render_replicas(const std::vector<Checkpoint>& replicas,
                                          const std::vector<Viewpoint>& viewpoints, const Aabb& box,
                                          std::optional<int> samples = std::nullopt, int threads = 1);

struct UncertaintyMap {
  ImageBuffer mean;   // grayscale
  ImageBuffer sigma;  // grayscale, population standard deviation over replicas
};

UncertaintyMap uncertainty_map(const ReplicaStack& stack);

/// Interpolates position linearly and orientation by quaternion slerp;
/// s = 0 and s = 1 return the endpoints exactly.
Pose interpolate_pose(const Pose& a, const Pose& b, double s);

/// `frames` poses from a to b inclusive (just `a` when frames == 1).
std::vector<Pose> interpolate_path(const Pose& a, const Pose& b, int frames);

struct FlythroughFrames {
  std::vector<std::filesystem::path> mean;
  std::vector<std::filesystem::path> sigma;
  double sigma_scale = 0.0;
};

/// Writes mean_%05d.png and sigma_%05d.png per map plus sigma_scale.txt.
/// Sigma frames are divided by the largest sigma of the whole sequence.
FlythroughFrames write_flythrough(const std::vector<UncertaintyMap>& maps, const std::filesystem::path& dir);

}  // namespace marf
