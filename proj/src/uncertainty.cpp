#include "marf/uncertainty.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>

#include "marf/error.hpp"
#include "marf/parallel.hpp"

namespace marf {

std::uint64_t replica_seed(const BootstrapOptions& options, int replica) {
  return options.vary_seed ? options.base_seed + static_cast<std::uint64_t>(replica) : options.base_seed;
}

BootstrapSet bootstrap_train(const TrainingSet& data, const TrainConfig& config, const BootstrapOptions& options,
                             const std::function<void(int, const Checkpoint&)>& on_replica) {
  if (options.replicas < 1) throw ConfigError("bootstrap needs at least one replica");
  config.validate();
  const auto B = static_cast<std::size_t>(options.replicas);
  std::vector<std::optional<Checkpoint>> results(B);
  std::vector<std::string> errors(B);
  std::mutex callback_mutex;

  parallel_for(B, std::max(1, options.concurrent), [&](std::size_t b) {
    TrainConfig c = config;
    c.seed = replica_seed(options, static_cast<int>(b));
    try {
      Checkpoint ck;
      if (options.resample_views) {
        std::mt19937_64 rng(c.seed);
        std::uniform_int_distribution<std::size_t> pick(0, data.views.size() - 1);
        std::vector<std::size_t> drawn(data.views.size());
        for (auto& i : drawn) i = pick(rng);
        const TrainingSet resampled = data.subset(drawn);
        ck = train(resampled, c);
      } else {
        ck = train(data, c);
      }
      if (on_replica) {
        std::lock_guard lock(callback_mutex);
        on_replica(static_cast<int>(b), ck);
      }
      results[b] = std::move(ck);
    } catch (const NumericalError& e) {
      errors[b] = e.what();
    } catch (const ConfigError& e) {
      errors[b] = e.what();
    }
  });

  BootstrapSet set;
  for (std::size_t b = 0; b < B; ++b) {
    const auto seed = replica_seed(options, static_cast<int>(b));
    if (results[b]) {
      set.replica.push_back(static_cast<int>(b));
      set.seeds.push_back(seed);
      set.checkpoints.push_back(std::move(*results[b]));
    } else {
      spdlog::warn("bootstrap replica {} (seed {}) failed: {}", b, seed, errors[b]);
      set.failures.push_back({static_cast<int>(b), seed, errors[b]});
    }
  }
  return set;
}

std::vector<ReplicaStack> render_replicas(const std::vector<Checkpoint>& replicas,
                                          const std::vector<Viewpoint>& viewpoints, const Aabb& box,
                                          std::optional<int> samples, int threads) {
  std::vector<ReplicaStack> out(viewpoints.size());
  for (std::size_t v = 0; v < viewpoints.size(); ++v) {
    for (const auto& ck : replicas) {
      RenderOptions options = ck.config.render_options();
      if (samples) options.samples = *samples;
      options.threads = threads;
      const RenderedView view =
          render_view(ck.grid, ck.params, viewpoints[v].intrinsics, viewpoints[v].pose, box, options);
      out[v].push_back(to_grayscale(view.image));
    }
  }
  return out;
}

UncertaintyMap uncertainty_map(const ReplicaStack& stack) {
  if (stack.empty()) throw ArgumentError("uncertainty map needs at least one replica");
  const int W = stack.front().width(), H = stack.front().height();
  for (const auto& img : stack) {
    if (img.width() != W || img.height() != H || img.channels() != 1) {
      throw ArgumentError("replica images must be grayscale and equally sized");
    }
  }
  UncertaintyMap out{ImageBuffer(W, H, 1), ImageBuffer(W, H, 1)};
  const double B = static_cast<double>(stack.size());
  auto mean = out.mean.data();
  auto sigma = out.sigma.data();
  for (std::size_t p = 0; p < mean.size(); ++p) {
    double sum = 0.0;
    for (const auto& img : stack) sum += img.data()[p];
    const double m = sum / B;
    double sq = 0.0;
    for (const auto& img : stack) {
      const double d = img.data()[p] - m;
      sq += d * d;
    }
    mean[p] = static_cast<float>(m);
    sigma[p] = static_cast<float>(std::sqrt(sq / B));
  }
  return out;
}

Pose interpolate_pose(const Pose& a, const Pose& b, double s) {
  if (s <= 0.0) return a;
  if (s >= 1.0) return b;
  const Eigen::Quaterniond qa(a.rotation), qb(b.rotation);
  Pose out;
  out.rotation = qa.slerp(s, qb).normalized().toRotationMatrix();
  out.translation = (1.0 - s) * a.translation + s * b.translation;
  return out;
}

std::vector<Pose> interpolate_path(const Pose& a, const Pose& b, int frames) {
  if (frames < 1) throw ArgumentError("a camera path needs at least one frame");
  std::vector<Pose> out;
  out.reserve(static_cast<std::size_t>(frames));
  for (int i = 0; i < frames; ++i) {
    if (i == 0) {
      out.push_back(a);
    } else if (i == frames - 1) {
      out.push_back(b);
    } else {
      out.push_back(interpolate_pose(a, b, static_cast<double>(i) / (frames - 1)));
    }
  }
  return out;
}

FlythroughFrames write_flythrough(const std::vector<UncertaintyMap>& maps, const std::filesystem::path& dir) {
  if (maps.empty()) throw ArgumentError("fly-through needs at least one viewpoint");
  std::filesystem::create_directories(dir);
  FlythroughFrames out;
  for (const auto& m : maps) {
    for (float v : m.sigma.data()) out.sigma_scale = std::max(out.sigma_scale, static_cast<double>(v));
  }
  for (std::size_t i = 0; i < maps.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "mean_%05zu.png", i);
    out.mean.push_back(dir / name);
    save_image(maps[i].mean, out.mean.back());

    ImageBuffer scaled = maps[i].sigma;
    if (out.sigma_scale > 0.0) {
      for (float& v : scaled.data()) v = static_cast<float>(v / out.sigma_scale);
    }
    std::snprintf(name, sizeof(name), "sigma_%05zu.png", i);
    out.sigma.push_back(dir / name);
    save_image(scaled, out.sigma.back());
  }
  std::ofstream scale(dir / "sigma_scale.txt", std::ios::trunc);
  if (!scale) throw IoError("cannot write " + (dir / "sigma_scale.txt").string());
  scale << format_double(out.sigma_scale) << "\n";
  return out;
}

}  // namespace marf
