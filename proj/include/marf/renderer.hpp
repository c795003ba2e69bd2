#pragma once

#include <Eigen/Core>
#include <array>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "marf/camera.hpp"
#include "marf/field.hpp"
#include "marf/hashgrid.hpp"
#include "marf/image.hpp"

namespace marf {

/// Sample depths along one ray. delta[i] = t[i+1] - t[i], and the last
/// spacing closes the interval at t_far.
struct RaySamples {
  std::vector<double> t;
  std::vector<double> delta;
};

/// Stratified sampling of [t_near, t_far] in `count` equal bins: bin
/// centers when `rng` is null, otherwise one uniform draw per bin.
RaySamples sample_uniform(const Ray& ray, int count, std::mt19937_64* rng = nullptr);

/// T_i = exp(-sum_{j<i} sigma_j delta_j); T_1 = 1.
template <typename Real>
std::vector<Real> transmittance(std::span<const Real> sigma, std::span<const Real> delta);

template <typename Real>
struct CompositeResult {
  std::array<Real, 3> color{};
  Real opacity = 0;
};

/// color = sum_i w_i c_i + (1 - sum_i w_i) * background with
/// w_i = T_i (1 - exp(-sigma_i delta_i)); `rgb` holds 3 values per sample.
template <typename Real>
CompositeResult<Real> composite(std::span<const Real> sigma, std::span<const Real> rgb, std::span<const Real> delta,
                                const std::array<Real, 3>& background);

/// Gradients of composite() with respect to sigma and rgb, given dL/dcolor.
template <typename Real>
void composite_backward(std::span<const Real> sigma, std::span<const Real> rgb, std::span<const Real> delta,
                        const std::array<Real, 3>& background, const std::array<Real, 3>& d_color,
                        std::span<Real> d_sigma, std::span<Real> d_rgb);

/// Number of leading samples whose transmittance stays at or above
/// `threshold`; the rest are dropped by early ray termination.
template <typename Real>
std::size_t active_prefix(std::span<const Real> sigma, std::span<const Real> delta, Real threshold);

struct RenderOptions {
  int samples = 128;
  std::array<double, 3> background{0.0, 0.0, 0.0};
  bool early_termination = true;
  double termination_threshold = 1e-4;
  int threads = 1;
  /// Rays per field batch inside render_view.
  int rays_per_batch = 64;
};

/// Marches a set of rays through the field: stratified samples, density
/// pass, early termination, color pass, compositing. Keeps what backward()
/// needs to differentiate the composited colors.
template <typename Real>
class VolumeBatch {
 public:
  using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
  using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

  /// Rays that missed the scene box are passed as nullopt and composite to
  /// the background. `rng` enables jittered sampling.
  void evaluate(const HashGrid<Real>& grid, const MlpParams<Real>& params, const std::vector<std::optional<Ray>>& rays,
                const RenderOptions& options, std::mt19937_64* rng = nullptr);

  std::size_t ray_count() const { return colors_.size(); }
  const std::array<Real, 3>& color(std::size_t ray) const { return colors_[ray].color; }
  Real opacity(std::size_t ray) const { return colors_[ray].opacity; }
  /// Samples that survived early termination.
  Eigen::Index active_samples() const { return field_.size(); }

  /// Backpropagates dL/dcolor (3 x R) into parameter and table gradients.
  void backward(const HashGrid<Real>& grid, const MlpParams<Real>& params, const Matrix& d_color,
                MlpParams<Real>& param_grad, GridGradient<Real>& grid_grad, int threads = 1);

 private:
  FieldBatch<Real> field_;
  std::array<Real, 3> background_{};
  std::vector<std::size_t> begin_;  // first active sample of each ray; R + 1 entries
  std::vector<Real> delta_;         // active samples only
  std::vector<CompositeResult<Real>> colors_;
};

template <typename Real>
CompositeResult<Real> render_ray(const HashGrid<Real>& grid, const MlpParams<Real>& params,
                                 const std::optional<Ray>& ray, const RenderOptions& options);

struct RenderedView {
  ImageBuffer image;    // RGB
  ImageBuffer opacity;  // single channel
  Intrinsics intrinsics;
  Pose pose;
};

/// Renders every pixel center with deterministic sampling. Pixels are split
/// across `options.threads` workers; the output does not depend on it.
template <typename Real>
RenderedView render_view(const HashGrid<Real>& grid, const MlpParams<Real>& params, const Intrinsics& K,
                         const Pose& pose, const Aabb& box, const RenderOptions& options);

extern template class VolumeBatch<float>;
extern template class VolumeBatch<double>;

}  // namespace marf
