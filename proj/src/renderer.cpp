#include "marf/renderer.hpp"

#include <algorithm>
#include <cmath>

#include "marf/error.hpp"
#include "marf/parallel.hpp"

namespace marf {

RaySamples sample_uniform(const Ray& ray, int count, std::mt19937_64* rng) {
  if (count < 1) throw ArgumentError("samples per ray must be >= 1");
  if (!(ray.t_far > ray.t_near)) throw ArgumentError("ray interval is empty");
  const double width = (ray.t_far - ray.t_near) / count;
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  RaySamples out;
  out.t.resize(static_cast<std::size_t>(count));
  out.delta.resize(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const double u = rng ? jitter(*rng) : 0.5;
    out.t[k] = ray.t_near + (k + u) * width;
  }
  for (int k = 0; k + 1 < count; ++k) out.delta[k] = out.t[k + 1] - out.t[k];
  out.delta.back() = ray.t_far - out.t.back();
  return out;
}

template <typename Real>
std::vector<Real> transmittance(std::span<const Real> sigma, std::span<const Real> delta) {
  std::vector<Real> out(sigma.size());
  Real optical_depth = 0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    out[i] = std::exp(-optical_depth);
    optical_depth += sigma[i] * delta[i];
  }
  return out;
}

template <typename Real>
CompositeResult<Real> composite(std::span<const Real> sigma, std::span<const Real> rgb, std::span<const Real> delta,
                                const std::array<Real, 3>& background) {
  CompositeResult<Real> out;
  Real T = 1;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    const Real keep = std::exp(-sigma[i] * delta[i]);
    const Real w = T * (Real(1) - keep);
    for (int c = 0; c < 3; ++c) out.color[c] += w * rgb[3 * i + c];
    T *= keep;
  }
  // 1 - T equals the sum of weights and, unlike the rounded sum, stays in [0,1].
  out.opacity = Real(1) - T;
  for (int c = 0; c < 3; ++c) out.color[c] += T * background[c];
  return out;
}

template <typename Real>
void composite_backward(std::span<const Real> sigma, std::span<const Real> rgb, std::span<const Real> delta,
                        const std::array<Real, 3>& background, const std::array<Real, 3>& d_color,
                        std::span<Real> d_sigma, std::span<Real> d_rgb) {
  const std::size_t n = sigma.size();
  std::vector<Real> w(n), T_next(n);
  Real T = 1;
  for (std::size_t i = 0; i < n; ++i) {
    const Real keep = std::exp(-sigma[i] * delta[i]);
    w[i] = T * (Real(1) - keep);
    T *= keep;
    T_next[i] = T;
  }
  // g . (sum_{i>k} w_i c_i + remaining * background), swept back to front.
  Real after = 0;
  for (int c = 0; c < 3; ++c) after += d_color[c] * T * background[c];
  for (std::size_t k = n; k-- > 0;) {
    Real gc = 0;
    for (int c = 0; c < 3; ++c) {
      gc += d_color[c] * rgb[3 * k + c];
      d_rgb[3 * k + c] = w[k] * d_color[c];
    }
    d_sigma[k] = delta[k] * (T_next[k] * gc - after);
    after += w[k] * gc;
  }
}

template <typename Real>
std::size_t active_prefix(std::span<const Real> sigma, std::span<const Real> delta, Real threshold) {
  Real optical_depth = 0;
  const Real limit = -std::log(threshold);
  std::size_t m = 0;
  for (; m < sigma.size(); ++m) {
    if (optical_depth > limit) break;
    optical_depth += sigma[m] * delta[m];
  }
  return m;
}

// --- VolumeBatch -----------------------------------------------------------------

template <typename Real>
void VolumeBatch<Real>::evaluate(const HashGrid<Real>& grid, const MlpParams<Real>& params,
                                 const std::vector<std::optional<Ray>>& rays, const RenderOptions& options,
                                 std::mt19937_64* rng) {
  const std::size_t R = rays.size();
  const int N = options.samples;
  for (int c = 0; c < 3; ++c) background_[c] = static_cast<Real>(options.background[c]);

  std::size_t hits = 0;
  for (const auto& r : rays) hits += r.has_value();

  Matrix positions(3, static_cast<Eigen::Index>(hits * N));
  Matrix directions(3, static_cast<Eigen::Index>(R));
  std::vector<int> ray_of_sample;
  ray_of_sample.reserve(hits * N);
  std::vector<Real> delta;
  delta.reserve(hits * N);

  Eigen::Index s = 0;
  for (std::size_t r = 0; r < R; ++r) {
    if (!rays[r]) {
      directions.col(r) << 0, 0, 1;
      continue;
    }
    const Ray& ray = *rays[r];
    directions.col(r) = ray.direction.cast<Real>();
    const RaySamples samples = sample_uniform(ray, N, rng);
    for (int k = 0; k < N; ++k, ++s) {
      positions.col(s) = ray.point_at(samples.t[k]).cast<Real>();
      ray_of_sample.push_back(static_cast<int>(r));
      delta.push_back(static_cast<Real>(samples.delta[k]));
    }
  }

  field_.set_inputs(std::move(positions), std::move(ray_of_sample), directions, params.config().dir_frequencies);
  colors_.assign(R, CompositeResult<Real>{});
  begin_.assign(R + 1, 0);
  delta_.clear();
  if (hits == 0) {
    for (auto& c : colors_) c.color = background_;
    return;
  }

  field_.forward_density(grid, params);

  // Early termination: keep each ray's leading samples while T >= threshold.
  const auto& sigma = field_.sigma();
  const auto& owner = field_.ray_of_sample();
  std::vector<int> keep;
  keep.reserve(owner.size());
  std::size_t first = 0;
  while (first < owner.size()) {
    const int r = owner[first];
    std::size_t last = first;
    while (last < owner.size() && owner[last] == r) ++last;
    std::size_t count = last - first;
    if (options.early_termination) {
      count = active_prefix<Real>({sigma.data() + first, last - first}, {delta.data() + first, last - first},
                                  static_cast<Real>(options.termination_threshold));
    }
    for (std::size_t i = first; i < first + count; ++i) {
      keep.push_back(static_cast<int>(i));
      delta_.push_back(delta[i]);
    }
    begin_[r + 1] = count;
    first = last;
  }
  for (std::size_t r = 0; r < R; ++r) begin_[r + 1] += begin_[r];
  if (keep.size() != owner.size()) field_.select(keep);

  field_.forward_color(params);

  const auto& sig = field_.sigma();
  const auto& rgb = field_.rgb();
  for (std::size_t r = 0; r < R; ++r) {
    const std::size_t b = begin_[r], n = begin_[r + 1] - begin_[r];
    colors_[r] = composite<Real>({sig.data() + b, n}, {rgb.data() + 3 * b, 3 * n}, {delta_.data() + b, n},
                                 background_);
  }
}

template <typename Real>
void VolumeBatch<Real>::backward(const HashGrid<Real>& grid, const MlpParams<Real>& params, const Matrix& d_color,
                                 MlpParams<Real>& param_grad, GridGradient<Real>& grid_grad, int threads) {
  const Eigen::Index S = field_.size();
  if (S == 0) return;
  RowVector d_sigma(S);
  Matrix d_rgb(3, S);
  const auto& sig = field_.sigma();
  const auto& rgb = field_.rgb();
  for (std::size_t r = 0; r < colors_.size(); ++r) {
    const std::size_t b = begin_[r], n = begin_[r + 1] - begin_[r];
    if (n == 0) continue;
    const std::array<Real, 3> g{d_color(0, r), d_color(1, r), d_color(2, r)};
    composite_backward<Real>({sig.data() + b, n}, {rgb.data() + 3 * b, 3 * n}, {delta_.data() + b, n}, background_,
                             g, {d_sigma.data() + b, n}, {d_rgb.data() + 3 * b, 3 * n});
  }
  field_.backward(grid, params, d_sigma, d_rgb, param_grad, grid_grad, threads);
}

template <typename Real>
CompositeResult<Real> render_ray(const HashGrid<Real>& grid, const MlpParams<Real>& params,
                                 const std::optional<Ray>& ray, const RenderOptions& options) {
  VolumeBatch<Real> batch;
  batch.evaluate(grid, params, {ray}, options);
  return {batch.color(0), batch.opacity(0)};
}

template <typename Real>
RenderedView render_view(const HashGrid<Real>& grid, const MlpParams<Real>& params, const Intrinsics& K,
                         const Pose& pose, const Aabb& box, const RenderOptions& options) {
  K.validate();
  const int W = K.width, H = K.height;
  RenderedView view{ImageBuffer(W, H, 3), ImageBuffer(W, H, 1), K, pose};
  const std::size_t pixels = static_cast<std::size_t>(W) * H;
  const std::size_t per_batch = static_cast<std::size_t>(std::max(1, options.rays_per_batch));
  const std::size_t batches = (pixels + per_batch - 1) / per_batch;
  auto rgb_out = view.image.data();
  auto alpha_out = view.opacity.data();

  parallel_chunks(batches, resolve_threads(options.threads), [&](std::size_t b0, std::size_t b1, int) {
    VolumeBatch<Real> batch;
    std::vector<std::optional<Ray>> rays;
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t p0 = b * per_batch, p1 = std::min(pixels, p0 + per_batch);
      rays.clear();
      for (std::size_t p = p0; p < p1; ++p) {
        const double u = static_cast<double>(p % W) + 0.5, v = static_cast<double>(p / W) + 0.5;
        rays.push_back(generate_ray(K, pose, u, v, box));
      }
      batch.evaluate(grid, params, rays, options);
      for (std::size_t p = p0; p < p1; ++p) {
        const auto& c = batch.color(p - p0);
        for (int ch = 0; ch < 3; ++ch) rgb_out[3 * p + ch] = std::clamp(static_cast<float>(c[ch]), 0.0f, 1.0f);
        alpha_out[p] = std::clamp(static_cast<float>(batch.opacity(p - p0)), 0.0f, 1.0f);
      }
    }
  });
  return view;
}

#define MARF_INSTANTIATE(Real)                                                                                      \
  template std::vector<Real> transmittance<Real>(std::span<const Real>, std::span<const Real>);                     \
  template CompositeResult<Real> composite<Real>(std::span<const Real>, std::span<const Real>, std::span<const Real>, \
                                                 const std::array<Real, 3>&);                                       \
  template void composite_backward<Real>(std::span<const Real>, std::span<const Real>, std::span<const Real>,       \
                                         const std::array<Real, 3>&, const std::array<Real, 3>&, std::span<Real>,   \
                                         std::span<Real>);                                                          \
  template std::size_t active_prefix<Real>(std::span<const Real>, std::span<const Real>, Real);                      \
  template CompositeResult<Real> render_ray<Real>(const HashGrid<Real>&, const MlpParams<Real>&,                    \
                                                  const std::optional<Ray>&, const RenderOptions&);                 \
  template RenderedView render_view<Real>(const HashGrid<Real>&, const MlpParams<Real>&, const Intrinsics&,         \
                                          const Pose&, const Aabb&, const RenderOptions&);                          \
  template class VolumeBatch<Real>;

MARF_INSTANTIATE(float)
MARF_INSTANTIATE(double)

#undef MARF_INSTANTIATE

}  // namespace marf
