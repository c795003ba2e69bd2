#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "marf/hashgrid.hpp"

namespace marf {

struct FieldConfig {
  int hidden_width = 64;
  int geo_features = 15;
  int dir_frequencies = 4;

  /// 3 + 6 * dir_frequencies.
  int dir_dim() const { return 3 + 6 * dir_frequencies; }
  void validate() const;
  bool operator==(const FieldConfig&) const = default;
};

/// Frequency encoding of a view direction: d followed by, for each
/// component i and k = 0..M-1, sin(2^k d_i) and cos(2^k d_i). Non-unit
/// input is normalized and counted by direction_normalization_count().
template <typename Real>
void direction_encode(const Real* d, int frequencies, Real* out);

std::uint64_t direction_normalization_count();

/// Weights and biases of the density net (E -> H -> H -> 1+G) and the color
/// net (G+D -> H -> 3), stored contiguously in layer order W0 b0 W1 b1 ... W4 b4.
/// Weight matrices are column-major Eigen maps into the buffer.
template <typename Real>
class MlpParams {
 public:
  using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using VectorMap = Eigen::Map<Vector>;
  using ConstVectorMap = Eigen::Map<const Vector>;

  static constexpr int kLayers = 5;
  static constexpr int kDensityLayers = 3;

  MlpParams() = default;
  /// Zero-filled parameters for a field whose encoding has `encoding_dim` values.
  MlpParams(int encoding_dim, const FieldConfig& config);

  /// Uniform He-style init: U(-sqrt(6 / fan_in), +sqrt(6 / fan_in)) for
  /// weights, zero biases.
  void initialize(std::mt19937_64& rng);

  int encoding_dim() const { return encoding_dim_; }
  const FieldConfig& config() const { return config_; }
  int rows(int layer) const { return shape_[layer][0]; }
  int cols(int layer) const { return shape_[layer][1]; }

  MatrixMap weight(int layer) { return {data_.data() + weight_offset_[layer], rows(layer), cols(layer)}; }
  ConstMatrixMap weight(int layer) const {
    return {data_.data() + weight_offset_[layer], rows(layer), cols(layer)};
  }
  VectorMap bias(int layer) { return {data_.data() + bias_offset_[layer], rows(layer)}; }
  ConstVectorMap bias(int layer) const { return {data_.data() + bias_offset_[layer], rows(layer)}; }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  std::size_t size() const { return data_.size(); }

  void set_zero();
  bool operator==(const MlpParams&) const = default;

 private:
  FieldConfig config_;
  int encoding_dim_ = 0;
  std::array<std::array<int, 2>, kLayers> shape_{};
  std::array<std::size_t, kLayers> weight_offset_{};
  std::array<std::size_t, kLayers> bias_offset_{};
  // Aligned so that Eigen's kernels see the same alignment, and round the
  // same way, on every allocation.
  std::vector<Real, Eigen::aligned_allocator<Real>> data_;
};

template <typename Real>
struct FieldOutput {
  Real sigma = 0;
  std::array<Real, 3> rgb{};
};

/// Numerically stable softplus and its derivative (the logistic function).
template <typename Real>
Real softplus(Real x);
template <typename Real>
Real logistic(Real x);

/// Evaluates and differentiates the field for a batch of samples. Each
/// sample belongs to a ray; samples of one ray share its view direction.
/// Activations of the last forward pass are cached for backward().
template <typename Real>
class FieldBatch {
 public:
  using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
  using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

  /// Positions (3 x S), per-sample ray index, and unit directions (3 x R).
  void set_inputs(Matrix positions, std::vector<int> ray_of_sample, const Matrix& directions, int dir_frequencies);

  /// Grid encoding and density net; fills sigma().
  void forward_density(const HashGrid<Real>& grid, const MlpParams<Real>& params);
  /// Color net on the cached geometry features; fills rgb().
  void forward_color(const MlpParams<Real>& params);
  void forward(const HashGrid<Real>& grid, const MlpParams<Real>& params) {
    forward_density(grid, params);
    forward_color(params);
  }

  /// Keeps only the listed samples (ascending indices) in every cached
  /// buffer, so a density-only pass can be pruned before color/backward.
  void select(const std::vector<int>& keep);

  /// Accumulates parameter and table gradients given dL/dsigma (S) and
  /// dL/drgb (3 x S). Requires a full forward().
  void backward(const HashGrid<Real>& grid, const MlpParams<Real>& params, const RowVector& d_sigma,
                const Matrix& d_rgb, MlpParams<Real>& param_grad, GridGradient<Real>& grid_grad,
                int threads = 1);

  Eigen::Index size() const { return positions_.cols(); }
  const Matrix& positions() const { return positions_; }
  const std::vector<int>& ray_of_sample() const { return ray_of_sample_; }
  const RowVector& sigma() const { return sigma_; }
  const Matrix& rgb() const { return rgb_; }
  const Matrix& encoding() const { return encoding_; }

 private:
  Matrix positions_;
  std::vector<int> ray_of_sample_;
  Matrix dir_encoding_;  // D x R

  Matrix encoding_;  // E x S
  Matrix h0_, h1_;   // H x S, post-activation
  Matrix density_out_;  // (1+G) x S raw
  RowVector sigma_;
  Matrix dir_term_;  // H x R, W3_dir * dir_encoding
  Matrix c0_;        // H x S, post-activation
  Matrix rgb_;       // 3 x S
};

/// Single-point convenience evaluation.
template <typename Real>
FieldOutput<Real> field_forward(const HashGrid<Real>& grid, const MlpParams<Real>& params,
                                const std::array<Real, 3>& x, const std::array<Real, 3>& d);

extern template class MlpParams<float>;
extern template class MlpParams<double>;
extern template class FieldBatch<float>;
extern template class FieldBatch<double>;

}  // namespace marf
