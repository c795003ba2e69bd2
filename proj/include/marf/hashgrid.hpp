#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace marf {

struct HashGridConfig {
  int levels = 16;
  int min_resolution = 16;
  int max_resolution = 2048;
  /// Entries per level, power of two. Dense levels use fewer.
  std::uint32_t table_size = 1u << 17;
  int features_per_level = 2;

  void validate() const;  // throws ConfigError
  int output_dim() const { return levels * features_per_level; }
  bool operator==(const HashGridConfig&) const = default;
};

/// Cells per axis at `level`: floor(N_min * b^level) with
/// b = exp((ln N_max - ln N_min) / (L - 1)); N_min when L == 1.
int level_resolution(const HashGridConfig& config, int level);

/// (ix * 1 ^ iy * 2654435761 ^ iz * 805459861) mod table_size, in wrapping
/// unsigned 32-bit arithmetic.
std::uint32_t spatial_hash(std::uint32_t ix, std::uint32_t iy, std::uint32_t iz, std::uint32_t table_size);

/// A level is dense when its (N+1)^3 vertices fit in the table.
bool level_is_dense(const HashGridConfig& config, int level);

/// Entries stored for `level`: (N+1)^3 when dense, table_size otherwise.
std::size_t level_entry_count(const HashGridConfig& config, int level);

/// Table slot of vertex (ix, iy, iz) at `level`; direct indexing on dense
/// levels, spatial_hash otherwise.
std::uint32_t vertex_index(const HashGridConfig& config, int level, std::uint32_t ix, std::uint32_t iy,
                           std::uint32_t iz);

/// The eight voxel corners around a query at one level.
template <typename Real>
struct CornerSet {
  std::array<std::uint32_t, 8> index;  // table slot within the level
  std::array<Real, 8> weight;          // trilinear weights, sum to 1
};

template <typename Real>
class GridGradient;

/// Multi-resolution hash encoding over [0,1]^3. Parameters of all levels
/// live in one contiguous, level-ordered buffer laid out entry-major
/// (entry * F + feature).
template <typename Real>
class HashGrid {
 public:
  using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;

  HashGrid() = default;
  explicit HashGrid(const HashGridConfig& config);

  /// Uniform values in [-scale, scale].
  void initialize_uniform(Real scale, std::mt19937_64& rng);

  const HashGridConfig& config() const { return config_; }
  int output_dim() const { return config_.output_dim(); }
  int resolution(int level) const { return resolution_[level]; }
  bool dense(int level) const { return dense_[level]; }
  std::size_t level_offset(int level) const { return offset_[level]; }
  std::size_t level_entries(int level) const { return offset_[level + 1] - offset_[level]; }
  std::size_t entry_count() const { return offset_.back(); }

  std::span<Real> params() { return params_; }
  std::span<const Real> params() const { return params_; }

  /// Value of feature `f` of table slot `index` at `level`.
  Real& value(int level, std::uint32_t index, int f) {
    return params_[(offset_[level] + index) * config_.features_per_level + f];
  }
  Real value(int level, std::uint32_t index, int f) const {
    return params_[(offset_[level] + index) * config_.features_per_level + f];
  }

  /// Corners and weights of the voxel containing x at `level`. Coordinates
  /// outside [0,1] are clamped.
  CornerSet<Real> corners(int level, const Real* x) const;

  /// Writes the L*F encoding of x (coarse level first) into out.
  void encode(const Real* x, Real* out) const;

  /// Encodes each column of `positions` (3 x S) into `out` (L*F x S).
  void encode_batch(const Matrix& positions, Matrix& out) const;

  /// Scatters the upstream gradient of one encoding into `grad`.
  void encode_backward(const Real* x, const Real* upstream, GridGradient<Real>& grad) const;

  /// Batched backward; levels are independent, so `threads` > 1 splits
  /// work by level and the result does not depend on the thread count.
  void encode_backward_batch(const Matrix& positions, const Matrix& upstream, GridGradient<Real>& grad,
                             int threads = 1) const;

  bool operator==(const HashGrid&) const = default;

 private:
  void scatter_level(int level, const Real* x, const Real* upstream, GridGradient<Real>& grad) const;

  HashGridConfig config_;
  std::vector<int> resolution_;
  std::vector<bool> dense_;
  std::vector<std::size_t> offset_;  // L + 1 entry offsets
  std::vector<Real> params_;
};

/// Accumulated table gradients. `sum` holds the exact gradient of the loss;
/// `touches` counts how many (query, corner) pairs hit each entry since the
/// last reset, so colliding contributions can be averaged.
template <typename Real>
class GridGradient {
 public:
  GridGradient() = default;
  explicit GridGradient(const HashGrid<Real>& grid);

  std::span<Real> sum() { return sum_; }
  std::span<const Real> sum() const { return sum_; }
  std::span<const std::uint32_t> touches() const { return touches_; }

  /// Entries touched since the last reset, per level, in first-touch order.
  const std::vector<std::vector<std::uint32_t>>& touched() const { return touched_; }

  /// sum / touches for one parameter (0 for untouched entries).
  Real averaged(std::size_t param_index) const;
  /// Averaged gradient of every parameter, same layout as the grid.
  std::vector<Real> averaged() const;

  /// Clears only what was touched.
  void reset();

  void add(int level, std::size_t global_entry, const Real* upstream, Real weight);

  /// Adds another accumulator of the same grid (sums and touch counts).
  void merge(const GridGradient& other);

  int features_per_level() const { return features_; }

 private:
  int features_ = 1;
  std::vector<Real> sum_;
  std::vector<std::uint32_t> touches_;
  std::vector<std::vector<std::uint32_t>> touched_;  // global entry ids per level
};

extern template class HashGrid<float>;
extern template class HashGrid<double>;
extern template class GridGradient<float>;
extern template class GridGradient<double>;

}  // namespace marf
