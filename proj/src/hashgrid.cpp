#include "marf/hashgrid.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "marf/error.hpp"
#include "marf/parallel.hpp"

namespace marf {

void HashGridConfig::validate() const {
  if (levels < 1) throw ConfigError("hash grid needs at least one level");
  if (min_resolution < 1) throw ConfigError("hash grid minimum resolution must be >= 1");
  if (max_resolution < min_resolution) throw ConfigError("hash grid maximum resolution below minimum");
  if (table_size == 0 || !std::has_single_bit(table_size)) throw ConfigError("hash table size must be a power of two");
  if (features_per_level < 1) throw ConfigError("hash grid needs at least one feature per level");
}

int level_resolution(const HashGridConfig& config, int level) {
  if (config.levels == 1 || config.max_resolution == config.min_resolution) return config.min_resolution;
  const double growth =
      (std::log(static_cast<double>(config.max_resolution)) - std::log(static_cast<double>(config.min_resolution))) /
      (config.levels - 1);
  // The tolerance absorbs round-off so that the last level lands on N_max.
  const double n = std::floor(config.min_resolution * std::exp(growth * level) + 1e-9);
  return std::clamp(static_cast<int>(n), config.min_resolution, config.max_resolution);
}

std::uint32_t spatial_hash(std::uint32_t ix, std::uint32_t iy, std::uint32_t iz, std::uint32_t table_size) {
  constexpr std::uint32_t kPrimeY = 2654435761u;
  constexpr std::uint32_t kPrimeZ = 805459861u;
  const std::uint32_t h = ix ^ (iy * kPrimeY) ^ (iz * kPrimeZ);
  return std::has_single_bit(table_size) ? (h & (table_size - 1)) : (h % table_size);
}

bool level_is_dense(const HashGridConfig& config, int level) {
  const std::uint64_t side = static_cast<std::uint64_t>(level_resolution(config, level)) + 1;
  return side * side * side <= config.table_size;
}

std::size_t level_entry_count(const HashGridConfig& config, int level) {
  if (!level_is_dense(config, level)) return config.table_size;
  const std::size_t side = static_cast<std::size_t>(level_resolution(config, level)) + 1;
  return side * side * side;
}

std::uint32_t vertex_index(const HashGridConfig& config, int level, std::uint32_t ix, std::uint32_t iy,
                           std::uint32_t iz) {
  if (level_is_dense(config, level)) {
    const std::uint32_t side = static_cast<std::uint32_t>(level_resolution(config, level)) + 1;
    return ix + iy * side + iz * side * side;
  }
  return spatial_hash(ix, iy, iz, config.table_size);
}

// --- HashGrid ------------------------------------------------------------------

template <typename Real>
HashGrid<Real>::HashGrid(const HashGridConfig& config) : config_(config) {
  config_.validate();
  offset_.push_back(0);
  for (int l = 0; l < config_.levels; ++l) {
    resolution_.push_back(level_resolution(config_, l));
    dense_.push_back(level_is_dense(config_, l));
    offset_.push_back(offset_.back() + level_entry_count(config_, l));
  }
  params_.assign(offset_.back() * config_.features_per_level, Real(0));
}

template <typename Real>
void HashGrid<Real>::initialize_uniform(Real scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(scale), static_cast<double>(scale));
  for (auto& v : params_) v = static_cast<Real>(dist(rng));
}

template <typename Real>
CornerSet<Real> HashGrid<Real>::corners(int level, const Real* x) const {
  const int n = resolution_[level];
  const bool is_dense = dense_[level];
  const std::uint32_t side = static_cast<std::uint32_t>(n) + 1;
  std::uint32_t cell[3];
  Real frac[3];
  for (int a = 0; a < 3; ++a) {
    const Real p = std::clamp(x[a], Real(0), Real(1)) * static_cast<Real>(n);
    const int c = std::min(static_cast<int>(std::floor(p)), n - 1);
    cell[a] = static_cast<std::uint32_t>(c);
    frac[a] = std::clamp(p - static_cast<Real>(c), Real(0), Real(1));
  }
  CornerSet<Real> out;
  for (int k = 0; k < 8; ++k) {
    const std::uint32_t ix = cell[0] + (k & 1), iy = cell[1] + ((k >> 1) & 1), iz = cell[2] + ((k >> 2) & 1);
    out.index[k] = is_dense ? ix + iy * side + iz * side * side : spatial_hash(ix, iy, iz, config_.table_size);
    out.weight[k] = ((k & 1) ? frac[0] : Real(1) - frac[0]) * (((k >> 1) & 1) ? frac[1] : Real(1) - frac[1]) *
                    (((k >> 2) & 1) ? frac[2] : Real(1) - frac[2]);
  }
  return out;
}

template <typename Real>
void HashGrid<Real>::encode(const Real* x, Real* out) const {
  const int F = config_.features_per_level;
  for (int l = 0; l < config_.levels; ++l) {
    const CornerSet<Real> cs = corners(l, x);
    Real* dst = out + l * F;
    std::fill(dst, dst + F, Real(0));
    for (int k = 0; k < 8; ++k) {
      const Real* src = &params_[(offset_[l] + cs.index[k]) * F];
      for (int f = 0; f < F; ++f) dst[f] += cs.weight[k] * src[f];
    }
  }
}

template <typename Real>
void HashGrid<Real>::encode_batch(const Matrix& positions, Matrix& out) const {
  const int F = config_.features_per_level;
  const Eigen::Index count = positions.cols();
  out.resize(output_dim(), count);
  out.setZero();
  // Level-major traversal keeps one table hot in cache at a time.
  for (int l = 0; l < config_.levels; ++l) {
    const Real* table = &params_[offset_[l] * F];
    for (Eigen::Index s = 0; s < count; ++s) {
      const CornerSet<Real> cs = corners(l, positions.col(s).data());
      Real* dst = out.col(s).data() + l * F;
      for (int k = 0; k < 8; ++k) {
        const Real* src = table + static_cast<std::size_t>(cs.index[k]) * F;
        for (int f = 0; f < F; ++f) dst[f] += cs.weight[k] * src[f];
      }
    }
  }
}

template <typename Real>
void HashGrid<Real>::scatter_level(int level, const Real* x, const Real* upstream, GridGradient<Real>& grad) const {
  const CornerSet<Real> cs = corners(level, x);
  for (int k = 0; k < 8; ++k) {
    grad.add(level, offset_[level] + cs.index[k], upstream, cs.weight[k]);
  }
}

template <typename Real>
void HashGrid<Real>::encode_backward(const Real* x, const Real* upstream, GridGradient<Real>& grad) const {
  for (int l = 0; l < config_.levels; ++l) {
    scatter_level(l, x, upstream + l * config_.features_per_level, grad);
  }
}

template <typename Real>
void HashGrid<Real>::encode_backward_batch(const Matrix& positions, const Matrix& upstream, GridGradient<Real>& grad,
                                           int threads) const {
  const int F = config_.features_per_level;
  parallel_for(static_cast<std::size_t>(config_.levels), threads, [&](std::size_t level) {
    const int l = static_cast<int>(level);
    for (Eigen::Index s = 0; s < positions.cols(); ++s) {
      scatter_level(l, positions.col(s).data(), upstream.col(s).data() + l * F, grad);
    }
  });
}

// --- GridGradient ----------------------------------------------------------

template <typename Real>
GridGradient<Real>::GridGradient(const HashGrid<Real>& grid)
    : features_(grid.config().features_per_level),
      sum_(grid.params().size(), Real(0)),
      touches_(grid.entry_count(), 0u),
      touched_(static_cast<std::size_t>(grid.config().levels)) {}

template <typename Real>
void GridGradient<Real>::add(int level, std::size_t global_entry, const Real* upstream, Real weight) {
  if (touches_[global_entry]++ == 0) touched_[level].push_back(static_cast<std::uint32_t>(global_entry));
  Real* dst = &sum_[global_entry * features_];
  for (int f = 0; f < features_; ++f) dst[f] += weight * upstream[f];
}

template <typename Real>
Real GridGradient<Real>::averaged(std::size_t param_index) const {
  const std::uint32_t n = touches_[param_index / features_];
  return n == 0 ? Real(0) : sum_[param_index] / static_cast<Real>(n);
}

template <typename Real>
std::vector<Real> GridGradient<Real>::averaged() const {
  std::vector<Real> out(sum_.size(), Real(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = averaged(i);
  return out;
}

template <typename Real>
void GridGradient<Real>::merge(const GridGradient& other) {
  for (std::size_t l = 0; l < other.touched_.size(); ++l) {
    for (std::uint32_t e : other.touched_[l]) {
      if (touches_[e] == 0) touched_[l].push_back(e);
      touches_[e] += other.touches_[e];
      const std::size_t base = static_cast<std::size_t>(e) * features_;
      for (int f = 0; f < features_; ++f) sum_[base + f] += other.sum_[base + f];
    }
  }
}

template <typename Real>
void GridGradient<Real>::reset() {
  for (auto& level : touched_) {
    for (std::uint32_t e : level) {
      touches_[e] = 0;
      std::fill_n(&sum_[static_cast<std::size_t>(e) * features_], features_, Real(0));
    }
    level.clear();
  }
}

template class HashGrid<float>;
template class HashGrid<double>;
template class GridGradient<float>;
template class GridGradient<double>;

}  // namespace marf
