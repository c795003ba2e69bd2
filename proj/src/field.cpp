#include "marf/field.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include "marf/error.hpp"

namespace marf {

void FieldConfig::validate() const {
  if (hidden_width < 1) throw ConfigError("hidden width must be >= 1");
  if (geo_features < 0) throw ConfigError("geometry feature count must be >= 0");
  if (dir_frequencies < 0) throw ConfigError("direction frequency count must be >= 0");
}

namespace {
std::atomic<std::uint64_t> g_direction_normalizations{0};
}

std::uint64_t direction_normalization_count() { return g_direction_normalizations.load(); }

template <typename Real>
void direction_encode(const Real* d_in, int frequencies, Real* out) {
  Real d[3] = {d_in[0], d_in[1], d_in[2]};
  const Real norm = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
  if (std::abs(norm - Real(1)) > Real(1e-4) && norm > Real(0)) {
    g_direction_normalizations.fetch_add(1, std::memory_order_relaxed);
    for (Real& v : d) v /= norm;
  }
  out[0] = d[0];
  out[1] = d[1];
  out[2] = d[2];
  int k = 3;
  for (int i = 0; i < 3; ++i) {
    Real scale = 1;
    for (int f = 0; f < frequencies; ++f) {
      out[k++] = std::sin(scale * d[i]);
      out[k++] = std::cos(scale * d[i]);
      scale *= 2;
    }
  }
}

template void direction_encode<float>(const float*, int, float*);
template void direction_encode<double>(const double*, int, double*);

template <typename Real>
Real softplus(Real x) {
  return std::max(x, Real(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename Real>
Real logistic(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

template float softplus<float>(float);
template double softplus<double>(double);
template float logistic<float>(float);
template double logistic<double>(double);

// --- MlpParams ------------------------------------------------------------------

template <typename Real>
MlpParams<Real>::MlpParams(int encoding_dim, const FieldConfig& config) : config_(config), encoding_dim_(encoding_dim) {
  config_.validate();
  const int H = config.hidden_width, G = config.geo_features, D = config.dir_dim();
  shape_ = {{{H, encoding_dim}, {H, H}, {1 + G, H}, {H, G + D}, {3, H}}};
  std::size_t offset = 0;
  for (int l = 0; l < kLayers; ++l) {
    weight_offset_[l] = offset;
    offset += static_cast<std::size_t>(shape_[l][0]) * shape_[l][1];
    bias_offset_[l] = offset;
    offset += static_cast<std::size_t>(shape_[l][0]);
  }
  data_.assign(offset, Real(0));
}

template <typename Real>
void MlpParams<Real>::initialize(std::mt19937_64& rng) {
  set_zero();
  for (int l = 0; l < kLayers; ++l) {
    const double bound = std::sqrt(6.0 / cols(l));
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto w = weight(l);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<Real>(dist(rng));
    }
  }
}

template <typename Real>
void MlpParams<Real>::set_zero() {
  std::fill(data_.begin(), data_.end(), Real(0));
}

// --- FieldBatch ------------------------------------------------------------------

namespace {

template <typename M>
void check_finite(const M& m, const char* where) {
  if (!m.allFinite()) throw NumericalError(std::string("non-finite values in ") + where);
}

}  // namespace

template <typename Real>
void FieldBatch<Real>::set_inputs(Matrix positions, std::vector<int> ray_of_sample, const Matrix& directions,
                                  int dir_frequencies) {
  if (positions.rows() != 3 || static_cast<std::size_t>(positions.cols()) != ray_of_sample.size()) {
    throw ArgumentError("field batch positions and ray indices disagree");
  }
  positions_ = std::move(positions);
  ray_of_sample_ = std::move(ray_of_sample);
  for (Matrix* m : {&encoding_, &h0_, &h1_, &density_out_, &c0_, &rgb_}) m->resize(m->rows(), 0);
  sigma_.resize(0);
  const int D = 3 + 6 * dir_frequencies;
  dir_encoding_.resize(D, directions.cols());
  for (Eigen::Index r = 0; r < directions.cols(); ++r) {
    direction_encode(directions.col(r).data(), dir_frequencies, dir_encoding_.col(r).data());
  }
}

template <typename Real>
void FieldBatch<Real>::forward_density(const HashGrid<Real>& grid, const MlpParams<Real>& params) {
  grid.encode_batch(positions_, encoding_);
  check_finite(encoding_, "grid encoding");

  h0_.noalias() = params.weight(0) * encoding_;
  h0_.colwise() += params.bias(0);
  h0_ = h0_.cwiseMax(Real(0));
  check_finite(h0_, "density layer 0");

  h1_.noalias() = params.weight(1) * h0_;
  h1_.colwise() += params.bias(1);
  h1_ = h1_.cwiseMax(Real(0));
  check_finite(h1_, "density layer 1");

  density_out_.noalias() = params.weight(2) * h1_;
  density_out_.colwise() += params.bias(2);
  check_finite(density_out_, "density output layer");

  sigma_.resize(size());
  for (Eigen::Index s = 0; s < size(); ++s) sigma_[s] = softplus(density_out_(0, s));
}

template <typename Real>
void FieldBatch<Real>::forward_color(const MlpParams<Real>& params) {
  const int G = params.config().geo_features;
  const int D = params.config().dir_dim();
  const auto w3 = params.weight(3);

  dir_term_.noalias() = w3.rightCols(D) * dir_encoding_;
  dir_term_.colwise() += params.bias(3);
  c0_.noalias() = w3.leftCols(G) * density_out_.bottomRows(G);
  for (Eigen::Index s = 0; s < size(); ++s) c0_.col(s) += dir_term_.col(ray_of_sample_[s]);
  c0_ = c0_.cwiseMax(Real(0));
  check_finite(c0_, "color layer 0");

  rgb_.noalias() = params.weight(4) * c0_;
  rgb_.colwise() += params.bias(4);
  check_finite(rgb_, "color output layer");
  rgb_ = rgb_.unaryExpr([](Real v) { return logistic(v); });
}

template <typename Real>
void FieldBatch<Real>::select(const std::vector<int>& keep) {
  const Eigen::Index S = size();
  auto pick = [&](Matrix& m) {
    if (m.cols() != S) {
      m.resize(m.rows(), 0);
      return;
    }
    Matrix out(m.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(keep[k]);
    m = std::move(out);
  };
  pick(positions_);
  pick(encoding_);
  pick(h0_);
  pick(h1_);
  pick(density_out_);
  pick(c0_);
  pick(rgb_);
  RowVector sigma(sigma_.size() == S ? static_cast<Eigen::Index>(keep.size()) : 0);
  std::vector<int> rays(keep.size());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    if (sigma_.size() == S) sigma[static_cast<Eigen::Index>(k)] = sigma_[keep[k]];
    rays[k] = ray_of_sample_[keep[k]];
  }
  sigma_ = std::move(sigma);
  ray_of_sample_ = std::move(rays);
}

template <typename Real>
void FieldBatch<Real>::backward(const HashGrid<Real>& grid, const MlpParams<Real>& params, const RowVector& d_sigma,
                                const Matrix& d_rgb, MlpParams<Real>& grad, GridGradient<Real>& grid_grad,
                                int threads) {
  const int G = params.config().geo_features;
  const int D = params.config().dir_dim();
  const Eigen::Index S = size();

  // color net
  const Matrix d_rgb_raw = d_rgb.cwiseProduct(rgb_.cwiseProduct((Real(1) - rgb_.array()).matrix()));
  grad.weight(4).noalias() += d_rgb_raw * c0_.transpose();
  grad.bias(4) += d_rgb_raw.rowwise().sum();
  Matrix d_c0 = params.weight(4).transpose() * d_rgb_raw;
  d_c0 = d_c0.cwiseProduct((c0_.array() > Real(0)).template cast<Real>().matrix());

  auto g3 = grad.weight(3);
  g3.leftCols(G).noalias() += d_c0 * density_out_.bottomRows(G).transpose();
  Matrix d_c0_per_ray = Matrix::Zero(d_c0.rows(), dir_encoding_.cols());
  for (Eigen::Index s = 0; s < S; ++s) d_c0_per_ray.col(ray_of_sample_[s]) += d_c0.col(s);
  g3.rightCols(D).noalias() += d_c0_per_ray * dir_encoding_.transpose();
  grad.bias(3) += d_c0.rowwise().sum();

  // density net
  Matrix d_out(1 + G, S);
  for (Eigen::Index s = 0; s < S; ++s) d_out(0, s) = d_sigma[s] * logistic(density_out_(0, s));
  if (G > 0) d_out.bottomRows(G).noalias() = params.weight(3).leftCols(G).transpose() * d_c0;

  grad.weight(2).noalias() += d_out * h1_.transpose();
  grad.bias(2) += d_out.rowwise().sum();
  Matrix d_h1 = params.weight(2).transpose() * d_out;
  d_h1 = d_h1.cwiseProduct((h1_.array() > Real(0)).template cast<Real>().matrix());

  grad.weight(1).noalias() += d_h1 * h0_.transpose();
  grad.bias(1) += d_h1.rowwise().sum();
  Matrix d_h0 = params.weight(1).transpose() * d_h1;
  d_h0 = d_h0.cwiseProduct((h0_.array() > Real(0)).template cast<Real>().matrix());

  grad.weight(0).noalias() += d_h0 * encoding_.transpose();
  grad.bias(0) += d_h0.rowwise().sum();
  const Matrix d_encoding = params.weight(0).transpose() * d_h0;

  grid.encode_backward_batch(positions_, d_encoding, grid_grad, threads);
}

template <typename Real>
FieldOutput<Real> field_forward(const HashGrid<Real>& grid, const MlpParams<Real>& params,
                                const std::array<Real, 3>& x, const std::array<Real, 3>& d) {
  using Matrix = typename FieldBatch<Real>::Matrix;
  FieldBatch<Real> batch;
  Matrix pos(3, 1), dir(3, 1);
  for (int a = 0; a < 3; ++a) {
    pos(a, 0) = x[a];
    dir(a, 0) = d[a];
  }
  batch.set_inputs(std::move(pos), {0}, dir, params.config().dir_frequencies);
  batch.forward(grid, params);
  FieldOutput<Real> out;
  out.sigma = batch.sigma()[0];
  for (int c = 0; c < 3; ++c) out.rgb[c] = batch.rgb()(c, 0);
  return out;
}

template FieldOutput<float> field_forward<float>(const HashGrid<float>&, const MlpParams<float>&,
                                                 const std::array<float, 3>&, const std::array<float, 3>&);
template FieldOutput<double> field_forward<double>(const HashGrid<double>&, const MlpParams<double>&,
                                                   const std::array<double, 3>&, const std::array<double, 3>&);

template class MlpParams<float>;
template class MlpParams<double>;
template class FieldBatch<float>;
template class FieldBatch<double>;

}  // namespace marf
