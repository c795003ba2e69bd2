#include "marf/filters.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "marf/error.hpp"
#include "marf/parallel.hpp"

namespace marf {

void FilterConfig::validate() const {
  if (min_width < 0 || min_height < 0) throw ConfigError("minimum image shape must be nonnegative");
  if (phash_hamming_threshold < 0) throw ConfigError("hash distance threshold must be nonnegative");
  if (blur_threshold < 0.0) throw ConfigError("blur threshold must be nonnegative");
  if (histogram_std_multiplier < 0.0) throw ConfigError("histogram std multiplier must be nonnegative");
  if (!(histogram_pixel_fraction > 0.0 && histogram_pixel_fraction <= 1.0)) {
    throw ConfigError("histogram pixel fraction must lie in (0,1]");
  }
}

const char* to_string(FilterStage stage) {
  switch (stage) {
    case FilterStage::Load: return "load";
    case FilterStage::FileSize: return "file_size";
    case FilterStage::Shape: return "shape";
    case FilterStage::Duplicate: return "duplicate";
    case FilterStage::Grayscale: return "grayscale";
    case FilterStage::Histogram: return "histogram";
    case FilterStage::Blur: return "blur";
  }
  return "unknown";
}

int hamming_distance(PerceptualHash a, PerceptualHash b) { return std::popcount(a.bits ^ b.bits); }

bool passes_file_size(const std::filesystem::path& path, std::uintmax_t min_bytes) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw IoError("cannot stat " + path.string() + ": " + ec.message());
  return size >= min_bytes;
}

bool passes_shape(const ImageBuffer& img, int min_width, int min_height) {
  return img.width() >= min_width && img.height() >= min_height;
}

namespace {

constexpr int kHashSide = 32;
constexpr int kHashBlock = 8;

// Box-filter resample of a single-channel image; each output cell averages
// the source area it covers, weighting partially covered pixels.
std::vector<double> area_resample(const ImageBuffer& gray, int out_w, int out_h) {
  std::vector<double> out(static_cast<std::size_t>(out_w) * out_h, 0.0);
  const double sx = static_cast<double>(gray.width()) / out_w;
  const double sy = static_cast<double>(gray.height()) / out_h;
  for (int oy = 0; oy < out_h; ++oy) {
    const double y0 = oy * sy, y1 = (oy + 1) * sy;
    for (int ox = 0; ox < out_w; ++ox) {
      const double x0 = ox * sx, x1 = (ox + 1) * sx;
      double acc = 0.0, area = 0.0;
      for (int y = static_cast<int>(y0); y < std::min<double>(std::ceil(y1), gray.height()); ++y) {
        const double wy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
        if (wy <= 0.0) continue;
        for (int x = static_cast<int>(x0); x < std::min<double>(std::ceil(x1), gray.width()); ++x) {
          const double wx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
          if (wx <= 0.0) continue;
          acc += wx * wy * gray.at(x, y);
          area += wx * wy;
        }
      }
      out[static_cast<std::size_t>(oy) * out_w + ox] = area > 0.0 ? acc / area : 0.0;
    }
  }
  return out;
}

}  // namespace

PerceptualHash perceptual_hash(const ImageBuffer& img) {
  if (img.empty()) throw ArgumentError("cannot hash an empty image");
  const ImageBuffer gray = to_grayscale(img);
  const std::vector<double> small = area_resample(gray, kHashSide, kHashSide);

  // cos table for the low-frequency rows of a 32-point DCT-II
  std::array<std::array<double, kHashSide>, kHashBlock> basis{};
  for (int u = 0; u < kHashBlock; ++u) {
    for (int x = 0; x < kHashSide; ++x) {
      basis[u][x] = std::cos(std::numbers::pi * (2 * x + 1) * u / (2.0 * kHashSide));
    }
  }
  // rows first: tmp[y][u] = sum_x small[y][x] * basis[u][x]
  std::array<std::array<double, kHashBlock>, kHashSide> tmp{};
  for (int y = 0; y < kHashSide; ++y) {
    for (int u = 0; u < kHashBlock; ++u) {
      double acc = 0.0;
      for (int x = 0; x < kHashSide; ++x) acc += small[y * kHashSide + x] * basis[u][x];
      tmp[y][u] = acc;
    }
  }
  std::array<double, kHashBlock * kHashBlock - 1> coeffs{};
  std::size_t k = 0;
  for (int v = 0; v < kHashBlock; ++v) {
    for (int u = 0; u < kHashBlock; ++u) {
      double acc = 0.0;
      for (int y = 0; y < kHashSide; ++y) acc += tmp[y][u] * basis[v][y];
      if (u == 0 && v == 0) continue;
      coeffs[k++] = acc;
    }
  }
  auto sorted = coeffs;
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  const double median = sorted[sorted.size() / 2];

  PerceptualHash hash;
  for (std::size_t i = 0; i < coeffs.size(); ++i) {
    if (coeffs[i] > median) hash.bits |= (std::uint64_t{1} << i);
  }
  return hash;
}

namespace {

struct IndexGroup {
  std::vector<std::size_t> members;  // scan order, founder first
  std::size_t kept = 0;
};

std::vector<IndexGroup> dedupe_indices(const std::vector<HashedImage>& images, int threshold) {
  std::vector<IndexGroup> groups;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const IndexGroup& g) {
      return hamming_distance(images[g.members.front()].hash, images[i].hash) <= threshold;
    });
    if (it == groups.end()) {
      groups.push_back({{i}, i});
    } else {
      it->members.push_back(i);
    }
  }
  for (auto& g : groups) {
    for (std::size_t idx : g.members) {
      const auto& cand = images[idx];
      const auto& cur = images[g.kept];
      if (cand.pixel_count > cur.pixel_count || (cand.pixel_count == cur.pixel_count && cand.id < cur.id)) {
        g.kept = idx;
      }
    }
  }
  return groups;
}

}  // namespace

DedupeResult dedupe(const std::vector<HashedImage>& images, int threshold) {
  DedupeResult result;
  for (const auto& g : dedupe_indices(images, threshold)) {
    result.kept.push_back(images[g.kept].id);
    std::vector<std::string> ids;
    for (std::size_t idx : g.members) ids.push_back(images[idx].id);
    result.groups.push_back(std::move(ids));
  }
  return result;
}

bool is_grayscale(const ImageBuffer& img) {
  if (img.channels() == 1) return true;
  constexpr float kTolerance = 1.0f / 255.0f;
  auto d = img.data();
  for (std::size_t p = 0; p < img.pixel_count(); ++p) {
    const float r = d[3 * p], g = d[3 * p + 1], b = d[3 * p + 2];
    if (std::max({r, g, b}) - std::min({r, g, b}) > kTolerance) return false;
  }
  return true;
}

float pixel_saturation(float r, float g, float b) {
  const float hi = std::max({r, g, b});
  if (hi <= 0.0f) return 0.0f;
  return (hi - std::min({r, g, b})) / hi;
}

namespace {

double mean_saturation(const ImageBuffer& img) {
  if (img.channels() != 3) throw ArgumentError("saturation statistics need RGB images");
  auto d = img.data();
  double acc = 0.0;
  for (std::size_t p = 0; p < img.pixel_count(); ++p) {
    acc += pixel_saturation(d[3 * p], d[3 * p + 1], d[3 * p + 2]);
  }
  return img.pixel_count() ? acc / static_cast<double>(img.pixel_count()) : 0.0;
}

SaturationStats stats_of(const std::vector<double>& means) {
  if (means.empty()) throw ArgumentError("saturation statistics need a nonempty corpus");
  double mean = 0.0;
  for (double m : means) mean += m;
  mean /= static_cast<double>(means.size());
  double var = 0.0;
  for (double m : means) var += (m - mean) * (m - mean);
  var /= static_cast<double>(means.size());
  return {mean, std::sqrt(var)};
}

}  // namespace

SaturationStats saturation_statistics(const std::vector<const ImageBuffer*>& corpus) {
  std::vector<double> means;
  means.reserve(corpus.size());
  for (const ImageBuffer* img : corpus) means.push_back(mean_saturation(*img));
  return stats_of(means);
}

SaturationStats saturation_statistics(const std::vector<ImageBuffer>& corpus) {
  std::vector<const ImageBuffer*> ptrs;
  for (const auto& img : corpus) ptrs.push_back(&img);
  return saturation_statistics(ptrs);
}

double saturation_outlier_fraction(const ImageBuffer& img, SaturationStats stats, double k) {
  if (img.channels() != 3) throw ArgumentError("histogram filter needs an RGB image");
  if (img.pixel_count() == 0) return 0.0;
  const double lo = stats.mean - k * stats.stddev;
  const double hi = stats.mean + k * stats.stddev;
  auto d = img.data();
  std::size_t outliers = 0;
  for (std::size_t p = 0; p < img.pixel_count(); ++p) {
    const double s = pixel_saturation(d[3 * p], d[3 * p + 1], d[3 * p + 2]);
    if (s < lo || s > hi) ++outliers;
  }
  return static_cast<double>(outliers) / static_cast<double>(img.pixel_count());
}

bool passes_color_histogram(const ImageBuffer& img, SaturationStats stats, double k, double fraction) {
  return saturation_outlier_fraction(img, stats, k) <= fraction;
}

double laplacian_variance(const ImageBuffer& img) {
  if (img.width() < 3 || img.height() < 3) {
    throw ArgumentError("Laplacian variance needs an image of at least 3x3 pixels");
  }
  const ImageBuffer gray = to_grayscale(img);
  const int w = gray.width(), h = gray.height();
  // Two-pass mean/variance in double; the response count is (w-2)(h-2).
  std::vector<double> response;
  response.reserve(static_cast<std::size_t>(w - 2) * (h - 2));
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 1; x < w - 1; ++x) {
      const double c = gray.at(x, y);
      response.push_back(static_cast<double>(gray.at(x - 1, y)) + gray.at(x + 1, y) + gray.at(x, y - 1) +
                         gray.at(x, y + 1) - 4.0 * c);
    }
  }
  double mean = 0.0;
  for (double r : response) mean += r;
  mean /= static_cast<double>(response.size());
  double var = 0.0;
  for (double r : response) var += (r - mean) * (r - mean);
  return var / static_cast<double>(response.size());
}

// --- filter bank -----------------------------------------------------------

std::vector<std::string> FilterReport::survivors() const {
  std::vector<std::string> out;
  for (const auto& v : verdicts) {
    if (v.kept) out.push_back(v.path);
  }
  return out;
}

std::size_t FilterReport::rejected_count() const {
  std::size_t n = 0;
  for (const auto& v : verdicts) n += v.kept ? 0 : 1;
  return n;
}

std::string FilterReport::to_table() const {
  std::size_t width = 4;
  for (const auto& v : verdicts) width = std::max(width, v.path.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width)) << "path" << "  " << std::setw(8) << "verdict"
     << "  " << std::setw(10) << "stage" << "  " << std::setw(14) << "metric" << "  reason\n";
  for (const auto& v : verdicts) {
    os << std::left << std::setw(static_cast<int>(width)) << v.path << "  " << std::setw(8)
       << (v.kept ? "kept" : "rejected") << "  " << std::setw(10) << (v.stage ? to_string(*v.stage) : "-")
       << "  " << std::setw(14) << std::setprecision(6) << v.metric << "  " << v.reason << "\n";
  }
  os << "\nkept " << (verdicts.size() - rejected_count()) << " of " << verdicts.size() << "\n";
  for (const auto& [stage, count] : rejected_per_stage) {
    os << "  rejected at " << to_string(stage) << ": " << count << "\n";
  }
  if (saturation) {
    os << "saturation mean " << saturation->mean << " std " << saturation->stddev << "\n";
  }
  return os.str();
}

std::string FilterReport::to_key_value() const {
  std::ostringstream os;
  os << std::setprecision(17);
  for (const auto& v : verdicts) {
    os << "path=" << v.path << "\tverdict=" << (v.kept ? "kept" : "rejected")
       << "\tstage=" << (v.stage ? to_string(*v.stage) : "none") << "\tmetric=" << v.metric << "\n";
  }
  return os.str();
}

namespace {

struct Candidate {
  std::optional<ImageBuffer> image;
  PerceptualHash hash;
  double metric = 0.0;
};

void reject(FilterReport& report, std::size_t i, FilterStage stage, std::string reason, double metric) {
  auto& v = report.verdicts[i];
  v.kept = false;
  v.stage = stage;
  v.reason = std::move(reason);
  v.metric = metric;
  report.rejected_per_stage[stage] += 1;
}

}  // namespace

FilterReport run_filter_bank(const std::vector<std::filesystem::path>& manifest, const FilterConfig& config,
                             int threads) {
  config.validate();
  FilterReport report;
  const std::size_t n = manifest.size();
  report.verdicts.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    report.verdicts[i].path = manifest[i].string();
    report.verdicts[i].kept = true;
  }
  if (n == 0) return report;

  // Stages (a) and (b) plus the per-image work of later stages, in parallel.
  // Workers only write their own slots; rejections are tallied afterwards
  // in manifest order.
  struct Early {
    std::optional<FilterStage> stage;
    std::string reason;
    double metric = 0.0;
  };
  std::vector<Early> early(n);
  std::vector<Candidate> cand(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto& path = manifest[i];
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec) {
      early[i] = {FilterStage::Load, "cannot stat: " + ec.message(), 0.0};
      return;
    }
    if (size < config.min_file_bytes) {
      early[i] = {FilterStage::FileSize, "file smaller than minimum", static_cast<double>(size)};
      return;
    }
    try {
      cand[i].image = load_image(path);
    } catch (const Error& e) {
      early[i] = {FilterStage::Load, e.what(), 0.0};
      return;
    }
    const ImageBuffer& img = *cand[i].image;
    if (!passes_shape(img, config.min_width, config.min_height)) {
      early[i] = {FilterStage::Shape,
                  std::to_string(img.width()) + "x" + std::to_string(img.height()) + " below minimum",
                  static_cast<double>(std::min(img.width(), img.height()))};
      cand[i].image.reset();
      return;
    }
    cand[i].hash = perceptual_hash(img);
  });
  for (std::size_t i = 0; i < n; ++i) {
    if (early[i].stage) reject(report, i, *early[i].stage, early[i].reason, early[i].metric);
  }

  // (c) duplicates up to a color filter
  std::vector<HashedImage> hashed;
  std::vector<std::size_t> hashed_index;
  for (std::size_t i = 0; i < n; ++i) {
    if (!report.verdicts[i].kept) continue;
    hashed.push_back({report.verdicts[i].path, cand[i].hash, cand[i].image->pixel_count()});
    hashed_index.push_back(i);
  }
  for (const auto& group : dedupe_indices(hashed, config.phash_hamming_threshold)) {
    for (std::size_t k : group.members) {
      if (k == group.kept) continue;
      reject(report, hashed_index[k], FilterStage::Duplicate, "near-duplicate of " + hashed[group.kept].id,
             hamming_distance(hashed[k].hash, hashed[group.kept].hash));
      cand[hashed_index[k]].image.reset();
    }
  }

  // (d) grayscale
  for (std::size_t i = 0; i < n; ++i) {
    if (!report.verdicts[i].kept) continue;
    if (is_grayscale(*cand[i].image)) {
      reject(report, i, FilterStage::Grayscale,
             cand[i].image->channels() == 1 ? "single channel" : "equal RGB channels",
             cand[i].image->channels());
      cand[i].image.reset();
    }
  }

  // (e) color histogram against the survivors of (a)-(d)
  std::vector<const ImageBuffer*> corpus;
  std::vector<std::size_t> corpus_index;
  for (std::size_t i = 0; i < n; ++i) {
    if (!report.verdicts[i].kept) continue;
    corpus.push_back(&*cand[i].image);
    corpus_index.push_back(i);
  }
  // A single image has no spread to compare against; the stage needs two.
  if (corpus.size() >= 2) {
    const SaturationStats stats = saturation_statistics(corpus);
    report.saturation = stats;
    std::vector<double> fraction(corpus.size());
    parallel_for(corpus.size(), threads, [&](std::size_t k) {
      fraction[k] = saturation_outlier_fraction(*corpus[k], stats, config.histogram_std_multiplier);
    });
    for (std::size_t k = 0; k < corpus.size(); ++k) {
      if (fraction[k] > config.histogram_pixel_fraction) {
        reject(report, corpus_index[k], FilterStage::Histogram, "saturation outlier", fraction[k]);
      }
    }
  }

  // (f) blur, on the 0..255 intensity scale
  std::vector<std::size_t> remaining;
  for (std::size_t i = 0; i < n; ++i) {
    if (report.verdicts[i].kept) remaining.push_back(i);
  }
  std::vector<double> sharpness(remaining.size());
  parallel_for(remaining.size(), threads, [&](std::size_t k) {
    sharpness[k] = laplacian_variance(*cand[remaining[k]].image) * 255.0 * 255.0;
  });
  for (std::size_t k = 0; k < remaining.size(); ++k) {
    const std::size_t i = remaining[k];
    if (sharpness[k] < config.blur_threshold) {
      reject(report, i, FilterStage::Blur, "Laplacian variance below threshold", sharpness[k]);
    } else {
      report.verdicts[i].metric = sharpness[k];
    }
  }
  return report;
}

std::vector<std::filesystem::path> read_path_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot read manifest " + manifest.string());
  const auto base = manifest.parent_path();
  std::vector<std::filesystem::path> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto last = line.find_last_not_of(" \t\r");
    std::filesystem::path p = line.substr(first, last - first + 1);
    out.push_back(p.is_relative() ? base / p : p);
  }
  return out;
}

}  // namespace marf
