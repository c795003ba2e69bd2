#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "marf/image.hpp"

namespace marf {

/// Thresholds for the six-stage image filter bank.
struct FilterConfig {
  std::uintmax_t min_file_bytes = 10 * 1024;
  int min_width = 128;
  int min_height = 128;
  int phash_hamming_threshold = 5;
  /// Compared against the Laplacian variance of intensities scaled to 0..255.
  double blur_threshold = 100.0;
  double histogram_std_multiplier = 1.0;
  double histogram_pixel_fraction = 0.5;

  /// Throws ConfigError on negative thresholds or a fraction outside (0,1].
  void validate() const;
};

enum class FilterStage { Load, FileSize, Shape, Duplicate, Grayscale, Histogram, Blur };

const char* to_string(FilterStage stage);

struct PerceptualHash {
  std::uint64_t bits = 0;
  bool operator==(const PerceptualHash&) const = default;
};

int hamming_distance(PerceptualHash a, PerceptualHash b);

// --- individual stages ---------------------------------------------------

/// Throws IoError when the file cannot be stat'ed.
bool passes_file_size(const std::filesystem::path& path, std::uintmax_t min_bytes);

bool passes_shape(const ImageBuffer& img, int min_width, int min_height);

/// 64-bit DCT hash: grayscale, area-resample to 32x32, 2D DCT-II, keep the
/// top-left 8x8 block without DC (63 coefficients), bit k set when the k-th
/// coefficient (row-major) exceeds their median. Bit 63 is always 0.
PerceptualHash perceptual_hash(const ImageBuffer& img);

struct HashedImage {
  std::string id;
  PerceptualHash hash;
  std::size_t pixel_count = 0;
};

struct DedupeResult {
  std::vector<std::string> kept;
  /// Each group lists member ids in scan order; the first entry founded it.
  std::vector<std::vector<std::string>> groups;
};

/// Greedy clustering in input order against each group's founding hash.
/// The kept member of a group is the one with the most pixels, ties broken
/// by the lexicographically smallest id.
DedupeResult dedupe(const std::vector<HashedImage>& images, int threshold);

/// True for single-channel images and for RGB images whose channels differ
/// by at most 1/255 at every pixel.
bool is_grayscale(const ImageBuffer& img);

/// HSV saturation (max-min)/max of one RGB pixel, 0 for black.
float pixel_saturation(float r, float g, float b);

struct SaturationStats {
  double mean = 0.0;
  double stddev = 0.0;
};

/// Mean and population standard deviation of the per-image mean saturation.
/// Throws ArgumentError for an empty corpus or non-RGB input.
SaturationStats saturation_statistics(const std::vector<const ImageBuffer*>& corpus);
SaturationStats saturation_statistics(const std::vector<ImageBuffer>& corpus);

/// Fraction of pixels whose saturation lies outside mean +- k*std.
double saturation_outlier_fraction(const ImageBuffer& img, SaturationStats stats, double k);

bool passes_color_histogram(const ImageBuffer& img, SaturationStats stats, double k, double fraction);

/// Population variance of the 4-neighbour Laplacian response over the valid
/// region, computed on the grayscale image in [0,1] units.
/// Throws ArgumentError for images smaller than 3x3.
double laplacian_variance(const ImageBuffer& img);

// --- whole bank ----------------------------------------------------------

struct FilterVerdict {
  std::string path;
  bool kept = false;
  std::optional<FilterStage> stage;  // set when rejected
  std::string reason;
  /// Metric of the deciding stage (or of the blur stage for survivors).
  double metric = 0.0;
};

struct FilterReport {
  std::vector<FilterVerdict> verdicts;  // manifest order
  std::map<FilterStage, std::size_t> rejected_per_stage;
  std::optional<SaturationStats> saturation;

  std::vector<std::string> survivors() const;
  std::size_t rejected_count() const;

  /// Aligned table for humans.
  std::string to_table() const;
  /// One `key=value` record per image.
  std::string to_key_value() const;
};

/// Runs stages (a) size, (b) shape, (c) dedupe, (d) grayscale,
/// (e) histogram against survivor statistics, (f) blur. Unreadable files
/// are rejected at FilterStage::Load. `threads` <= 1 runs sequentially; the
/// report is identical either way.
FilterReport run_filter_bank(const std::vector<std::filesystem::path>& manifest,
                             const FilterConfig& config, int threads = 1);

/// Reads one path per line; blank lines and lines starting with '#' are
/// skipped. Relative paths are resolved against the manifest's directory.
std::vector<std::filesystem::path> read_path_manifest(const std::filesystem::path& manifest);

}  // namespace marf
