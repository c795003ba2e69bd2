#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace marf {

/// Row-major interleaved image with intensities normalized to [0,1].
/// Channel count is 1 (gray) or 3 (RGB).
class ImageBuffer {
 public:
  ImageBuffer() = default;

  /// Zero-filled image.
  ImageBuffer(int width, int height, int channels);

  /// Takes ownership of `data`; throws ArgumentError when the size, channel
  /// count or value range is invalid.
  ImageBuffer(int width, int height, int channels, std::vector<float> data);

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }
  bool empty() const { return data_.empty(); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  float at(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }
  float& at(int x, int y, int c = 0) { return data_[index(x, y, c)]; }

  /// Clamps every value into [0,1]; NaN becomes 0.
  void clamp01();

  bool operator==(const ImageBuffer&) const = default;

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<float> data_;
};

/// Decodes a PNG or JPEG file. 8-bit samples are divided by 255; alpha is
/// dropped, gray stays single-channel.
ImageBuffer load_image(const std::filesystem::path& path);

/// Writes an 8-bit PNG (values are clamped and rounded to the nearest level).
void save_image(const ImageBuffer& img, const std::filesystem::path& path);

/// Rec. 601 luma for RGB input, identity copy for single-channel input.
ImageBuffer to_grayscale(const ImageBuffer& img);

inline constexpr float kLumaR = 0.299f;
inline constexpr float kLumaG = 0.587f;
inline constexpr float kLumaB = 0.114f;

}  // namespace marf
