#include "corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace marf::testing {

namespace {

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 1.0) * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c, g = x;
  } else if (hp < 2) {
    r = x, g = c;
  } else if (hp < 3) {
    g = c, b = x;
  } else if (hp < 4) {
    g = x, b = c;
  } else if (hp < 5) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

ImageBuffer value_texture(int width, int height, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.08);
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 5; ++i) waves.push_back({1 + 4 * u(rng), 1 + 4 * u(rng), 2 * std::numbers::pi * u(rng), u(rng)});
  ImageBuffer v(width, height, 1);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double s = 0.0;
      for (const auto& w : waves) {
        s += w.amp * std::sin(2 * std::numbers::pi * (w.fx * x / width + w.fy * y / height) + w.phase);
      }
      const double value = 0.75 + 0.07 * s + noise(rng);
      v.at(x, y) = static_cast<float>(std::clamp(value, 0.5, 1.0));
    }
  }
  return v;
}

}  // namespace

ImageBuffer textured_frame(int width, int height, unsigned seed, double saturation) {
  const ImageBuffer v = value_texture(width, height, seed);
  const double hue = std::fmod(seed * 0.61803398875, 1.0);
  ImageBuffer out(width, height, 3);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const auto rgb = hsv_to_rgb(hue, saturation, v.at(x, y));
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = rgb[c];
    }
  }
  return out;
}

ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& k : kernel) k /= total;
  const int W = img.width(), H = img.height(), C = img.channels();
  ImageBuffer tmp(W, H, C), out(W, H, C);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) s += kernel[i + radius] * img.at(std::clamp(x + i, 0, W - 1), y, c);
        tmp.at(x, y, c) = static_cast<float>(s);
      }
    }
  }
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) s += kernel[i + radius] * tmp.at(x, std::clamp(y + i, 0, H - 1), c);
        out.at(x, y, c) = static_cast<float>(s);
      }
    }
  }
  return out;
}

std::vector<CorpusEntry> build_filter_corpus(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<CorpusEntry> out;
  auto add = [&](const std::string& name, const ImageBuffer& img, std::optional<FilterStage> expected) {
    const auto path = dir / name;
    save_image(img, path);
    out.push_back({path, expected});
  };
  constexpr int kSize = 160;

  add("a_tiny.png", textured_frame(16, 16, 901), FilterStage::FileSize);
  add("b_thumbnail.png", textured_frame(100, 100, 902), FilterStage::Shape);

  // Three filtered versions of one frame; equal pixel counts, so the group
  // keeps the lexicographically smallest name.
  const ImageBuffer original = textured_frame(kSize, kSize, 903);
  ImageBuffer darker = original, tinted = original, gamma = original;
  for (float& v : darker.data()) v *= 0.85f;
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      tinted.at(x, y, 1) *= 0.93f;
      tinted.at(x, y, 2) *= 0.85f;
    }
  }
  for (float& v : gamma.data()) v = std::pow(v, 0.8f);
  add("d_dup_darker.png", darker, std::nullopt);
  add("d_dup_tinted.png", tinted, FilterStage::Duplicate);
  add("d_dup_gamma.png", gamma, FilterStage::Duplicate);

  const ImageBuffer gray = value_texture(kSize, kSize, 904);
  add("e_gray_single.png", gray, FilterStage::Grayscale);
  ImageBuffer gray3(kSize, kSize, 3);
  const ImageBuffer gray_src = value_texture(kSize, kSize, 905);
  for (int y = 0; y < kSize; ++y) {
    for (int x = 0; x < kSize; ++x) {
      for (int c = 0; c < 3; ++c) gray3.at(x, y, c) = gray_src.at(x, y);
    }
  }
  add("e_gray_rgb.png", gray3, FilterStage::Grayscale);

  add("f_saturated.png", textured_frame(kSize, kSize, 906, 1.0), FilterStage::Histogram);

  add("g_blurred_1.png", gaussian_blur(textured_frame(kSize, kSize, 907), 4.0), FilterStage::Blur);
  add("g_blurred_2.png", gaussian_blur(textured_frame(kSize, kSize, 908), 4.0), FilterStage::Blur);

  for (unsigned i = 0; i < 10; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "clean_%02u.png", i);
    add(name, textured_frame(kSize, kSize, i), std::nullopt);
  }
  return out;
}

}  // namespace marf::testing
