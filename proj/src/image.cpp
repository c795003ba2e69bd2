#include "marf/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>

#include "marf/error.hpp"

namespace marf {

ImageBuffer::ImageBuffer(int width, int height, int channels)
    : width_(width), height_(height), channels_(channels) {
  if (width < 0 || height < 0) throw ArgumentError("image dimensions must be nonnegative");
  if (channels != 1 && channels != 3) {
    throw ArgumentError("image channel count must be 1 or 3, got " + std::to_string(channels));
  }
  data_.assign(static_cast<std::size_t>(width) * height * channels, 0.0f);
}

ImageBuffer::ImageBuffer(int width, int height, int channels, std::vector<float> data)
    : ImageBuffer(width, height, channels) {
  if (data.size() != data_.size()) {
    throw ArgumentError("image data length " + std::to_string(data.size()) + " does not match " +
                        std::to_string(width) + "x" + std::to_string(height) + "x" +
                        std::to_string(channels));
  }
  for (float v : data) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ArgumentError("image intensity outside [0,1]");
  }
  data_ = std::move(data);
}

void ImageBuffer::clamp01() {
  for (float& v : data_) v = std::isnan(v) ? 0.0f : std::clamp(v, 0.0f, 1.0f);
}

namespace {

enum class Codec { Png, Jpeg, Unknown };

Codec sniff(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot open image: " + path.string());
  unsigned char magic[8] = {};
  in.read(reinterpret_cast<char*>(magic), sizeof(magic));
  if (in.gcount() >= 8 && png_sig_cmp(magic, 0, 8) == 0) return Codec::Png;
  if (in.gcount() >= 3 && magic[0] == 0xFF && magic[1] == 0xD8 && magic[2] == 0xFF) return Codec::Jpeg;
  return Codec::Unknown;
}

ImageBuffer from_bytes(const unsigned char* src, int width, int height, int src_channels,
                       int keep_channels) {
  ImageBuffer img(width, height, keep_channels);
  auto out = img.data();
  const std::size_t n = img.pixel_count();
  for (std::size_t p = 0; p < n; ++p) {
    for (int c = 0; c < keep_channels; ++c) {
      out[p * keep_channels + c] = static_cast<float>(src[p * src_channels + c]) / 255.0f;
    }
  }
  return img;
}

ImageBuffer load_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DecodeError("PNG decode failed for " + path.string() + ": " + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  const bool alpha = (image.format & PNG_FORMAT_FLAG_ALPHA) != 0;
  // Palette images expand to RGB(A) or gray depending on the palette content.
  image.format = color ? (alpha ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB)
                       : (alpha ? PNG_FORMAT_GA : PNG_FORMAT_GRAY);
  const int src_channels = PNG_IMAGE_SAMPLE_CHANNELS(image.format);
  std::vector<unsigned char> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw DecodeError("PNG decode failed for " + path.string() + ": " + msg);
  }
  return from_bytes(pixels.data(), static_cast<int>(image.width), static_cast<int>(image.height),
                    src_channels, color ? 3 : 1);
}

struct JpegErrorManager {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

ImageBuffer load_jpeg(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw DecodeError("cannot open image: " + path.string());

  jpeg_decompress_struct cinfo;
  JpegErrorManager jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  // Everything that must be released on the error path lives outside the
  // setjmp scope.
  std::vector<unsigned char> pixels;
  int width = 0, height = 0, components = 0;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DecodeError("JPEG decode failed for " + path.string() + ": " + jerr.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  if (cinfo.jpeg_color_space == JCS_GRAYSCALE) {
    cinfo.out_color_space = JCS_GRAYSCALE;
  } else if (cinfo.jpeg_color_space == JCS_CMYK || cinfo.jpeg_color_space == JCS_YCCK) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError("unsupported JPEG color layout (CMYK) in " + path.string());
  } else {
    cinfo.out_color_space = JCS_RGB;
  }
  jpeg_start_decompress(&cinfo);
  width = static_cast<int>(cinfo.output_width);
  height = static_cast<int>(cinfo.output_height);
  components = cinfo.output_components;
  pixels.resize(static_cast<std::size_t>(width) * height * components);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * components;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  if (components != 1 && components != 3) {
    throw FormatError("unsupported JPEG channel count " + std::to_string(components) + " in " +
                      path.string());
  }
  return from_bytes(pixels.data(), width, height, components, components);
}

}  // namespace

ImageBuffer load_image(const std::filesystem::path& path) {
  switch (sniff(path)) {
    case Codec::Png:
      return load_png(path);
    case Codec::Jpeg:
      return load_jpeg(path);
    case Codec::Unknown:
      break;
  }
  throw DecodeError("not a PNG or JPEG file: " + path.string());
}

void save_image(const ImageBuffer& img, const std::filesystem::path& path) {
  if (img.empty()) throw ArgumentError("cannot save an empty image to " + path.string());
  std::vector<unsigned char> bytes(img.data().size());
  std::transform(img.data().begin(), img.data().end(), bytes.begin(), [](float v) {
    if (std::isnan(v)) v = 0.0f;
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  });

  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot write PNG " + path.string() + ": " + msg);
  }
}

ImageBuffer to_grayscale(const ImageBuffer& img) {
  if (img.channels() == 1) return img;
  ImageBuffer gray(img.width(), img.height(), 1);
  auto src = img.data();
  auto dst = gray.data();
  for (std::size_t p = 0; p < img.pixel_count(); ++p) {
    const double y = 0.299 * src[3 * p] + 0.587 * src[3 * p + 1] + 0.114 * src[3 * p + 2];
    dst[p] = std::clamp(static_cast<float>(y), 0.0f, 1.0f);
  }
  return gray;
}

}  // namespace marf
