#include "xrds/image_io.hpp"

#include <png.h>

#include <cfenv>
#include <cmath>
#include <string>

#include "xrds/data_io.hpp"
#include "xrds/errors.hpp"
#include "xrds/metrics.hpp"

namespace xrds {

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw ValidationError("write_png: 1 or 3 channels supported");
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw ValidationError("write_png: pixel buffer does not match dims");
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("png encode failed: ") + img.message);
  }
  std::string buffer(size, '\0');
  if (!png_image_write_to_memory(&img, buffer.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("png encode failed: ") + img.message);
  }
  buffer.resize(size);
  write_file_atomic(path, buffer);
}

Image8 read_png(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw IoError("cannot decode png " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  Image8 out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.channels = 3;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode png " + path.string() + ": " + img.message);
  }
  return out;
}

Image8 srgb_preview(const FeatureMap& linear_rgb) {
  if (linear_rgb.rank() != 3 || linear_rgb.channels() != 3) {
    throw ValidationError("srgb_preview: expected 3 x H x W, got " + shape_string(linear_rgb.shape()));
  }
  Image8 out;
  out.width = linear_rgb.width();
  out.height = linear_rgb.height();
  out.channels = 3;
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  const int previous = std::fegetround();
  std::fesetround(FE_TONEAREST);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::nearbyint(255.0 * linear_to_srgb(static_cast<double>(linear_rgb.at(c, y, x))));
        out.pixels[(static_cast<std::size_t>(y) * out.width + x) * 3 + c] = static_cast<std::uint8_t>(v);
      }
  std::fesetround(previous);
  return out;
}

FeatureMap unit_map_from_png(const Image8& image) {
  FeatureMap out = FeatureMap::map(3, image.height, image.width);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src = image.channels == 3 ? c : 0;
        out.at(c, y, x) =
            static_cast<float>(image.pixels[(static_cast<std::size_t>(y) * image.width + x) * image.channels + src]) /
            255.0f;
      }
  return out;
}

}  // namespace xrds
