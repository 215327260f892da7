// SPDX-License-Identifier: Apache-2.0
#include <png.h>

#include <cmath>
#include <vector>

#include "uniwrv/errors.hpp"
#include "uniwrv/weathergen.hpp"

namespace uniwrv::weathergen {

Image read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode " + path.string() + ": " + img.message);
  }
  std::vector<double> v(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) v[i] = buf[i] / 255.0;
  return Image({img.height, img.width, 3}, std::move(v));
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("write_png: image must be [H,W,3]");
  auto src = image.data();
  std::vector<png_byte> buf(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double v = std::min(1.0, std::max(0.0, src[i]));
    buf[i] = static_cast<png_byte>(std::lround(v * 255.0));
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.dim(1));
  img.height = static_cast<png_uint_32>(image.dim(0));
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write " + path.string() + ": " + img.message);
  }
}

}  // namespace uniwrv::weathergen
