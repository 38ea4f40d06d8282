#include "nflow/harness/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

// jpeglib.h needs size_t and FILE declared first
#include <jpeglib.h>

namespace nflow::harness {

Image8 make_image(std::size_t channels, std::size_t height, std::size_t width, std::uint8_t fill) {
  Image8 img;
  img.channels = channels;
  img.height = height;
  img.width = width;
  img.pixels.assign(channels * height * width, fill);
  return img;
}

namespace {

Image8 from_interleaved(const std::uint8_t* data, std::size_t channels, std::size_t height, std::size_t width) {
  Image8 img = make_image(channels, height, width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < channels; ++c) img.at(c, y, x) = data[(y * width + x) * channels + c];
  return img;
}

Image8 read_png(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw Error("cannot decode PNG " + path + ": " + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t channels = color ? 3 : 1;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw Error("cannot decode PNG " + path + ": " + msg);
  }
  return from_interleaved(buffer.data(), channels, image.height, image.width);
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Image8 read_jpeg(const std::string& path) {
  std::FILE* file = std::fopen(path.c_str(), "rb");
  if (!file) throw Error("cannot open " + path);
  jpeg_decompress_struct cinfo;
  JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  std::vector<std::uint8_t> buffer;
  std::size_t channels = 0, height = 0, width = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(file);
    throw Error("cannot decode JPEG " + path + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  channels = static_cast<std::size_t>(cinfo.output_components);
  height = cinfo.output_height;
  width = cinfo.output_width;
  buffer.resize(channels * height * width);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buffer.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(file);
  return from_interleaved(buffer.data(), channels, height, width);
}

}  // namespace

Image8 read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), sizeof sig);
  if (in.gcount() >= 8 && png_sig_cmp(sig, 0, 8) == 0) return read_png(path);
  if (in.gcount() >= 3 && sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF) return read_jpeg(path);
  throw Error("unrecognized image format: " + path);
}

void write_png(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw Error("write_png: unsupported channel count " + std::to_string(img.channels));
  }
  std::vector<std::uint8_t> interleaved(img.pixels.size());
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        interleaved[(y * img.width + x) * img.channels + c] = img.at(c, y, x);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, interleaved.data(), 0, nullptr)) {
    throw Error("cannot write PNG " + path + ": " + image.message);
  }
}

Image8 convert_channels(const Image8& img, std::size_t channels) {
  if (img.channels == channels) return img;
  Image8 out = make_image(channels, img.height, img.width);
  if (img.channels == 1 && channels == 3) {
    for (std::size_t c = 0; c < 3; ++c)
      std::copy(img.pixels.begin(), img.pixels.end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(c * img.pixels.size()));
    return out;
  }
  if (img.channels == 3 && channels == 1) {
    const std::size_t plane = img.height * img.width;
    for (std::size_t p = 0; p < plane; ++p) {
      const unsigned s = img.pixels[p] + img.pixels[plane + p] + img.pixels[2 * plane + p];
      out.pixels[p] = static_cast<std::uint8_t>((s + 1) / 3);
    }
    return out;
  }
  throw Error("convert_channels: cannot convert " + std::to_string(img.channels) + " channels to " +
              std::to_string(channels));
}

template <typename T>
Image8 to_image8(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("to_image8: expected [C, H, W], got " + shape_string(x.shape()));
  Image8 img = make_image(x.dim(0), x.dim(1), x.dim(2));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = std::clamp(static_cast<double>(x[i]), 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

template <typename T>
Tensor<T> from_image8(const Image8& img) {
  Tensor<T> x(Shape{img.channels, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) x[i] = static_cast<T>(img.pixels[i] / 255.0);
  return x;
}

void paste(Image8& dst, const Image8& src, std::size_t y, std::size_t x) {
  if (src.channels != dst.channels || y + src.height > dst.height || x + src.width > dst.width) {
    throw ShapeError("paste: source does not fit the destination");
  }
  for (std::size_t c = 0; c < src.channels; ++c)
    for (std::size_t i = 0; i < src.height; ++i)
      for (std::size_t j = 0; j < src.width; ++j) dst.at(c, y + i, x + j) = src.at(c, i, j);
}

template Image8 to_image8(const Tensor<float>&);
template Image8 to_image8(const Tensor<double>&);
template Tensor<float> from_image8(const Image8&);
template Tensor<double> from_image8(const Image8&);

}  // namespace nflow::harness
