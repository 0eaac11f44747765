#include "vlmattack/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include <openssl/evp.h>
#include <png.h>

#include "vlmattack/errors.hpp"

namespace vlmattack::io {

namespace fs = std::filesystem;

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32(const std::string& in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return v;
}

float get_f32(const std::string& in, std::size_t offset) {
  return std::bit_cast<float>(get_u32(in, offset));
}

std::string read_binary(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_binary(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("short write to " + path.string());
}

}  // namespace

void write_features(const fs::path& path, const Eigen::MatrixXd& matrix, int grid_h, int grid_w) {
  std::string out;
  out.reserve(12 + 4 * matrix.size());
  put_u32(out, static_cast<std::uint32_t>(matrix.rows()));
  put_u32(out, static_cast<std::uint32_t>(grid_h));
  put_u32(out, static_cast<std::uint32_t>(grid_w));
  for (Eigen::Index r = 0; r < matrix.rows(); ++r) {
    for (Eigen::Index c = 0; c < matrix.cols(); ++c) put_f32(out, static_cast<float>(matrix(r, c)));
  }
  write_binary(path, out);
}

FeatureFile read_features(const fs::path& path, bool with_cls) {
  const std::string in = read_binary(path);
  if (in.size() < 12) throw Error(path.string() + ": truncated feature header");
  const auto rows = get_u32(in, 0);
  FeatureFile f;
  f.grid_h = static_cast<int>(get_u32(in, 4));
  f.grid_w = static_cast<int>(get_u32(in, 8));
  const std::size_t cols = static_cast<std::size_t>(f.grid_h) * f.grid_w + (with_cls ? 1 : 0);
  if (in.size() != 12 + 4 * rows * cols) {
    throw Error(path.string() + ": feature payload size does not match header");
  }
  f.matrix.resize(rows, static_cast<Eigen::Index>(cols));
  std::size_t off = 12;
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c, off += 4) f.matrix(r, c) = get_f32(in, off);
  }
  return f;
}

void write_sidecar(const fs::path& path, ImageShape shape, std::span<const double> values) {
  std::string out;
  out.reserve(12 + 4 * values.size());
  put_u32(out, static_cast<std::uint32_t>(shape.height));
  put_u32(out, static_cast<std::uint32_t>(shape.width));
  put_u32(out, static_cast<std::uint32_t>(shape.channels));
  for (double v : values) put_f32(out, static_cast<float>(v));
  write_binary(path, out);
}

void write_sidecar(const fs::path& path, const ImageTensor& image) {
  write_sidecar(path, image.shape(), image.values());
}

Sidecar read_sidecar(const fs::path& path) {
  const std::string in = read_binary(path);
  if (in.size() < 12) throw Error(path.string() + ": truncated sidecar header");
  Sidecar s;
  s.shape = {static_cast<int>(get_u32(in, 0)), static_cast<int>(get_u32(in, 4)),
             static_cast<int>(get_u32(in, 8))};
  if (in.size() != 12 + 4 * s.shape.size()) {
    throw Error(path.string() + ": sidecar payload size does not match header");
  }
  s.values.resize(s.shape.size());
  for (std::size_t i = 0; i < s.values.size(); ++i) s.values[i] = get_f32(in, 12 + 4 * i);
  return s;
}

ImageTensor round_to_float(const ImageTensor& image) {
  std::vector<double> out(image.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<double>(static_cast<float>(image.data()[i]));
  }
  return ImageTensor(image.shape(), std::move(out));
}

void write_png(const fs::path& path, const ImageTensor& image) {
  const int color_type = [&] {
    switch (image.channels()) {
      case 1: return PNG_COLOR_TYPE_GRAY;
      case 3: return PNG_COLOR_TYPE_RGB;
      case 4: return PNG_COLOR_TYPE_RGB_ALPHA;
      default:
        throw ContractViolation("PNG output supports 1, 3 or 4 channels, got " +
                                std::to_string(image.channels()));
    }
  }();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("cannot write " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialisation failed");
  }
  const auto bytes = to_bytes(image);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, image.width(), image.height(), 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(image.width()) * image.channels();
  for (int y = 0; y < image.height(); ++y) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + y * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

ImageTensor read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw Error("cannot read PNG " + path.string() + ": " + img.message);
  }
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&img);
    throw Error("cannot decode PNG " + path.string() + ": " + img.message);
  }
  const ImageShape shape{static_cast<int>(img.height), static_cast<int>(img.width), gray ? 1 : 3};
  return from_bytes(shape, buffer);
}

ImageTensor resize_bilinear(const ImageTensor& image, int height, int width) {
  if (height == image.height() && width == image.width()) return image;
  const ImageShape out_shape{height, width, image.channels()};
  std::vector<double> out(out_shape.size());
  const double sy = static_cast<double>(image.height()) / height;
  const double sx = static_cast<double>(image.width()) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width() - 1);
      const double wx = fx - x0;
      for (int c = 0; c < image.channels(); ++c) {
        const double top = image.at(y0, x0, c) * (1 - wx) + image.at(y0, x1, c) * wx;
        const double bottom = image.at(y1, x0, c) * (1 - wx) + image.at(y1, x1, c) * wx;
        out[(static_cast<std::size_t>(y) * width + x) * image.channels() + c] =
            std::clamp(top * (1 - wy) + bottom * wy, 0.0, 1.0);
      }
    }
  }
  return ImageTensor(out_shape, std::move(out));
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr)) {
    throw Error("SHA-256 failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string content_hash(const ImageTensor& image) {
  std::string bytes;
  bytes.reserve(12 + 8 * image.size());
  put_u32(bytes, static_cast<std::uint32_t>(image.height()));
  put_u32(bytes, static_cast<std::uint32_t>(image.width()));
  put_u32(bytes, static_cast<std::uint32_t>(image.channels()));
  for (double v : image.values()) {
    const auto u = std::bit_cast<std::uint64_t>(v);
    put_u32(bytes, static_cast<std::uint32_t>(u));
    put_u32(bytes, static_cast<std::uint32_t>(u >> 32));
  }
  return sha256_hex(bytes);
}

std::string read_text(const fs::path& path) { return read_binary(path); }

void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  write_binary(tmp, text);
  fs::rename(tmp, path);
}

}  // namespace vlmattack::io
