#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vlmattack/types.hpp"

namespace vlmattack::io {

// Feature files: three little-endian uint32 (N_f, N_h, N_w) followed by
// N_f x cols little-endian float32 values in row-major order. cols is
// N_h*N_w for patch-only files and N_h*N_w + 1 when the CLS column is kept.
struct FeatureFile {
  Eigen::MatrixXd matrix;
  int grid_h = 0;
  int grid_w = 0;
};
void write_features(const std::filesystem::path& path, const Eigen::MatrixXd& matrix, int grid_h,
                    int grid_w);
FeatureFile read_features(const std::filesystem::path& path, bool with_cls);

// Image sidecars: three little-endian uint32 (H, W, C) followed by H*W*C
// little-endian float32 values, row-major HWC.
struct Sidecar {
  ImageShape shape;
  std::vector<float> values;
};
void write_sidecar(const std::filesystem::path& path, const ImageTensor& image);
void write_sidecar(const std::filesystem::path& path, ImageShape shape,
                   std::span<const double> values);
Sidecar read_sidecar(const std::filesystem::path& path);

// Float32 rounding of an image, i.e. exactly what a sidecar stores.
ImageTensor round_to_float(const ImageTensor& image);

// 8-bit PNG. Grayscale files load as 1 channel, RGB/RGBA/palette as 3.
void write_png(const std::filesystem::path& path, const ImageTensor& image);
ImageTensor read_png(const std::filesystem::path& path);

ImageTensor resize_bilinear(const ImageTensor& image, int height, int width);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);

// Hash of the exact double values plus shape.
std::string content_hash(const ImageTensor& image);

std::string read_text(const std::filesystem::path& path);
// Writes to a temporary sibling and renames it into place.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace vlmattack::io
