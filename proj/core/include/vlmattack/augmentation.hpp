#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "vlmattack/random.hpp"
#include "vlmattack/types.hpp"

namespace vlmattack {

/// One geometric transform, applied in the order horizontal flip, vertical
/// flip, rotation (counter-clockwise, about the centre), resize (zoom about
/// the centre, output cropped or zero-padded back to the input size).
/// The same parameters drive the image-resolution and the patch-grid
/// resolution versions.
struct TransformPair {
  bool hflip = false;
  bool vflip = false;
  double rotation_deg = 0.0;
  double scale = 1.0;

  bool is_identity() const;
  bool is_exact() const;  // flips and quarter turns only
  bool operator==(const TransformPair&) const = default;
};

struct TransformConfig {
  double hflip_prob = 0.5;
  double vflip_prob = 0.0;
  bool rotation_enabled = true;
  std::vector<double> rotation_choices{0.0, 90.0, 180.0, 270.0};
  // When set, rotation is drawn uniformly from [first, second] instead of the choices.
  std::optional<std::pair<double, double>> rotation_range;
  bool resize_enabled = true;
  double resize_min = 0.8;
  double resize_max = 1.2;
  int samples_per_step = 1;

  // Every kind disabled: sample_transform always returns the identity.
  static TransformConfig identity();

  void validate() const;
  static TransformConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

TransformPair sample_transform(Rng& rng, const TransformConfig& config);

/// Nearest-neighbour resampling of a rows x cols grid: out cell i reads
/// source cell source[i], or zero when source[i] < 0.
class GridMap {
 public:
  static GridMap build(const TransformPair& t, int rows, int cols);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  const std::vector<int>& source() const { return source_; }
  bool is_permutation() const;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<int> source_;
};

ImageTensor apply_image_transform(const TransformPair& t, const ImageTensor& x);

// patches is N_f x (grid_h*grid_w); the CLS column must already be removed.
Eigen::MatrixXd apply_feature_transform(const TransformPair& t, const Eigen::MatrixXd& patches,
                                        int grid_h, int grid_w);

// Adjoint of apply_feature_transform, used to pull gradients back.
Eigen::MatrixXd feature_transform_adjoint(const TransformPair& t, const Eigen::MatrixXd& grad,
                                          int grid_h, int grid_w);

}  // namespace vlmattack
