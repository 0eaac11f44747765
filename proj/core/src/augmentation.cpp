#include "vlmattack/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "vlmattack/errors.hpp"

namespace vlmattack {

namespace {

// Quarter turns when the angle is a multiple of 90 degrees.
std::optional<int> quarter_turns(double deg) {
  const double q = deg / 90.0;
  const double r = std::round(q);
  if (std::abs(q - r) > 1e-12) return std::nullopt;
  return static_cast<int>(((static_cast<long long>(r) % 4) + 4) % 4);
}

struct Cell {
  int row;
  int col;
};

std::optional<Cell> resize_source(Cell c, double scale, int rows, int cols) {
  if (scale == 1.0) return c;
  const double u = (c.col + 0.5 - cols / 2.0) / scale + cols / 2.0;
  const double v = (c.row + 0.5 - rows / 2.0) / scale + rows / 2.0;
  const int col = static_cast<int>(std::floor(u));
  const int row = static_cast<int>(std::floor(v));
  if (row < 0 || row >= rows || col < 0 || col >= cols) return std::nullopt;
  return Cell{row, col};
}

std::optional<Cell> rotation_source(Cell c, double deg, int rows, int cols) {
  const auto k = quarter_turns(deg);
  if (k && (*k == 0 || *k == 2 || rows == cols)) {
    switch (*k) {
      case 0: return c;
      case 1: return Cell{c.col, cols - 1 - c.row};
      case 2: return Cell{rows - 1 - c.row, cols - 1 - c.col};
      default: return Cell{rows - 1 - c.col, c.row};
    }
  }
  // Counter-clockwise on screen with y pointing down; invert by rotating back.
  const double theta = deg * std::numbers::pi / 180.0;
  const double u = c.col + 0.5 - cols / 2.0;
  const double v = c.row + 0.5 - rows / 2.0;
  const double su = u * std::cos(theta) - v * std::sin(theta);
  const double sv = u * std::sin(theta) + v * std::cos(theta);
  const int col = static_cast<int>(std::floor(su + cols / 2.0));
  const int row = static_cast<int>(std::floor(sv + rows / 2.0));
  if (row < 0 || row >= rows || col < 0 || col >= cols) return std::nullopt;
  return Cell{row, col};
}

}  // namespace

bool TransformPair::is_identity() const {
  const auto k = quarter_turns(rotation_deg);
  return !hflip && !vflip && k && *k == 0 && scale == 1.0;
}

bool TransformPair::is_exact() const { return quarter_turns(rotation_deg) && scale == 1.0; }

TransformConfig TransformConfig::identity() {
  TransformConfig c;
  c.hflip_prob = 0.0;
  c.vflip_prob = 0.0;
  c.rotation_enabled = false;
  c.resize_enabled = false;
  return c;
}

void TransformConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractViolation("transform config: " + what); };
  if (hflip_prob < 0.0 || hflip_prob > 1.0) fail("hflip_prob must be in [0, 1]");
  if (vflip_prob < 0.0 || vflip_prob > 1.0) fail("vflip_prob must be in [0, 1]");
  if (rotation_enabled) {
    if (rotation_range) {
      if (!(rotation_range->first <= rotation_range->second)) fail("empty rotation range");
    } else if (rotation_choices.empty()) {
      fail("rotation enabled with no angle choices");
    }
  }
  if (resize_enabled && !(resize_min > 0.0 && resize_min <= resize_max)) {
    fail("resize range must satisfy 0 < min <= max");
  }
  if (samples_per_step < 1) fail("samples_per_step must be >= 1");
}

TransformConfig TransformConfig::from_json(const nlohmann::json& j) {
  TransformConfig c;
  c.hflip_prob = j.value("hflip_prob", c.hflip_prob);
  c.vflip_prob = j.value("vflip_prob", c.vflip_prob);
  if (j.contains("rotation")) {
    const auto& r = j.at("rotation");
    c.rotation_enabled = r.value("enabled", true);
    if (r.contains("choices")) c.rotation_choices = r.at("choices").get<std::vector<double>>();
    if (r.contains("range")) {
      c.rotation_range = std::make_pair(r.at("range").at(0).get<double>(),
                                        r.at("range").at(1).get<double>());
    }
  }
  if (j.contains("resize")) {
    const auto& r = j.at("resize");
    c.resize_enabled = r.value("enabled", true);
    c.resize_min = r.value("min", c.resize_min);
    c.resize_max = r.value("max", c.resize_max);
  }
  c.samples_per_step = j.value("samples_per_step", c.samples_per_step);
  c.validate();
  return c;
}

nlohmann::json TransformConfig::to_json() const {
  nlohmann::json rotation = {{"enabled", rotation_enabled}, {"choices", rotation_choices}};
  if (rotation_range) rotation["range"] = {rotation_range->first, rotation_range->second};
  return {{"hflip_prob", hflip_prob},
          {"vflip_prob", vflip_prob},
          {"rotation", rotation},
          {"resize", {{"enabled", resize_enabled}, {"min", resize_min}, {"max", resize_max}}},
          {"samples_per_step", samples_per_step}};
}

TransformPair sample_transform(Rng& rng, const TransformConfig& config) {
  config.validate();
  // Fixed draw order so a seed always maps to the same pair.
  TransformPair t;
  t.hflip = config.hflip_prob > 0.0 && bernoulli(rng, config.hflip_prob);
  t.vflip = config.vflip_prob > 0.0 && bernoulli(rng, config.vflip_prob);
  if (config.rotation_enabled) {
    if (config.rotation_range) {
      t.rotation_deg = uniform(rng, config.rotation_range->first, config.rotation_range->second);
    } else {
      t.rotation_deg =
          config.rotation_choices[uniform_index(rng, config.rotation_choices.size())];
    }
  }
  if (config.resize_enabled) t.scale = uniform(rng, config.resize_min, config.resize_max);
  return t;
}

GridMap GridMap::build(const TransformPair& t, int rows, int cols) {
  if (rows <= 0 || cols <= 0) throw ContractViolation("grid dimensions must be positive");
  GridMap m;
  m.rows_ = rows;
  m.cols_ = cols;
  m.source_.assign(static_cast<std::size_t>(rows) * cols, -1);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      auto c = resize_source({i, j}, t.scale, rows, cols);
      if (c) c = rotation_source(*c, t.rotation_deg, rows, cols);
      if (!c) continue;
      if (t.vflip) c->row = rows - 1 - c->row;
      if (t.hflip) c->col = cols - 1 - c->col;
      m.source_[static_cast<std::size_t>(i) * cols + j] = c->row * cols + c->col;
    }
  }
  return m;
}

bool GridMap::is_permutation() const {
  std::vector<int> sorted = source_;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != static_cast<int>(i)) return false;
  }
  return true;
}

ImageTensor apply_image_transform(const TransformPair& t, const ImageTensor& x) {
  if (t.is_identity()) return x;
  const auto map = GridMap::build(t, x.height(), x.width());
  const int channels = x.channels();
  std::vector<double> out(x.size(), 0.0);
  const auto& src = map.source();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] < 0) continue;
    for (int c = 0; c < channels; ++c) {
      out[i * channels + c] = x.data()[static_cast<std::size_t>(src[i]) * channels + c];
    }
  }
  return ImageTensor(x.shape(), std::move(out));
}

Eigen::MatrixXd apply_feature_transform(const TransformPair& t, const Eigen::MatrixXd& patches,
                                        int grid_h, int grid_w) {
  if (patches.cols() != static_cast<Eigen::Index>(grid_h) * grid_w) {
    throw ContractViolation("feature transform: " + std::to_string(patches.cols()) +
                            " patch columns do not match a " + std::to_string(grid_h) + "x" +
                            std::to_string(grid_w) + " grid");
  }
  if (t.is_identity()) return patches;
  const auto map = GridMap::build(t, grid_h, grid_w);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(patches.rows(), patches.cols());
  const auto& src = map.source();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] >= 0) out.col(static_cast<Eigen::Index>(i)) = patches.col(src[i]);
  }
  return out;
}

Eigen::MatrixXd feature_transform_adjoint(const TransformPair& t, const Eigen::MatrixXd& grad,
                                          int grid_h, int grid_w) {
  if (grad.cols() != static_cast<Eigen::Index>(grid_h) * grid_w) {
    throw ContractViolation("feature transform adjoint: grid mismatch");
  }
  if (t.is_identity()) return grad;
  const auto map = GridMap::build(t, grid_h, grid_w);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(grad.rows(), grad.cols());
  const auto& src = map.source();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] >= 0) out.col(src[i]) += grad.col(static_cast<Eigen::Index>(i));
  }
  return out;
}

}  // namespace vlmattack
