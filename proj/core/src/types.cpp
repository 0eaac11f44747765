#include "vlmattack/types.hpp"

#include <algorithm>
#include <cmath>

#include "vlmattack/errors.hpp"

namespace vlmattack {

std::string to_string(const ImageShape& shape) {
  return std::to_string(shape.height) + "x" + std::to_string(shape.width) + "x" +
         std::to_string(shape.channels);
}

ImageTensor::ImageTensor(ImageShape shape, std::vector<double> data)
    : shape_(shape), data_(std::move(data)) {
  if (shape_.height <= 0 || shape_.width <= 0 || shape_.channels <= 0) {
    throw ContractViolation("image dimensions must be positive, got " + to_string(shape_));
  }
  if (data_.size() != shape_.size()) {
    throw ContractViolation("image data has " + std::to_string(data_.size()) +
                            " values, shape " + to_string(shape_) + " needs " +
                            std::to_string(shape_.size()));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) {
    const double v = data_[i];
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      throw ContractViolation("image value at flat index " + std::to_string(i) +
                              " is outside [0, 1]: " + std::to_string(v));
    }
  }
}

ImageTensor ImageTensor::filled(ImageShape shape, double value) {
  return ImageTensor(shape, std::vector<double>(shape.size(), value));
}

Perturbation::Perturbation(ImageShape shape, std::vector<double> delta, double epsilon)
    : shape_(shape), delta_(std::move(delta)), epsilon_(epsilon) {}

Perturbation Perturbation::zero(ImageShape shape, double epsilon) {
  if (!(epsilon > 0.0)) throw ContractViolation("epsilon must be positive");
  return Perturbation(shape, std::vector<double>(shape.size(), 0.0), epsilon);
}

double Perturbation::linf_norm() const {
  double m = 0.0;
  for (double d : delta_) m = std::max(m, std::abs(d));
  return m;
}

void AttackConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractViolation("attack config: " + what); };
  if (!(epsilon > 0.0) || epsilon > 1.0) fail("epsilon must be in (0, 1]");
  if (!(alpha > 0.0) || alpha > epsilon) fail("alpha must be in (0, epsilon]");
  if (steps < 1) fail("steps must be >= 1");
  if (!(momentum_weight >= 0.0)) fail("momentum_weight must be >= 0");
  if (!(triplet_weight >= 0.0)) fail("triplet_weight must be >= 0");
  if (!(vmi_beta >= 0.0)) fail("vmi_beta must be >= 0");
  if (vmi_samples < 1) fail("vmi_samples must be >= 1");
  if (sini_scales < 1) fail("sini_scales must be >= 1");
  if (!(pi_amplification > 0.0)) fail("pi_amplification must be > 0");
  if (!(pi_project_factor >= 0.0)) fail("pi_project_factor must be >= 0");
  if (stall_limit < 1) fail("stall_limit must be >= 1");
}

void TargetSpec::validate() const {
  if (target_object.empty()) throw ContractViolation("target_object must not be empty");
  if (target_prompt.empty()) throw ContractViolation("target_prompt must not be empty");
}

Perturbation project_linf(const ImageTensor& base, std::span<const double> delta, double epsilon) {
  if (delta.size() != base.size()) {
    throw ContractViolation("perturbation has " + std::to_string(delta.size()) +
                            " values, image " + to_string(base.shape()) + " needs " +
                            std::to_string(base.size()));
  }
  if (!(epsilon > 0.0)) throw ContractViolation("epsilon must be positive");

  const auto& x = base.data();
  std::vector<double> out(delta.size());
  for (std::size_t i = 0; i < delta.size(); ++i) {
    double d = std::clamp(delta[i], -epsilon, epsilon);
    const double v = x[i] + d;
    if (v > 1.0) {
      d = 1.0 - x[i];
    } else if (v < 0.0) {
      d = -x[i];
    }
    out[i] = d;
  }
  return Perturbation(base.shape(), std::move(out), epsilon);
}

ImageTensor compose(const ImageTensor& base, const Perturbation& p) {
  if (!(p.shape() == base.shape())) {
    throw ContractViolation("perturbation shape " + to_string(p.shape()) +
                            " does not match image " + to_string(base.shape()));
  }
  std::vector<double> out(base.size());
  const auto& x = base.data();
  const auto& d = p.delta();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i] + d[i], 0.0, 1.0);
  return ImageTensor(base.shape(), std::move(out));
}

ImageTensor quantize_8bit(const ImageTensor& image) {
  std::vector<double> out(image.size());
  const auto& x = image.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::round(x[i] * 255.0) / 255.0;
  return ImageTensor(image.shape(), std::move(out));
}

std::vector<std::uint8_t> to_bytes(const ImageTensor& image) {
  std::vector<std::uint8_t> out(image.size());
  const auto& x = image.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(x[i] * 255.0));
  }
  return out;
}

ImageTensor from_bytes(ImageShape shape, std::span<const std::uint8_t> bytes) {
  std::vector<double> out(bytes.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = bytes[i] / 255.0;
  return ImageTensor(shape, std::move(out));
}

ImageTensor clamped_image(ImageShape shape, std::span<const double> values) {
  std::vector<double> out(values.begin(), values.end());
  for (double& v : out) v = std::clamp(v, 0.0, 1.0);
  return ImageTensor(shape, std::move(out));
}

double linf_distance(const ImageTensor& a, const ImageTensor& b) {
  if (!(a.shape() == b.shape())) throw ContractViolation("linf_distance: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace vlmattack
