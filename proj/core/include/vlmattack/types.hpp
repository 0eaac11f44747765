#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace vlmattack {

struct ImageShape {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
           static_cast<std::size_t>(channels);
  }
  bool operator==(const ImageShape&) const = default;
};

std::string to_string(const ImageShape& shape);

/// Height x width x channels image, row-major HWC, every value finite and in [0, 1].
class ImageTensor {
 public:
  ImageTensor(ImageShape shape, std::vector<double> data);

  static ImageTensor filled(ImageShape shape, double value);

  const ImageShape& shape() const { return shape_; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  int channels() const { return shape_.channels; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * shape_.width + x) * shape_.channels + c;
  }
  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }

  std::span<const double> values() const { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool operator==(const ImageTensor&) const = default;

 private:
  ImageShape shape_;
  std::vector<double> data_;
};

/// An l-infinity bounded offset that keeps its base image inside [0, 1].
/// Only project_linf creates non-zero perturbations, so the invariant holds
/// for every instance.
class Perturbation {
 public:
  static Perturbation zero(ImageShape shape, double epsilon);

  const ImageShape& shape() const { return shape_; }
  double epsilon() const { return epsilon_; }
  const std::vector<double>& delta() const { return delta_; }
  double linf_norm() const;

  bool operator==(const Perturbation&) const = default;

 private:
  friend Perturbation project_linf(const ImageTensor& base, std::span<const double> delta,
                                   double epsilon);
  Perturbation(ImageShape shape, std::vector<double> delta, double epsilon);

  ImageShape shape_;
  std::vector<double> delta_;
  double epsilon_;
};

struct AttackConfig {
  double epsilon = 16.0 / 255.0;
  double alpha = 1.0 / 255.0;
  int steps = 200;
  double momentum_weight = 1.0;  // decay of the gradient accumulator (MI/NI/SINI/VMI)
  double triplet_weight = 0.3;   // weight of the push-away term in the contrastive loss
  double vmi_beta = 1.5;
  int vmi_samples = 20;
  int sini_scales = 5;
  double pi_amplification = 10.0;
  double pi_project_factor = 0.8;  // PI-FGSM++ only; plain PI uses 1.0
  int stall_limit = 5;             // consecutive all-zero gradients before aborting
  bool targeted = true;
  std::uint64_t seed = 0;

  // Throws ContractViolation on the first broken invariant.
  void validate() const;
};

struct TargetSpec {
  std::string target_object;  // what to segment and remove
  std::string target_prompt;  // what to paint in its place

  void validate() const;
};

struct AttackResult {
  Perturbation perturbation;
  ImageTensor adversarial_image;
  std::vector<double> loss_trace;  // J(x_0) .. J(x_T)
  AttackConfig config;
};

/// Clips delta to [-epsilon, epsilon], then pulls base + delta back into
/// [0, 1]. Coordinates that already satisfy both bounds are returned
/// bit-for-bit unchanged.
Perturbation project_linf(const ImageTensor& base, std::span<const double> delta, double epsilon);

/// base + p, clamped to [0, 1].
ImageTensor compose(const ImageTensor& base, const Perturbation& p);

/// Rounds every value to the nearest multiple of 1/255.
ImageTensor quantize_8bit(const ImageTensor& image);
std::vector<std::uint8_t> to_bytes(const ImageTensor& image);
ImageTensor from_bytes(ImageShape shape, std::span<const std::uint8_t> bytes);

// Clamped copy; used by optimizers for lookahead and neighbourhood points.
ImageTensor clamped_image(ImageShape shape, std::span<const double> values);

double linf_distance(const ImageTensor& a, const ImageTensor& b);

}  // namespace vlmattack
