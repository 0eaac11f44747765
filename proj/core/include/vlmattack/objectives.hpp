#pragma once

#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "vlmattack/augmentation.hpp"
#include "vlmattack/encoders.hpp"
#include "vlmattack/types.hpp"

namespace vlmattack {

// Value of a scalar loss and its gradient with respect to the input image (HWC order).
struct Evaluation {
  double value = 0.0;
  std::vector<double> gradient;
};

// How an unsubscripted norm on a feature matrix is read.
enum class FeatureNorm {
  frobenius,     // l2 over the flattened matrix
  per_patch_l2,  // sum over patch columns of the column l2 norm
};

std::optional<FeatureNorm> feature_norm_from_id(std::string_view id);
std::string_view feature_norm_id(FeatureNorm norm);

double feature_distance(const Eigen::MatrixXd& diff, FeatureNorm norm);

// Gradient of feature_distance; zero where the norm is not differentiable (diff == 0).
Eigen::MatrixXd feature_distance_gradient(const Eigen::MatrixXd& diff, FeatureNorm norm);

/// A differentiable loss J(x). Optimizers minimise it for targeted attacks.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual std::string_view id() const = 0;
  virtual Evaluation evaluate(const ImageTensor& x) const = 0;
  virtual const VisualEncoder& encoder() const = 0;
};

/// || P(E(x)[:, CLS]) - text(k) ||_2
class LatentObjective final : public Objective {
 public:
  LatentObjective(VisionBackend backend, LatentVector target);
  LatentObjective(VisionBackend backend, std::string_view prompt);

  std::string_view id() const override { return "latent"; }
  Evaluation evaluate(const ImageTensor& x) const override;
  const VisualEncoder& encoder() const override { return *backend_.encoder; }

  const LatentVector& target() const { return target_; }

 private:
  VisionBackend backend_;
  LatentVector target_;
};

/// || E(x)[:, patches] - f_target ||
class FeatureMatchObjective final : public Objective {
 public:
  FeatureMatchObjective(std::shared_ptr<const VisualEncoder> encoder,
                        Eigen::MatrixXd target_patches,
                        FeatureNorm norm = FeatureNorm::frobenius);

  std::string_view id() const override { return "feature_match"; }
  Evaluation evaluate(const ImageTensor& x) const override;
  const VisualEncoder& encoder() const override { return *encoder_; }

 private:
  std::shared_ptr<const VisualEncoder> encoder_;
  Eigen::MatrixXd target_;
  FeatureNorm norm_;
};

/// Triplet loss under one transform pair t:
///   || FT(E(x')) - E(T(x_target)) || - mu * || FT(E(x')) - E(T(x)) ||
/// with FT the patch-grid version of the image transform T. All feature
/// terms drop the CLS column.
class ContrastiveObjective {
 public:
  ContrastiveObjective(std::shared_ptr<const VisualEncoder> encoder, ImageTensor original,
                       ImageTensor target, double triplet_weight,
                       FeatureNorm norm = FeatureNorm::frobenius);

  Evaluation evaluate(const ImageTensor& x_adv, const TransformPair& t) const;

  const VisualEncoder& encoder() const { return *encoder_; }
  double triplet_weight() const { return triplet_weight_; }

 private:
  std::shared_ptr<const VisualEncoder> encoder_;
  ImageTensor original_;
  ImageTensor target_;
  double triplet_weight_;
  FeatureNorm norm_;
};

/// Averages a ContrastiveObjective over a fixed set of transform pairs, so
/// any optimizer can take a step on it.
class BoundContrastiveObjective final : public Objective {
 public:
  BoundContrastiveObjective(const ContrastiveObjective& loss, std::vector<TransformPair> pairs);

  std::string_view id() const override { return "contrastive"; }
  Evaluation evaluate(const ImageTensor& x) const override;
  const VisualEncoder& encoder() const override { return loss_.encoder(); }

 private:
  const ContrastiveObjective& loss_;
  std::vector<TransformPair> pairs_;
};

}  // namespace vlmattack
