#include "vlmattack/objectives.hpp"

#include "vlmattack/errors.hpp"

namespace vlmattack {

std::optional<FeatureNorm> feature_norm_from_id(std::string_view id) {
  if (id == "frobenius") return FeatureNorm::frobenius;
  if (id == "per_patch_l2") return FeatureNorm::per_patch_l2;
  return std::nullopt;
}

std::string_view feature_norm_id(FeatureNorm norm) {
  return norm == FeatureNorm::frobenius ? "frobenius" : "per_patch_l2";
}

double feature_distance(const Eigen::MatrixXd& diff, FeatureNorm norm) {
  if (norm == FeatureNorm::frobenius) return diff.norm();
  return diff.colwise().norm().sum();
}

Eigen::MatrixXd feature_distance_gradient(const Eigen::MatrixXd& diff, FeatureNorm norm) {
  if (norm == FeatureNorm::frobenius) {
    const double n = diff.norm();
    if (n == 0.0) return Eigen::MatrixXd::Zero(diff.rows(), diff.cols());
    return diff / n;
  }
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(diff.rows(), diff.cols());
  for (Eigen::Index j = 0; j < diff.cols(); ++j) {
    const double n = diff.col(j).norm();
    if (n > 0.0) g.col(j) = diff.col(j) / n;
  }
  return g;
}

// ---------------------------------------------------------------- latent

LatentObjective::LatentObjective(VisionBackend backend, LatentVector target)
    : backend_(std::move(backend)), target_(std::move(target)) {
  if (!backend_.encoder || !backend_.projection) {
    throw BackendError("latent objective needs an encoder and a latent projection");
  }
  if (backend_.projection->feature_dim() != backend_.encoder->spec().feature_dim) {
    throw ContractViolation("latent projection does not match the encoder feature dimension");
  }
  if (target_.size() != backend_.projection->latent_dim()) {
    throw ContractViolation("target latent has dimension " + std::to_string(target_.size()) +
                            ", projection produces " +
                            std::to_string(backend_.projection->latent_dim()));
  }
}

LatentObjective::LatentObjective(VisionBackend backend, std::string_view prompt)
    : LatentObjective(backend, [&] {
        if (!backend.text) throw BackendError("backend '" + backend.id + "' has no text encoder");
        return backend.text->encode(prompt);
      }()) {}

Evaluation LatentObjective::evaluate(const ImageTensor& x) const {
  const auto features = backend_.encoder->encode(x);
  const LatentVector residual = backend_.projection->project(features) - target_;
  const double norm = residual.norm();

  Eigen::MatrixXd feature_grad =
      Eigen::MatrixXd::Zero(features.matrix().rows(), features.matrix().cols());
  if (norm > 0.0) feature_grad.col(0) = backend_.projection->weights().transpose() * residual / norm;
  return {norm, backend_.encoder->backward(x, feature_grad)};
}

// ---------------------------------------------------------------- feature match

FeatureMatchObjective::FeatureMatchObjective(std::shared_ptr<const VisualEncoder> encoder,
                                             Eigen::MatrixXd target_patches, FeatureNorm norm)
    : encoder_(std::move(encoder)), target_(std::move(target_patches)), norm_(norm) {
  const auto s = encoder_->spec();
  if (target_.rows() != s.feature_dim || target_.cols() != s.patches()) {
    throw ContractViolation("target features are " + std::to_string(target_.rows()) + "x" +
                            std::to_string(target_.cols()) + ", encoder grid needs " +
                            std::to_string(s.feature_dim) + "x" + std::to_string(s.patches()));
  }
}

Evaluation FeatureMatchObjective::evaluate(const ImageTensor& x) const {
  const auto features = encoder_->encode(x);
  const Eigen::MatrixXd diff = patch_features(features) - target_;
  Eigen::MatrixXd feature_grad = Eigen::MatrixXd::Zero(diff.rows(), diff.cols() + 1);
  feature_grad.rightCols(diff.cols()) = feature_distance_gradient(diff, norm_);
  return {feature_distance(diff, norm_), encoder_->backward(x, feature_grad)};
}

// ---------------------------------------------------------------- contrastive

ContrastiveObjective::ContrastiveObjective(std::shared_ptr<const VisualEncoder> encoder,
                                           ImageTensor original, ImageTensor target,
                                           double triplet_weight, FeatureNorm norm)
    : encoder_(std::move(encoder)),
      original_(std::move(original)),
      target_(std::move(target)),
      triplet_weight_(triplet_weight),
      norm_(norm) {
  if (!(original_.shape() == target_.shape())) {
    throw ContractViolation("original and target images differ in shape");
  }
  if (!(triplet_weight_ >= 0.0)) throw ContractViolation("triplet weight must be >= 0");
}

Evaluation ContrastiveObjective::evaluate(const ImageTensor& x_adv, const TransformPair& t) const {
  const auto s = encoder_->spec();
  const Eigen::MatrixXd adv = apply_feature_transform(
      t, patch_features(encoder_->encode(x_adv)), s.grid_h, s.grid_w);
  const Eigen::MatrixXd pos = patch_features(encoder_->encode(apply_image_transform(t, target_)));
  const Eigen::MatrixXd neg =
      patch_features(encoder_->encode(apply_image_transform(t, original_)));
  if (pos.cols() != adv.cols() || neg.cols() != adv.cols()) {
    throw ContractViolation("grid mismatch after transform");
  }

  const Eigen::MatrixXd to_target = adv - pos;
  const Eigen::MatrixXd to_original = adv - neg;
  const double value = feature_distance(to_target, norm_) -
                       triplet_weight_ * feature_distance(to_original, norm_);

  Eigen::MatrixXd grad = feature_distance_gradient(to_target, norm_);
  if (triplet_weight_ != 0.0) grad -= triplet_weight_ * feature_distance_gradient(to_original, norm_);

  Eigen::MatrixXd feature_grad = Eigen::MatrixXd::Zero(grad.rows(), grad.cols() + 1);
  feature_grad.rightCols(grad.cols()) = feature_transform_adjoint(t, grad, s.grid_h, s.grid_w);
  return {value, encoder_->backward(x_adv, feature_grad)};
}

BoundContrastiveObjective::BoundContrastiveObjective(const ContrastiveObjective& loss,
                                                     std::vector<TransformPair> pairs)
    : loss_(loss), pairs_(std::move(pairs)) {
  if (pairs_.empty()) throw ContractViolation("at least one transform pair is required");
}

Evaluation BoundContrastiveObjective::evaluate(const ImageTensor& x) const {
  if (pairs_.size() == 1) return loss_.evaluate(x, pairs_.front());
  Evaluation total{0.0, std::vector<double>(x.size(), 0.0)};
  for (const auto& t : pairs_) {
    const auto e = loss_.evaluate(x, t);
    total.value += e.value;
    for (std::size_t i = 0; i < e.gradient.size(); ++i) total.gradient[i] += e.gradient[i];
  }
  const double n = static_cast<double>(pairs_.size());
  total.value /= n;
  for (double& g : total.gradient) g /= n;
  return total;
}

}  // namespace vlmattack
