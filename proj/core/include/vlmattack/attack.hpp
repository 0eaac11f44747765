#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "vlmattack/augmentation.hpp"
#include "vlmattack/encoders.hpp"
#include "vlmattack/objectives.hpp"
#include "vlmattack/optimizers.hpp"
#include "vlmattack/replace.hpp"
#include "vlmattack/types.hpp"

namespace vlmattack {

std::vector<std::string> objective_ids();  // latent, feature_match, contrastive

// Throws ContractViolation when the pair cannot run together.
void check_compatible(Method method, std::string_view objective);

struct AttackContext {
  VisionBackend backend;
  // Required by feature_match and contrastive; unused by latent.
  std::shared_ptr<ReplacePipeline> replace;
  TransformConfig transforms;
  FeatureNorm norm = FeatureNorm::frobenius;
  IterateObserver observer;
};

struct AttackRun {
  AttackResult result;
  std::optional<ReplaceOutput> replaced;  // set when the objective needed a target image
};

/// Replace step (when the objective needs target features) followed by the
/// chosen optimizer. The latent objective aims at text(spec.target_prompt).
AttackRun run_attack(const ImageTensor& x, const TargetSpec& spec, std::string_view method,
                     std::string_view objective, const AttackConfig& cfg, const AttackContext& ctx);

}  // namespace vlmattack
