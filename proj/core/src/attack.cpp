#include "vlmattack/attack.hpp"

#include <algorithm>

#include "vlmattack/errors.hpp"

namespace vlmattack {

std::vector<std::string> objective_ids() { return {"latent", "feature_match", "contrastive"}; }

void check_compatible(Method method, std::string_view objective) {
  const auto ids = objective_ids();
  if (std::find(ids.begin(), ids.end(), objective) == ids.end()) {
    throw ContractViolation("unknown objective '" + std::string(objective) +
                            "' (known: latent, feature_match, contrastive)");
  }
  if (is_contrastive(method) && objective != "contrastive") {
    if (objective == "latent") {
      throw ContractViolation(std::string(method_id(method)) +
                              " is not applicable to the latent objective: it compares patch "
                              "features of transformed images, and the latent target has none");
    }
    throw ContractViolation(std::string(method_id(method)) + " requires the contrastive objective");
  }
  if (!is_contrastive(method) && objective == "contrastive") {
    throw ContractViolation("the contrastive objective resamples transforms each step; use "
                            "contrastive_adv or contrastive_adv_vmi");
  }
}

AttackRun run_attack(const ImageTensor& x, const TargetSpec& spec, std::string_view method_name,
                     std::string_view objective, const AttackConfig& cfg,
                     const AttackContext& ctx) {
  const auto method = method_from_id(method_name);
  if (!method) throw ContractViolation("unknown method '" + std::string(method_name) + "'");
  check_compatible(*method, objective);
  spec.validate();
  cfg.validate();
  if (!ctx.backend.encoder) throw BackendError("no encoder backend configured");

  if (objective == "latent") {
    const LatentObjective loss(ctx.backend, spec.target_prompt);
    return {run_gradient_method(*method, x, loss, cfg, ctx.observer), std::nullopt};
  }

  if (!ctx.replace) throw BackendError("objective '" + std::string(objective) + "' needs a replace pipeline");
  ReplaceOutput replaced = ctx.replace->replace(x, spec);

  if (objective == "feature_match") {
    const FeatureMatchObjective loss(ctx.backend.encoder, replaced.target_features, ctx.norm);
    return {run_gradient_method(*method, x, loss, cfg, ctx.observer), std::move(replaced)};
  }
  const ContrastiveObjective loss(ctx.backend.encoder, x, replaced.target_image, cfg.triplet_weight,
                                  ctx.norm);
  const StepRule rule = *method == Method::contrastive_adv ? StepRule::sign : StepRule::vmi;
  return {contrastive_adv(x, loss, cfg, ctx.transforms, rule, ctx.observer), std::move(replaced)};
}

}  // namespace vlmattack
