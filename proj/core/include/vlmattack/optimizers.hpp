#pragma once

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vlmattack/augmentation.hpp"
#include "vlmattack/errors.hpp"
#include "vlmattack/objectives.hpp"
#include "vlmattack/types.hpp"

namespace vlmattack {

enum class Method {
  ifgsm,
  mifgsm,
  nifgsm,
  sinifgsm,
  pifgsm,
  pifgsmpp,
  vmifgsm,
  contrastive_adv,
  contrastive_adv_vmi,
};

std::optional<Method> method_from_id(std::string_view id);
std::string_view method_id(Method m);
std::vector<std::string> method_ids();

// True for the two transform-resampling methods, which need a ContrastiveObjective.
bool is_contrastive(Method m);

/// Raised when a run cannot finish. partial() holds the iterate and the loss
/// trace up to the failure.
class AttackError : public Error {
 public:
  AttackError(const std::string& what, AttackResult partial)
      : Error(what), partial_(std::move(partial)) {}

  const AttackResult& partial() const { return partial_; }

 private:
  AttackResult partial_;
};

// Called with (t, x_t) for t = 0..T, including the final iterate.
using IterateObserver = std::function<void(int, const ImageTensor&)>;

/// Per-run accumulators. All arrays have the image size and start at zero.
struct OptimizerState {
  std::vector<double> momentum;       // g_t
  std::vector<double> variance;       // v_t
  std::vector<double> amplification;  // PI / PI++ accumulated step
  int t = 0;
  int zero_streak = 0;

  explicit OptimizerState(std::size_t n)
      : momentum(n, 0.0), variance(n, 0.0), amplification(n, 0.0) {}
};

/// Every optimizer stores the perturbation Delta and evaluates at
/// compose(x, Delta). The targeted direction is descent on J; with
/// cfg.targeted == false the objective is ascended instead.
///
/// I-FGSM:  Delta <- Proj(Delta - alpha * sign(grad))
/// MI:      g <- mu * g + grad / |grad|_1, step on sign(g)        (Dong et al. 2018)
/// NI:      grad taken at the lookahead x_t - alpha * mu * g      (Lin et al. 2020)
/// SINI:    NI with grad averaged over x/2^i, i < sini_scales     (Lin et al. 2020)
/// PI:      amplified step alpha*beta with cut-noise projection  (Gao et al. 2020)
/// PI++:    PI on a 7x7 Gaussian-smoothed gradient, projection gamma = 0.8*alpha*beta
/// VMI:     g <- mu * g + (grad + v) / |grad + v|_1 with
///          v = mean_j grad(x_t + r_j) - grad(x_t), r_j ~ U(-beta*eps, beta*eps)
AttackResult i_fgsm(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                    const IterateObserver& observer = {});
AttackResult mi_fgsm(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                     const IterateObserver& observer = {});
AttackResult ni_fgsm(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                     const IterateObserver& observer = {});
AttackResult sini_fgsm(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                       const IterateObserver& observer = {});
AttackResult pi_fgsm(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                     const IterateObserver& observer = {});
AttackResult pi_fgsm_pp(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                        const IterateObserver& observer = {});
AttackResult vmi_fgsm(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                      const IterateObserver& observer = {});

// Dispatch for the seven non-contrastive methods.
AttackResult run_gradient_method(Method method, const ImageTensor& x, const Objective& objective,
                                 const AttackConfig& cfg, const IterateObserver& observer = {});

enum class StepRule { sign, vmi };

/// Each iteration resamples transform pairs, evaluates the triplet loss at
/// x + Delta and steps with the chosen rule. The final loss_trace entry is
/// taken under the identity transform.
AttackResult contrastive_adv(const ImageTensor& x, const ContrastiveObjective& objective,
                             const AttackConfig& cfg, const TransformConfig& transforms,
                             StepRule rule, const IterateObserver& observer = {});

// Signed step applied by every method: sign(0) = 0.
double sign(double v);

// Depthwise 2-D convolution with zero padding; kernel is k x k, k odd.
std::vector<double> depthwise_conv(const ImageShape& shape, const std::vector<double>& values,
                                   const std::vector<double>& kernel, int k);

// Normalised Gaussian kernel, row-major k x k.
std::vector<double> gaussian_kernel(int k, double sigma);

// Monte-Carlo v_t at x_t with cfg.vmi_samples neighbours drawn from rng.
// direction is +1 for descent on J, -1 for ascent.
std::vector<double> variance_estimate(const Objective& objective, const ImageTensor& x_t,
                                      const std::vector<double>& grad_at_x, const AttackConfig& cfg,
                                      Rng& rng, double direction = 1.0);

}  // namespace vlmattack
