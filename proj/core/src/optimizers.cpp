#include "vlmattack/optimizers.hpp"

#include <array>
#include <cmath>
#include <numeric>

namespace vlmattack {

namespace {

constexpr std::array<std::pair<Method, std::string_view>, 9> kMethodIds{{
    {Method::ifgsm, "ifgsm"},
    {Method::mifgsm, "mifgsm"},
    {Method::nifgsm, "nifgsm"},
    {Method::sinifgsm, "sinifgsm"},
    {Method::pifgsm, "pifgsm"},
    {Method::pifgsmpp, "pifgsmpp"},
    {Method::vmifgsm, "vmifgsm"},
    {Method::contrastive_adv, "contrastive_adv"},
    {Method::contrastive_adv_vmi, "contrastive_adv_vmi"},
}};

// PI++ smoothing kernel.
constexpr int kSmoothSize = 7;
constexpr double kSmoothSigma = 3.0;

// Stream ids for mix_seed.
constexpr std::uint64_t kTransformStream = 1;
constexpr std::uint64_t kVarianceStream = 2;

}  // namespace

std::optional<Method> method_from_id(std::string_view id) {
  for (const auto& [m, name] : kMethodIds) {
    if (name == id) return m;
  }
  return std::nullopt;
}

std::string_view method_id(Method m) {
  for (const auto& [mm, name] : kMethodIds) {
    if (mm == m) return name;
  }
  return "unknown";
}

std::vector<std::string> method_ids() {
  std::vector<std::string> out;
  for (const auto& [_, name] : kMethodIds) out.emplace_back(name);
  return out;
}

bool is_contrastive(Method m) {
  return m == Method::contrastive_adv || m == Method::contrastive_adv_vmi;
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::vector<double> depthwise_conv(const ImageShape& shape, const std::vector<double>& values,
                                   const std::vector<double>& kernel, int k) {
  if (k % 2 == 0 || kernel.size() != static_cast<std::size_t>(k) * k) {
    throw ContractViolation("kernel must be k x k with odd k");
  }
  const int r = k / 2;
  const int h = shape.height, w = shape.width, c = shape.channels;
  std::vector<double> out(values.size(), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int dy = -r; dy <= r; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= h) continue;
          for (int dx = -r; dx <= r; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= w) continue;
            s += kernel[(dy + r) * k + (dx + r)] *
                 values[(static_cast<std::size_t>(yy) * w + xx) * c + ch];
          }
        }
        out[(static_cast<std::size_t>(y) * w + x) * c + ch] = s;
      }
    }
  }
  return out;
}

std::vector<double> gaussian_kernel(int k, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(k) * k);
  const int r = k / 2;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const double d2 = (i - r) * (i - r) + (j - r) * (j - r);
      g[i * k + j] = std::exp(-d2 / (2.0 * sigma * sigma));
    }
  }
  const double total = std::accumulate(g.begin(), g.end(), 0.0);
  for (double& v : g) v /= total;
  return g;
}

namespace {

bool all_zero(const std::vector<double>& v) {
  for (double x : v) {
    if (x != 0.0) return false;
  }
  return true;
}

double l1(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += std::abs(x);
  return s;
}

std::vector<double> scaled(const std::vector<double>& v, double s) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = s * v[i];
  return out;
}

// g <- mu * g + u / |u|_1; u == 0 leaves only the decayed term.
void accumulate_momentum(std::vector<double>& g, const std::vector<double>& u, double mu) {
  const double n = l1(u);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = mu * g[i] + (n > 0.0 ? u[i] / n : 0.0);
}

std::vector<double> signed_step(const std::vector<double>& g, double alpha) {
  std::vector<double> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = alpha * sign(g[i]);
  return out;
}

struct StepOutput {
  double value = 0.0;                // J(x_t)
  std::vector<double> displacement;  // Delta <- Proj(Delta - displacement)
  bool zero_gradient = false;
};

using StepFn = std::function<StepOutput(const ImageTensor& x_t, OptimizerState& state)>;
using FinalFn = std::function<double(const ImageTensor& x_T)>;

AttackResult make_result(const ImageTensor& x, const Perturbation& delta,
                         std::vector<double> trace, const AttackConfig& cfg) {
  return AttackResult{delta, compose(x, delta), std::move(trace), cfg};
}

AttackResult iterate(const ImageTensor& x, const AttackConfig& cfg, std::string_view name,
                     const StepFn& step, const FinalFn& final_value,
                     const IterateObserver& observer) {
  cfg.validate();
  OptimizerState state(x.size());
  Perturbation delta = Perturbation::zero(x.shape(), cfg.epsilon);
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(cfg.steps) + 1);

  auto fail = [&](const std::string& why) -> AttackError {
    return AttackError(std::string(name) + " stopped at step " + std::to_string(state.t) + ": " + why,
                       make_result(x, delta, trace, cfg));
  };

  std::vector<double> raw(x.size());
  for (state.t = 0; state.t < cfg.steps; ++state.t) {
    const ImageTensor x_t = compose(x, delta);
    if (observer) observer(state.t, x_t);
    StepOutput out;
    try {
      out = step(x_t, state);
    } catch (const AttackError&) {
      throw;
    } catch (const std::exception& e) {
      throw fail(e.what());
    }
    trace.push_back(out.value);
    if (out.zero_gradient) {
      if (++state.zero_streak >= cfg.stall_limit) {
        throw fail("gradient was zero for " + std::to_string(state.zero_streak) +
                   " consecutive steps");
      }
    } else {
      state.zero_streak = 0;
    }
    const auto& d = delta.delta();
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = d[i] - out.displacement[i];
    delta = project_linf(x, raw, cfg.epsilon);
  }
  const ImageTensor x_final = compose(x, delta);
  if (observer) observer(cfg.steps, x_final);
  try {
    trace.push_back(final_value(x_final));
  } catch (const std::exception& e) {
    throw fail(e.what());
  }
  return AttackResult{delta, x_final, std::move(trace), cfg};
}

double direction_of(const AttackConfig& cfg) { return cfg.targeted ? 1.0 : -1.0; }

// Gradient of the loss the optimizer descends.
std::vector<double> descent_gradient(const Evaluation& e, double direction) {
  return direction == 1.0 ? e.gradient : scaled(e.gradient, direction);
}

FinalFn final_of(const Objective& objective) {
  return [&objective](const ImageTensor& x) { return objective.evaluate(x).value; };
}

// Lookahead point x_t - alpha * mu * g, clamped into [0, 1].
ImageTensor lookahead(const ImageTensor& x_t, const std::vector<double>& g, double scale) {
  std::vector<double> v(x_t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x_t.data()[i] - scale * g[i];
  return clamped_image(x_t.shape(), v);
}

// Averages grad J over x/2^i for i < scales (chain rule included).
std::vector<double> scale_invariant_gradient(const Objective& objective, const ImageTensor& point,
                                             const Evaluation* at_point, int scales,
                                             double direction) {
  std::vector<double> sum(point.size(), 0.0);
  for (int i = 0; i < scales; ++i) {
    const double s = std::ldexp(1.0, -i);
    std::vector<double> grad;
    if (i == 0 && at_point) {
      grad = at_point->gradient;
    } else if (i == 0) {
      grad = objective.evaluate(point).gradient;
    } else {
      std::vector<double> v(point.size());
      for (std::size_t j = 0; j < v.size(); ++j) v[j] = point.data()[j] * s;
      grad = objective.evaluate(ImageTensor(point.shape(), std::move(v))).gradient;
    }
    for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += s * grad[j];
  }
  for (double& v : sum) v = direction * (v / scales);
  return sum;
}

StepOutput momentum_step(const ImageTensor& x_t, OptimizerState& state, const Objective& objective,
                         const AttackConfig& cfg, bool nesterov, int scales) {
  const double dir = direction_of(cfg);
  const Evaluation e = objective.evaluate(x_t);
  std::vector<double> grad;
  if (!nesterov) {
    grad = descent_gradient(e, dir);
  } else {
    const ImageTensor look = lookahead(x_t, state.momentum, cfg.alpha * cfg.momentum_weight);
    const bool same = look == x_t;
    grad = scale_invariant_gradient(objective, look, same ? &e : nullptr, scales, dir);
  }
  StepOutput out;
  out.value = e.value;
  out.zero_gradient = all_zero(grad);
  accumulate_momentum(state.momentum, grad, cfg.momentum_weight);
  out.displacement = signed_step(state.momentum, cfg.alpha);
  return out;
}

StepOutput patch_wise_step(const ImageTensor& x_t, OptimizerState& state,
                           const Objective& objective, const AttackConfig& cfg, bool plus_plus) {
  const double dir = direction_of(cfg);
  const Evaluation e = objective.evaluate(x_t);
  std::vector<double> noise = descent_gradient(e, dir);
  if (plus_plus) {
    noise = depthwise_conv(x_t.shape(), noise, gaussian_kernel(kSmoothSize, kSmoothSigma),
                           kSmoothSize);
  }
  const double alpha_beta = cfg.alpha * cfg.pi_amplification;
  const double gamma = alpha_beta * (plus_plus ? cfg.pi_project_factor : 1.0);

  auto& a = state.amplification;
  std::vector<double> cut(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] += alpha_beta * sign(noise[i]);
    cut[i] = std::max(std::abs(a[i]) - cfg.epsilon, 0.0) * sign(a[i]);
  }
  // 3x3 kernel, 1/8 everywhere except a zero centre: spreads the clipped
  // excess onto neighbouring pixels.
  std::vector<double> kernel(9, 1.0 / 8.0);
  kernel[4] = 0.0;
  const auto spread = depthwise_conv(x_t.shape(), cut, kernel, 3);

  StepOutput out;
  out.value = e.value;
  out.zero_gradient = all_zero(noise);
  out.displacement.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double projection = gamma * sign(spread[i]);
    a[i] += projection;
    out.displacement[i] = alpha_beta * sign(noise[i]) + projection;
  }
  return out;
}

StepOutput variance_step(const ImageTensor& x_t, OptimizerState& state, const Objective& objective,
                         const AttackConfig& cfg, Rng& rng) {
  const double dir = direction_of(cfg);
  const Evaluation e = objective.evaluate(x_t);
  const std::vector<double> grad = descent_gradient(e, dir);
  state.variance = variance_estimate(objective, x_t, e.gradient, cfg, rng, dir);
  std::vector<double> u(grad.size());
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = grad[i] + state.variance[i];

  StepOutput out;
  out.value = e.value;
  out.zero_gradient = all_zero(u);
  accumulate_momentum(state.momentum, u, cfg.momentum_weight);
  out.displacement = signed_step(state.momentum, cfg.alpha);
  return out;
}

}  // namespace

std::vector<double> variance_estimate(const Objective& objective, const ImageTensor& x_t,
                                      const std::vector<double>& grad_at_x, const AttackConfig& cfg,
                                      Rng& rng, double direction) {
  const double radius = cfg.vmi_beta * cfg.epsilon;
  std::vector<double> v(x_t.size(), 0.0);
  std::vector<double> neighbour(x_t.size());
  for (int j = 0; j < cfg.vmi_samples; ++j) {
    for (std::size_t i = 0; i < neighbour.size(); ++i) {
      neighbour[i] = x_t.data()[i] + uniform(rng, -radius, radius);
    }
    const auto g = objective.evaluate(clamped_image(x_t.shape(), neighbour)).gradient;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += g[i] - grad_at_x[i];
  }
  for (double& x : v) x = direction * (x / cfg.vmi_samples);
  return v;
}

AttackResult i_fgsm(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                    const IterateObserver& observer) {
  const double dir = direction_of(cfg);
  return iterate(
      x, cfg, "ifgsm",
      [&](const ImageTensor& x_t, OptimizerState&) {
        const Evaluation e = objective.evaluate(x_t);
        const auto grad = descent_gradient(e, dir);
        return StepOutput{e.value, signed_step(grad, cfg.alpha), all_zero(grad)};
      },
      final_of(objective), observer);
}

AttackResult mi_fgsm(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                     const IterateObserver& observer) {
  return iterate(
      x, cfg, "mifgsm",
      [&](const ImageTensor& x_t, OptimizerState& s) {
        return momentum_step(x_t, s, objective, cfg, false, 1);
      },
      final_of(objective), observer);
}

AttackResult ni_fgsm(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                     const IterateObserver& observer) {
  return iterate(
      x, cfg, "nifgsm",
      [&](const ImageTensor& x_t, OptimizerState& s) {
        return momentum_step(x_t, s, objective, cfg, true, 1);
      },
      final_of(objective), observer);
}

AttackResult sini_fgsm(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                       const IterateObserver& observer) {
  return iterate(
      x, cfg, "sinifgsm",
      [&](const ImageTensor& x_t, OptimizerState& s) {
        return momentum_step(x_t, s, objective, cfg, true, cfg.sini_scales);
      },
      final_of(objective), observer);
}

AttackResult pi_fgsm(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                     const IterateObserver& observer) {
  return iterate(
      x, cfg, "pifgsm",
      [&](const ImageTensor& x_t, OptimizerState& s) {
        return patch_wise_step(x_t, s, objective, cfg, false);
      },
      final_of(objective), observer);
}

AttackResult pi_fgsm_pp(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                        const IterateObserver& observer) {
  return iterate(
      x, cfg, "pifgsmpp",
      [&](const ImageTensor& x_t, OptimizerState& s) {
        return patch_wise_step(x_t, s, objective, cfg, true);
      },
      final_of(objective), observer);
}

AttackResult vmi_fgsm(const ImageTensor& x, const Objective& objective, const AttackConfig& cfg,
                      const IterateObserver& observer) {
  Rng rng(mix_seed(cfg.seed, kVarianceStream));
  return iterate(
      x, cfg, "vmifgsm",
      [&](const ImageTensor& x_t, OptimizerState& s) {
        return variance_step(x_t, s, objective, cfg, rng);
      },
      final_of(objective), observer);
}

AttackResult run_gradient_method(Method method, const ImageTensor& x, const Objective& objective,
                                 const AttackConfig& cfg, const IterateObserver& observer) {
  switch (method) {
    case Method::ifgsm: return i_fgsm(x, objective, cfg, observer);
    case Method::mifgsm: return mi_fgsm(x, objective, cfg, observer);
    case Method::nifgsm: return ni_fgsm(x, objective, cfg, observer);
    case Method::sinifgsm: return sini_fgsm(x, objective, cfg, observer);
    case Method::pifgsm: return pi_fgsm(x, objective, cfg, observer);
    case Method::pifgsmpp: return pi_fgsm_pp(x, objective, cfg, observer);
    case Method::vmifgsm: return vmi_fgsm(x, objective, cfg, observer);
    default:
      throw ContractViolation(std::string(method_id(method)) +
                              " resamples transforms and needs the contrastive objective");
  }
}

AttackResult contrastive_adv(const ImageTensor& x, const ContrastiveObjective& objective,
                             const AttackConfig& cfg, const TransformConfig& transforms,
                             StepRule rule, const IterateObserver& observer) {
  transforms.validate();
  Rng transform_rng(mix_seed(cfg.seed, kTransformStream));
  Rng variance_rng(mix_seed(cfg.seed, kVarianceStream));
  const double dir = direction_of(cfg);
  return iterate(
      x, cfg, rule == StepRule::sign ? "contrastive_adv" : "contrastive_adv_vmi",
      [&](const ImageTensor& x_t, OptimizerState& s) {
        std::vector<TransformPair> pairs;
        for (int i = 0; i < transforms.samples_per_step; ++i) {
          pairs.push_back(sample_transform(transform_rng, transforms));
        }
        const BoundContrastiveObjective bound(objective, std::move(pairs));
        if (rule == StepRule::vmi) return variance_step(x_t, s, bound, cfg, variance_rng);
        const Evaluation e = bound.evaluate(x_t);
        const auto grad = descent_gradient(e, dir);
        return StepOutput{e.value, signed_step(grad, cfg.alpha), all_zero(grad)};
      },
      [&](const ImageTensor& x_final) { return objective.evaluate(x_final, TransformPair{}).value; },
      observer);
}

}  // namespace vlmattack
