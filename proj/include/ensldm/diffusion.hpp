#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ensldm/rng.hpp"
#include "ensldm/tensor.hpp"

namespace ensldm {

/// Forward-process variance schedule. beta is non-decreasing in (0, 1);
/// alpha_bar is the cumulative product of (1 - beta), strictly decreasing,
/// computed in double.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  /// kind "linear": beta spans 1e-4*(1000/T) .. 0.02*(1000/T), clamped to
  /// (0, 0.999).
  static NoiseSchedule make(int steps, const std::string& kind = "linear");

  /// alpha_bar extended with abar(-1) = 1 (the clean end of the chain).
  double abar(int t) const {
    if (t < -1 || t >= steps) throw RangeError("NoiseSchedule: step out of range");
    return t < 0 ? 1.0 : alpha_bar[static_cast<size_t>(t)];
  }
};

struct SamplerConfig {
  std::string sampler = "ddim";  // "ddim" | "ddpm"
  int ddim_steps = 20;
};

/// Closed form of composing the per-step forward kernel t+1 times:
/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
template <class T>
Tensor<T> q_sample(const Tensor<T>& z0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  if (t < 0 || t >= sched.steps) throw RangeError("q_sample: step index out of range");
  check_same_shape(z0, eps, "q_sample");
  const T a = static_cast<T>(std::sqrt(sched.abar(t)));
  const T b = static_cast<T>(std::sqrt(1.0 - sched.abar(t)));
  Tensor<T> out(z0.shape);
  for (int64_t i = 0; i < z0.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

template <class T>
struct DiffusionSample {
  Tensor<T> z0;
  Tensor<T> eps;
  Tensor<T> z_t;
  int t = 0;
};

/// Mean over batch and cells of (eps - model(z_t, t))^2, double accumulation.
/// Conditioning enters through the model closure (channel concatenation).
template <class T, class Model>
double ddpm_loss(Model&& model, const std::vector<DiffusionSample<T>>& batch) {
  double acc = 0.0;
  int64_t n = 0;
  for (const auto& s : batch) {
    Tensor<T> pred = model(s.z_t, s.t);
    check_same_shape(pred, s.eps, "ddpm_loss");
    for (int64_t i = 0; i < pred.numel(); ++i) {
      double d = static_cast<double>(s.eps[i]) - pred[i];
      if (!std::isfinite(d)) {
        throw NumericError("ddpm_loss: non-finite model output at step " + std::to_string(s.t));
      }
      acc += d * d;
    }
    n += pred.numel();
  }
  require(n > 0, "ddpm_loss: empty batch");
  return acc / static_cast<double>(n);
}

/// One ancestral reverse step:
/// mu = (z_t - beta_t/sqrt(1-abar_t) eps_hat) / sqrt(alpha_t),
/// z_{t-1} = mu + sqrt(beta_t) xi, with no noise at t = 0.
template <class T, class Model>
Tensor<T> ddpm_step(Model&& model, const Tensor<T>& z_t, int t, const NoiseSchedule& sched,
                    Rng& rng) {
  if (t < 0 || t >= sched.steps) throw RangeError("ddpm_step: step index out of range");
  Tensor<T> eps_hat = model(z_t, t);
  check_same_shape(eps_hat, z_t, "ddpm_step");
  const double beta = sched.beta[static_cast<size_t>(t)];
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[static_cast<size_t>(t)]);
  const double coef = beta / std::sqrt(1.0 - sched.abar(t));
  const double sigma = t > 0 ? std::sqrt(beta) : 0.0;
  Tensor<T> out(z_t.shape);
  for (int64_t i = 0; i < z_t.numel(); ++i) {
    double mu = inv_sqrt_alpha * (static_cast<double>(z_t[i]) - coef * eps_hat[i]);
    double xi = sigma > 0.0 ? sigma * rng.gaussian() : 0.0;
    out[i] = static_cast<T>(mu + xi);
    if (!std::isfinite(static_cast<double>(out[i]))) {
      throw NumericError("ddpm_step: non-finite value at step " + std::to_string(t));
    }
  }
  return out;
}

/// Deterministic implicit step t -> t_prev (t_prev may be -1 for the clean
/// sample): zhat0 = (z_t - sqrt(1-abar_t) eps_hat)/sqrt(abar_t), then
/// z_prev = sqrt(abar_prev) zhat0 + sqrt(1-abar_prev) eps_hat.
template <class T, class Model>
Tensor<T> ddim_step(Model&& model, const Tensor<T>& z_t, int t, int t_prev,
                    const NoiseSchedule& sched) {
  if (t < 0 || t >= sched.steps) throw RangeError("ddim_step: step index out of range");
  if (t_prev > t) {
    throw ConfigError("ddim_step: non-monotone step pair (" + std::to_string(t) + " -> " +
                      std::to_string(t_prev) + ")");
  }
  if (t_prev < -1) throw RangeError("ddim_step: t_prev out of range");
  Tensor<T> eps_hat = model(z_t, t);
  check_same_shape(eps_hat, z_t, "ddim_step");
  const double abar_t = sched.abar(t);
  const double abar_p = sched.abar(t_prev);
  const double inv_sqrt = 1.0 / std::sqrt(abar_t);
  const double noise_t = std::sqrt(1.0 - abar_t);
  const double a = std::sqrt(abar_p);
  const double b = std::sqrt(1.0 - abar_p);
  Tensor<T> out(z_t.shape);
  for (int64_t i = 0; i < z_t.numel(); ++i) {
    double zhat0 = (static_cast<double>(z_t[i]) - noise_t * eps_hat[i]) * inv_sqrt;
    out[i] = static_cast<T>(a * zhat0 + b * eps_hat[i]);
    if (!std::isfinite(static_cast<double>(out[i]))) {
      throw NumericError("ddim_step: non-finite value at step " + std::to_string(t));
    }
  }
  return out;
}

/// Evenly spaced descending step subsequence for DDIM, ending at 0.
std::vector<int> ddim_step_sequence(int steps, int ddim_steps);

/// Runs a full reverse trajectory from Gaussian noise of the given shape.
/// DDIM ends with an explicit t -> -1 step that extracts the clean estimate.
template <class T, class Model>
Tensor<T> sample(Model&& model, const std::vector<int>& shape, const NoiseSchedule& sched,
                 const SamplerConfig& cfg, Rng& rng) {
  Tensor<T> z(shape);
  for (int64_t i = 0; i < z.numel(); ++i) z[i] = static_cast<T>(rng.gaussian());
  if (cfg.sampler == "ddpm") {
    for (int t = sched.steps - 1; t >= 0; --t) z = ddpm_step(model, z, t, sched, rng);
    return z;
  }
  if (cfg.sampler != "ddim") throw ConfigError("sample: unknown sampler " + cfg.sampler);
  std::vector<int> taus = ddim_step_sequence(sched.steps, cfg.ddim_steps);
  for (size_t i = 0; i < taus.size(); ++i) {
    int t = taus[i];
    int t_prev = i + 1 < taus.size() ? taus[i + 1] : -1;
    z = ddim_step(model, z, t, t_prev, sched);
  }
  return z;
}

/// Elementwise residual against the conditioning latent: z_y = z - z_c.
template <class T>
Tensor<T> residualize(const Tensor<T>& z, const Tensor<T>& z_c) {
  check_same_shape(z, z_c, "residualize");
  Tensor<T> y(z.shape);
  for (int64_t i = 0; i < z.numel(); ++i) y[i] = z[i] - z_c[i];
  return y;
}

/// Adds generated residuals back: zhat = z_y + z_c.
template <class T>
Tensor<T> deresidualize(const Tensor<T>& z_y, const Tensor<T>& z_c) {
  check_same_shape(z_y, z_c, "deresidualize");
  Tensor<T> z(z_y.shape);
  for (int64_t i = 0; i < z.numel(); ++i) z[i] = z_y[i] + z_c[i];
  return z;
}

}  // namespace ensldm
