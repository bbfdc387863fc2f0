#include "ensldm/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace ensldm {

NoiseSchedule NoiseSchedule::make(int steps, const std::string& kind) {
  if (steps < 2) throw ConfigError("NoiseSchedule: need at least 2 steps");
  if (kind != "linear") throw ConfigError("NoiseSchedule: unknown kind " + kind);
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(static_cast<size_t>(steps));
  s.alpha.resize(static_cast<size_t>(steps));
  s.alpha_bar.resize(static_cast<size_t>(steps));
  const double scale = 1000.0 / steps;
  const double b0 = 1e-4 * scale;
  const double b1 = 0.02 * scale;
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    double b = b0 + (b1 - b0) * static_cast<double>(t) / (steps - 1);
    b = std::clamp(b, 1e-8, 0.999);
    s.beta[static_cast<size_t>(t)] = b;
    s.alpha[static_cast<size_t>(t)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bar[static_cast<size_t>(t)] = prod;
  }
  return s;
}

std::vector<int> ddim_step_sequence(int steps, int ddim_steps) {
  if (ddim_steps < 1) throw ConfigError("ddim_step_sequence: need at least 1 step");
  ddim_steps = std::min(ddim_steps, steps);
  std::vector<int> taus;
  if (ddim_steps == 1) {
    taus.push_back(steps - 1);
    return taus;
  }
  for (int i = ddim_steps - 1; i >= 0; --i) {
    int t = static_cast<int>(std::llround(static_cast<double>(i) * (steps - 1) / (ddim_steps - 1)));
    if (taus.empty() || t < taus.back()) taus.push_back(t);
  }
  return taus;
}

}  // namespace ensldm
