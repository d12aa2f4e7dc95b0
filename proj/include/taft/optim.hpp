#pragma once

#include <cmath>
#include <cstdint>

#include "taft/parameter.hpp"

namespace taft {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam step with decoupled weight decay. A parameter whose
// gradient buffer was never populated is treated as having zero gradient.
template <class T>
void adam_step(Parameter<T>& p, double lr, double weight_decay,
               const AdamConfig& ac = AdamConfig{}) {
  p.step_count += 1;
  const double bc1 = 1.0 - std::pow(ac.beta1, static_cast<double>(p.step_count));
  const double bc2 = 1.0 - std::pow(ac.beta2, static_cast<double>(p.step_count));
  auto& w = p.value.data();
  const bool has_grad = p.value.has_grad();
  const auto* g = has_grad ? p.value.grad().data() : nullptr;
  for (size_t i = 0; i < w.size(); ++i) {
    const double gi = has_grad ? static_cast<double>(g[i]) : 0.0;
    const double m = ac.beta1 * static_cast<double>(p.adam_m[i]) + (1.0 - ac.beta1) * gi;
    const double v = ac.beta2 * static_cast<double>(p.adam_v[i]) + (1.0 - ac.beta2) * gi * gi;
    p.adam_m[i] = static_cast<T>(m);
    p.adam_v[i] = static_cast<T>(v);
    const double step = lr * (m / bc1) / (std::sqrt(v / bc2) + ac.eps);
    const double wi = static_cast<double>(w[i]);
    w[i] = static_cast<T>(wi - step - lr * weight_decay * wi);
  }
}

}  // namespace taft
