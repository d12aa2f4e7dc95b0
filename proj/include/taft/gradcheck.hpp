#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "taft/rng.hpp"
#include "taft/tensor.hpp"

namespace taft {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_coord = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  int64_t coords_checked = 0;
};

// Central-difference check of already-populated analytic gradients.
//
// `loss_fn` must recompute the scalar objective from the current parameter
// values without touching gradients; it is called under NoGradGuard. Each
// named tensor is perturbed at up to `coords_per_param` randomly sampled
// coordinates. Relative error uses a floor to keep near-zero gradients from
// dominating: |a - n| / max(|a|, |n|, floor).
template <class T>
GradCheckReport finite_diff_check(const std::function<double()>& loss_fn,
                                  const std::vector<std::pair<std::string, Tensor<T>>>& params,
                                  double h, int64_t coords_per_param, Rng& rng,
                                  double rel_floor = 1e-6) {
  GradCheckReport report;
  NoGradGuard guard;
  for (const auto& [name, tensor] : params) {
    if (!tensor.has_grad()) {
      throw GraphError("finite_diff_check: no gradient populated for " + name);
    }
    const int64_t n = tensor.numel();
    std::vector<int64_t> coords;
    if (coords_per_param <= 0 || coords_per_param >= n) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int64_t i = 0; i < coords_per_param; ++i) {
        coords.push_back(static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(n))));
      }
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    Tensor<T> handle = tensor;
    auto& values = handle.data();
    for (const int64_t c : coords) {
      const T saved = values[static_cast<size_t>(c)];
      values[static_cast<size_t>(c)] = saved + static_cast<T>(h);
      const double plus = loss_fn();
      values[static_cast<size_t>(c)] = saved - static_cast<T>(h);
      const double minus = loss_fn();
      values[static_cast<size_t>(c)] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double analytic = static_cast<double>(tensor.grad()[static_cast<size_t>(c)]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), rel_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_coord = c;
        report.analytic = analytic;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace taft
