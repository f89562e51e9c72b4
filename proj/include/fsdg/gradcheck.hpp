#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fsdg/tensor.hpp"

namespace fsdg {

/// Central finite differences of a scalar function of `inputs`.
///
/// `loss` must rebuild its graph on every call from the current values of
/// `inputs` (which are perturbed in place). Returns one gradient buffer per
/// input.
inline std::vector<std::vector<double>> numeric_gradients(const std::function<double()>& loss,
                                                          std::vector<Tensor> inputs, double step = 1e-6) {
  std::vector<std::vector<double>> grads;
  for (auto& t : inputs) {
    auto values = t.mutable_data();
    std::vector<double> g(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = loss();
      values[i] = saved - step;
      const double down = loss();
      values[i] = saved;
      g[i] = (up - down) / (2.0 * step);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

/// ||a - b|| / max(||a||, ||b||), with an absolute floor so that two
/// vanishing gradients compare as equal.
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-10) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nb), floor});
  return std::sqrt(diff) / scale;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t inputs_checked = 0;
};

/// Compares reverse-mode gradients of `build()` against central differences
/// for every tensor in `inputs`. The inputs must be leaves with requires_grad.
inline GradCheckResult check_gradients(const std::function<Tensor()>& build, std::vector<Tensor> inputs,
                                       double step = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  build().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());
  const auto numeric = numeric_gradients(
      [&] {
        NoGradGuard guard;
        return build().item();
      },
      inputs, step);
  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[k], numeric[k]));
    ++result.inputs_checked;
  }
  return result;
}

}  // namespace fsdg
