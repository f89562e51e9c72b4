#pragma once

#include <vector>

#include "fsdg/random.hpp"
#include "fsdg/tensor.hpp"

namespace fsdg::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool trainable = true) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  if (trainable) t.set_requires_grad();
  return t;
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace fsdg::testing
