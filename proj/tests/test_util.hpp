#pragma once

#include <vector>

#include "infodrop/rng.hpp"
#include "infodrop/tensor.hpp"

namespace infodrop::testutil {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0,
                            double hi = 2.0, bool requires_grad = false) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = lo + (hi - lo) * rng.uniform();
  }
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// Random entries bounded away from zero: |v| in [margin, hi]. Used for
// gradient checks through kinked functions like relu.
inline Tensor random_tensor_away_from_zero(Shape shape, Rng& rng,
                                           double margin = 0.05,
                                           double hi = 2.0,
                                           bool requires_grad = false) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double mag = margin + (hi - margin) * rng.uniform();
    data[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace infodrop::testutil
