#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "infodrop/tensor.hpp"

namespace infodrop {

// Relative error with a floor on the denominator so that near-zero gradients
// are compared at an effective absolute tolerance instead of blowing up.
inline double relative_error(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Central finite differences of a re-runnable scalar forward pass with
// respect to one tensor's entries. Uses only forward evaluations, so it is
// independent of the reverse-mode path it is used to check.
inline std::vector<double> finite_difference_gradient(
    const std::function<double()>& eval_loss, Tensor param, double h = 1e-4) {
  std::vector<double>& values = param.data();
  std::vector<double> grad(values.size());
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double plus = eval_loss();
    values[i] = saved - h;
    const double minus = eval_loss();
    values[i] = saved;
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

// Max relative error between a reverse-mode gradient and the central
// finite-difference estimate over all entries of `param`.
inline double max_gradient_error(const std::function<double()>& eval_loss,
                                 Tensor param,
                                 const std::vector<double>& autodiff_grad,
                                 double h = 1e-4) {
  const std::vector<double> fd = finite_difference_gradient(eval_loss, param, h);
  double worst = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    worst = std::max(worst, relative_error(fd[i], autodiff_grad[i]));
  }
  return worst;
}

struct MomentEstimate {
  double mean = 0.0;
  double variance = 0.0;
  double mean_std_error = 0.0;
  double variance_std_error = 0.0;
  std::size_t n = 0;
};

inline MomentEstimate sample_moments(const std::vector<double>& samples) {
  MomentEstimate m;
  m.n = samples.size();
  if (m.n == 0) return m;
  for (double v : samples) m.mean += v;
  m.mean /= static_cast<double>(m.n);
  double m2 = 0.0, m4 = 0.0;
  for (double v : samples) {
    const double d = v - m.mean;
    m2 += d * d;
    m4 += d * d * d * d;
  }
  m.variance = m2 / static_cast<double>(m.n - 1);
  m.mean_std_error = std::sqrt(m.variance / static_cast<double>(m.n));
  // SE of the sample variance from the fourth central moment.
  const double n = static_cast<double>(m.n);
  const double mu4 = m4 / n;
  const double var_of_var =
      (mu4 - (n - 3.0) / (n - 1.0) * m.variance * m.variance) / n;
  m.variance_std_error = std::sqrt(std::max(var_of_var, 0.0));
  return m;
}

}  // namespace infodrop
