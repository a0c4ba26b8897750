#pragma once

#include <cmath>
#include <functional>
#include <utility>

#include "infodrop/error.hpp"
#include "infodrop/ops.hpp"
#include "infodrop/rng.hpp"
#include "infodrop/tensor.hpp"

namespace infodrop {

enum class Activation { kRelu, kSoftplus };
enum class PriorKind { kLogUniform, kLogNormal };
enum class NoiseMode { kStochastic, kDeterministic };

// Activations at or below this magnitude take the zero-atom branch of the
// log-uniform prior.
constexpr double kZeroAtomEps = 1e-12;

// 0.5 * log(2*pi*e)
constexpr double kHalfLog2PiE = 1.4189385332046727;

// Prior over post-noise activations. Log-uniform (with a zero atom q0 and
// improper constant log_c) pairs with relu; log-normal(mu, sigma) pairs with
// softplus. For the log-normal case mu and sigma may be trained per layer.
struct PriorSpec {
  PriorKind kind = PriorKind::kLogNormal;
  double q0 = 0.1;
  double log_c = 0.0;
  double mu = 0.0;
  double sigma = 1.0;
  bool trainable = false;

  static PriorSpec log_uniform(double q0 = 0.1, double log_c = 0.0) {
    PriorSpec p;
    p.kind = PriorKind::kLogUniform;
    p.q0 = q0;
    p.log_c = log_c;
    validate(p);
    return p;
  }

  static PriorSpec log_normal(double mu = 0.0, double sigma = 1.0,
                              bool trainable = false) {
    PriorSpec p;
    p.kind = PriorKind::kLogNormal;
    p.mu = mu;
    p.sigma = sigma;
    p.trainable = trainable;
    validate(p);
    return p;
  }

  static void validate(const PriorSpec& p) {
    if (p.sigma <= 0.0) throw DomainError("prior sigma must be positive");
    if (p.q0 < 0.0 || p.q0 > 1.0) throw DomainError("prior q0 must be in [0,1]");
  }
};

// Additive constant of the relu/log-uniform KL cost. The nonzero branch is
// -log(alpha) + C with C = -0.5*log(2*pi*e) - log_c.
inline double kl_relu_constant(const PriorSpec& prior) {
  return -kHalfLog2PiE - prior.log_c;
}

// Per-unit KL cost of a relu unit under the log-uniform prior.
inline double kl_relu_unit(double alpha, double f_val, const PriorSpec& prior) {
  if (prior.kind != PriorKind::kLogUniform) {
    throw ConfigError("kl_relu_unit requires a log-uniform prior");
  }
  if (alpha <= 0.0) {
    throw DomainError("kl_relu_unit: alpha must be positive, got " +
                      std::to_string(alpha));
  }
  if (std::abs(f_val) <= kZeroAtomEps) {
    if (prior.q0 <= 0.0) {
      throw DomainError("degenerate prior: zero activation with q0 = 0");
    }
    return -std::log(prior.q0);
  }
  return -std::log(alpha) + kl_relu_constant(prior);
}

// Per-unit KL cost of a softplus unit under the log-normal prior:
// KL(N(log f, alpha^2) || N(mu, sigma^2)).
inline double kl_softplus_unit(double alpha, double f_val,
                               const PriorSpec& prior) {
  if (prior.kind != PriorKind::kLogNormal) {
    throw ConfigError("kl_softplus_unit requires a log-normal prior");
  }
  if (alpha <= 0.0) {
    throw DomainError("kl_softplus_unit: alpha must be positive");
  }
  if (f_val <= 0.0) {
    throw DomainError("kl_softplus_unit: f must be positive, got " +
                      std::to_string(f_val));
  }
  const double d = std::log(f_val) - prior.mu;
  return std::log(prior.sigma / alpha) +
         (alpha * alpha + d * d) / (2.0 * prior.sigma * prior.sigma) - 0.5;
}

// alpha(x) = alpha_max * sigmoid(g(x)), elementwise in (0, alpha_max).
inline Tensor alpha_from_logits(const Tensor& g_logits, double alpha_max) {
  return scale(sigmoid(g_logits), alpha_max);
}

// Differentiable per-unit KL tensor. For the log-normal prior, mu and
// log(sigma) enter as shape-[1] nodes so they can be trained; for the
// log-uniform prior the zero branch is a constant with no gradient.
inline Tensor info_dropout_kl(const Tensor& alpha, const Tensor& f,
                              Activation activation, const PriorSpec& prior,
                              const Tensor& prior_mu,
                              const Tensor& prior_log_sigma) {
  if (alpha.shape() != f.shape()) {
    throw ConfigError("info_dropout_kl: alpha shape " +
                      shape_to_string(alpha.shape()) + " != f shape " +
                      shape_to_string(f.shape()));
  }
  if (activation == Activation::kRelu) {
    if (prior.kind != PriorKind::kLogUniform) {
      throw ConfigError("relu activation requires the log-uniform prior");
    }
    const double c = kl_relu_constant(prior);
    std::vector<double> mask(f.numel()), off_branch(f.numel());
    for (std::size_t i = 0; i < f.numel(); ++i) {
      if (std::abs(f.data()[i]) <= kZeroAtomEps) {
        if (prior.q0 <= 0.0) {
          throw DomainError("degenerate prior: zero activation with q0 = 0");
        }
        mask[i] = 0.0;
        off_branch[i] = -std::log(prior.q0);
      } else {
        mask[i] = 1.0;
        off_branch[i] = 0.0;
      }
    }
    Tensor mask_t = Tensor::from_data(f.shape(), std::move(mask));
    Tensor off_t = Tensor::from_data(f.shape(), std::move(off_branch));
    Tensor on_branch = add_const(scale(log_t(alpha), -1.0), c);
    return add(mul(on_branch, mask_t), off_t);
  }
  if (prior.kind != PriorKind::kLogNormal) {
    throw ConfigError("softplus activation requires the log-normal prior");
  }
  // log sigma - log alpha + (alpha^2 + (log f - mu)^2) / (2 sigma^2) - 1/2
  Tensor d = add_scalar(log_t(f), scale(prior_mu, -1.0));
  Tensor quad = add(mul(alpha, alpha), mul(d, d));
  Tensor half_inv_var = scale(exp_t(scale(prior_log_sigma, -2.0)), 0.5);
  Tensor base = add_scalar(scale(log_t(alpha), -1.0), prior_log_sigma);
  return add_const(add(base, mul_scalar(quad, half_inv_var)), -0.5);
}

// Result of one Information Dropout forward: noisy activations, the
// differentiable per-unit KL cost, and the noise scale alpha(x).
struct LayerOutput {
  Tensor z;
  Tensor kl_per_unit;
  Tensor alpha;
};

// z = f * exp(alpha * xi) for the supplied standard-normal xi (the
// reparametrization path: gradients flow through f and alpha, not xi).
inline LayerOutput info_dropout_apply(const Tensor& f, const Tensor& g_logits,
                                      Activation activation,
                                      const PriorSpec& prior, double alpha_max,
                                      const Tensor* noise,
                                      const Tensor& prior_mu,
                                      const Tensor& prior_log_sigma) {
  if (g_logits.shape() != f.shape()) {
    throw ConfigError("info dropout: noise-logit shape " +
                      shape_to_string(g_logits.shape()) +
                      " != f(x) shape " + shape_to_string(f.shape()));
  }
  LayerOutput out;
  out.alpha = alpha_from_logits(g_logits, alpha_max);
  out.z = noise ? mul(f, exp_t(mul(out.alpha, *noise))) : f;
  out.kl_per_unit = info_dropout_kl(out.alpha, f, activation, prior, prior_mu,
                                    prior_log_sigma);
  return out;
}

// The Information Dropout layer: a deterministic branch f(x), a noise-scale
// branch g(x) of the same shape, and a prior that prices the injected noise.
class InfoDropoutLayer {
 public:
  using Branch = std::function<Tensor(const Tensor&)>;

  InfoDropoutLayer(Branch f_branch, Branch alpha_branch, Activation activation,
                   PriorSpec prior, double alpha_max = 0.7)
      : f_branch_(std::move(f_branch)),
        alpha_branch_(std::move(alpha_branch)),
        activation_(activation),
        prior_(prior),
        alpha_max_(alpha_max) {
    PriorSpec::validate(prior_);
    if (prior_.kind == PriorKind::kLogNormal) {
      prior_mu_ = Tensor::scalar(prior_.mu, prior_.trainable);
      prior_log_sigma_ = Tensor::scalar(std::log(prior_.sigma), prior_.trainable);
    }
  }

  Tensor alpha_forward(const Tensor& x) const {
    const Tensor f = f_branch_(x);
    const Tensor g = alpha_branch_(x);
    if (g.shape() != f.shape()) {
      throw ConfigError("info dropout: noise-logit shape " +
                        shape_to_string(g.shape()) + " != f(x) shape " +
                        shape_to_string(f.shape()));
    }
    return alpha_from_logits(g, alpha_max_);
  }

  LayerOutput forward(const Tensor& x, NoiseMode mode, Rng& rng) const {
    const Tensor f = f_branch_(x);
    const Tensor g = alpha_branch_(x);
    if (mode == NoiseMode::kDeterministic) {
      return info_dropout_apply(f, g, activation_, prior_, alpha_max_, nullptr,
                                prior_mu_, prior_log_sigma_);
    }
    Tensor xi = sample_standard_normal(f.shape(), rng);
    return info_dropout_apply(f, g, activation_, prior_, alpha_max_, &xi,
                              prior_mu_, prior_log_sigma_);
  }

  // Common-random-numbers forward: the caller supplies xi.
  LayerOutput forward_with_noise(const Tensor& x, const Tensor& noise) const {
    const Tensor f = f_branch_(x);
    const Tensor g = alpha_branch_(x);
    return info_dropout_apply(f, g, activation_, prior_, alpha_max_, &noise,
                              prior_mu_, prior_log_sigma_);
  }

  const PriorSpec& prior() const { return prior_; }
  double alpha_max() const { return alpha_max_; }
  Activation activation() const { return activation_; }
  Tensor prior_mu() const { return prior_mu_; }
  Tensor prior_log_sigma() const { return prior_log_sigma_; }

 private:
  Branch f_branch_;
  Branch alpha_branch_;
  Activation activation_;
  PriorSpec prior_;
  double alpha_max_;
  Tensor prior_mu_;
  Tensor prior_log_sigma_;
};

// Reduces a layer's per-unit KL to the loss scalar (sum over units, mean over
// the batch). For convolutional outputs also returns the spatial map: sum
// over channels, mean over the batch, at each location.
struct LayerKl {
  Tensor scalar;
  Tensor spatial_map;  // defined only for [b,c,h,w] inputs
};

inline LayerKl layer_kl(const LayerOutput& out) {
  const Tensor& kl = out.kl_per_unit;
  if (kl.rank() < 1) throw ContractError("layer_kl: kl_per_unit not populated");
  const std::size_t b = kl.dim(0);
  LayerKl result;
  result.scalar = scale(sum_all(kl), 1.0 / static_cast<double>(b));
  if (kl.rank() == 4) {
    const std::size_t c = kl.dim(1), h = kl.dim(2), w = kl.dim(3);
    std::vector<double> map(h * w, 0.0);
    const auto& kd = kl.data();
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = kd.data() + ((i * c + ch) * h * w);
        for (std::size_t p = 0; p < h * w; ++p) map[p] += src[p];
      }
    }
    for (double& v : map) v /= static_cast<double>(b);
    result.spatial_map = Tensor::from_data({h, w}, std::move(map));
  }
  return result;
}

}  // namespace infodrop
