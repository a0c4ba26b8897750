#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "infodrop/error.hpp"
#include "infodrop/rng.hpp"
#include "infodrop/tensor.hpp"

namespace infodrop {

enum class Padding { kValid, kSame };

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

inline Tensor make_node(const char* op, Shape shape, std::vector<double> data,
                        const std::vector<Tensor>& inputs,
                        std::function<void(const TensorNode&)> backward_fn) {
  check_finite(op, data);
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (GradMode::enabled()) {
    bool needs_grad = false;
    for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
    if (needs_grad) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const Tensor& t : inputs) node->parents.push_back(t.node_ptr());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

// C[m,n] += A[m,k] * B[k,n]. Each output row is accumulated serially by one
// thread, so results are bitwise identical for any thread count.
inline void gemm_nn(const double* a, const double* b, double* c,
                    std::int64_t m, std::int64_t k, std::int64_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > (1 << 14))
  for (std::int64_t i = 0; i < m; ++i) {
    const double* a_row = a + i * k;
    double* c_row = c + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = a_row[kk];
      const double* b_row = b + kk * n;
      for (std::int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T (rows of B dotted with rows of A).
inline void gemm_nt(const double* a, const double* b, double* c,
                    std::int64_t m, std::int64_t k, std::int64_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > (1 << 14))
  for (std::int64_t i = 0; i < m; ++i) {
    const double* a_row = a + i * k;
    double* c_row = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* b_row = b + j * k;
      double acc = 0.0;
      for (std::int64_t kk = 0; kk < k; ++kk) acc += a_row[kk] * b_row[kk];
      c_row[j] += acc;
    }
  }
}

// C[m,n] += A[p,m]^T * B[p,n].
inline void gemm_tn(const double* a, const double* b, double* c,
                    std::int64_t p, std::int64_t m, std::int64_t n) {
#pragma omp parallel for schedule(static) if (m * p * n > (1 << 14))
  for (std::int64_t i = 0; i < m; ++i) {
    double* c_row = c + i * n;
    for (std::int64_t pp = 0; pp < p; ++pp) {
      const double av = a[pp * m + i];
      const double* b_row = b + pp * n;
      for (std::int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
  }
}

inline void require_same_shape(const char* op, const Tensor& a,
                               const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

template <class F, class DF>
inline Tensor unary_op(const char* name, const Tensor& x, F&& f, DF&& df) {
  const auto& xd = x.data();
  std::vector<double> y(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) y[i] = f(xd[i]);
  auto xn = x.node_ptr();
  return make_node(name, x.shape(), std::move(y), {x},
                   [xn, df](const TensorNode& self) {
                     if (!xn->requires_grad) return;
                     for (std::size_t i = 0; i < self.data.size(); ++i) {
                       xn->grad[i] += self.grad[i] * df(xn->data[i], self.data[i]);
                     }
                   });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pointwise ops
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double softplus_value(double t) {
  // Stable form: t + log1p(exp(-t)) for t > 0, log1p(exp(t)) otherwise.
  return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

inline double sigmoid_value(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary_op(
      "softplus", x, [](double v) { return softplus_value(v); },
      [](double v, double) { return sigmoid_value(v); });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      "sigmoid", x, [](double v) { return sigmoid_value(v); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp_t(const Tensor& x) {
  return detail::unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

inline Tensor log_t(const Tensor& x) {
  for (double v : x.data()) {
    if (v <= 0.0) {
      throw DomainError("log: non-positive entry " + std::to_string(v));
    }
  }
  return detail::unary_op(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

// y = c * x (the one permitted scalar broadcast).
inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_op(
      "scale", x, [c](double v) { return c * v; },
      [c](double, double) { return c; });
}

inline Tensor add_const(const Tensor& x, double c) {
  return detail::unary_op(
      "add_const", x, [c](double v) { return v + c; },
      [](double, double) { return 1.0; });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  const auto& ad = a.data();
  const auto& bd = b.data();
  std::vector<double> y(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) y[i] = ad[i] + bd[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_node("add", a.shape(), std::move(y), {a, b},
                           [an, bn](const TensorNode& self) {
                             for (std::size_t i = 0; i < self.data.size(); ++i) {
                               if (an->requires_grad) an->grad[i] += self.grad[i];
                               if (bn->requires_grad) bn->grad[i] += self.grad[i];
                             }
                           });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  const auto& ad = a.data();
  const auto& bd = b.data();
  std::vector<double> y(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) y[i] = ad[i] - bd[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_node("sub", a.shape(), std::move(y), {a, b},
                           [an, bn](const TensorNode& self) {
                             for (std::size_t i = 0; i < self.data.size(); ++i) {
                               if (an->requires_grad) an->grad[i] += self.grad[i];
                               if (bn->requires_grad) bn->grad[i] -= self.grad[i];
                             }
                           });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  const auto& ad = a.data();
  const auto& bd = b.data();
  std::vector<double> y(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) y[i] = ad[i] * bd[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_node(
      "mul", a.shape(), std::move(y), {a, b},
      [an, bn](const TensorNode& self) {
        for (std::size_t i = 0; i < self.data.size(); ++i) {
          if (an->requires_grad) an->grad[i] += self.grad[i] * bn->data[i];
          if (bn->requires_grad) bn->grad[i] += self.grad[i] * an->data[i];
        }
      });
}

// x + s and x * s with s a trainable scalar node of shape [1]. These are the
// explicit scalar-broadcast ops; general broadcasting stays unsupported.
inline Tensor add_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw ContractError("add_scalar: scalar operand must have one element");
  }
  const double sv = s.data()[0];
  const auto& xd = x.data();
  std::vector<double> y(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) y[i] = xd[i] + sv;
  auto xn = x.node_ptr();
  auto sn = s.node_ptr();
  return detail::make_node("add_scalar", x.shape(), std::move(y), {x, s},
                           [xn, sn](const TensorNode& self) {
                             double acc = 0.0;
                             for (std::size_t i = 0; i < self.data.size(); ++i) {
                               if (xn->requires_grad) xn->grad[i] += self.grad[i];
                               acc += self.grad[i];
                             }
                             if (sn->requires_grad) sn->grad[0] += acc;
                           });
}

inline Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw ContractError("mul_scalar: scalar operand must have one element");
  }
  const double sv = s.data()[0];
  const auto& xd = x.data();
  std::vector<double> y(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) y[i] = xd[i] * sv;
  auto xn = x.node_ptr();
  auto sn = s.node_ptr();
  return detail::make_node(
      "mul_scalar", x.shape(), std::move(y), {x, s},
      [xn, sn, sv](const TensorNode& self) {
        double acc = 0.0;
        for (std::size_t i = 0; i < self.data.size(); ++i) {
          if (xn->requires_grad) xn->grad[i] += self.grad[i] * sv;
          acc += self.grad[i] * xn->data[i];
        }
        if (sn->requires_grad) sn->grad[0] += acc;
      });
}

// ---------------------------------------------------------------------------
// Shape and reduction ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) +
                         " as " + shape_to_string(new_shape));
  }
  auto xn = x.node_ptr();
  return detail::make_node("reshape", std::move(new_shape),
                           std::vector<double>(x.data()), {x},
                           [xn](const TensorNode& self) {
                             if (!xn->requires_grad) return;
                             for (std::size_t i = 0; i < self.data.size(); ++i) {
                               xn->grad[i] += self.grad[i];
                             }
                           });
}

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xn = x.node_ptr();
  return detail::make_node("sum_all", {1}, {acc}, {x},
                           [xn](const TensorNode& self) {
                             if (!xn->requires_grad) return;
                             const double g = self.grad[0];
                             for (double& gv : xn->grad) gv += g;
                           });
}

// [b,c,h,w] -> [b,c], mean over the spatial dimensions.
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) {
    throw DimensionError("global_avg_pool expects [b,c,h,w], got " +
                         shape_to_string(x.shape()));
  }
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> y(b * c, 0.0);
  const auto& xd = x.data();
  for (std::size_t i = 0; i < b * c; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < hw; ++p) acc += xd[i * hw + p];
    y[i] = acc / static_cast<double>(hw);
  }
  auto xn = x.node_ptr();
  return detail::make_node(
      "global_avg_pool", {b, c}, std::move(y), {x},
      [xn, b, c, hw](const TensorNode& self) {
        if (!xn->requires_grad) return;
        const double inv = 1.0 / static_cast<double>(hw);
        for (std::size_t i = 0; i < b * c; ++i) {
          const double g = self.grad[i] * inv;
          for (std::size_t p = 0; p < hw; ++p) xn->grad[i * hw + p] += g;
        }
      });
}

// ---------------------------------------------------------------------------
// Bias ops (explicit, no implicit broadcasting)
// ---------------------------------------------------------------------------

inline Tensor bias_add_rows(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw DimensionError("bias_add_rows: need [m,n] and [n], got " +
                         shape_to_string(x.shape()) + " and " +
                         shape_to_string(bias.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto& xd = x.data();
  const auto& bd = bias.data();
  std::vector<double> y(xd.size());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = xd[i * n + j] + bd[j];
  }
  auto xn = x.node_ptr();
  auto bn = bias.node_ptr();
  return detail::make_node("bias_add_rows", x.shape(), std::move(y), {x, bias},
                           [xn, bn, m, n](const TensorNode& self) {
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t j = 0; j < n; ++j) {
                                 const double g = self.grad[i * n + j];
                                 if (xn->requires_grad) xn->grad[i * n + j] += g;
                                 if (bn->requires_grad) bn->grad[j] += g;
                               }
                             }
                           });
}

inline Tensor bias_add_channels(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw DimensionError("bias_add_channels: need [b,c,h,w] and [c], got " +
                         shape_to_string(x.shape()) + " and " +
                         shape_to_string(bias.shape()));
  }
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto& xd = x.data();
  const auto& bd = bias.data();
  std::vector<double> y(xd.size());
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double bv = bd[ch];
      const std::size_t base = (i * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) y[base + p] = xd[base + p] + bv;
    }
  }
  auto xn = x.node_ptr();
  auto bn = bias.node_ptr();
  return detail::make_node(
      "bias_add_channels", x.shape(), std::move(y), {x, bias},
      [xn, bn, b, c, hw](const TensorNode& self) {
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * hw;
            double acc = 0.0;
            for (std::size_t p = 0; p < hw; ++p) {
              const double g = self.grad[base + p];
              if (xn->requires_grad) xn->grad[base + p] += g;
              acc += g;
            }
            if (bn->requires_grad) bn->grad[ch] += acc;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " +
                         shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> y(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), y.data(),
                  static_cast<std::int64_t>(m), static_cast<std::int64_t>(k),
                  static_cast<std::int64_t>(n));
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_node(
      "matmul", {m, n}, std::move(y), {a, b},
      [an, bn, m, k, n](const TensorNode& self) {
        if (an->requires_grad) {
          // dA = dY * B^T
          detail::gemm_nt(self.grad.data(), bn->data.data(), an->grad.data(),
                          static_cast<std::int64_t>(m),
                          static_cast<std::int64_t>(n),
                          static_cast<std::int64_t>(k));
        }
        if (bn->requires_grad) {
          // dB = A^T * dY
          detail::gemm_tn(an->data.data(), self.grad.data(), bn->grad.data(),
                          static_cast<std::int64_t>(m),
                          static_cast<std::int64_t>(k),
                          static_cast<std::int64_t>(n));
        }
      });
}

// ---------------------------------------------------------------------------
// 2-d convolution (cross-correlation convention)
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeometry {
  std::size_t batch, c_in, h, w;
  std::size_t c_out, kh, kw;
  std::size_t stride;
  std::size_t pad_top, pad_left, hp, wp;  // padded input dims
  std::size_t oh, ow;
};

inline ConvGeometry conv_geometry(const Tensor& x, const Tensor& kernel,
                                  std::size_t stride, Padding padding) {
  if (x.rank() != 4 || kernel.rank() != 4) {
    throw DimensionError("conv2d: need [b,c_in,h,w] input and "
                         "[c_out,c_in,kh,kw] kernel, got " +
                         shape_to_string(x.shape()) + " and " +
                         shape_to_string(kernel.shape()));
  }
  if (x.dim(1) != kernel.dim(1)) {
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(1)) +
                         " != kernel channels " + std::to_string(kernel.dim(1)));
  }
  if (stride < 1) throw DomainError("conv2d: stride must be >= 1");
  ConvGeometry g;
  g.batch = x.dim(0);
  g.c_in = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.c_out = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  auto pad_amount = [&](std::size_t in, std::size_t k) -> std::size_t {
    if (padding == Padding::kValid) return 0;
    const std::size_t out = (in + stride - 1) / stride;
    const std::size_t wanted = (out - 1) * stride + k;
    return wanted > in ? wanted - in : 0;
  };
  const std::size_t pad_h = pad_amount(g.h, g.kh);
  const std::size_t pad_w = pad_amount(g.w, g.kw);
  g.pad_top = pad_h / 2;
  g.pad_left = pad_w / 2;
  g.hp = g.h + pad_h;
  g.wp = g.w + pad_w;
  if (g.kh > g.hp || g.kw > g.wp) {
    throw DimensionError("conv2d: kernel " + std::to_string(g.kh) + "x" +
                         std::to_string(g.kw) + " larger than padded input " +
                         std::to_string(g.hp) + "x" + std::to_string(g.wp));
  }
  g.oh = (g.hp - g.kh) / stride + 1;
  g.ow = (g.wp - g.kw) / stride + 1;
  return g;
}

inline void pad_image(const double* src, double* dst, const ConvGeometry& g) {
  std::fill(dst, dst + g.c_in * g.hp * g.wp, 0.0);
  for (std::size_t c = 0; c < g.c_in; ++c) {
    for (std::size_t r = 0; r < g.h; ++r) {
      const double* s = src + (c * g.h + r) * g.w;
      double* d = dst + (c * g.hp + r + g.pad_top) * g.wp + g.pad_left;
      std::copy(s, s + g.w, d);
    }
  }
}

// col[(oy*ow+ox), (c*kh+ki)*kw+kj] = padded[c, oy*stride+ki, ox*stride+kj]
inline void im2col(const double* padded, double* col, const ConvGeometry& g) {
  const std::size_t ckk = g.c_in * g.kh * g.kw;
  for (std::size_t oy = 0; oy < g.oh; ++oy) {
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      double* row = col + (oy * g.ow + ox) * ckk;
      for (std::size_t c = 0; c < g.c_in; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
          const double* src =
              padded + (c * g.hp + oy * g.stride + ki) * g.wp + ox * g.stride;
          for (std::size_t kj = 0; kj < g.kw; ++kj) *row++ = src[kj];
        }
      }
    }
  }
}

inline void col2im_add(const double* col, double* padded,
                       const ConvGeometry& g) {
  const std::size_t ckk = g.c_in * g.kh * g.kw;
  for (std::size_t oy = 0; oy < g.oh; ++oy) {
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      const double* row = col + (oy * g.ow + ox) * ckk;
      for (std::size_t c = 0; c < g.c_in; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
          double* dst =
              padded + (c * g.hp + oy * g.stride + ki) * g.wp + ox * g.stride;
          for (std::size_t kj = 0; kj < g.kw; ++kj) dst[kj] += *row++;
        }
      }
    }
  }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride,
                     Padding padding) {
  const detail::ConvGeometry g = detail::conv_geometry(x, kernel, stride, padding);
  const std::size_t ckk = g.c_in * g.kh * g.kw;
  const std::size_t ohow = g.oh * g.ow;
  std::vector<double> y(g.batch * g.c_out * ohow, 0.0);
  {
    std::vector<double> padded(g.c_in * g.hp * g.wp);
    std::vector<double> col(ohow * ckk);
    for (std::size_t i = 0; i < g.batch; ++i) {
      detail::pad_image(x.data().data() + i * g.c_in * g.h * g.w, padded.data(), g);
      detail::im2col(padded.data(), col.data(), g);
      // out[c_out, ohow] = kernel[c_out, ckk] . col[ohow, ckk]^T
      detail::gemm_nt(kernel.data().data(), col.data(),
                      y.data() + i * g.c_out * ohow,
                      static_cast<std::int64_t>(g.c_out),
                      static_cast<std::int64_t>(ckk),
                      static_cast<std::int64_t>(ohow));
    }
  }
  auto xn = x.node_ptr();
  auto kn = kernel.node_ptr();
  return detail::make_node(
      "conv2d", {g.batch, g.c_out, g.oh, g.ow}, std::move(y), {x, kernel},
      [xn, kn, g, ckk, ohow](const TensorNode& self) {
        std::vector<double> padded(g.c_in * g.hp * g.wp);
        std::vector<double> col(ohow * ckk);
        std::vector<double> dpadded;
        if (xn->requires_grad) dpadded.resize(g.c_in * g.hp * g.wp);
        for (std::size_t i = 0; i < g.batch; ++i) {
          const double* dout = self.grad.data() + i * g.c_out * ohow;
          if (kn->requires_grad) {
            detail::pad_image(xn->data.data() + i * g.c_in * g.h * g.w,
                              padded.data(), g);
            detail::im2col(padded.data(), col.data(), g);
            // dK += dOut[c_out, ohow] * col[ohow, ckk]
            detail::gemm_nn(dout, col.data(), kn->grad.data(),
                            static_cast<std::int64_t>(g.c_out),
                            static_cast<std::int64_t>(ohow),
                            static_cast<std::int64_t>(ckk));
          }
          if (xn->requires_grad) {
            // dcol[ohow, ckk] = dOut^T[ohow, c_out] * K[c_out, ckk]
            std::fill(col.begin(), col.end(), 0.0);
            detail::gemm_tn(dout, kn->data.data(), col.data(),
                            static_cast<std::int64_t>(g.c_out),
                            static_cast<std::int64_t>(ohow),
                            static_cast<std::int64_t>(ckk));
            std::fill(dpadded.begin(), dpadded.end(), 0.0);
            detail::col2im_add(col.data(), dpadded.data(), g);
            double* dx = xn->grad.data() + i * g.c_in * g.h * g.w;
            for (std::size_t c = 0; c < g.c_in; ++c) {
              for (std::size_t r = 0; r < g.h; ++r) {
                const double* s =
                    dpadded.data() + (c * g.hp + r + g.pad_top) * g.wp + g.pad_left;
                double* d = dx + (c * g.h + r) * g.w;
                for (std::size_t cc = 0; cc < g.w; ++cc) d[cc] += s[cc];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Normalizes per channel ([b,c,h,w], reducing over b,h,w) or per feature
// ([b,f], reducing over b). The variance floor is max(var, eps): a constant
// channel normalizes to exactly beta_shift and a unit-variance batch stays at
// variance 1 exactly. Train mode updates the running buffers in place with
// new = momentum * old + (1 - momentum) * batch.
inline Tensor batchnorm(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta_shift,
                        std::vector<double>& running_mean,
                        std::vector<double>& running_var, bool train_mode,
                        double momentum = 0.9, double eps = 1e-5) {
  std::size_t b, c, hw;
  if (x.rank() == 4) {
    b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  } else if (x.rank() == 2) {
    b = x.dim(0), c = x.dim(1), hw = 1;
  } else {
    throw DimensionError("batchnorm expects [b,c,h,w] or [b,f], got " +
                         shape_to_string(x.shape()));
  }
  if (gamma.numel() != c || beta_shift.numel() != c) {
    throw DimensionError("batchnorm: gamma/beta size must equal channel count " +
                         std::to_string(c));
  }
  if (running_mean.size() != c || running_var.size() != c) {
    throw DimensionError("batchnorm: running-stat buffers must have size " +
                         std::to_string(c));
  }
  if (train_mode && b < 2) {
    throw DomainError("batchnorm: degenerate batch, train mode needs batch >= 2");
  }

  const std::size_t n_red = b * hw;
  const auto& xd = x.data();
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  if (train_mode) {
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = xd.data() + (i * c + ch) * hw;
        double acc = 0.0;
        for (std::size_t p = 0; p < hw; ++p) acc += src[p];
        mean[ch] += acc;
      }
    }
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(n_red);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = xd.data() + (i * c + ch) * hw;
        double acc = 0.0;
        for (std::size_t p = 0; p < hw; ++p) {
          const double d = src[p] - mean[ch];
          acc += d * d;
        }
        var[ch] += acc;
      }
    }
    for (std::size_t ch = 0; ch < c; ++ch) var[ch] /= static_cast<double>(n_red);
    for (std::size_t ch = 0; ch < c; ++ch) {
      running_mean[ch] = momentum * running_mean[ch] + (1.0 - momentum) * mean[ch];
      running_var[ch] = momentum * running_var[ch] + (1.0 - momentum) * var[ch];
    }
  } else {
    mean = running_mean;
    var = running_var;
  }

  std::vector<double> inv_std(c);
  std::vector<char> floored(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double v = std::max(var[ch], eps);
    floored[ch] = var[ch] <= eps;
    inv_std[ch] = 1.0 / std::sqrt(v);
  }

  std::vector<double> xhat(xd.size());
  std::vector<double> y(xd.size());
  const auto& gd = gamma.data();
  const auto& bd = beta_shift.data();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * hw;
      const double m = mean[ch], is = inv_std[ch], ga = gd[ch], be = bd[ch];
      for (std::size_t p = 0; p < hw; ++p) {
        const double xh = (xd[base + p] - m) * is;
        xhat[base + p] = xh;
        y[base + p] = ga * xh + be;
      }
    }
  }

  auto xn = x.node_ptr();
  auto gn = gamma.node_ptr();
  auto bn = beta_shift.node_ptr();
  return detail::make_node(
      "batchnorm", x.shape(), std::move(y), {x, gamma, beta_shift},
      [xn, gn, bn, b, c, hw, n_red, train_mode,
       xhat = std::move(xhat), inv_std = std::move(inv_std),
       floored = std::move(floored)](const TensorNode& self) {
        const double inv_n = 1.0 / static_cast<double>(n_red);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double ga = gn->data[ch];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t i = 0; i < b; ++i) {
            const std::size_t base = (i * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) {
              const double g = self.grad[base + p];
              sum_dy += g;
              sum_dy_xhat += g * xhat[base + p];
            }
          }
          if (gn->requires_grad) gn->grad[ch] += sum_dy_xhat;
          if (bn->requires_grad) bn->grad[ch] += sum_dy;
          if (!xn->requires_grad) continue;
          const double is = inv_std[ch];
          if (train_mode && !floored[ch]) {
            const double mg = sum_dy * inv_n;
            const double mgx = sum_dy_xhat * inv_n;
            for (std::size_t i = 0; i < b; ++i) {
              const std::size_t base = (i * c + ch) * hw;
              for (std::size_t p = 0; p < hw; ++p) {
                const double g = self.grad[base + p] * ga;
                xn->grad[base + p] +=
                    is * (g - ga * mg - xhat[base + p] * ga * mgx);
              }
            }
          } else {
            // Eval mode or active variance floor: statistics are constants.
            const double mg = train_mode ? sum_dy * inv_n : 0.0;
            for (std::size_t i = 0; i < b; ++i) {
              const std::size_t base = (i * c + ch) * hw;
              for (std::size_t p = 0; p < hw; ++p) {
                xn->grad[base + p] +=
                    is * ga * (self.grad[base + p] - (train_mode ? mg : 0.0));
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
inline Tensor softmax_cross_entropy(const Tensor& logits,
                                    const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw DimensionError("softmax_cross_entropy expects [b,k] logits, got " +
                         shape_to_string(logits.shape()));
  }
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (labels.size() != b) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch " + std::to_string(b));
  }
  const auto& xd = logits.data();
  std::vector<double> probs(b * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(label) +
                       " out of range [0," + std::to_string(k) + ")");
    }
    const double* row = xd.data() + i * k;
    double m = row[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
    const double lse = m + std::log(z);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - lse);
    loss += lse - row[label];
  }
  loss /= static_cast<double>(b);
  auto xn = logits.node_ptr();
  return detail::make_node(
      "softmax_cross_entropy", {1}, {loss}, {logits},
      [xn, b, k, labels, probs = std::move(probs)](const TensorNode& self) {
        if (!xn->requires_grad) return;
        const double g = self.grad[0] / static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            double d = probs[i * k + j];
            if (j == static_cast<std::size_t>(labels[i])) d -= 1.0;
            xn->grad[i * k + j] += g * d;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Sampling (constant nodes; gradients do not flow into noise)
// ---------------------------------------------------------------------------

inline Tensor sample_standard_normal(Shape shape, Rng& rng) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = rng.normal();
  return Tensor::from_data(std::move(shape), std::move(data));
}

// Mask with entries 1/keep_prob (kept) or 0 (dropped); mean 1.
inline Tensor sample_dropout_mask(Shape shape, double keep_prob, Rng& rng) {
  if (keep_prob <= 0.0 || keep_prob > 1.0) {
    throw DomainError("dropout keep probability must be in (0,1]");
  }
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  const double inv = 1.0 / keep_prob;
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = rng.uniform() < keep_prob ? inv : 0.0;
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace infodrop
