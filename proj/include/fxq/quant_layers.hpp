#pragma once

// Quantizers used inside the network. All of them run "fake quantized": the
// forward pass produces reals restricted to the quantizer's value set, and the
// backward pass is a straight-through estimator gated by the clamp derivative.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>

#include "fxq/autograd.hpp"
#include "fxq/errors.hpp"
#include "fxq/fixedpoint.hpp"
#include "fxq/tensor.hpp"

namespace fxq {

enum class QuantMethod : std::uint8_t { none = 0, fixed = 1, binary = 2, ternary = 3 };

inline std::string to_string(QuantMethod m) {
  switch (m) {
    case QuantMethod::none: return "none";
    case QuantMethod::fixed: return "fixed";
    case QuantMethod::binary: return "binary";
    case QuantMethod::ternary: return "ternary";
  }
  return "?";
}

inline QuantMethod parse_quant_method(const std::string& s) {
  if (s == "none" || s == "fp" || s == "full") return QuantMethod::none;
  if (s == "fixed") return QuantMethod::fixed;
  if (s == "binary" || s == "bnn") return QuantMethod::binary;
  if (s == "ternary") return QuantMethod::ternary;
  throw ParseError("unknown quantization method '" + s + "'");
}

struct QuantConfig {
  QuantMethod method = QuantMethod::none;
  QFormat weight_format{0, 4, true};
  QFormat act_format{6, 0, false};
  bool first_layer_full_precision = true;
  bool last_layer_full_precision = true;
  // Extend the first-layer exemption to both convs of the first block.
  bool first_block_full_precision = false;
  double dropout_p = 0.0;

  void validate() const {
    if (method == QuantMethod::fixed) {
      weight_format.validate();
      act_format.validate();
      if (!weight_format.is_signed) throw ContractError("weight format must be signed");
      if (act_format.is_signed) throw ContractError("activation format must be unsigned");
    }
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ContractError("dropout_p must lie in [0, 1)");
  }
};

// --- straight-through gates -------------------------------------------------

/// Gate for activation gradients: the clamp derivative on the integer field.
/// Formats without integer bits saturate at 1, so the open interval (0, 1) passes.
inline int activation_ste_mask(double x, const QFormat& q) {
  if (q.ibits > 0) return clamp_gradient_mask(x, q.ibits);
  return (x > 0.0 && x < 1.0) ? 1 : 0;
}

/// Gate for weight gradients: the clamp derivative on the fractional part of |w|.
inline int weight_ste_mask(double w, const QFormat& q) {
  if (q.fbits == 0) return clamp_gradient_mask(std::fabs(w), q.ibits);
  return clamp_gradient_mask(split(w).fraction, q.fbits);
}

// --- tensor-level quantizers -----------------------------------------------

// Same result as to_fixed_point: with x * 2^f exact, the split integer and
// fraction codes add up to round(|x| * 2^f), and saturation is one min().
template <typename T>
Tensor<T> fixed_point_tensor(const Tensor<T>& x, const QFormat& q) {
  Tensor<T> out(x.shape());
  const double scale = std::ldexp(1.0, q.fbits);
  const double inv = std::ldexp(1.0, -q.fbits);
  const double max_code = static_cast<double>(q.max_code());
  const bool is_signed = q.is_signed;
  const T* in = x.raw();
  T* o = out.raw();
  // a > 0 is false for zero, NaN, and negatives of an unsigned format.
  auto kernel = [&](auto magnitude) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = static_cast<double>(in[i]);
      const double a = magnitude(v);
      double m = std::min(std::floor(a * scale + 0.5), max_code);
      m = a > 0.0 ? m : 0.0;
      o[i] = static_cast<T>((v < 0.0 ? 0.0 - m : m) * inv);
    }
  };
  if (is_signed) {
    kernel([](double v) { return std::fabs(v); });
  } else {
    kernel([](double v) { return v; });
  }
  return out;
}

template <typename T>
Tensor<T> binarize_tensor(const Tensor<T>& w) {
  Tensor<T> out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] >= T(0) ? T(1) : T(-1);
  return out;
}

template <typename T>
struct TernaryWeights {
  Tensor<T> values;
  T threshold = 0;
  T scale = 0;
};

/// Threshold 0.7 * mean|w|; scale = mean of |w| above the threshold.
template <typename T>
TernaryWeights<T> ternarize_tensor(const Tensor<T>& w) {
  TernaryWeights<T> r{Tensor<T>(w.shape())};
  if (w.empty()) return r;
  double abs_sum = 0.0;
  for (T v : w.data()) abs_sum += std::fabs(v);
  const double delta = 0.7 * abs_sum / static_cast<double>(w.size());
  double big_sum = 0.0;
  std::size_t big = 0;
  for (T v : w.data()) {
    if (std::fabs(v) > delta) {
      big_sum += std::fabs(v);
      ++big;
    }
  }
  r.threshold = static_cast<T>(delta);
  if (big == 0) return r;  // all-zero tensor
  r.scale = static_cast<T>(big_sum / static_cast<double>(big));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double a = std::fabs(w[i]);
    r.values[i] = a > delta ? (w[i] > T(0) ? r.scale : -r.scale) : T(0);
  }
  return r;
}

// --- differentiable quantizers ---------------------------------------------

/// Unsigned fixed-point activation quantizer (doubles as the ReLU).
template <typename T>
Var<T> quant_activation(const Var<T>& x, const QFormat& q) {
  Tensor<T> out = fixed_point_tensor(x.value(), q);
  return Var<T>::from_op(std::move(out), {x}, [q](Node<T>& self) {
    Tensor<T>* gx = input_grad(self, 0);
    const auto& xin = self.parents[0]->value;
    const T hi = q.ibits > 0 ? static_cast<T>(std::ldexp(1.0, q.ibits) - 1.0) : T(1);
    for (std::size_t i = 0; i < xin.size(); ++i) {
      if (xin[i] > T(0) && xin[i] < hi) (*gx)[i] += self.grad[i];
    }
  });
}

/// Signed fixed-point weight quantizer over full-precision shadow weights.
template <typename T>
Var<T> quant_weights(const Var<T>& w, const QFormat& q) {
  Tensor<T> out = fixed_point_tensor(w.value(), q);
  return Var<T>::from_op(std::move(out), {w}, [q](Node<T>& self) {
    Tensor<T>* gw = input_grad(self, 0);
    const auto& win = self.parents[0]->value;
    for (std::size_t i = 0; i < win.size(); ++i) {
      if (weight_ste_mask(static_cast<double>(win[i]), q)) (*gw)[i] += self.grad[i];
    }
  });
}

/// sign(w) with sign(0) = +1; gradient passes where |w| <= 1.
template <typename T>
Var<T> binarize(const Var<T>& w) {
  return Var<T>::from_op(binarize_tensor(w.value()), {w}, [](Node<T>& self) {
    Tensor<T>* gw = input_grad(self, 0);
    const auto& win = self.parents[0]->value;
    for (std::size_t i = 0; i < win.size(); ++i) {
      if (std::fabs(win[i]) <= T(1)) (*gw)[i] += self.grad[i];
    }
  });
}

/// Ternary weights {-s, 0, +s}; identity straight-through gradient.
template <typename T>
Var<T> ternarize(const Var<T>& w) {
  return Var<T>::from_op(ternarize_tensor(w.value()).values, {w}, [](Node<T>& self) {
    Tensor<T>* gw = input_grad(self, 0);
    for (std::size_t i = 0; i < gw->size(); ++i) (*gw)[i] += self.grad[i];
  });
}

/// tanh(x) snapped to {-1, 0, +1} at |tanh(x)| = 0.5; backward uses tanh'.
template <typename T>
Var<T> ternary_tanh(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T t = std::tanh(x.value()[i]);
    out[i] = t > T(0.5) ? T(1) : (t < T(-0.5) ? T(-1) : T(0));
  }
  return Var<T>::from_op(std::move(out), {x}, [](Node<T>& self) {
    Tensor<T>* gx = input_grad(self, 0);
    const auto& xin = self.parents[0]->value;
    for (std::size_t i = 0; i < xin.size(); ++i) {
      const T t = std::tanh(xin[i]);
      (*gx)[i] += (T(1) - t * t) * self.grad[i];
    }
  });
}

// --- batchnorm folding -----------------------------------------------------

template <typename T>
struct FoldedConv {
  Tensor<T> weight;
  Tensor<T> bias;
};

/// Per-output-channel factor gamma / sqrt(var + eps).
template <typename T>
Tensor<T> batchnorm_scale(const Tensor<T>& gamma, const Tensor<T>& var, double eps) {
  Tensor<T> s(gamma.shape());
  for (std::size_t c = 0; c < gamma.size(); ++c) {
    const double v = static_cast<double>(var[c]) + eps;
    if (v <= 0.0) throw DomainError("fold_batchnorm: var + eps <= 0 on channel " + std::to_string(c));
    s[c] = static_cast<T>(static_cast<double>(gamma[c]) / std::sqrt(v));
  }
  return s;
}

/// Folds eval-mode batchnorm into the preceding convolution:
///   w'_c = w_c * s_c,  b'_c = (b_c - mean_c) * s_c + beta_c,  s_c = gamma_c / sqrt(var_c + eps).
template <typename T>
FoldedConv<T> fold_batchnorm(const Tensor<T>& w, const Tensor<T>& b, const Tensor<T>& gamma, const Tensor<T>& beta,
                             const Tensor<T>& mean, const Tensor<T>& var, double eps) {
  const std::size_t cout = w.shape().at(0);
  for (const Tensor<T>* t : {&b, &gamma, &beta, &mean, &var}) {
    if (t->size() != cout) {
      throw ShapeError("fold_batchnorm: per-channel tensor " + shape_string(t->shape()) +
                       " does not match weight " + shape_string(w.shape()));
    }
  }
  const Tensor<T> s = batchnorm_scale(gamma, var, eps);
  FoldedConv<T> r{Tensor<T>(w.shape()), Tensor<T>(b.shape())};
  const std::size_t per = w.size() / cout;
  for (std::size_t c = 0; c < cout; ++c) {
    for (std::size_t j = 0; j < per; ++j) r.weight[c * per + j] = w[c * per + j] * s[c];
    r.bias[c] = (b[c] - mean[c]) * s[c] + beta[c];
  }
  return r;
}

}  // namespace fxq
