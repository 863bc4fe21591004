#pragma once

// Differentiable layer primitives for the segmentation network.

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "fxq/autograd.hpp"
#include "fxq/errors.hpp"
#include "fxq/tensor.hpp"

namespace fxq {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

inline void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + " expects an N,C,H,W tensor, got " + shape_string(s));
}

// Unfolds one image [C,H,W] into columns [C*k*k, Ho*Wo] (stride 1, zero padding).
// Writes only the in-image entries; padding slots in `col` must already be zero.
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
            std::size_t pad, T* col) {
  const std::size_t ho = height + 2 * pad - k + 1;
  const std::size_t wo = width + 2 * pad - k + 1;
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        T* row = col + ((c * k + kh) * k + kw) * ho * wo;
        const auto dx = static_cast<std::ptrdiff_t>(kw) - ipad;
        const std::size_t ow_lo = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
        const auto ow_hi = static_cast<std::size_t>(std::max<std::ptrdiff_t>(
            0, std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(wo), static_cast<std::ptrdiff_t>(width) - dx)));
        for (std::size_t oh = 0; oh < ho; ++oh) {
          T* dst = row + oh * wo;
          const auto ih = static_cast<std::ptrdiff_t>(oh + kh) - ipad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height) || ow_lo >= ow_hi) continue;
          const T* src = img + (c * height + static_cast<std::size_t>(ih)) * width;
          std::memcpy(dst + ow_lo, src + static_cast<std::ptrdiff_t>(ow_lo) + dx, (ow_hi - ow_lo) * sizeof(T));
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto the image gradient.
template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
                std::size_t pad, T* img) {
  const std::size_t ho = height + 2 * pad - k + 1;
  const std::size_t wo = width + 2 * pad - k + 1;
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        const T* row = col + ((c * k + kh) * k + kw) * ho * wo;
        const auto dx = static_cast<std::ptrdiff_t>(kw) - ipad;
        const std::size_t ow_lo = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
        const auto ow_hi = static_cast<std::size_t>(std::max<std::ptrdiff_t>(
            0, std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(wo), static_cast<std::ptrdiff_t>(width) - dx)));
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh + kh) - ipad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height)) continue;
          const T* src = row + oh * wo;
          T* dst = img + (c * height + static_cast<std::size_t>(ih)) * width;
          for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) dst[static_cast<std::ptrdiff_t>(ow) + dx] += src[ow];
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation, stride 1, square odd kernel, zero padding.
/// input [N,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout] (may be undefined).
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, std::size_t padding) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  detail::require_rank4(xs, "conv2d");
  if (ws.size() != 4 || ws[2] != ws[3]) {
    throw ShapeError("conv2d weight must be [Cout,Cin,k,k], got " + shape_string(ws));
  }
  if (ws[1] != xs[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_string(xs) + " vs weight " + shape_string(ws));
  }
  const std::size_t k = ws[2];
  if (k % 2 == 0) throw ShapeError("conv2d kernel size must be odd, got " + std::to_string(k));
  if (xs[2] + 2 * padding < k || xs[3] + 2 * padding < k) throw ShapeError("conv2d input smaller than kernel");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.value().size() != ws[0])) {
    throw ShapeError("conv2d bias " + shape_string(bias.shape()) + " does not match weight " + shape_string(ws));
  }

  const std::size_t n = xs[0], cin = xs[1], h = xs[2], w = xs[3], cout = ws[0];
  const std::size_t ho = h + 2 * padding - k + 1, wo = w + 2 * padding - k + 1;
  const std::size_t kdim = cin * k * k, spatial = ho * wo;

  Tensor<T> out({n, cout, ho, wo});
  AlignedVector<T> col(kdim * spatial);
  detail::ConstMapMat<T> wmat(weight.value().raw(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kdim));
  for (std::size_t b = 0; b < n; ++b) {
    detail::im2col(input.value().raw() + b * cin * h * w, cin, h, w, k, padding, col.data());
    detail::ConstMapMat<T> cmat(col.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(spatial));
    detail::MapMat<T> omat(out.raw() + b * cout * spatial, static_cast<Eigen::Index>(cout),
                           static_cast<Eigen::Index>(spatial));
    omat.noalias() = wmat * cmat;
    if (has_bias) {
      for (std::size_t c = 0; c < cout; ++c) omat.row(static_cast<Eigen::Index>(c)).array() += bias.value()[c];
    }
  }

  std::vector<Var<T>> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return Var<T>::from_op(std::move(out), std::move(inputs), [=](Node<T>& self) {
    const auto& x = self.parents[0]->value;
    const auto& wt = self.parents[1]->value;
    Tensor<T>* gx = input_grad(self, 0);
    Tensor<T>* gw = input_grad(self, 1);
    Tensor<T>* gb = has_bias ? input_grad(self, 2) : nullptr;
    const auto E = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
    detail::ConstMapMat<T> wm(wt.raw(), E(cout), E(kdim));
    AlignedVector<T> cbuf(gw ? kdim * spatial : 0);
    AlignedVector<T> gbuf(gx ? kdim * spatial : 0);
    for (std::size_t b = 0; b < n; ++b) {
      detail::ConstMapMat<T> gout(self.grad.raw() + b * cout * spatial, E(cout), E(spatial));
      if (gb) {
        for (std::size_t c = 0; c < cout; ++c) (*gb)[c] += gout.row(E(c)).sum();
      }
      if (gw) {
        detail::im2col(x.raw() + b * cin * h * w, cin, h, w, k, padding, cbuf.data());
        detail::ConstMapMat<T> cm(cbuf.data(), E(kdim), E(spatial));
        detail::MapMat<T> gwm(gw->raw(), E(cout), E(kdim));
        gwm.noalias() += gout * cm.transpose();
      }
      if (gx) {
        detail::MapMat<T> gcol(gbuf.data(), E(kdim), E(spatial));
        gcol.noalias() = wm.transpose() * gout;
        detail::col2im_add(gbuf.data(), cin, h, w, k, padding, gx->raw() + b * cin * h * w);
      }
    }
  });
}

/// 2x2 non-overlapping max pooling. Ties route the gradient to the first
/// element in row-major order.
template <typename T>
Var<T> maxpool2d(const Var<T>& input) {
  const Shape& s = input.shape();
  detail::require_rank4(s, "maxpool2d");
  if (s[2] % 2 != 0 || s[3] % 2 != 0) {
    throw ShapeError("maxpool2d needs even spatial dims, got " + shape_string(s));
  }
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], ho = h / 2, wo = w / 2;
  Tensor<T> out({s[0], s[1], ho, wo});
  std::vector<std::size_t> argmax(out.size());
  const T* x = input.value().raw();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = p * h * w + (2 * i) * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di) {
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = p * h * w + (2 * i + di) * w + 2 * j + dj;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (p * ho + i) * wo + j;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  return Var<T>::from_op(std::move(out), {input}, [argmax = std::move(argmax)](Node<T>& self) {
    Tensor<T>* gx = input_grad(self, 0);
    for (std::size_t o = 0; o < argmax.size(); ++o) (*gx)[argmax[o]] += self.grad[o];
  });
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample_nearest2x(const Var<T>& input) {
  const Shape& s = input.shape();
  detail::require_rank4(s, "upsample_nearest2x");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  Tensor<T> out({s[0], s[1], 2 * h, 2 * w});
  const T* x = input.value().raw();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < 2 * h; ++i) {
      T* dst = out.raw() + (p * 2 * h + i) * 2 * w;
      const T* src = x + (p * h + i / 2) * w;
      for (std::size_t j = 0; j < 2 * w; ++j) dst[j] = src[j / 2];
    }
  }
  return Var<T>::from_op(std::move(out), {input}, [=](Node<T>& self) {
    Tensor<T>* gx = input_grad(self, 0);
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t i = 0; i < 2 * h; ++i) {
        const T* g = self.grad.raw() + (p * 2 * h + i) * 2 * w;
        T* dst = gx->raw() + (p * h + i / 2) * w;
        for (std::size_t j = 0; j < 2 * w; ++j) dst[j / 2] += g[j];
      }
    }
  });
}

/// Concatenation along the channel axis.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  detail::require_rank4(sa, "concat_channels");
  detail::require_rank4(sb, "concat_channels");
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
    throw ShapeError("concat_channels mismatch: " + shape_string(sa) + " vs " + shape_string(sb));
  }
  const std::size_t n = sa[0], plane = sa[2] * sa[3], ca = sa[1] * plane, cb = sb[1] * plane;
  Tensor<T> out({n, sa[1] + sb[1], sa[2], sa[3]});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().raw() + i * ca, ca, out.raw() + i * (ca + cb));
    std::copy_n(b.value().raw() + i * cb, cb, out.raw() + i * (ca + cb) + ca);
  }
  return Var<T>::from_op(std::move(out), {a, b}, [=](Node<T>& self) {
    Tensor<T>* ga = input_grad(self, 0);
    Tensor<T>* gb = input_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const T* g = self.grad.raw() + i * (ca + cb);
      if (ga) {
        for (std::size_t j = 0; j < ca; ++j) (*ga)[i * ca + j] += g[j];
      }
      if (gb) {
        for (std::size_t j = 0; j < cb; ++j) (*gb)[i * cb + j] += g[ca + j];
      }
    }
  });
}

enum class Mode { train, eval };

struct BatchNormOptions {
  Mode mode = Mode::train;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel batch normalization of an N,C,H,W tensor.
///
/// Train mode normalizes with the biased batch variance and blends the
/// unbiased variance into the running statistics. Eval mode uses the running
/// statistics. Both modes are differentiable w.r.t. input, gamma and beta.
template <typename T>
Var<T> batchnorm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                 Tensor<T>& running_var, const BatchNormOptions& opt) {
  const Shape& s = input.shape();
  detail::require_rank4(s, "batchnorm");
  const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{&gamma.value(), &beta.value(), &running_mean, &running_var}) {
    if (t->size() != c) {
      throw ShapeError("batchnorm parameter " + shape_string(t->shape()) + " does not match channels of " +
                       shape_string(s));
    }
  }
  const std::size_t m = n * plane;
  const T* x = input.value().raw();

  std::vector<T> mean(c), inv_std(c);
  if (opt.mode == Mode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x + (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) sum += p[j];
      }
      const double mu = sum / static_cast<double>(m);
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x + (i * c + ch) * plane;
        for (std::size_t j = 0; j < plane; ++j) sq += (p[j] - mu) * (p[j] - mu);
      }
      const double var = sq / static_cast<double>(m);
      if (var + opt.eps <= 0.0) {
        throw DomainError("batchnorm: channel " + std::to_string(ch) + " has zero variance and eps = 0");
      }
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
      running_mean[ch] = static_cast<T>((1.0 - opt.momentum) * running_mean[ch] + opt.momentum * mu);
      running_var[ch] = static_cast<T>((1.0 - opt.momentum) * running_var[ch] + opt.momentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v = static_cast<double>(running_var[ch]) + opt.eps;
      if (v <= 0.0) throw DomainError("batchnorm: running variance + eps <= 0 on channel " + std::to_string(ch));
      mean[ch] = running_mean[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(v));
    }
  }

  Tensor<T> xhat(s);
  Tensor<T> out(s);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * plane;
      const T g = gamma.value()[ch], b = beta.value()[ch];
      for (std::size_t j = 0; j < plane; ++j) {
        const T xh = (x[off + j] - mean[ch]) * inv_std[ch];
        xhat[off + j] = xh;
        out[off + j] = g * xh + b;
      }
    }
  }

  const bool batch_stats = opt.mode == Mode::train;
  return Var<T>::from_op(
      std::move(out), {input, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        Tensor<T>* gx = input_grad(self, 0);
        Tensor<T>* gg = input_grad(self, 1);
        Tensor<T>* gbeta = input_grad(self, 2);
        const auto& gamma_v = self.parents[1]->value;
        const T* dy = self.grad.raw();
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
              sum_dy += dy[off + j];
              sum_dy_xhat += static_cast<double>(dy[off + j]) * xhat[off + j];
            }
          }
          if (gg) (*gg)[ch] += static_cast<T>(sum_dy_xhat);
          if (gbeta) (*gbeta)[ch] += static_cast<T>(sum_dy);
          if (!gx) continue;
          const T scale = gamma_v[ch] * inv_std[ch];
          if (batch_stats) {
            const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(m));
            const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(m));
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t off = (i * c + ch) * plane;
              for (std::size_t j = 0; j < plane; ++j) {
                (*gx)[off + j] += scale * (dy[off + j] - mean_dy - xhat[off + j] * mean_dy_xhat);
              }
            }
          } else {
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t off = (i * c + ch) * plane;
              for (std::size_t j = 0; j < plane; ++j) (*gx)[off + j] += scale * dy[off + j];
            }
          }
        }
      });
}

enum class Activation { relu, tanh, sigmoid };

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ParseError("unknown activation '" + s + "'");
}

template <typename T>
Var<T> activation(const Var<T>& input, Activation kind) {
  Tensor<T> out(input.shape());
  const T* x = input.value().raw();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
      break;
  }
  return Var<T>::from_op(std::move(out), {input}, [kind](Node<T>& self) {
    Tensor<T>* gx = input_grad(self, 0);
    const auto& xin = self.parents[0]->value;
    const auto& y = self.value;
    for (std::size_t i = 0; i < y.size(); ++i) {
      T d;
      switch (kind) {
        case Activation::relu: d = xin[i] > T(0) ? T(1) : T(0); break;
        case Activation::tanh: d = T(1) - y[i] * y[i]; break;
        default: d = y[i] * (T(1) - y[i]); break;
      }
      (*gx)[i] += d * self.grad[i];
    }
  });
}

/// Inverted dropout: zeroes with probability p and rescales survivors by 1/(1-p).
template <typename T, typename Rng>
Var<T> dropout(const Var<T>& input, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return input;
  if (p >= 1.0) throw ContractError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask(input.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? scale : T(0);
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input.value()[i] * mask[i];
  return Var<T>::from_op(std::move(out), {input}, [mask = std::move(mask)](Node<T>& self) {
    Tensor<T>* gx = input_grad(self, 0);
    for (std::size_t i = 0; i < mask.size(); ++i) (*gx)[i] += mask[i] * self.grad[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double acc = 0.0;
  for (T v : x.value().data()) acc += v;
  return Var<T>::from_op(Tensor<T>({1}, static_cast<T>(acc)), {x}, [](Node<T>& self) {
    Tensor<T>* gx = input_grad(self, 0);
    const T g = self.grad[0];
    for (auto& v : gx->data()) v += g;
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return Var<T>::from_op(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (Tensor<T>* ga = input_grad(self, 0)) {
      for (std::size_t i = 0; i < av.size(); ++i) (*ga)[i] += bv[i] * self.grad[i];
    }
    if (Tensor<T>* gb = input_grad(self, 1)) {
      for (std::size_t i = 0; i < av.size(); ++i) (*gb)[i] += av[i] * self.grad[i];
    }
  });
}

/// Weighted sum of two scalars: wa*a + wb*b.
template <typename T>
Var<T> weighted_sum(const Var<T>& a, T wa, const Var<T>& b, T wb) {
  if (a.value().size() != 1 || b.value().size() != 1) throw ShapeError("weighted_sum expects scalars");
  Tensor<T> out({1}, wa * a.value()[0] + wb * b.value()[0]);
  return Var<T>::from_op(std::move(out), {a, b}, [wa, wb](Node<T>& self) {
    if (Tensor<T>* ga = input_grad(self, 0)) (*ga)[0] += wa * self.grad[0];
    if (Tensor<T>* gb = input_grad(self, 1)) (*gb)[0] += wb * self.grad[0];
  });
}

}  // namespace fxq
