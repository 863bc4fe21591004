#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "fxq/autograd.hpp"
#include "fxq/ops.hpp"
#include "fxq/errors.hpp"
#include "fxq/tensor.hpp"

namespace fxq {

/// (2 sum(p r) + eps) / (sum(p) + sum(r) + eps)
template <typename T>
double dice_coefficient(const Tensor<T>& p, const Tensor<T>& r, double eps = 1.0) {
  p.require_same_shape(r, "dice_coefficient");
  double inter = 0.0, sp = 0.0, sr = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(p[i]) * r[i];
    sp += p[i];
    sr += r[i];
  }
  return (2.0 * inter + eps) / (sp + sr + eps);
}

/// 1 - dice_coefficient(p, r), differentiable in p.
template <typename T>
Var<T> dice_loss(const Var<T>& p, const Tensor<T>& r, double eps = 1.0) {
  p.value().require_same_shape(r, "dice_loss");
  double inter = 0.0, sp = 0.0, sr = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    inter += static_cast<double>(p.value()[i]) * r[i];
    sp += p.value()[i];
    sr += r[i];
  }
  const double num = 2.0 * inter + eps, den = sp + sr + eps;
  Tensor<T> out({1}, static_cast<T>(1.0 - num / den));
  return Var<T>::from_op(std::move(out), {p}, [r, num, den](Node<T>& self) {
    Tensor<T>* gp = input_grad(self, 0);
    const double g = self.grad[0];
    // d/dp_i [1 - num/den] = -(2 r_i den - num) / den^2
    for (std::size_t i = 0; i < r.size(); ++i) {
      (*gp)[i] += static_cast<T>(-g * (2.0 * r[i] * den - num) / (den * den));
    }
  });
}

inline constexpr double kBceClamp = 1e-7;

/// Mean binary cross-entropy with p clamped to [1e-7, 1 - 1e-7].
template <typename T>
Var<T> binary_cross_entropy(const Var<T>& p, const Tensor<T>& r) {
  p.value().require_same_shape(r, "binary_cross_entropy");
  const double n = static_cast<double>(r.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double q = std::clamp(static_cast<double>(p.value()[i]), kBceClamp, 1.0 - kBceClamp);
    acc -= r[i] * std::log(q) + (1.0 - r[i]) * std::log(1.0 - q);
  }
  return Var<T>::from_op(Tensor<T>({1}, static_cast<T>(acc / n)), {p}, [r, n](Node<T>& self) {
    Tensor<T>* gp = input_grad(self, 0);
    const auto& pv = self.parents[0]->value;
    const double g = self.grad[0];
    for (std::size_t i = 0; i < r.size(); ++i) {
      const double raw = pv[i];
      if (raw < kBceClamp || raw > 1.0 - kBceClamp) continue;  // clamped region
      (*gp)[i] += static_cast<T>(g * (raw - r[i]) / (raw * (1.0 - raw)) / n);
    }
  });
}

/// lambda * BCE + (1 - lambda) * dice loss.
template <typename T>
Var<T> combined_loss(const Var<T>& p, const Tensor<T>& r, double eps, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw ContractError("combined_loss lambda must lie in [0, 1]");
  return weighted_sum(binary_cross_entropy(p, r), static_cast<T>(lambda), dice_loss(p, r, eps),
                      static_cast<T>(1.0 - lambda));
}

/// Dice on the 0-100 scale of thresholded sigmoid(logits).
template <typename T>
double dice_score(const Tensor<T>& logits, const Tensor<T>& r, double threshold = 0.5, double eps = 1.0) {
  logits.require_same_shape(r, "dice_score");
  Tensor<T> pred(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
    pred[i] = s > threshold ? T(1) : T(0);
  }
  return 100.0 * dice_coefficient(pred, r, eps);
}

// --- overlays --------------------------------------------------------------

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

inline constexpr Rgb kTruePositive{255, 165, 0};  // orange
inline constexpr Rgb kFalsePositive{0, 0, 255};   // blue
inline constexpr Rgb kFalseNegative{255, 0, 0};   // red
inline constexpr Rgb kBackground{0, 0, 0};

struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<Rgb> pixels;

  const Rgb& at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

/// Colours prediction-vs-truth per pixel. Both masks are H*W binary tensors
/// (any leading dims of size 1 are ignored).
template <typename T>
RgbImage render_overlay(const Tensor<T>& pred, const Tensor<T>& truth) {
  pred.require_same_shape(truth, "render_overlay");
  const Shape& s = pred.shape();
  if (s.size() < 2) throw ShapeError("render_overlay needs at least 2 dims, got " + shape_string(s));
  RgbImage img{s[s.size() - 2], s[s.size() - 1], {}};
  if (img.height * img.width != pred.size()) throw ShapeError("render_overlay expects a single image");
  img.pixels.resize(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > T(0.5), t = truth[i] > T(0.5);
    img.pixels[i] = p && t ? kTruePositive : p ? kFalsePositive : t ? kFalseNegative : kBackground;
  }
  return img;
}

/// Binary PPM (P6), 8-bit RGB.
inline void write_ppm(const RgbImage& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (const auto& px : img.pixels) {
    const char bytes[3] = {static_cast<char>(px.r), static_cast<char>(px.g), static_cast<char>(px.b)};
    f.write(bytes, 3);
  }
  if (!f) throw FormatError("write failed for '" + path + "'");
}

}  // namespace fxq
