#pragma once

// Oracles and helpers shared by the unit tests and the acceptance runner.
// Everything here is written independently of the library internals.

#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fxq/fxq.hpp"

namespace fxq::oracles {

using Rational = boost::multiprecision::cpp_rational;

/// Exact value of a finite double.
inline Rational exact(double x) {
  int e = 0;
  const double m = std::frexp(x, &e);
  // m * 2^53 is an integer for any double.
  const auto mant = static_cast<std::int64_t>(std::ldexp(m, 53));
  e -= 53;
  const boost::multiprecision::cpp_int p = boost::multiprecision::cpp_int(1) << std::abs(e);
  return e >= 0 ? Rational(mant * p) : Rational(mant, p);
}

inline Rational abs(const Rational& r) { return r < 0 ? Rational(-r) : r; }

/// Brute-force expectation for to_fixed_point: nearest member of the
/// enumerated code set (ties away from zero); out of range saturates.
class FixedPointOracle {
 public:
  FixedPointOracle(int ibits, int fbits, bool is_signed) {
    const int payload = ibits + fbits - (is_signed ? 1 : 0);
    const std::int64_t max_code = payload <= 0 ? 0 : (std::int64_t{1} << payload) - 1;
    const double scale = std::ldexp(1.0, fbits);
    for (std::int64_t k = is_signed ? -max_code : 0; k <= max_code; ++k) values_.push_back(static_cast<double>(k) / scale);
  }

  double operator()(double x) const {
    // Linear scan in doubles narrows the candidates; exact comparison decides.
    double best = INFINITY;
    for (double v : values_) best = std::min(best, std::fabs(x - v));
    const Rational rx = exact(x);
    std::vector<double> cand;
    for (double v : values_) {
      if (std::fabs(x - v) <= best * (1.0 + 1e-9) + 1e-300) cand.push_back(v);
    }
    Rational best_r = abs(rx - exact(cand[0]));
    for (double v : cand) best_r = std::min(best_r, abs(rx - exact(v)));
    double pick = NAN;
    for (double v : cand) {
      if (abs(rx - exact(v)) != best_r) continue;
      if (std::isnan(pick) || std::fabs(v) > std::fabs(pick)) pick = v;
    }
    return pick;
  }

 private:
  std::vector<double> values_;
};

inline double fixed_point_oracle(double x, int ibits, int fbits, bool is_signed) {
  return FixedPointOracle(ibits, fbits, is_signed)(x);
}

template <typename T>
Tensor<T> random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

// --- loop oracles ----------------------------------------------------------

inline Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b,
                                  std::size_t pad) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  const std::size_t ho = h + 2 * pad - k + 1, wo = wd + 2 * pad - k + 1;
  Tensor<double> y({n, co, ho, wo});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double acc = b ? (*b)[o] : 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const auto yy = static_cast<std::ptrdiff_t>(i + u) - static_cast<std::ptrdiff_t>(pad);
                const auto xx = static_cast<std::ptrdiff_t>(j + v) - static_cast<std::ptrdiff_t>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) || xx >= static_cast<std::ptrdiff_t>(wd))
                  continue;
                acc += x.at(a, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) * w.at(o, c, u, v);
              }
          y.at(a, o, i, j) = acc;
        }
  return y;
}

inline Tensor<double> maxpool_oracle(const Tensor<double>& x) {
  Tensor<double> y({x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2});
  for (std::size_t a = 0; a < x.dim(0); ++a)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t i = 0; i < y.dim(2); ++i)
        for (std::size_t j = 0; j < y.dim(3); ++j)
          y.at(a, c, i, j) = std::max({x.at(a, c, 2 * i, 2 * j), x.at(a, c, 2 * i, 2 * j + 1),
                                       x.at(a, c, 2 * i + 1, 2 * j), x.at(a, c, 2 * i + 1, 2 * j + 1)});
  return y;
}

inline Tensor<double> upsample_oracle(const Tensor<double>& x) {
  Tensor<double> y({x.dim(0), x.dim(1), 2 * x.dim(2), 2 * x.dim(3)});
  for (std::size_t a = 0; a < y.dim(0); ++a)
    for (std::size_t c = 0; c < y.dim(1); ++c)
      for (std::size_t i = 0; i < y.dim(2); ++i)
        for (std::size_t j = 0; j < y.dim(3); ++j) y.at(a, c, i, j) = x.at(a, c, i / 2, j / 2);
  return y;
}

// --- finite differences ----------------------------------------------------

/// Largest norm-relative error ||g - g_fd|| / max(||g||, ||g_fd||, 1e-8) over
/// the given parameters, with central differences of step h.
inline double gradient_check(const std::function<Var<double>()>& loss_fn, std::vector<Var<double>> params,
                             double h = 1e-4) {
  for (auto& p : params) p.zero_grad();
  backward(loss_fn());
  double worst = 0.0;
  for (auto& p : params) {
    const Tensor<double> analytic = p.has_grad() ? p.grad() : Tensor<double>(p.shape());
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < p.value().size(); ++i) {
      double& v = p.mutable_value()[i];
      const double keep = v;
      v = keep + h;
      const double up = loss_fn().value()[0];
      v = keep - h;
      const double down = loss_fn().value()[0];
      v = keep;
      const double fd = (up - down) / (2.0 * h);
      diff += (analytic[i] - fd) * (analytic[i] - fd);
      na += analytic[i] * analytic[i];
      nn += fd * fd;
    }
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8}));
  }
  return worst;
}

// --- reference layer table -------------------------------------------------

struct ReferenceRow {
  const char* name;
  std::size_t c, h, w;
  std::size_t params;
};

/// The published layer listing of the base-64 model on a 200x200 input.
inline const std::vector<ReferenceRow>& reference_table() {
  static const std::vector<ReferenceRow> rows = {
      {"Conv2d-1", 64, 200, 200, 640},         {"BatchNorm2d-2", 64, 200, 200, 128},
      {"QuantLayer-3", 64, 200, 200, 0},       {"Conv2d-4", 64, 200, 200, 36928},
      {"BatchNorm2d-5", 64, 200, 200, 128},    {"QuantLayer-6", 64, 200, 200, 0},
      {"DownConv-7", 64, 200, 200, 0},         {"MaxPool2d-8", 64, 100, 100, 0},
      {"Conv2dQuant-9", 128, 100, 100, 73856}, {"BatchNorm2d-10", 128, 100, 100, 256},
      {"QuantLayer-11", 128, 100, 100, 0},     {"Conv2dQuant-12", 128, 100, 100, 147584},
      {"BatchNorm2d-13", 128, 100, 100, 256},  {"QuantLayer-14", 128, 100, 100, 0},
      {"DownConv-15", 128, 100, 100, 0},       {"MaxPool2d-16", 128, 50, 50, 0},
      {"Conv2dQuant-17", 256, 50, 50, 295168}, {"BatchNorm2d-18", 256, 50, 50, 512},
      {"QuantLayer-19", 256, 50, 50, 0},       {"Conv2dQuant-20", 256, 50, 50, 590080},
      {"BatchNorm2d-21", 256, 50, 50, 512},    {"QuantLayer-22", 256, 50, 50, 0},
      {"DownConv-23", 256, 50, 50, 0},         {"MaxPool2d-24", 256, 25, 25, 0},
      {"Conv2dQuant-25", 256, 25, 25, 590080}, {"BatchNorm2d-26", 256, 25, 25, 512},
      {"QuantLayer-27", 256, 25, 25, 0},       {"Conv2dQuant-28", 256, 25, 25, 590080},
      {"BatchNorm2d-29", 256, 25, 25, 512},    {"QuantLayer-30", 256, 25, 25, 0},
      {"DownConv-31", 256, 25, 25, 0},         {"Upsample-32", 256, 50, 50, 0},
      {"Conv2dQuant-33", 256, 50, 50, 1179904}, {"BatchNorm2d-34", 256, 50, 50, 512},
      {"QuantLayer-35", 256, 50, 50, 0},       {"Conv2dQuant-36", 256, 50, 50, 590080},
      {"BatchNorm2d-37", 256, 50, 50, 512},    {"QuantLayer-38", 256, 50, 50, 0},
      {"DownConv-39", 256, 50, 50, 0},         {"UpConv-40", 256, 50, 50, 0},
      {"Upsample-41", 256, 100, 100, 0},       {"Conv2dQuant-42", 128, 100, 100, 442496},
      {"BatchNorm2d-43", 128, 100, 100, 256},  {"QuantLayer-44", 128, 100, 100, 0},
      {"Conv2dQuant-45", 128, 100, 100, 147584}, {"BatchNorm2d-46", 128, 100, 100, 256},
      {"QuantLayer-47", 128, 100, 100, 0},     {"DownConv-48", 128, 100, 100, 0},
      {"UpConv-49", 128, 100, 100, 0},         {"Upsample-50", 128, 200, 200, 0},
      {"Conv2dQuant-51", 64, 200, 200, 110656}, {"BatchNorm2d-52", 64, 200, 200, 128},
      {"QuantLayer-53", 64, 200, 200, 0},      {"Conv2dQuant-54", 64, 200, 200, 36928},
      {"BatchNorm2d-55", 64, 200, 200, 128},   {"QuantLayer-56", 64, 200, 200, 0},
      {"DownConv-57", 64, 200, 200, 0},        {"UpConv-58", 64, 200, 200, 0},
      {"Conv2d-59", 1, 200, 200, 577},
  };
  return rows;
}

inline constexpr std::size_t kReferenceTotal = 4'837'249;

/// Sum of Cout*(Cin*9+1) + 2*Cout over the 14 batchnormed convs, plus the head.
inline std::size_t closed_form_params(std::size_t b, std::size_t in = 1, std::size_t out = 1) {
  const std::size_t convs[14][2] = {{in, b},        {b, b},         {b, 2 * b},     {2 * b, 2 * b}, {2 * b, 4 * b},
                                    {4 * b, 4 * b}, {4 * b, 4 * b}, {4 * b, 4 * b}, {8 * b, 4 * b}, {4 * b, 4 * b},
                                    {6 * b, 2 * b}, {2 * b, 2 * b}, {3 * b, b},     {b, b}};
  std::size_t total = 0;
  for (const auto& c : convs) total += c[1] * (c[0] * 9 + 1) + 2 * c[1];
  return total + out * (b * 9 + 1);
}

}  // namespace fxq::oracles
