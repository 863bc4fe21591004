#pragma once

// Elementwise activation timing: ReLU against Tanh.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "fxq/errors.hpp"

namespace fxq {

enum class BenchOp { relu, tanh };

inline std::string to_string(BenchOp op) { return op == BenchOp::relu ? "relu" : "tanh"; }

struct BenchResult {
  BenchOp op = BenchOp::relu;
  std::size_t elements = 0;
  std::size_t iterations = 0;
  double mean_ns_per_element = 0.0;
  double ratio_vs_relu = 1.0;
  double checksum = 0.0;
};

inline constexpr std::size_t kMinBenchElements = 10'000;
inline constexpr std::size_t kMinBenchIterations = 10;

namespace detail {

// Out-of-line so the loop is not folded into the timing harness.
[[gnu::noinline]] inline void apply_activation(BenchOp op, const float* in, float* out, std::size_t n) {
  if (op == BenchOp::relu) {
    for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > 0.0f ? in[i] : 0.0f;
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(in[i]);
  }
}

/// Mean ns per element over `iterations` timed passes after one warmup pass.
inline double time_activation(BenchOp op, const std::vector<float>& in, std::vector<float>& out,
                              std::size_t iterations, double& checksum) {
  using clock = std::chrono::steady_clock;
  apply_activation(op, in.data(), out.data(), in.size());
  checksum += out[out.size() / 2];
  const auto t0 = clock::now();
  for (std::size_t it = 0; it < iterations; ++it) {
    apply_activation(op, in.data(), out.data(), in.size());
    checksum += out[it % out.size()];
  }
  const auto ns = std::chrono::duration<double, std::nano>(clock::now() - t0).count();
  return ns / static_cast<double>(iterations) / static_cast<double>(in.size());
}

}  // namespace detail

/// Times `op` over a uniform [-4,4] float tensor, with a ReLU baseline from the
/// same run for the ratio.
inline BenchResult bench_activation(BenchOp op, std::size_t elements, std::size_t iterations, std::uint64_t seed) {
  if (elements < kMinBenchElements) throw ContractError("bench needs at least 10000 elements");
  if (iterations < kMinBenchIterations) throw ContractError("bench needs at least 10 iterations");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-4.0f, 4.0f);
  std::vector<float> in(elements), out(elements);
  for (auto& v : in) v = dist(rng);

  BenchResult r{op, elements, iterations, 0.0, 1.0, 0.0};
  const double relu_ns = detail::time_activation(BenchOp::relu, in, out, iterations, r.checksum);
  r.mean_ns_per_element =
      op == BenchOp::relu ? relu_ns : detail::time_activation(op, in, out, iterations, r.checksum);
  r.ratio_vs_relu = op == BenchOp::relu ? 1.0 : r.mean_ns_per_element / relu_ns;
  return r;
}

/// Layer/op, time, ratio and tensor dimension columns.
inline void print_bench_table(std::ostream& os, const std::vector<BenchResult>& rows) {
  os << std::left << std::setw(8) << "op" << std::right << std::setw(16) << "time [us]" << std::setw(12) << "ratio"
     << std::setw(14) << "elements" << "\n";
  for (const auto& r : rows) {
    const double us = r.mean_ns_per_element * static_cast<double>(r.elements) / 1000.0;
    os << std::left << std::setw(8) << to_string(r.op) << std::right << std::fixed << std::setprecision(1)
       << std::setw(16) << us << std::setprecision(2) << std::setw(12) << r.ratio_vs_relu << std::setw(14)
       << r.elements << "\n";
    os.unsetf(std::ios::floatfield);
  }
}

}  // namespace fxq
