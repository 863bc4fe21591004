// Prints how a handful of values land in a few fixed-point formats.
#include <cstdio>

#include "fxq/fixedpoint.hpp"

int main() {
  const double values[] = {0.3, -0.97, 0.5, 2.71828, -7.5, 70.0};
  const char* formats[] = {"Q0.2", "Q0.4", "Q0.8", "Q2.2", "Q8.8"};

  std::printf("%10s", "x");
  for (const char* f : formats) std::printf("%12s", f);
  std::printf("\n");
  for (double x : values) {
    std::printf("%10.5f", x);
    for (const char* f : formats) {
      const auto q = fxq::parse_qformat(f, true);
      std::printf("%12.6g", fxq::to_fixed_point(x, q));
    }
    std::printf("\n");
  }

  // Unsigned activations saturate at the top of the integer field.
  const auto q6 = fxq::parse_qformat("Q6.0");
  std::printf("\nQ6.0 (unsigned): 0.5 -> %g, 70 -> %g, -2 -> %g\n", fxq::to_fixed_point(0.5, q6),
              fxq::to_fixed_point(70.0, q6), fxq::to_fixed_point(-2.0, q6));
}
