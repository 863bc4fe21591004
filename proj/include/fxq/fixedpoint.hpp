#pragma once

// Fixed-point quantization of real scalars.
//
// A format Q<i>.<f> keeps `i` integer bits and `f` fractional bits; a value is
// an integer code divided by 2^f. Signed formats spend one of the i+f storage
// bits on the sign (sign-magnitude), so the magnitude payload is i+f-1 bits.
//
// Rounding is half-away-from-zero. A fractional part that rounds up to 2^f
// carries into the integer field; anything that no longer fits saturates at
// the largest code of the format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fxq/errors.hpp"

namespace fxq {

struct QFormat {
  int ibits = 0;
  int fbits = 0;
  bool is_signed = false;

  constexpr int storage_bits() const noexcept { return ibits + fbits; }

  // Bits available for the magnitude.
  constexpr int payload_bits() const noexcept { return storage_bits() - (is_signed ? 1 : 0); }

  constexpr std::int64_t max_code() const noexcept {
    return payload_bits() <= 0 ? 0 : (std::int64_t{1} << payload_bits()) - 1;
  }

  double max_value() const noexcept { return std::ldexp(static_cast<double>(max_code()), -fbits); }

  void validate() const {
    if (ibits < 0 || fbits < 0 || ibits + fbits < 1) {
      throw ContractError("QFormat needs ibits + fbits >= 1, got Q" + std::to_string(ibits) + "." +
                          std::to_string(fbits));
    }
    if (storage_bits() > 32) {
      throw ContractError("QFormat wider than 32 bits is not supported");
    }
  }

  std::string to_string() const { return "Q" + std::to_string(ibits) + "." + std::to_string(fbits); }

  friend constexpr bool operator==(const QFormat&, const QFormat&) = default;
};

struct QuantScalarResult {
  double value = 0.0;
  // Sign-magnitude integer: value == code / 2^fbits.
  std::int64_t code = 0;
};

/// clamp(x, n): saturate x into [0, 2^n - 1].
inline double clamp(double x, int n) {
  const double hi = std::ldexp(1.0, n) - 1.0;
  if (x >= hi) return hi;
  if (x <= 0.0) return 0.0;
  return x;
}

/// quantize(x, n) = round(clamp(x, n) << n) >> n, shifts realized as scaling by 2^n.
inline double quantize(double x, int n) {
  return std::ldexp(std::round(std::ldexp(clamp(x, n), n)), -n);
}

struct SplitParts {
  double integer;
  double fraction;
};

/// Integer and fractional parts of |x|.
inline SplitParts split(double x) {
  const double a = std::fabs(x);
  const double i = std::floor(a);
  return {i, a - i};
}

/// Derivative of clamp(x, n); zero at the two thresholds.
inline int clamp_gradient_mask(double x, int n) {
  const double hi = std::ldexp(1.0, n) - 1.0;
  return (x > 0.0 && x < hi) ? 1 : 0;
}

inline QuantScalarResult encode_fixed_point(double x, const QFormat& q) {
  if (x == 0.0 || std::isnan(x) || (!q.is_signed && x < 0.0)) return {};
  const auto [xi, xf] = split(x);
  const std::int64_t max_code = q.max_code();
  const double int_hi = std::ldexp(1.0, q.ibits) - 1.0;

  std::int64_t magnitude;
  if (xi > int_hi) {
    // The integer field clamps, so the whole value is out of range.
    magnitude = max_code;
  } else {
    const auto int_code = static_cast<std::int64_t>(quantize(xi, q.ibits));
    const auto frac_code = static_cast<std::int64_t>(std::round(std::ldexp(xf, q.fbits)));
    magnitude = std::min((int_code << q.fbits) + frac_code, max_code);
  }
  const std::int64_t code = x < 0.0 ? -magnitude : magnitude;
  return {std::ldexp(static_cast<double>(code), -q.fbits), code};
}

/// sign(x) * quantize(x_i, ibits) + sign(x) * quantize(x_f, fbits), saturating.
inline double to_fixed_point(double x, const QFormat& q) { return encode_fixed_point(x, q).value; }

inline double decode_fixed_point(std::int64_t code, const QFormat& q) {
  return std::ldexp(static_cast<double>(code), -q.fbits);
}

/// Parses "Q<i>.<f>". Signedness is decided by the caller.
inline QFormat parse_qformat(std::string_view text, bool is_signed = false) {
  auto fail = [&]() -> QFormat {
    throw ParseError("malformed Q-format '" + std::string(text) + "' (expected Q<i>.<f>)");
  };
  if (text.size() < 4 || (text[0] != 'Q' && text[0] != 'q')) return fail();
  const auto dot = text.find('.');
  if (dot == std::string_view::npos) return fail();
  auto digits = [&](std::string_view s, int& out) {
    if (s.empty() || s.size() > 2) return false;
    out = 0;
    for (char c : s) {
      if (c < '0' || c > '9') return false;
      out = out * 10 + (c - '0');
    }
    return true;
  };
  QFormat q;
  q.is_signed = is_signed;
  if (!digits(text.substr(1, dot - 1), q.ibits) || !digits(text.substr(dot + 1), q.fbits)) return fail();
  if (q.ibits + q.fbits < 1 || q.storage_bits() > 32) return fail();
  return q;
}

/// Every value to_fixed_point can emit for `q`, sorted ascending.
inline std::vector<double> representable_set(const QFormat& q) {
  q.validate();
  if (q.storage_bits() > 16) {
    throw ContractError("representable_set refuses " + q.to_string() + ": more than 16 storage bits");
  }
  const std::int64_t max_code = q.max_code();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(2 * max_code + 1));
  if (q.is_signed) {
    for (std::int64_t k = max_code; k >= 1; --k) out.push_back(-decode_fixed_point(k, q));
  }
  for (std::int64_t k = 0; k <= max_code; ++k) out.push_back(decode_fixed_point(k, q));
  return out;
}

}  // namespace fxq
