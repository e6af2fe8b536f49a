#pragma once

// Calibration score s_c = w1 |pi1 - hr1| + w2 |pi2 - hr2|, evaluated in
// exact rational arithmetic and rounded once. Nominal levels and hit rates
// are read as decimals (0.683 means 683/1000, not its binary neighbour), so
// s_c(0.683, 1.0) is exactly the double nearest 0.02.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <string>

#include "infoflow/core/error.hpp"

namespace infoflow {

using u128 = unsigned __int128;

struct CalibrationWeights {
  std::array<double, 2> nominal{0.683, 0.954};
  std::array<std::uint32_t, 2> weight_num{13, 10};
  std::uint32_t weight_den = 23;
};

namespace detail {

struct Decimal {
  u128 mantissa = 0;  // value = mantissa / 10^scale
  int scale = 0;
};

inline u128 pow10(int k) {
  u128 r = 1;
  while (k-- > 0) r *= 10;
  return r;
}

/// Shortest round-trip decimal of a value in [0, 1].
inline Decimal to_decimal(double x) {
  if (!(x >= 0.0 && x <= 1.0)) throw Error("calibration: rates must lie in [0, 1]");
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x, std::chars_format::scientific);
  const std::string s(buf, res.ptr);
  const auto e = s.find('e');
  std::string digits;
  for (std::size_t i = 0; i < e; ++i)
    if (s[i] != '.') digits += s[i];
  const int exp10 = std::stoi(s.substr(e + 1));
  Decimal d;
  for (char c : digits) d.mantissa = d.mantissa * 10 + static_cast<unsigned>(c - '0');
  // value = digits * 10^(exp10 - (len - 1))
  d.scale = static_cast<int>(digits.size()) - 1 - exp10;
  if (d.scale < 0) {
    d.mantissa *= pow10(-d.scale);
    d.scale = 0;
  }
  if (d.scale > 24) throw Error("calibration: rate has too many decimal places for exact scoring");
  return d;
}

/// num / den rounded to nearest double, ties to even. Long division keeps
/// every intermediate below 2 * den.
inline double ratio_to_double(u128 num, u128 den) {
  if (den == 0) throw Error("ratio_to_double: zero denominator");
  if (num == 0) return 0.0;
  // Normalize so that 1 <= num / den < 2, tracking the binary exponent.
  constexpr u128 kTop = static_cast<u128>(1) << 126;
  if (num >= kTop || den >= kTop) throw Error("ratio_to_double: operands too large");
  int exp2 = 0;
  while (num >= 2 * den) {
    if (den >= kTop / 2) throw Error("ratio_to_double: ratio too large");
    den *= 2;
    ++exp2;
  }
  while (num < den) {
    num *= 2;
    --exp2;
  }
  // 53 significant bits, then guard information from the remainder.
  std::uint64_t mant = 1;
  u128 rem = num - den;
  for (int i = 0; i < 52; ++i) {
    rem *= 2;
    mant <<= 1;
    if (rem >= den) {
      rem -= den;
      mant |= 1;
    }
  }
  rem *= 2;
  const bool half_or_more = rem >= den;
  if (half_or_more) rem -= den;
  const bool sticky = rem != 0;
  if (half_or_more && (sticky || (mant & 1))) ++mant;
  return std::ldexp(static_cast<double>(mant), exp2 - 52);
}

}  // namespace detail

/// s_c from hit rates given as doubles, read as decimals.
inline double calibration_score(double hr683, double hr954, const CalibrationWeights& w = {}) {
  const std::array<detail::Decimal, 2> nom{detail::to_decimal(w.nominal[0]), detail::to_decimal(w.nominal[1])};
  const std::array<detail::Decimal, 2> hr{detail::to_decimal(hr683), detail::to_decimal(hr954)};
  int scale = 0;
  for (const auto& d : nom) scale = std::max(scale, d.scale);
  for (const auto& d : hr) scale = std::max(scale, d.scale);
  u128 num = 0;
  for (int i = 0; i < 2; ++i) {
    const u128 a = nom[static_cast<std::size_t>(i)].mantissa * detail::pow10(scale - nom[static_cast<std::size_t>(i)].scale);
    const u128 b = hr[static_cast<std::size_t>(i)].mantissa * detail::pow10(scale - hr[static_cast<std::size_t>(i)].scale);
    num += static_cast<u128>(w.weight_num[static_cast<std::size_t>(i)]) * (a > b ? a - b : b - a);
  }
  return detail::ratio_to_double(num, static_cast<u128>(w.weight_den) * detail::pow10(scale));
}

/// s_c from hit counts out of n, with hit rates k / n taken exactly.
inline double calibration_score_counts(std::uint64_t hits683, std::uint64_t hits954, std::uint64_t n,
                                       const CalibrationWeights& w = {}) {
  if (n == 0) throw Error("calibration_score: no examples");
  if (hits683 > n || hits954 > n) throw Error("calibration_score: more hits than examples");
  const std::array<detail::Decimal, 2> nom{detail::to_decimal(w.nominal[0]), detail::to_decimal(w.nominal[1])};
  const std::array<std::uint64_t, 2> hits{hits683, hits954};
  int scale = std::max(nom[0].scale, nom[1].scale);
  u128 num = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    // |nom - k/n| = |nom_m * 10^(scale - s) * n - k * 10^scale| / (10^scale * n)
    const u128 a = nom[i].mantissa * detail::pow10(scale - nom[i].scale) * n;
    const u128 b = static_cast<u128>(hits[i]) * detail::pow10(scale);
    num += static_cast<u128>(w.weight_num[i]) * (a > b ? a - b : b - a);
  }
  return detail::ratio_to_double(num, static_cast<u128>(w.weight_den) * detail::pow10(scale) * n);
}

}  // namespace infoflow
