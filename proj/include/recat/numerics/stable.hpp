#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "recat/error.hpp"

namespace recat {

/// Max-shifted softmax.  Entries equal to -inf get weight 0; at least one
/// entry must be finite.
template <class T>
std::vector<T> softmax_stable(std::span<const T> x) {
  if (x.empty()) throw NumericError("empty distribution");
  T peak = -std::numeric_limits<T>::infinity();
  for (T v : x) peak = std::max(peak, v);
  if (!std::isfinite(peak)) throw NumericError("softmax needs at least one finite entry");
  std::vector<T> out(x.size());
  T total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - peak);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

template <class T>
std::vector<T> softmax_stable(const std::vector<T>& x) {
  return softmax_stable(std::span<const T>(x));
}

/// log(exp a + exp b).  -inf is the identity, so lse(-inf, -inf) = -inf.
template <class T>
T log_sum_exp(T a, T b) {
  constexpr T neg_inf = -std::numeric_limits<T>::infinity();
  if (a == neg_inf) return b;
  if (b == neg_inf) return a;
  T hi = std::max(a, b);
  T lo = std::min(a, b);
  return hi + std::log1p(std::exp(lo - hi));
}

/// log sum_i exp x_i, left to right.
template <class T>
T log_sum_exp(std::span<const T> x) {
  T acc = -std::numeric_limits<T>::infinity();
  T peak = acc;
  for (T v : x) peak = std::max(peak, v);
  if (peak == acc) return acc;
  T total = 0;
  for (T v : x) total += std::exp(v - peak);
  return peak + std::log(total);
}

}  // namespace recat
