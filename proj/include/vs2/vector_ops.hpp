#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace vs2 {

using Vec = std::vector<double>;

// Small dense helpers. Accumulation is always in double regardless of the
// element type of the inputs.
template <typename A, typename B>
double dot(std::span<const A> a, std::span<const B> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

template <typename A>
double squared_norm(std::span<const A> a) {
  double acc = 0.0;
  for (const auto v : a) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc;
}

template <typename A>
double norm(std::span<const A> a) {
  return std::sqrt(squared_norm(a));
}

template <typename A>
Vec to_vec(std::span<const A> a) {
  return Vec(a.begin(), a.end());
}

inline bool all_zero(std::span<const double> a) {
  for (const double v : a) {
    if (v != 0.0) return false;
  }
  return true;
}

}  // namespace vs2
