#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>

#include "cfsp/tensor.hpp"

namespace cfsp {

inline constexpr double kDegenerateNorm = 1e-12;

template <Scalar A, Scalar B>
double cosine_similarity(std::span<const A> u, std::span<const B> v) {
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double a = u[i], b = v[i];
    dot += a * b;
    nu += a * a;
    nv += b * b;
  }
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

/// (1/pi) arccos(cos(u, v)), in [0, 1]. Evaluated as 2 atan2(|u^ - v^|,
/// |u^ + v^|) on the unit vectors, which equals the arccos form but stays
/// exact near 0 and 1 where arccos loses half its digits. Callers must ensure
/// both norms exceed kDegenerateNorm.
template <Scalar A, Scalar B>
double angular_distance(std::span<const A> u, std::span<const B> v) {
  double nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    nu += static_cast<double>(u[i]) * static_cast<double>(u[i]);
    nv += static_cast<double>(v[i]) * static_cast<double>(v[i]);
  }
  nu = std::sqrt(nu);
  nv = std::sqrt(nv);
  double diff = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double a = static_cast<double>(u[i]) / nu;
    const double b = static_cast<double>(v[i]) / nv;
    diff += (a - b) * (a - b);
    sum += (a + b) * (a + b);
  }
  const double angle = 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum));
  return std::clamp(angle / std::numbers::pi, 0.0, 1.0);
}

inline double angular_distance(std::span<const double> u, std::span<const double> v) {
  return angular_distance<double, double>(u, v);
}

template <Scalar A>
double l2_norm(std::span<const A> u) {
  double s = 0.0;
  for (A x : u) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

template <Scalar A, Scalar B>
double euclidean_distance(std::span<const A> u, std::span<const B> v) {
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double diff = static_cast<double>(u[i]) - static_cast<double>(v[i]);
    s += diff * diff;
  }
  return std::sqrt(s);
}

}  // namespace cfsp
