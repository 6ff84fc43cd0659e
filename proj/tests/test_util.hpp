#pragma once

#include <functional>
#include <random>

#include "unrect/geometry.hpp"

namespace unrect::testing {

/// Central-difference Jacobian with step h.
inline Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x, double h = 1e-5) {
  const Vec f0 = f(x);
  Mat j(f0.size(), x.size());
  for (Eigen::Index c = 0; c < x.size(); ++c) {
    Vec xp = x;
    Vec xm = x;
    xp(c) += h;
    xm(c) -= h;
    j.col(c) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return j;
}

inline double relative_error(const Mat& a, const Mat& b) {
  return (a - b).norm() / std::max(1.0, b.norm());
}

inline Vec random_vec(std::mt19937_64& rng, int n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = u(rng);
  return v;
}

}  // namespace unrect::testing
