#pragma once

// Independent reference implementations used only by the tests.

#include "ddl/core.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace oracle {

using ddl::Index;
using ddl::Mat;
using ddl::Vec;

/// 1/2 ||x - D a||^2 + lambda ||a||_1 + lambda'/2 ||a||^2, evaluated directly.
inline double enet_objective(const Mat& D, const Vec& x, const Vec& a, double lambda,
                             double lambda_prime) {
  double r2 = 0.0;
  for (Index i = 0; i < D.rows(); ++i) {
    double s = x[i];
    for (Index j = 0; j < D.cols(); ++j) s -= D(i, j) * a[j];
    r2 += s * s;
  }
  double l1 = 0.0, l2 = 0.0;
  for (Index j = 0; j < a.size(); ++j) {
    l1 += std::abs(a[j]);
    l2 += a[j] * a[j];
  }
  return 0.5 * r2 + lambda * l1 + 0.5 * lambda_prime * l2;
}

/// Cyclic (projected) coordinate descent for the elastic net, run until no
/// coordinate moves by more than 1e-15 relative.
inline Vec coordinate_descent(const Mat& D, const Vec& x, double lambda, double lambda_prime,
                              bool nonnegative = true, int max_sweeps = 200000) {
  const Index k = D.cols();
  Vec a = Vec::Zero(k);
  Vec r = x;
  Vec col_sq(k);
  for (Index j = 0; j < k; ++j) col_sq[j] = D.col(j).squaredNorm();
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double moved = 0.0, scale = 0.0;
    for (Index j = 0; j < k; ++j) {
      const double rho = D.col(j).dot(r) + col_sq[j] * a[j];
      double nj;
      if (nonnegative)
        nj = std::max(0.0, rho - lambda) / (col_sq[j] + lambda_prime);
      else
        nj = (rho > lambda ? rho - lambda : rho < -lambda ? rho + lambda : 0.0) /
             (col_sq[j] + lambda_prime);
      const double d = nj - a[j];
      if (d != 0.0) {
        r -= d * D.col(j);
        a[j] = nj;
      }
      moved = std::max(moved, std::abs(d));
      scale = std::max(scale, std::abs(nj));
    }
    if (moved <= 1e-15 * std::max(1.0, scale)) break;
  }
  return a;
}

inline Mat random_matrix(Index r, Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Mat unit_columns(Mat m) {
  for (Index j = 0; j < m.cols(); ++j) m.col(j).normalize();
  return m;
}

}  // namespace oracle
