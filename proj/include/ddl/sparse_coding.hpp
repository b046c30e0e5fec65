#pragma once

// Per-column elastic-net sparse coding:
//
//   min_a  1/2 ||x - D a||^2 + lambda ||a||_1 + lambda'/2 ||a||^2,   a >= 0
//
// solved with function-restart FISTA on the Gram form (G = D^T D, b = D^T x),
// plus an active-set polish that solves the stationarity system
// (G_SS + lambda' I) a_S = b_S - lambda s_S exactly once the support settles.
// A sign-free variant (plain LASSO / elastic net) shares the same machinery.

#include "ddl/core.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace ddl::sparse {

enum class SignConstraint { nonnegative, free };

struct ElasticNetParams {
  double lambda = 0.1;
  double lambda_prime = 0.1;
  int max_iters = 500;
  double tol = 1e-8;
  /// Relative to ||a||_inf when selecting the active set after a solve.
  double activation_eps = 1e-9;

  void validate() const {
    require(std::isfinite(lambda) && lambda >= 0, ErrorCode::invalid_argument,
            "elastic net: lambda must be >= 0");
    require(std::isfinite(lambda_prime) && lambda_prime > 0, ErrorCode::invalid_argument,
            "elastic net: lambda_prime must be > 0");
    require(max_iters >= 1, ErrorCode::invalid_argument, "elastic net: max_iters must be >= 1");
    require(tol > 0, ErrorCode::invalid_argument, "elastic net: tol must be > 0");
    require(activation_eps >= 0, ErrorCode::invalid_argument,
            "elastic net: activation_eps must be >= 0");
  }
};

struct SparseCode {
  Vec coeffs;
  std::vector<Index> active_set;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  bool polished = false;
};

inline Vec prox_nonneg_l1(const Vec& v, double t) {
  return (v.array() - t).max(0.0).matrix();
}

/// Two-sided soft threshold.
inline Vec prox_l1(const Vec& v, double t) {
  return (v.array().sign() * (v.array().abs() - t).max(0.0)).matrix();
}

/// Sorted indices with a[j] > activation_eps (|a[j]| for the sign-free variant).
inline std::vector<Index> active_set(const Vec& a, double activation_eps,
                                     SignConstraint sign = SignConstraint::nonnegative) {
  std::vector<Index> out;
  for (Index j = 0; j < a.size(); ++j) {
    const double v = sign == SignConstraint::free ? std::abs(a[j]) : a[j];
    if (v > activation_eps) out.push_back(j);
  }
  return out;
}

inline double reconstruction_objective(const Mat& D, const Vec& x, const Vec& a,
                                       const ElasticNetParams& p) {
  require(D.rows() == x.size() && D.cols() == a.size(), ErrorCode::dimension_mismatch,
          "reconstruction_objective: D is " + shape_str(D.rows(), D.cols()) + ", x has " +
              std::to_string(x.size()) + ", a has " + std::to_string(a.size()));
  return 0.5 * (x - D * a).squaredNorm() + p.lambda * a.lpNorm<1>() +
         0.5 * p.lambda_prime * a.squaredNorm();
}

/// Largest eigenvalue of the PSD matrix `gram` by at most 50 power-iteration
/// steps, inflated by 5%, plus lambda'. Used as the FISTA Lipschitz constant.
inline double lipschitz_constant(const Mat& gram, double lambda_prime) {
  const Index k = gram.rows();
  if (k == 0) return std::max(lambda_prime, 1e-12);
  Vec v = Vec::Constant(k, 1.0 / std::sqrt(double(k)));
  // A constant start vector can be orthogonal to the top eigenvector; perturb
  // deterministically.
  for (Index i = 0; i < k; ++i) v[i] += 1e-3 * double((i * 7919) % 97) / 97.0;
  v.normalize();
  double est = 0.0;
  for (int it = 0; it < 50; ++it) {
    Vec w = gram * v;
    const double nrm = w.norm();
    if (nrm == 0.0) break;
    const double next = v.dot(w);
    v = w / nrm;
    if (it > 3 && std::abs(next - est) <= 1e-10 * std::abs(next)) {
      est = next;
      break;
    }
    est = next;
  }
  est = std::max(est, gram.diagonal().maxCoeff());
  return 1.05 * est + lambda_prime + 1e-12;
}

namespace detail {

inline double penalty(const Vec& a, const ElasticNetParams& p) {
  return p.lambda * a.lpNorm<1>() + 0.5 * p.lambda_prime * a.squaredNorm();
}

// F(a) with Ga supplied.
inline double gram_objective(const Vec& a, const Vec& ga, const Vec& dtx, double x_norm2,
                             const ElasticNetParams& p) {
  return 0.5 * x_norm2 - a.dot(dtx) + 0.5 * a.dot(ga) + penalty(a, p);
}

inline Vec prox(const Vec& v, double t, SignConstraint sign) {
  return sign == SignConstraint::nonnegative ? prox_nonneg_l1(v, t) : prox_l1(v, t);
}

// KKT residual test on the Gram form. `active` must be sorted.
inline bool kkt_gram(const Vec& a, const Vec& ga, const Vec& dtx,
                     const std::vector<Index>& active, const ElasticNetParams& p, double tol,
                     SignConstraint sign) {
  std::size_t next = 0;
  for (Index j = 0; j < a.size(); ++j) {
    const double corr = dtx[j] - ga[j];  // d_j^T (x - D a)
    if (next < active.size() && active[next] == j) {
      ++next;
      const double s = sign == SignConstraint::free ? (a[j] >= 0 ? 1.0 : -1.0) : 1.0;
      if (!(std::abs(corr - p.lambda * s - p.lambda_prime * a[j]) <= tol)) return false;
    } else {
      const double c = sign == SignConstraint::free ? std::abs(corr) : corr;
      if (!(c <= p.lambda + tol)) return false;
    }
  }
  return true;
}

// Solves the stationarity system on the support of `a`. Returns false when the
// polished point is infeasible or fails KKT at `tol`.
inline bool polish(const Mat& gram, const Vec& dtx, const ElasticNetParams& p,
                   SignConstraint sign, const std::vector<Index>& support, double tol, Vec& out,
                   Vec& gout) {
  const Index k = gram.rows();
  const Index s = Index(support.size());
  Vec cand = Vec::Zero(k);
  if (s > 0) {
    Mat sys(s, s);
    Vec rhs(s);
    for (Index i = 0; i < s; ++i) {
      for (Index j = 0; j < s; ++j) sys(i, j) = gram(support[i], support[j]);
      sys(i, i) += p.lambda_prime;
      const double sg = sign == SignConstraint::free ? (out[support[i]] >= 0 ? 1.0 : -1.0) : 1.0;
      rhs[i] = dtx[support[i]] - p.lambda * sg;
    }
    Eigen::LLT<Mat> llt(sys);
    if (llt.info() != Eigen::Success) return false;
    const Vec z = llt.solve(rhs);
    if (!z.allFinite()) return false;
    for (Index i = 0; i < s; ++i) {
      const double prev = out[support[i]];
      if (sign == SignConstraint::nonnegative ? !(z[i] > 0) : !(z[i] * prev > 0)) return false;
      cand[support[i]] = z[i];
    }
  }
  const Vec gc = gram * cand;
  if (!kkt_gram(cand, gc, dtx, support, p, tol, sign)) return false;
  out = cand;
  gout = gc;
  return true;
}

}  // namespace detail

/// FISTA on the Gram form. `x_norm2` = ||x||^2 only shifts the objective.
/// `lipschitz` should come from lipschitz_constant(gram, lambda').
/// When `trace` is given, the best objective after each iteration is appended.
inline SparseCode fista_solve(const Mat& gram, const Vec& dtx, double x_norm2, double lipschitz,
                              const ElasticNetParams& p,
                              SignConstraint sign = SignConstraint::nonnegative,
                              std::vector<double>* trace = nullptr) {
  const Index k = gram.rows();
  require(gram.cols() == k && dtx.size() == k, ErrorCode::dimension_mismatch,
          "fista_solve: gram is " + shape_str(gram.rows(), gram.cols()) + ", D^T x has " +
              std::to_string(dtx.size()));
  require(dtx.allFinite() && std::isfinite(x_norm2), ErrorCode::non_finite,
          "fista_solve: non-finite input");
  require(lipschitz > 0 && std::isfinite(lipschitz), ErrorCode::invalid_argument,
          "fista_solve: Lipschitz constant must be positive");

  const double polish_tol = 1e-2 * p.tol;
  const double step = 1.0 / lipschitz;

  SparseCode out;
  Vec a = Vec::Zero(k);
  Vec ga = Vec::Zero(k);
  double f = detail::gram_objective(a, ga, dtx, x_norm2, p);

  auto finish = [&](bool converged, bool polished, int iters) {
    out.coeffs = a;
    out.objective = f;
    out.iterations = iters;
    out.converged = converged;
    out.polished = polished;
    const double scale = a.size() ? a.cwiseAbs().maxCoeff() : 0.0;
    out.active_set = active_set(a, p.activation_eps * scale, sign);
    return out;
  };

  // Zero is optimal iff every correlation is below lambda.
  if (detail::kkt_gram(a, ga, dtx, {}, p, polish_tol, sign)) return finish(true, false, 0);

  Vec a_prev = a, ga_prev = ga;
  Vec y = a, gy = ga;
  double t = 1.0;
  std::vector<Index> last_support;
  bool have_last = false;

  for (int it = 1; it <= p.max_iters; ++it) {
    Vec grad = gy - dtx + p.lambda_prime * y;
    Vec a_new = detail::prox(y - step * grad, step * p.lambda, sign);
    Vec ga_new = gram * a_new;
    double f_new = detail::gram_objective(a_new, ga_new, dtx, x_norm2, p);
    if (f_new > f) {
      // Momentum restart: plain proximal step from the current iterate.
      t = 1.0;
      grad = ga - dtx + p.lambda_prime * a;
      a_new = detail::prox(a - step * grad, step * p.lambda, sign);
      ga_new = gram * a_new;
      f_new = detail::gram_objective(a_new, ga_new, dtx, x_norm2, p);
      if (f_new > f) {  // only possible through rounding
        f_new = f;
        a_new = a;
        ga_new = ga;
      }
    }
    const double t_new = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    const double mom = (t - 1.0) / t_new;
    y = a_new + mom * (a_new - a);
    gy = ga_new + mom * (ga_new - ga);
    const double change = std::abs(f - f_new);
    a_prev.swap(a);
    ga_prev.swap(ga);
    a = std::move(a_new);
    ga = std::move(ga_new);
    f = f_new;
    t = t_new;
    if (trace) trace->push_back(f);

    const bool obj_converged =
        change <= p.tol * std::max(std::abs(f), std::numeric_limits<double>::min());
    if (it % 10 == 0 || obj_converged || it == p.max_iters) {
      const double scale = a.cwiseAbs().maxCoeff();
      auto support = active_set(a, p.activation_eps * scale, sign);
      if (obj_converged || it == p.max_iters || (have_last && support == last_support)) {
        Vec cand = a, gc;
        if (detail::polish(gram, dtx, p, sign, support, polish_tol, cand, gc)) {
          const double fc = detail::gram_objective(cand, gc, dtx, x_norm2, p);
          if (fc <= f + 1e-12 * std::max(1.0, std::abs(f))) {
            a = cand;
            ga = gc;
            f = std::min(f, fc);
            return finish(true, true, it);
          }
        }
      }
      last_support = std::move(support);
      have_last = true;
    }
    if (obj_converged) return finish(true, false, it);
  }
  return finish(false, false, p.max_iters);
}

inline SparseCode fista_encode(const Mat& D, const Vec& x, const ElasticNetParams& p,
                               SignConstraint sign = SignConstraint::nonnegative) {
  require(D.rows() == x.size(), ErrorCode::dimension_mismatch,
          "fista_encode: D is " + shape_str(D.rows(), D.cols()) + " but x has " +
              std::to_string(x.size()));
  require(D.allFinite() && x.allFinite(), ErrorCode::non_finite, "fista_encode: non-finite input");
  const Mat gram = D.transpose() * D;
  return fista_solve(gram, D.transpose() * x, x.squaredNorm(),
                     lipschitz_constant(gram, p.lambda_prime), p, sign);
}

/// Optimality test for the nonnegative elastic net:
///   j in active set:  |d_j^T (x - D a) - lambda - lambda' a_j| <= tol
///   otherwise:        d_j^T (x - D a) <= lambda + tol
inline bool kkt_check(const Mat& D, const Vec& x, const SparseCode& code,
                      const ElasticNetParams& p, double tol,
                      SignConstraint sign = SignConstraint::nonnegative) {
  if (D.rows() != x.size() || D.cols() != code.coeffs.size()) return false;
  const Vec corr = D.transpose() * (x - D * code.coeffs);
  std::size_t next = 0;
  for (Index j = 0; j < code.coeffs.size(); ++j) {
    const double aj = code.coeffs[j];
    if (next < code.active_set.size() && code.active_set[next] == j) {
      ++next;
      const double s = sign == SignConstraint::free ? (aj >= 0 ? 1.0 : -1.0) : 1.0;
      if (!(std::abs(corr[j] - p.lambda * s - p.lambda_prime * aj) <= tol)) return false;
    } else {
      const double c = sign == SignConstraint::free ? std::abs(corr[j]) : corr[j];
      if (!(c <= p.lambda + tol)) return false;
    }
  }
  return true;
}

}  // namespace ddl::sparse
