#pragma once

// Large-system predictions for the signed LASSO
//   a_hat = argmin_a 1/2 ||z - D a||^2 + lambda ||a||_1,  z = D a0 + v,
// with D (m x n) i.i.d. N(0, 1/m), gamma = m/n, v ~ N(0, sigma2 I) and a0
// entries nonzero (standard normal) with probability k. The prediction comes
// from a scalar max-min problem over (p, beta); a Monte Carlo oracle solves
// the finite problem directly.

#include "ddl/core.hpp"
#include "ddl/sparse_coding.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace ddl::asym {

struct AsymptoticProblem {
  double gamma = 0.5;
  double sigma2 = 1.0;
  double lambda = 0.5;
  double k_frac = 0.0;

  void validate() const {
    require(std::isfinite(gamma) && gamma > 0, ErrorCode::invalid_argument, "gamma must be > 0");
    require(std::isfinite(sigma2) && sigma2 >= 0, ErrorCode::invalid_argument,
            "sigma2 must be >= 0");
    require(std::isfinite(lambda) && lambda > 0, ErrorCode::invalid_argument,
            "lambda must be > 0");
    require(k_frac >= 0 && k_frac <= 1, ErrorCode::invalid_argument, "k must be in [0, 1]");
  }
};

struct AsymptoticSolution {
  double p_hat = 0.0;
  double beta_hat = 0.0;
  double second_moment = 0.0;
  double mse = 0.0;
  /// Predicted ||z - D a_hat||^2 / m (equals beta_hat^2 at the saddle point).
  double residual = 0.0;
  double grad_p = 0.0;  // central-difference stationarity at the solution
  double grad_beta = 0.0;
};

/// Gaussian upper tail P(Z > x).
inline double q_function(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

/// F(q) = lambda e^{-lambda^2/2q^2} / (2 sqrt(2 pi)) - (q/2)(1 + lambda^2/q^2) Q(lambda/q) + q/4,
/// evaluated as written. This is one half of the expected proximal value
/// E[min_x q/2 (x - Z)^2 + lambda |x|] over Z ~ N(0, 1).
inline double f_scalar(double q, double lambda) {
  require(q > 0 && std::isfinite(q), ErrorCode::invalid_argument, "f_scalar: q must be > 0");
  const double r = lambda / q;
  return lambda * std::exp(-0.5 * r * r) / (2.0 * std::sqrt(2.0 * std::numbers::pi)) -
         0.5 * q * (1.0 + r * r) * q_function(r) + 0.25 * q;
}

/// How the expectation term uses F.
enum class ExpectationConvention {
  proximal,  // 2 F, the exact expected proximal value (default)
  single     // F alone
};

/// Denominator of the -gamma beta^2 term.
enum class QuadraticTerm {
  half,   // -gamma beta^2 / 2 (default)
  over_p  // -gamma beta^2 / p
};

struct ObjectiveOptions {
  ExpectationConvention expectation = ExpectationConvention::proximal;
  QuadraticTerm quadratic = QuadraticTerm::half;
};

namespace detail {

inline double f_or_zero(double q, double lambda) { return q > 0 ? f_scalar(q, lambda) : 0.0; }

}  // namespace detail

/// p beta (gamma - 1)/2 + gamma sigma2 beta / (2p) - gamma beta^2 / 2
///   + c [k sqrt(1+p^2) F(beta sqrt(1+p^2) / p) + (1-k) p F(beta)], c = 2 by default.
inline double saddle_objective(double p, double beta, const AsymptoticProblem& prob,
                               const ObjectiveOptions& opt = {}) {
  require(p > 0, ErrorCode::invalid_argument, "saddle_objective: p must be > 0");
  const double g = prob.gamma, k = prob.k_frac, lam = prob.lambda;
  const double c = opt.expectation == ExpectationConvention::proximal ? 2.0 : 1.0;
  const double s = std::sqrt(1.0 + p * p);
  const double e_term =
      c * (k * s * detail::f_or_zero(beta * s / p, lam) + (1.0 - k) * p * detail::f_or_zero(beta, lam));
  const double quad = opt.quadratic == QuadraticTerm::half ? g * beta * beta / 2.0
                                                               : g * beta * beta / p;
  return p * beta * (g - 1.0) / 2.0 + g * prob.sigma2 * beta / (2.0 * p) - quad + e_term;
}

/// E[a_hat^2] = 2(p^2 + lambda^2 p^2/beta^2) Q(lambda/beta)
///              - 2 lambda p^2 / (beta sqrt(2 pi)) exp(-lambda^2 / 2 beta^2).
inline double predicted_second_moment(double p_hat, double beta_hat, double lambda) {
  require(p_hat > 0, ErrorCode::invalid_argument, "predicted_second_moment: p_hat must be > 0");
  require(beta_hat > 0, ErrorCode::invalid_argument,
          "predicted_second_moment: beta_hat must be > 0");
  const double r = lambda / beta_hat, p2 = p_hat * p_hat;
  return 2.0 * (p2 + r * r * p2) * q_function(r) -
         2.0 * lambda * p2 / (beta_hat * std::sqrt(2.0 * std::numbers::pi)) * std::exp(-0.5 * r * r);
}

/// Mean squared error of soft thresholding at eps applied to alpha + p Z,
/// with alpha ~ N(0, alpha^2) collapsed into the variance:
///   J = alpha^2 + 2(p^2 + eps^2 - alpha^2) Q(eps/s) - 2 eps s / sqrt(2 pi) exp(-eps^2 / 2 s^2),
///   s = sqrt(alpha^2 + p^2).
inline double j_function(double eps, double p, double alpha) {
  const double s2 = alpha * alpha + p * p;
  const double s = std::sqrt(s2);
  require(s > 0, ErrorCode::invalid_argument, "j_function: alpha^2 + p^2 must be > 0");
  return alpha * alpha + 2.0 * (p * p + eps * eps - alpha * alpha) * q_function(eps / s) -
         2.0 * eps * s / std::sqrt(2.0 * std::numbers::pi) * std::exp(-eps * eps / (2.0 * s2));
}

/// E[(a_hat - a0)^2] = k J(eps, p, 1) + (1 - k) J(eps, p, 0), eps = lambda p / beta.
inline double predicted_mse(double p_hat, double beta_hat, double lambda, double k_frac) {
  require(p_hat > 0 && beta_hat > 0, ErrorCode::invalid_argument,
          "predicted_mse: p_hat and beta_hat must be > 0");
  const double eps = lambda * p_hat / beta_hat;
  return k_frac * j_function(eps, p_hat, 1.0) + (1.0 - k_frac) * j_function(eps, p_hat, 0.0);
}

/// Second moment for the mixture prior: soft thresholding of N(0, 1 + p^2)
/// with probability k and of N(0, p^2) otherwise. Equals
/// predicted_second_moment at k = 0.
inline double predicted_second_moment_mixture(double p_hat, double beta_hat, double lambda,
                                              double k_frac) {
  require(p_hat > 0 && beta_hat > 0, ErrorCode::invalid_argument,
          "predicted_second_moment_mixture: p_hat and beta_hat must be > 0");
  const double eps = lambda * p_hat / beta_hat;
  return k_frac * j_function(eps, std::sqrt(1.0 + p_hat * p_hat), 0.0) +
         (1.0 - k_frac) * j_function(eps, p_hat, 0.0);
}

struct GoldenResult {
  double x = 0.0;
  double fx = 0.0;
};

/// Golden-section minimisation of a unimodal function on [lo, hi]; `tol` is
/// relative to the interval's magnitude once that exceeds 1.
inline GoldenResult golden_section_min(const std::function<double(double)>& f, double lo, double hi,
                                       double tol = 1e-10) {
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - invphi * (b - a), d = a + invphi * (b - a);
  double fc = f(c), fd = f(d);
  for (int it = 0; it < 400 && b - a > tol * std::max(1.0, std::abs(a) + std::abs(b)); ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - invphi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + invphi * (b - a);
      fd = f(d);
    }
  }
  const double x = 0.5 * (a + b);
  return {x, f(x)};
}

/// Minimises on an interval that starts at (lo, hi) and is expanded by
/// halving lo / doubling hi while the minimiser sits at an edge. If the upper
/// edge passes `limit` with the objective still falling and `allow_unbounded`
/// is set, returns fx = -inf; otherwise a failed expansion throws.
inline GoldenResult bracketed_min(const std::function<double(double)>& f, const std::string& what,
                                  double lo = 1e-3, double hi = 10.0, double tol = 1e-10,
                                  bool allow_unbounded = false, double limit = 1e8) {
  while (true) {
    GoldenResult r = golden_section_min(f, lo, hi, tol);
    const double margin = 1e-6 * (hi - lo);
    const bool at_hi = r.x > hi - margin, at_lo = r.x < lo + std::min(margin, 1e-3 * lo);
    if (!at_hi && !at_lo) return r;
    if ((at_hi && hi >= limit) || (at_lo && lo <= 1.0 / limit)) {
      if (at_hi && allow_unbounded && f(2.0 * hi) < r.fx)
        return {std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
      throw Error(ErrorCode::solver, what + ": bracket expansion failed (interval [" +
                                         std::to_string(lo) + ", " + std::to_string(hi) + "])");
    }
    if (at_hi) hi *= 2.0;
    if (at_lo) lo *= 0.5;
  }
}

/// max over beta >= 0 of min over p > 0 of the saddle objective, followed by
/// the closed-form predictions at (p_hat, beta_hat).
inline AsymptoticSolution saddle_solve(const AsymptoticProblem& prob,
                                       const ObjectiveOptions& opt = {}) {
  prob.validate();
  auto inner = [&](double beta) {
    return bracketed_min([&](double p) { return saddle_objective(p, beta, prob, opt); },
                         "saddle_solve inner (beta = " + std::to_string(beta) + ")", 1e-3, 10.0,
                         1e-10, true);
  };
  // For gamma < 1 the inner problem is unbounded below once beta is large;
  // pull the outer bracket back inside the bounded region.
  double beta_hi = 10.0;
  while (!std::isfinite(inner(beta_hi).fx)) {
    beta_hi *= 0.5;
    require(beta_hi > 1e-2, ErrorCode::solver, "saddle_solve: inner problem unbounded for all beta");
  }
  const GoldenResult outer = bracketed_min([&](double beta) { return -inner(beta).fx; },
                                           "saddle_solve outer", 1e-3, beta_hi);
  AsymptoticSolution s;
  s.beta_hat = outer.x;
  s.p_hat = inner(s.beta_hat).x;

  const double h = 1e-5;
  auto phi = [&](double p, double b) { return saddle_objective(p, b, prob, opt); };
  s.grad_p = (phi(s.p_hat + h, s.beta_hat) - phi(s.p_hat - h, s.beta_hat)) / (2 * h);
  s.grad_beta = (phi(s.p_hat, s.beta_hat + h) - phi(s.p_hat, s.beta_hat - h)) / (2 * h);
  require(std::abs(s.grad_p) <= 1e-6 && std::abs(s.grad_beta) <= 1e-6, ErrorCode::solver,
          "saddle_solve: not stationary at p = " + std::to_string(s.p_hat) + ", beta = " +
              std::to_string(s.beta_hat) + " (dp = " + std::to_string(s.grad_p) +
              ", dbeta = " + std::to_string(s.grad_beta) + ")");
  s.second_moment = predicted_second_moment_mixture(s.p_hat, s.beta_hat, prob.lambda, prob.k_frac);
  s.mse = predicted_mse(s.p_hat, s.beta_hat, prob.lambda, prob.k_frac);
  s.residual = s.beta_hat * s.beta_hat;
  return s;
}

struct MonteCarloResult {
  double m2 = 0.0, m2_stderr = 0.0;
  double mse = 0.0, mse_stderr = 0.0;
  double residual = 0.0;  // mean ||z - D a_hat||^2 / m
  int nonconverged = 0;   // trials whose solver did not converge
};

/// Direct simulation of the finite LASSO, one derived seed per trial.
inline MonteCarloResult monte_carlo_lasso(const AsymptoticProblem& prob, Index n, int trials,
                                          std::uint64_t seed) {
  prob.validate();
  require(n >= 50, ErrorCode::invalid_argument, "monte_carlo_lasso: n must be >= 50");
  require(trials >= 1, ErrorCode::invalid_argument, "monte_carlo_lasso: trials must be >= 1");
  const Index m = std::max<Index>(1, Index(std::llround(prob.gamma * double(n))));
  std::vector<double> m2(static_cast<std::size_t>(trials)), mse(static_cast<std::size_t>(trials)), res(static_cast<std::size_t>(trials));
  std::vector<char> conv(std::size_t(trials), 1);
  sparse::ElasticNetParams p;
  p.lambda = prob.lambda;
  p.lambda_prime = 0.0;
  p.tol = 1e-12;
  p.max_iters = 50000;

  parallel_for(std::size_t(trials), [&](std::size_t t) {
    std::mt19937_64 rng(mix_seed(seed, t));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Mat D(m, n);
    const double sd = 1.0 / std::sqrt(double(m));
    for (Index j = 0; j < n; ++j)
      for (Index i = 0; i < m; ++i) D(i, j) = sd * normal(rng);
    Vec a0 = Vec::Zero(n);
    for (Index j = 0; j < n; ++j) {
      const bool on = unif(rng) < prob.k_frac;
      const double v = normal(rng);
      if (on) a0[j] = v;
    }
    Vec z = D * a0;
    const double noise_sd = std::sqrt(prob.sigma2);
    for (Index i = 0; i < m; ++i) z[i] += noise_sd * normal(rng);

    const Mat gram = D.transpose() * D;
    const Vec dtz = D.transpose() * z;
    const double lip = sparse::lipschitz_constant(gram, 0.0);
    const auto code = sparse::fista_solve(gram, dtz, z.squaredNorm(), lip, p,
                                          sparse::SignConstraint::free);
    conv[t] = code.converged ? 1 : 0;
    const Vec& a = code.coeffs;
    m2[t] = a.squaredNorm() / double(n);
    mse[t] = (a - a0).squaredNorm() / double(n);
    res[t] = (z - D * a).squaredNorm() / double(m);
  });

  auto mean_se = [&](const std::vector<double>& v, double& mean, double& se) {
    double s = 0.0;
    for (double x : v) s += x;
    mean = s / double(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    se = v.size() > 1 ? std::sqrt(ss / double(v.size() - 1) / double(v.size())) : 0.0;
  };
  MonteCarloResult out;
  mean_se(m2, out.m2, out.m2_stderr);
  mean_se(mse, out.mse, out.mse_stderr);
  double se_unused = 0.0;
  mean_se(res, out.residual, se_unused);
  for (char c : conv) out.nonconverged += c ? 0 : 1;
  return out;
}

struct SweepRow {
  AsymptoticProblem prob;
  AsymptoticSolution predicted;
  MonteCarloResult mc;
};

inline constexpr const char* kSweepCsvHeader =
    "gamma,sigma2,lambda,k,predicted_m2,mc_m2,mc_stderr,predicted_mse,mc_mse";

/// Cartesian sweep; the Monte Carlo seed of each grid point is derived from
/// `seed` and the point's position.
inline std::vector<SweepRow> sweep(const std::vector<double>& gammas,
                                   const std::vector<double>& sigma2s, double lambda,
                                   const std::vector<double>& ks, Index n, int trials,
                                   std::uint64_t seed) {
  std::vector<SweepRow> rows;
  std::uint64_t point = 0;
  for (double g : gammas)
    for (double s2 : sigma2s)
      for (double k : ks) {
        SweepRow r;
        r.prob = {g, s2, lambda, k};
        r.predicted = saddle_solve(r.prob);
        r.mc = monte_carlo_lasso(r.prob, n, trials, mix_seed(seed, point++));
        rows.push_back(r);
      }
  return rows;
}

}  // namespace ddl::asym
