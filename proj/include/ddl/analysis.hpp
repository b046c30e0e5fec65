#pragma once

// Mutual-information profiling (KSG estimator) and robustness evaluation
// (DeepFool perturbations, budgeted fooling rates, random-noise curves).

#include "ddl/autodiff.hpp"
#include "ddl/network.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

namespace ddl {

// ---------------------------------------------------------------------------
// Mutual information

struct MIEstimate {
  double value = 0.0;  // nats
  int k_neighbors = 4;
  Index sample_count = 0;
};

inline constexpr Index kMaxMiDims = 8;

/// Projects samples (dim x n) onto at most `max_dims` leading principal
/// components and standardises every retained coordinate. Zero-variance
/// directions are dropped; throws when nothing varies.
inline Mat pca_standardize(const Mat& samples, Index max_dims = kMaxMiDims) {
  const Index d = samples.rows(), n = samples.cols();
  require(n >= 2, ErrorCode::invalid_argument, "pca: need at least two samples");
  const Mat centered = samples.colwise() - samples.rowwise().mean();
  Mat proj;
  if (d <= max_dims) {
    proj = centered;
  } else if (d <= n) {
    Eigen::SelfAdjointEigenSolver<Mat> es(centered * centered.transpose());
    const Mat basis = es.eigenvectors().rightCols(max_dims).rowwise().reverse();
    proj = basis.transpose() * centered;
  } else {
    // Gram-matrix route: right singular vectors scaled by singular values.
    Eigen::SelfAdjointEigenSolver<Mat> es(centered.transpose() * centered);
    const Index r = std::min(max_dims, n);
    const Mat v = es.eigenvectors().rightCols(r).rowwise().reverse();
    const Vec ev = es.eigenvalues().tail(r).reverse().cwiseMax(0.0);
    proj = (v * ev.cwiseSqrt().asDiagonal()).transpose();
  }
  std::vector<Index> keep;
  Vec sd(proj.rows());
  for (Index i = 0; i < proj.rows(); ++i) {
    sd[i] = std::sqrt(proj.row(i).squaredNorm() / double(n - 1));
    const double scale = std::max(1.0, centered.cwiseAbs().maxCoeff());
    if (sd[i] > 1e-12 * scale) keep.push_back(i);
  }
  require(!keep.empty(), ErrorCode::invalid_argument, "mutual information: samples are all identical");
  Mat out(Index(keep.size()), n);
  for (std::size_t i = 0; i < keep.size(); ++i)
    out.row(Index(i)) = proj.row(keep[i]) / sd[keep[i]];
  return out;
}

namespace detail {

/// digamma at positive integers: -gamma_E + H_{n-1}.
inline std::vector<double> digamma_table(Index n) {
  std::vector<double> t(std::size_t(n) + 1, 0.0);
  constexpr double euler = 0.57721566490153286061;
  t[1] = -euler;
  for (Index i = 2; i <= n; ++i) t[std::size_t(i)] = t[std::size_t(i) - 1] + 1.0 / double(i - 1);
  return t;
}

inline double max_abs_diff(const Mat& s, Index i, Index j) {
  double m = 0.0;
  for (Index r = 0; r < s.rows(); ++r) m = std::max(m, std::abs(s(r, i) - s(r, j)));
  return m;
}

}  // namespace detail

/// KSG estimator (type 1, max-norm) on samples stored as columns, after
/// PCA/standardisation of each side. Symmetric in (x, y) bit for bit.
inline MIEstimate ksg_mi(const Mat& samples_x, const Mat& samples_y, int k_neighbors = 4) {
  const Index n = samples_x.cols();
  require(samples_y.cols() == n, ErrorCode::count_mismatch,
          "ksg_mi: " + std::to_string(n) + " x samples vs " + std::to_string(samples_y.cols()) +
              " y samples");
  require(k_neighbors >= 1 && k_neighbors < n, ErrorCode::invalid_argument,
          "ksg_mi: need 1 <= k < sample count");
  const Mat x = pca_standardize(samples_x), y = pca_standardize(samples_y);
  const auto psi = detail::digamma_table(n + 1);

  std::vector<double> term(static_cast<std::size_t>(n));
  parallel_for(std::size_t(n), [&](std::size_t ii) {
    const Index i = Index(ii);
    std::vector<double> dx(static_cast<std::size_t>(n)), dy(static_cast<std::size_t>(n));
    std::vector<double> kth;  // k smallest joint distances, sorted
    kth.reserve(std::size_t(k_neighbors) + 1);
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      dx[std::size_t(j)] = detail::max_abs_diff(x, i, j);
      dy[std::size_t(j)] = detail::max_abs_diff(y, i, j);
      const double dz = std::max(dx[std::size_t(j)], dy[std::size_t(j)]);
      if (int(kth.size()) < k_neighbors || dz < kth.back()) {
        kth.insert(std::upper_bound(kth.begin(), kth.end(), dz), dz);
        if (int(kth.size()) > k_neighbors) kth.pop_back();
      }
    }
    const double eps = kth.back();
    Index nx = 0, ny = 0;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      nx += dx[std::size_t(j)] < eps ? 1 : 0;
      ny += dy[std::size_t(j)] < eps ? 1 : 0;
    }
    term[ii] = psi[std::size_t(nx + 1)] + psi[std::size_t(ny + 1)];
  });
  double mean = 0.0;
  for (double t : term) mean += t;
  mean /= double(n);
  MIEstimate est;
  est.value = psi[std::size_t(k_neighbors)] + psi[std::size_t(n)] - mean;
  est.k_neighbors = k_neighbors;
  est.sample_count = n;
  return est;
}

/// MI between the flattened input images and every layer's output X^(r).
inline std::vector<MIEstimate> layer_mi_profile(const ModelState& m, const Mat& images,
                                                int k_neighbors = 4) {
  std::vector<MIEstimate> out;
  for (const Mat& feats : layer_outputs(m, images))
    out.push_back(ksg_mi(images, feats, k_neighbors));
  return out;
}

// ---------------------------------------------------------------------------
// Perturbations

struct DeepFoolResult {
  Vec perturbation;  // applied step, including overshoot
  Vec boundary;      // accumulated linearised steps without overshoot
  int original_label = 0;
  int final_label = 0;
  int iterations = 0;
  bool flipped = false;
  bool tie = false;     // top score tied at the start; not perturbed
  bool failed = false;  // all class-difference gradients vanished
};

/// Pre-activation scores of one image and their input gradients (one column
/// per class), with batch-norm scales from the model's running averages and
/// active sets frozen at the current codes.
inline Mat class_input_gradients(const ModelState& m, const Vec& image, Vec& scores) {
  const Mat img = image;
  ForwardResult fr = forward(m, img, {NormMode::running, nullptr});
  scores = pre_activation(m.classifier, fr.features).col(0);
  const Index C = m.classifier.num_classes();
  Mat grads(image.size(), C);
  for (Index c = 0; c < C; ++c) {
    const Mat top = m.classifier.weights.row(c).transpose();
    const auto lg = backward(m, fr.cache, top);
    grads.col(c) = image_gradients(m, fr.cache, lg, top).col(0);
  }
  return grads;
}

namespace detail {

inline bool top_tied(const Vec& relu_scores, int label) {
  for (Index c = 0; c < relu_scores.size(); ++c)
    if (c != label && relu_scores[c] == relu_scores[label]) return true;
  return false;
}

}  // namespace detail

/// Multi-class DeepFool on the pre-activation scores: repeatedly steps to the
/// nearest linearised class boundary until the predicted label changes.
inline DeepFoolResult deepfool_perturbation(const ModelState& m, const Vec& image,
                                            int max_iter = 50, double overshoot = 0.02) {
  DeepFoolResult res;
  res.perturbation = Vec::Zero(image.size());
  res.boundary = Vec::Zero(image.size());
  Vec scores;
  Mat grads = class_input_gradients(m, image, scores);
  const Vec relu0 = scores.cwiseMax(0.0);
  res.original_label = argmax_labels(Mat(relu0)).front();
  res.final_label = res.original_label;
  if (detail::top_tied(relu0, res.original_label)) {
    res.tie = true;
    return res;
  }
  const int l = res.original_label;
  for (int it = 0; it < max_iter; ++it) {
    double best = std::numeric_limits<double>::infinity();
    Vec step;
    for (Index c = 0; c < scores.size(); ++c) {
      if (c == l) continue;
      const Vec w = grads.col(c) - grads.col(l);
      const double wn = w.norm();
      // differences at rounding level count as vanished
      if (!(wn > 1e-12 * (grads.col(c).norm() + grads.col(l).norm()))) continue;
      const double f = scores[c] - scores[l];
      const double dist = std::abs(f) / wn;
      if (dist < best) {
        best = dist;
        step = (std::abs(f) / (wn * wn)) * w;
      }
    }
    if (step.size() == 0) {
      res.failed = true;
      return res;
    }
    res.boundary += step;
    res.perturbation = (1.0 + overshoot) * res.boundary;
    res.iterations = it + 1;
    grads = class_input_gradients(m, image + res.perturbation, scores);
    res.final_label = argmax_labels(Mat(scores.cwiseMax(0.0))).front();
    if (res.final_label != l) {
      res.flipped = true;
      return res;
    }
  }
  return res;
}

struct PerturbationReport {
  double rho = 0.0;
  double fooling_rate = 0.0;
  double mean_perturbation_norm = 0.0;
  Index count = 0;
  Index fooled = 0;
};

enum class BudgetMode {
  clip,      // shrink perturbations whose norm exceeds the budget
  to_budget  // rescale every nonzero perturbation to exactly the budget
};

inline double mean_column_norm(const Mat& images) {
  require(images.cols() >= 1, ErrorCode::invalid_argument, "empty image set");
  return images.colwise().norm().mean();
}

/// Applies the norm budget rho * mean ||x|| to a perturbation.
inline Vec apply_budget(const Vec& v, double budget, BudgetMode mode) {
  const double nv = v.norm();
  if (!(nv > 0)) return Vec::Zero(v.size());
  if (mode == BudgetMode::to_budget || nv > budget) return v * (budget / nv);
  return v;
}

/// Fraction of images whose predicted label changes under the budgeted
/// perturbation. `perturbations` has one column (shared) or one per image.
/// `clean_labels` are the model's predictions on the unperturbed images.
inline PerturbationReport fooling_rate(const ModelState& m, const Mat& images,
                                       const std::vector<int>& clean_labels,
                                       const Mat& perturbations, double rho,
                                       BudgetMode mode = BudgetMode::clip) {
  require(images.cols() >= 1, ErrorCode::invalid_argument, "fooling_rate: empty dataset");
  require(rho >= 0, ErrorCode::invalid_argument, "fooling_rate: rho must be >= 0");
  require(perturbations.rows() == images.rows() &&
              (perturbations.cols() == 1 || perturbations.cols() == images.cols()),
          ErrorCode::dimension_mismatch, "fooling_rate: perturbation shape does not match images");
  const double budget = rho * mean_column_norm(images);
  Mat perturbed = images;
  double norm_sum = 0.0;
  for (Index i = 0; i < images.cols(); ++i) {
    const Vec v = apply_budget(perturbations.col(perturbations.cols() == 1 ? 0 : i), budget, mode);
    norm_sum += v.norm();
    perturbed.col(i) += v;
  }
  require(Index(clean_labels.size()) == images.cols(), ErrorCode::count_mismatch,
          "fooling_rate: clean label count does not match images");
  const auto& before = clean_labels;
  const auto after = predict(m, perturbed);
  PerturbationReport r;
  r.rho = rho;
  r.count = images.cols();
  for (std::size_t i = 0; i < before.size(); ++i) r.fooled += before[i] != after[i] ? 1 : 0;
  r.fooling_rate = double(r.fooled) / double(r.count);
  r.mean_perturbation_norm = norm_sum / double(r.count);
  return r;
}

inline PerturbationReport fooling_rate(const ModelState& m, const Mat& images,
                                       const Mat& perturbations, double rho,
                                       BudgetMode mode = BudgetMode::clip) {
  require(images.cols() >= 1, ErrorCode::invalid_argument, "fooling_rate: empty dataset");
  return fooling_rate(m, images, predict(m, images), perturbations, rho, mode);
}

/// Per-image DeepFool perturbations as columns (zero for ties/failures).
inline Mat deepfool_batch(const ModelState& m, const Mat& images, int max_iter = 50) {
  Mat v = Mat::Zero(images.rows(), images.cols());
  for (Index i = 0; i < images.cols(); ++i)
    v.col(i) = deepfool_perturbation(m, images.col(i), max_iter).perturbation;
  return v;
}

/// Shared perturbation: mean of per-image DeepFool perturbations projected to
/// the budget.
inline Vec shared_perturbation(const ModelState& m, const Mat& images, double rho,
                               int max_iter = 50) {
  const Vec mean = deepfool_batch(m, images, max_iter).rowwise().mean();
  return apply_budget(mean, rho * mean_column_norm(images), BudgetMode::clip);
}

/// Random-noise fooling curve: each trial draws one Gaussian direction and
/// scales it to every budget on the grid; rates are averaged over trials.
inline std::vector<PerturbationReport> noise_robustness_curve(const ModelState& m, const Mat& images,
                                                              const std::vector<double>& rhos,
                                                              int trials, std::uint64_t seed) {
  require(!rhos.empty(), ErrorCode::invalid_argument, "noise_robustness_curve: empty rho grid");
  require(trials >= 1, ErrorCode::invalid_argument, "noise_robustness_curve: trials must be >= 1");
  require(images.cols() >= 1, ErrorCode::invalid_argument, "noise_robustness_curve: empty dataset");
  const auto clean = predict(m, images);
  std::vector<PerturbationReport> out(rhos.size());
  for (std::size_t r = 0; r < rhos.size(); ++r) out[r].rho = rhos[r];
  for (int t = 0; t < trials; ++t) {
    std::mt19937_64 rng(mix_seed(seed, std::uint64_t(t)));
    std::normal_distribution<double> normal(0.0, 1.0);
    Vec u(images.rows());
    for (Index i = 0; i < u.size(); ++i) u[i] = normal(rng);
    for (std::size_t r = 0; r < rhos.size(); ++r) {
      const auto rep = fooling_rate(m, images, clean, u, rhos[r], BudgetMode::to_budget);
      out[r].fooling_rate += rep.fooling_rate / trials;
      out[r].mean_perturbation_norm += rep.mean_perturbation_norm / trials;
      out[r].count += rep.count;
      out[r].fooled += rep.fooled;
    }
  }
  return out;
}

}  // namespace ddl
