#pragma once

// Implicit differentiation through each layer's sparse-coding problem.
//
// On the active set L of a*, stationarity reads
//   (D_L^T D_L + lambda' I) a*_L = D_L^T x - lambda 1,
// so for an upstream gradient g = dLoss/da*:
//   beta_L = (D_L^T D_L + lambda' I)^{-1} g_L,  beta off L = 0
//   dLoss/dD = -D beta a*^T + (x - D a*) beta^T
//   dLoss/dx = D beta
// Batch-norm scales are treated as constants.

#include "ddl/classifier.hpp"
#include "ddl/network.hpp"

#include <cmath>
#include <vector>

namespace ddl {

/// beta from the Gram matrix; `active` sorted, `grad_a` of length k.
inline Vec beta_from_gram(const Mat& gram, const std::vector<Index>& active, const Vec& grad_a,
                          double lambda_prime) {
  const Index k = gram.rows();
  require(grad_a.size() == k, ErrorCode::dimension_mismatch,
          "beta: gradient has " + std::to_string(grad_a.size()) + " entries, expected " +
              std::to_string(k));
  Vec beta = Vec::Zero(k);
  const Index s = Index(active.size());
  if (s == 0) return beta;
  Mat sys(s, s);
  Vec rhs(s);
  for (Index i = 0; i < s; ++i) {
    for (Index j = 0; j < s; ++j) sys(i, j) = gram(active[i], active[j]);
    sys(i, i) += lambda_prime;
    rhs[i] = grad_a[active[i]];
  }
  Eigen::LLT<Mat> llt(sys);
  require(llt.info() == Eigen::Success, ErrorCode::solver,
          "beta: active-set system is not positive definite");
  const Vec z = llt.solve(rhs);
  for (Index i = 0; i < s; ++i) beta[active[i]] = z[i];
  return beta;
}

inline Vec beta_vector(const Dictionary& d, const sparse::SparseCode& code, const Vec& grad_a,
                       double lambda_prime) {
  return beta_from_gram(d.atoms.transpose() * d.atoms, code.active_set, grad_a, lambda_prime);
}

inline Mat grad_dictionary(const Dictionary& d, const Vec& x, const sparse::SparseCode& code,
                           const Vec& beta) {
  const Mat& D = d.atoms;
  require(x.size() == D.rows() && code.coeffs.size() == D.cols() && beta.size() == D.cols(),
          ErrorCode::dimension_mismatch,
          "grad_dictionary: D is " + shape_str(D.rows(), D.cols()) + ", x " +
              std::to_string(x.size()) + ", a " + std::to_string(code.coeffs.size()) + ", beta " +
              std::to_string(beta.size()));
  return -(D * beta) * code.coeffs.transpose() + (x - D * code.coeffs) * beta.transpose();
}

inline Vec grad_input(const Dictionary& d, const Vec& beta) { return d.atoms * beta; }

struct LayerGradients {
  Mat d_dict;   // m_r x k_r
  Mat d_input;  // m_r x (cells * batch): dLoss/dX^(r-1) per input cell
};

/// Backpropagates dLoss/dX^(s) (feature_dim x batch) through every layer,
/// using the active sets stored in `cache`. Returned gradients are in layer
/// order (index 0 = first layer).
inline std::vector<LayerGradients> backward(const ModelState& m, const ForwardCache& cache,
                                            const Mat& grad_top) {
  require(cache.model_version == m.version && cache.layers.size() == m.layers.size(),
          ErrorCode::stale_cache, "backward: cache was produced for a different model state");
  require(grad_top.rows() == cache.final_geometry.size() && grad_top.cols() == cache.batch,
          ErrorCode::dimension_mismatch,
          "backward: grad_top is " + shape_str(grad_top.rows(), grad_top.cols()) + ", expected " +
              shape_str(cache.final_geometry.size(), cache.batch));
  const Index batch = cache.batch;
  std::vector<LayerGradients> out(m.layers.size());
  Mat cot = detail::features_to_blocks(grad_top, cache.final_geometry);

  for (std::size_t rr = m.layers.size(); rr-- > 0;) {
    const Layer& layer = m.layers[rr];
    const LayerCache& lc = cache.layers[rr];
    const Mat& D = layer.dict.atoms;
    Mat g = detail::regroup_adjoint_blocks(cot, lc.code_geometry, layer.spec.window, batch);
    g = lc.scale.cwiseInverse().asDiagonal() * g;
    const Index n = g.cols();
    Mat beta(D.cols(), n);
    parallel_for(std::size_t(n), [&](std::size_t c) {
      beta.col(Index(c)) = beta_from_gram(lc.gram, lc.active[c], g.col(Index(c)),
                                          layer.spec.enet.lambda_prime);
    });
    const Mat residual = lc.inputs - D * lc.codes;
    out[rr].d_dict = -D * (beta * lc.codes.transpose()) + residual * beta.transpose();
    out[rr].d_input = D * beta;
    cot = out[rr].d_input;
  }
  return out;
}

/// dLoss/dimage (flattened, channel-major) from the first layer's d_input, or
/// directly from grad_top when the model has no dictionary layers.
inline Mat image_gradients(const ModelState& m, const ForwardCache& cache,
                           const std::vector<LayerGradients>& grads, const Mat& grad_top) {
  GridGeometry pg = window_output(m.image_shape, m.input_window);
  const Mat blocks = grads.empty() ? detail::features_to_blocks(grad_top, cache.final_geometry)
                                   : grads.front().d_input;
  Mat out(m.image_shape.size(), cache.batch);
  for (Index i = 0; i < cache.batch; ++i) {
    FeatureGrid cot(pg, blocks.middleCols(i * pg.cells(), pg.cells()));
    out.col(i) = patchify_adjoint(cot, m.image_shape, m.input_window);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradientSet {
  std::vector<Mat> d_dicts;
  Mat d_weights;
  double loss = 0.0;
};

/// Loss and analytic gradients with batch-norm scales frozen to `scales`.
inline GradientSet analytic_gradients(const ModelState& m, const Mat& images,
                                      const std::vector<int>& labels,
                                      const std::vector<Vec>& scales) {
  ForwardOptions opt{NormMode::frozen, &scales};
  ForwardResult fr = forward(m, images, opt);
  const Mat y = label_matrix(labels, m.classifier.num_classes());
  LossAndGrads lg = loss_and_grads(m.classifier, fr.features, y);
  GradientSet gs;
  gs.loss = lg.loss;
  gs.d_weights = lg.d_weights;
  for (auto& lgr : backward(m, fr.cache, lg.d_features)) gs.d_dicts.push_back(std::move(lgr.d_dict));
  return gs;
}

struct ParameterCheck {
  std::string parameter;  // "D1", "D2", ..., "W"
  Index row = 0, col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool skipped = false;
};

struct FdReport {
  std::vector<ParameterCheck> entries;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  double skip_fraction = 0.0;
  std::size_t checked = 0, skipped = 0;
  std::vector<ParameterCheck> flagged;  // rel_error above threshold
  bool passed(double threshold) const { return max_rel_error <= threshold; }
};

inline double relative_error(double a, double b, double floor = 1e-7) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct FdOptions {
  double h = 1e-5;
  double threshold = 1e-3;
  std::size_t max_parameters = 500;
  /// Solver tolerance used for all forward passes of the check.
  double solver_tol = 1e-12;
  int solver_max_iters = 20000;
};

namespace detail {

struct Signature {
  std::vector<std::vector<std::vector<Index>>> active;
  std::vector<char> relu;
};

inline Signature signature(const ModelState& m, const Mat& images, const std::vector<Vec>& scales,
                           double& loss, const Mat& y) {
  ForwardOptions opt{NormMode::frozen, &scales};
  ForwardResult fr = forward(m, images, opt);
  Signature s;
  for (auto& l : fr.cache.layers) s.active.push_back(l.active);
  const Mat z = pre_activation(m.classifier, fr.features);
  for (Index i = 0; i < z.size(); ++i) s.relu.push_back(z.data()[i] > 0 ? 1 : 0);
  loss = loss_and_grads(m.classifier, fr.features, y).loss;
  return s;
}

inline bool same_signature(const Signature& a, const Signature& b) {
  return a.active == b.active && a.relu == b.relu;
}

}  // namespace detail

/// Central differences of the end-to-end loss against the analytic gradients.
/// Parameters whose +-h perturbation changes any active set or ReLU mask are
/// skipped. `tamper` (tests only) may alter the analytic gradients first.
template <typename Tamper>
FdReport finite_difference_check(ModelState model, const Mat& images, const std::vector<int>& labels,
                                 const FdOptions& opt, Tamper&& tamper) {
  std::size_t nparams = std::size_t(model.classifier.weights.size());
  for (auto& l : model.layers) {
    nparams += std::size_t(l.dict.atoms.size());
    l.spec.enet.tol = opt.solver_tol;
    l.spec.enet.max_iters = opt.solver_max_iters;
  }
  require(nparams <= opt.max_parameters, ErrorCode::invalid_argument,
          "finite_difference_check: model has " + std::to_string(nparams) +
              " parameters, limit is " + std::to_string(opt.max_parameters));

  const ForwardResult base = forward(model, images, {NormMode::batch, nullptr});
  const std::vector<Vec> scales = cache_scales(base.cache);
  GradientSet an = analytic_gradients(model, images, labels, scales);
  tamper(an);
  const Mat y = label_matrix(labels, model.classifier.num_classes());
  double base_loss = 0.0;
  const detail::Signature base_sig = detail::signature(model, images, scales, base_loss, y);

  FdReport rep;
  double sum = 0.0;
  auto probe = [&](double& param, double analytic, const std::string& name, Index r, Index c) {
    const double saved = param;
    double lp = 0, lm = 0;
    param = saved + opt.h;
    const auto sp = detail::signature(model, images, scales, lp, y);
    param = saved - opt.h;
    const auto sm = detail::signature(model, images, scales, lm, y);
    param = saved;
    ParameterCheck pc;
    pc.parameter = name;
    pc.row = r;
    pc.col = c;
    pc.analytic = analytic;
    pc.numeric = (lp - lm) / (2.0 * opt.h);
    pc.skipped = !detail::same_signature(sp, base_sig) || !detail::same_signature(sm, base_sig);
    if (pc.skipped) {
      ++rep.skipped;
    } else {
      pc.rel_error = relative_error(pc.analytic, pc.numeric);
      ++rep.checked;
      sum += pc.rel_error;
      rep.max_rel_error = std::max(rep.max_rel_error, pc.rel_error);
      if (pc.rel_error > opt.threshold) rep.flagged.push_back(pc);
    }
    rep.entries.push_back(pc);
  };

  for (std::size_t r = 0; r < model.layers.size(); ++r) {
    Mat& D = model.layers[r].dict.atoms;
    for (Index j = 0; j < D.cols(); ++j)
      for (Index i = 0; i < D.rows(); ++i)
        probe(D(i, j), an.d_dicts[r](i, j), "D" + std::to_string(r + 1), i, j);
  }
  Mat& W = model.classifier.weights;
  for (Index j = 0; j < W.cols(); ++j)
    for (Index i = 0; i < W.rows(); ++i) probe(W(i, j), an.d_weights(i, j), "W", i, j);

  const std::size_t total = rep.checked + rep.skipped;
  rep.mean_rel_error = rep.checked ? sum / double(rep.checked) : 0.0;
  rep.skip_fraction = total ? double(rep.skipped) / double(total) : 0.0;
  return rep;
}

inline FdReport finite_difference_check(const ModelState& model, const Mat& images,
                                        const std::vector<int>& labels, const FdOptions& opt = {}) {
  return finite_difference_check(model, images, labels, opt, [](GradientSet&) {});
}

}  // namespace ddl
