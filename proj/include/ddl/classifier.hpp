#pragma once

// Linear + ReLU classification head with the squared loss
//   L = (1/n) (||Y - relu(W X)||_F^2 + lambda_c ||W||_F^2).
// The ReLU subgradient at 0 is taken as 0.

#include "ddl/core.hpp"

#include <cmath>
#include <vector>

namespace ddl {

struct ClassifierParams {
  Mat weights;  // num_classes x feature_dim
  double lambda_c = 0.0;

  Index num_classes() const { return weights.rows(); }
  Index feature_dim() const { return weights.cols(); }
};

/// One-hot (num_classes x n) matrix.
inline Mat label_matrix(const std::vector<int>& labels, Index num_classes) {
  Mat y = Mat::Zero(num_classes, Index(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < num_classes, ErrorCode::invalid_argument,
            "label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(num_classes) +
                ")");
    y(labels[i], Index(i)) = 1.0;
  }
  return y;
}

inline Mat pre_activation(const ClassifierParams& c, const Mat& features) {
  require(c.weights.cols() == features.rows(), ErrorCode::dimension_mismatch,
          "classifier: W is " + shape_str(c.weights.rows(), c.weights.cols()) +
              ", features are " + shape_str(features.rows(), features.cols()));
  return c.weights * features;
}

inline Mat predict_scores(const ClassifierParams& c, const Mat& features) {
  return pre_activation(c, features).cwiseMax(0.0);
}

/// argmax per column, ties to the lowest class index.
inline std::vector<int> argmax_labels(const Mat& scores) {
  std::vector<int> out(std::size_t(scores.cols()), 0);
  for (Index i = 0; i < scores.cols(); ++i) {
    int best = 0;
    for (Index c = 1; c < scores.rows(); ++c)
      if (scores(c, i) > scores(best, i)) best = int(c);
    out[std::size_t(i)] = best;
  }
  return out;
}

inline std::vector<int> predict_labels(const ClassifierParams& c, const Mat& features) {
  return argmax_labels(predict_scores(c, features));
}

struct LossAndGrads {
  double loss = 0.0;
  Mat d_weights;
  Mat d_features;
};

inline LossAndGrads loss_and_grads(const ClassifierParams& c, const Mat& features,
                                   const Mat& labels) {
  const Index n = features.cols();
  require(n >= 1, ErrorCode::invalid_argument, "loss_and_grads: empty batch");
  require(labels.rows() == c.num_classes() && labels.cols() == n, ErrorCode::dimension_mismatch,
          "loss_and_grads: Y is " + shape_str(labels.rows(), labels.cols()) + ", expected " +
              shape_str(c.num_classes(), n));
  const Mat z = pre_activation(c, features);
  const Mat phi = z.cwiseMax(0.0);
  const Mat mask = (z.array() > 0.0).cast<double>().matrix();
  const double inv_n = 1.0 / double(n);
  const Mat delta = ((phi - labels).array() * mask.array()).matrix();

  LossAndGrads out;
  out.loss = inv_n * ((labels - phi).squaredNorm() + c.lambda_c * c.weights.squaredNorm());
  out.d_weights = 2.0 * inv_n * delta * features.transpose() + 2.0 * c.lambda_c * inv_n * c.weights;
  out.d_features = 2.0 * inv_n * c.weights.transpose() * delta;
  return out;
}

}  // namespace ddl
