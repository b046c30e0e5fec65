#pragma once

// Architecture construction, initialisation and the projected-SGD training
// loop over the dictionary hierarchy and classifier.

#include "ddl/autodiff.hpp"
#include "ddl/classifier.hpp"
#include "ddl/datasets.hpp"
#include "ddl/network.hpp"

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace ddl {

struct HyperParams {
  double lambda = 0.1;
  double lambda_prime = 0.1;
  double lambda_c = 0.01;
  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

struct TrainConfig {
  double eta = 0.05;
  int epochs = 10;
  Index batch_size = 64;
  std::uint64_t seed = 0;
  double lr_decay = 0.98;
  std::vector<HyperParams> grid;
  /// Evaluate on at most this many held-out images per epoch (0 = all).
  Index eval_limit = 0;

  void validate() const {
    require(eta > 0 && std::isfinite(eta), ErrorCode::config, "eta must be > 0");
    require(epochs >= 0, ErrorCode::config, "epochs must be >= 0");
    require(batch_size >= 1, ErrorCode::config, "batch_size must be >= 1");
    require(lr_decay > 0 && lr_decay <= 1, ErrorCode::config, "lr_decay must be in (0, 1]");
    require(eval_limit >= 0, ErrorCode::config, "eval_limit must be >= 0");
  }
};

struct ArchitectureSpec {
  GridGeometry image_shape{1, 28, 28};
  WindowSpec input_window{1, 1};
  std::array<Index, 4> widths{10, 20, 30, 40};
  /// Regroup applied after the last layer of each section.
  std::array<WindowSpec, 4> section_windows{};
  /// 15 for the full model; fewer truncates, more appends blocks of four.
  int num_layers = 15;
  int num_classes = 10;
  HyperParams hyper;
  bool batch_norm = true;
};

/// Atom counts: sections 1-3 are (M, 2M, 4M, M), section 4 is (M4, 2M4, 4M4),
/// followed by (M4, M4, 2M4, 4M4) extension blocks.
inline std::vector<Index> atom_sequence(const std::array<Index, 4>& w, int num_layers) {
  for (Index m : w)
    require(m >= 1, ErrorCode::invalid_argument, "section widths must be >= 1");
  require(num_layers >= 1, ErrorCode::invalid_argument, "num_layers must be >= 1");
  std::vector<Index> seq;
  for (int s = 0; s < 3; ++s)
    for (Index f : {1, 2, 4, 1}) seq.push_back(f * w[std::size_t(s)]);
  for (Index f : {1, 2, 4}) seq.push_back(f * w[3]);
  while (int(seq.size()) < num_layers)
    for (Index f : {1, 1, 2, 4}) seq.push_back(f * w[3]);
  seq.resize(static_cast<std::size_t>(num_layers));
  return seq;
}

/// Index (0-based) of the section each layer belongs to; extension layers
/// report 4.
inline int layer_section(int layer) {
  if (layer < 12) return layer / 4;
  return layer < 15 ? 3 : 4;
}

inline bool is_section_end(int layer) {
  return layer == 3 || layer == 7 || layer == 11 || layer == 14;
}

/// Layer specs without weights. Throws a geometry error naming the first
/// layer whose window does not fit.
inline ModelState build_architecture(const ArchitectureSpec& a) {
  const auto atoms = atom_sequence(a.widths, a.num_layers);
  require(a.num_classes >= 2, ErrorCode::invalid_argument, "num_classes must be >= 2");
  ModelState m;
  m.image_shape = a.image_shape;
  m.input_window = a.input_window;
  std::vector<LayerSpec> specs;
  for (int r = 0; r < a.num_layers; ++r) {
    LayerSpec s;
    s.num_atoms = atoms[std::size_t(r)];
    s.window = is_section_end(r) ? a.section_windows[std::size_t(layer_section(r))]
                                 : WindowSpec{1, 1};
    s.enet.lambda = a.hyper.lambda;
    s.enet.lambda_prime = a.hyper.lambda_prime;
    s.enet.validate();
    s.batch_norm = a.batch_norm;
    specs.push_back(s);
  }
  const GeometryChain chain = geometry_chain(a.image_shape, a.input_window, specs);
  for (std::size_t r = 0; r < specs.size(); ++r) {
    Layer l;
    l.spec = specs[r];
    l.dict.atoms = Mat::Zero(chain.layer_inputs[r].channels, specs[r].num_atoms);
    m.layers.push_back(std::move(l));
  }
  m.classifier.weights = Mat::Zero(a.num_classes, chain.feature_dim());
  m.classifier.lambda_c = a.hyper.lambda_c;
  return m;
}

/// Gaussian dictionaries projected to unit columns and a uniform
/// +-1/sqrt(feature_dim) classifier, all driven by `seed`.
inline ModelState init_model(ModelState m, std::uint64_t seed) {
  m.rng.seed(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& l : m.layers) {
    for (Index i = 0; i < l.dict.atoms.size(); ++i) l.dict.atoms.data()[i] = normal(m.rng);
    l.dict = project_unit_columns(l.dict, m.rng);
    l.running_scale.resize(0);
  }
  Mat& W = m.classifier.weights;
  const double bound = 1.0 / std::sqrt(double(std::max<Index>(1, W.cols())));
  std::uniform_real_distribution<double> unif(-bound, bound);
  for (Index i = 0; i < W.size(); ++i) W.data()[i] = unif(m.rng);
  m.epoch = 0;
  m.version = 0;
  return m;
}

/// One projected-SGD step on a batch; returns the pre-update loss. With
/// eta == 0 the model is left untouched.
inline double train_step(ModelState& m, const Mat& images, const std::vector<int>& labels,
                         double eta) {
  require(images.cols() >= 1, ErrorCode::invalid_argument, "train_step: empty batch");
  require(Index(labels.size()) == images.cols(), ErrorCode::count_mismatch,
          "train_step: " + std::to_string(labels.size()) + " labels for " +
              std::to_string(images.cols()) + " images");
  ForwardResult fr = forward(m, images, {NormMode::batch, nullptr});
  const Mat y = label_matrix(labels, m.classifier.num_classes());
  LossAndGrads lg = loss_and_grads(m.classifier, fr.features, y);
  require(std::isfinite(lg.loss), ErrorCode::non_finite,
          "train_step: loss is not finite (epoch " + std::to_string(m.epoch) + ", version " +
              std::to_string(m.version) + ")");
  if (eta == 0.0) return lg.loss;

  const auto grads = backward(m, fr.cache, lg.d_features);
  m.classifier.weights -= eta * lg.d_weights;
  for (std::size_t r = 0; r < m.layers.size(); ++r) {
    Dictionary d{m.layers[r].dict.atoms - eta * grads[r].d_dict};
    require(d.atoms.allFinite(), ErrorCode::non_finite,
            "train_step: layer " + std::to_string(r + 1) + " dictionary update is not finite");
    m.layers[r].dict = project_unit_columns(d, m.rng);
  }
  update_running_scales(m, fr.cache);
  ++m.version;
  return lg.loss;
}

inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  require(predicted.size() == truth.size() && !truth.empty(), ErrorCode::count_mismatch,
          "accuracy: prediction/label count mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i] ? 1 : 0;
  return double(hit) / double(truth.size());
}

inline double evaluate(const ModelState& m, const LabeledImageSet& data, Index limit = 0) {
  const LabeledImageSet s = limit > 0 && limit < data.size() ? head(data, limit) : data;
  return accuracy(predict(m, s.images), s.labels);
}

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double test_acc = 0.0;
};

using MetricsSink = std::function<void(const EpochMetrics&)>;

/// Runs cfg.epochs epochs of shuffled mini-batch training (shuffling draws
/// from the model RNG) with eta * lr_decay^epoch as step size.
inline std::vector<EpochMetrics> run_training(ModelState& m, const LabeledImageSet& train,
                                              const LabeledImageSet& test, const TrainConfig& cfg,
                                              const MetricsSink& sink = {}) {
  cfg.validate();
  validate(train);
  std::vector<EpochMetrics> log;
  for (int e = 0; e < cfg.epochs; ++e) {
    const double eta = cfg.eta * std::pow(cfg.lr_decay, double(m.epoch));
    const auto batches = batch_iter(train.size(), cfg.batch_size, m.rng(), m.epoch);
    double loss_sum = 0.0;
    for (const auto& idx : batches) {
      Mat imgs(train.images.rows(), Index(idx.size()));
      std::vector<int> labels;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        imgs.col(Index(i)) = train.images.col(idx[i]);
        labels.push_back(train.labels[std::size_t(idx[i])]);
      }
      loss_sum += train_step(m, imgs, labels, eta);
    }
    ++m.epoch;
    EpochMetrics em;
    em.epoch = int(m.epoch);
    em.train_loss = loss_sum / double(batches.size());
    em.test_acc = evaluate(m, test, cfg.eval_limit);
    log.push_back(em);
    if (sink) sink(em);
  }
  return log;
}

/// base * factor^i for i in [0, count).
inline std::vector<double> exponential_grid(double base, double factor, int count) {
  std::vector<double> v;
  for (int i = 0; i < count; ++i) v.push_back(base * std::pow(factor, double(i)));
  return v;
}

inline std::vector<HyperParams> hyper_grid(const std::vector<double>& lambdas,
                                           const std::vector<double>& lambda_primes,
                                           const std::vector<double>& lambda_cs) {
  std::vector<HyperParams> g;
  for (double l : lambdas)
    for (double lp : lambda_primes)
      for (double lc : lambda_cs) g.push_back({l, lp, lc});
  return g;
}

struct GridResult {
  HyperParams params;
  double mean_accuracy = 0.0;
};

/// K-fold cross-validation over cfg.grid; returns one row per grid point and
/// writes the best (first on ties) to `best`.
inline std::vector<GridResult> grid_search(const ArchitectureSpec& arch,
                                           const LabeledImageSet& data, const TrainConfig& cfg,
                                           HyperParams& best, int folds = 5) {
  require(!cfg.grid.empty(), ErrorCode::config, "grid_search: empty grid");
  require(folds >= 2 && data.size() >= folds, ErrorCode::invalid_argument,
          "grid_search: need >= 2 folds and at least one sample per fold");
  const auto order = batch_iter(data.size(), data.size(), cfg.seed, 0).front();
  std::vector<GridResult> out;
  double best_acc = -1.0;
  for (const auto& hp : cfg.grid) {
    ArchitectureSpec a = arch;
    a.hyper = hp;
    double acc_sum = 0.0;
    for (int f = 0; f < folds; ++f) {
      std::vector<Index> tr, va;
      for (std::size_t i = 0; i < order.size(); ++i)
        (int(i % std::size_t(folds)) == f ? va : tr).push_back(order[i]);
      ModelState m = init_model(build_architecture(a), mix_seed(cfg.seed, std::uint64_t(f)));
      const LabeledImageSet tr_set = subset(data, tr), va_set = subset(data, va);
      TrainConfig c = cfg;
      c.eval_limit = 1;
      run_training(m, tr_set, va_set, c);
      acc_sum += evaluate(m, va_set);
    }
    GridResult g{hp, acc_sum / folds};
    out.push_back(g);
    if (g.mean_accuracy > best_acc) {
      best_acc = g.mean_accuracy;
      best = hp;
    }
  }
  return out;
}

}  // namespace ddl
