#pragma once

// Layer/model containers and the forward pass through the dictionary
// hierarchy: patchify -> [encode -> optional scale-only batch norm -> regroup]
// per layer -> flatten.

#include "ddl/classifier.hpp"
#include "ddl/core.hpp"
#include "ddl/patch_ops.hpp"
#include "ddl/sparse_coding.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ddl {

/// Synthesis dictionary; columns are atoms and are kept at unit l2 norm.
struct Dictionary {
  Mat atoms;  // input_dim x num_atoms

  Index input_dim() const { return atoms.rows(); }
  Index num_atoms() const { return atoms.cols(); }
};

/// Divides every column by its norm. Zero (or non-finite) columns are replaced
/// by a fresh Gaussian direction drawn from `rng`.
inline Dictionary project_unit_columns(const Dictionary& d, std::mt19937_64& rng) {
  Dictionary out = d;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index j = 0; j < out.atoms.cols(); ++j) {
    auto col = out.atoms.col(j);
    double nrm = col.norm();
    while (!(nrm > 0.0) || !std::isfinite(nrm)) {
      for (Index i = 0; i < col.size(); ++i) col[i] = normal(rng);
      nrm = col.norm();
    }
    col /= nrm;
  }
  return out;
}

inline Dictionary project_unit_columns(const Dictionary& d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return project_unit_columns(d, rng);
}

inline double max_column_norm_error(const Dictionary& d) {
  double worst = 0.0;
  for (Index j = 0; j < d.atoms.cols(); ++j)
    worst = std::max(worst, std::abs(d.atoms.col(j).norm() - 1.0));
  return worst;
}

struct LayerSpec {
  Index num_atoms = 1;
  /// Regroup applied to this layer's codes before the next layer.
  WindowSpec window{1, 1};
  sparse::ElasticNetParams enet;
  bool batch_norm = false;
};

struct Layer {
  LayerSpec spec;
  Dictionary dict;
  /// Running per-atom normalisation scales; empty until the first training batch.
  Vec running_scale;
};

struct ModelState {
  GridGeometry image_shape{1, 1, 1};
  WindowSpec input_window{1, 1};
  std::vector<Layer> layers;
  ClassifierParams classifier;
  std::mt19937_64 rng{0};
  std::uint64_t epoch = 0;
  /// Bumped by every parameter update; forward caches remember it.
  std::uint64_t version = 0;
};

/// Geometry of every layer's input grid plus the final (post-regroup) grid.
struct GeometryChain {
  std::vector<GridGeometry> layer_inputs;
  std::vector<GridGeometry> layer_codes;
  GridGeometry final_grid;
  Index feature_dim() const { return final_grid.size(); }
};

/// Validates the end-to-end geometry, naming the first failing layer.
inline GeometryChain geometry_chain(const GridGeometry& image_shape, const WindowSpec& input_window,
                                    const std::vector<LayerSpec>& specs,
                                    const std::vector<Index>* dict_rows = nullptr) {
  GeometryChain chain;
  GridGeometry g;
  try {
    g = window_output(image_shape, input_window);
  } catch (const Error& e) {
    throw Error(ErrorCode::geometry, std::string("input patching: ") + e.what());
  }
  for (std::size_t r = 0; r < specs.size(); ++r) {
    const std::string name = "layer " + std::to_string(r + 1);
    require(specs[r].num_atoms >= 1, ErrorCode::geometry, name + ": needs at least one atom");
    if (dict_rows)
      require((*dict_rows)[r] == g.channels, ErrorCode::geometry,
              name + ": dictionary has " + std::to_string((*dict_rows)[r]) +
                  " rows but its input vectors have " + std::to_string(g.channels));
    chain.layer_inputs.push_back(g);
    GridGeometry codes{specs[r].num_atoms, g.height, g.width};
    chain.layer_codes.push_back(codes);
    try {
      g = window_output(codes, specs[r].window);
    } catch (const Error& e) {
      throw Error(ErrorCode::geometry, name + ": " + e.what());
    }
  }
  chain.final_grid = g;
  return chain;
}

inline GeometryChain geometry_chain(const ModelState& m) {
  std::vector<LayerSpec> specs;
  std::vector<Index> rows;
  for (const auto& l : m.layers) {
    specs.push_back(l.spec);
    rows.push_back(l.dict.input_dim());
    require(l.dict.num_atoms() == l.spec.num_atoms, ErrorCode::geometry,
            "layer " + std::to_string(specs.size()) + ": dictionary has " +
                std::to_string(l.dict.num_atoms()) + " atoms, spec says " +
                std::to_string(l.spec.num_atoms));
  }
  GeometryChain chain = geometry_chain(m.image_shape, m.input_window, specs, &rows);
  require(m.classifier.weights.size() == 0 || m.classifier.feature_dim() == chain.feature_dim(),
          ErrorCode::geometry,
          "classifier expects " + std::to_string(m.classifier.feature_dim()) +
              " features, hierarchy produces " + std::to_string(chain.feature_dim()));
  return chain;
}

inline void validate_model(const ModelState& m) {
  geometry_chain(m);
  for (std::size_t r = 0; r < m.layers.size(); ++r) m.layers[r].spec.enet.validate();
}

/// Per-layer sparse coding of every cell of `input` (channels must equal m_r).
inline FeatureGrid encode_layer(const Layer& layer, const FeatureGrid& input) {
  const Mat& D = layer.dict.atoms;
  require(input.geometry.channels == D.rows(), ErrorCode::dimension_mismatch,
          "encode_layer: input has " + std::to_string(input.geometry.channels) +
              " channels, dictionary expects " + std::to_string(D.rows()));
  layer.spec.enet.validate();
  const Mat gram = D.transpose() * D;
  const double lip = sparse::lipschitz_constant(gram, layer.spec.enet.lambda_prime);
  const Mat dtx = D.transpose() * input.data;
  FeatureGrid out(GridGeometry{D.cols(), input.geometry.height, input.geometry.width});
  parallel_for(std::size_t(input.data.cols()), [&](std::size_t c) {
    const Index j = Index(c);
    try {
      auto code = sparse::fista_solve(gram, dtx.col(j), input.data.col(j).squaredNorm(), lip,
                                      layer.spec.enet);
      out.data.col(j) = code.coeffs;
    } catch (const Error& e) {
      throw Error(e.code(), "cell (" + std::to_string(j / input.geometry.width) + ", " +
                                std::to_string(j % input.geometry.width) + "): " + e.what());
    }
  });
  return out;
}

/// Per-channel RMS + eps over all columns of `codes`.
inline Vec channel_scales(const Mat& codes, double eps) {
  Vec s(codes.rows());
  const double n = std::max<double>(1.0, double(codes.cols()));
  for (Index c = 0; c < codes.rows(); ++c) s[c] = std::sqrt(codes.row(c).squaredNorm() / n) + eps;
  return s;
}

struct NormalizedBatch {
  std::vector<FeatureGrid> grids;
  Vec scales;
};

/// Scale-only batch normalisation: each channel divided by its RMS over the
/// batch and all spatial positions (+eps). No mean shift, so codes stay >= 0.
inline NormalizedBatch normalize_batch(const std::vector<FeatureGrid>& codes, double eps = 1e-6) {
  require(!codes.empty(), ErrorCode::invalid_argument, "normalize_batch: empty batch");
  const Index ch = codes.front().geometry.channels;
  Vec sumsq = Vec::Zero(ch);
  double count = 0;
  for (const auto& g : codes) {
    require(g.geometry.channels == ch, ErrorCode::dimension_mismatch,
            "normalize_batch: channel count differs inside the batch");
    sumsq += g.data.rowwise().squaredNorm();
    count += double(g.data.cols());
  }
  NormalizedBatch out;
  out.scales = (sumsq / std::max(count, 1.0)).cwiseSqrt().array() + eps;
  for (const auto& g : codes) {
    FeatureGrid n = g;
    n.data = out.scales.cwiseInverse().asDiagonal() * g.data;
    out.grids.push_back(std::move(n));
  }
  return out;
}

inline constexpr double kBatchNormEps = 1e-6;
inline constexpr double kRunningMomentum = 0.9;

enum class NormMode {
  batch,    // statistics of the current batch
  running,  // running averages stored in the model (inference)
  frozen,   // caller-supplied scales (gradient checks)
};

struct ForwardOptions {
  NormMode mode = NormMode::running;
  const std::vector<Vec>* frozen_scales = nullptr;
};

struct LayerCache {
  GridGeometry input_geometry;  // per image
  GridGeometry code_geometry;   // per image
  Mat inputs;                   // m_r x (cells * batch), image-major column blocks
  Mat codes;                    // k_r x (cells * batch), before normalisation
  std::vector<std::vector<Index>> active;  // per column
  Vec scale;                    // divisor per atom (ones without batch norm)
  Mat gram;                     // D^T D at forward time
  int nonconverged = 0;
};

struct ForwardCache {
  std::uint64_t model_version = 0;
  Index batch = 0;
  std::vector<LayerCache> layers;
  GridGeometry final_geometry;
  const LayerCache& layer(std::size_t r) const { return layers.at(r); }
};

struct ForwardResult {
  Mat features;  // feature_dim x batch  (X^(s))
  ForwardCache cache;
};

namespace detail {

// Applies `window` to each image's block of `cols` cells; returns the next
// layer's column-block matrix.
inline Mat regroup_blocks(const Mat& data, const GridGeometry& g, const WindowSpec& window,
                          Index batch, GridGeometry& out_geometry) {
  out_geometry = window_output(g, window);
  if (window.identity()) return data;
  Mat out(out_geometry.channels, out_geometry.cells() * batch);
  for (Index i = 0; i < batch; ++i) {
    FeatureGrid grid(g, data.middleCols(i * g.cells(), g.cells()));
    out.middleCols(i * out_geometry.cells(), out_geometry.cells()) = regroup(grid, window).data;
  }
  return out;
}

inline Mat regroup_adjoint_blocks(const Mat& cot, const GridGeometry& g, const WindowSpec& window,
                                  Index batch) {
  if (window.identity()) return cot;
  const GridGeometry og = window_output(g, window);
  Mat out(g.channels, g.cells() * batch);
  for (Index i = 0; i < batch; ++i) {
    FeatureGrid grid(og, cot.middleCols(i * og.cells(), og.cells()));
    out.middleCols(i * g.cells(), g.cells()) = regroup_adjoint(grid, g, window).data;
  }
  return out;
}

// Column blocks (channels x cells*batch) <-> features (channels*cells x batch).
inline Mat blocks_to_features(const Mat& blocks, const GridGeometry& g, Index batch) {
  Mat f(g.size(), batch);
  for (Index i = 0; i < batch; ++i) {
    const Mat blk = blocks.middleCols(i * g.cells(), g.cells());
    f.col(i) = Eigen::Map<const Vec>(blk.data(), blk.size());
  }
  return f;
}

inline Mat features_to_blocks(const Mat& f, const GridGeometry& g) {
  const Index batch = f.cols();
  Mat blocks(g.channels, g.cells() * batch);
  for (Index i = 0; i < batch; ++i) {
    const Vec col = f.col(i);
    blocks.middleCols(i * g.cells(), g.cells()) =
        Eigen::Map<const Mat>(col.data(), g.channels, g.cells());
  }
  return blocks;
}

}  // namespace detail

/// Patch vectors of a batch of flattened images as column blocks.
inline Mat patch_blocks(const ModelState& m, const Mat& images, GridGeometry& geometry) {
  require(images.rows() == m.image_shape.size(), ErrorCode::dimension_mismatch,
          "images have " + std::to_string(images.rows()) + " values, model expects " +
              m.image_shape.str());
  geometry = window_output(m.image_shape, m.input_window);
  Mat out(geometry.channels, geometry.cells() * images.cols());
  for (Index i = 0; i < images.cols(); ++i)
    out.middleCols(i * geometry.cells(), geometry.cells()) =
        patchify(images.col(i), m.image_shape, m.input_window).data;
  return out;
}

/// Forward pass for a batch of flattened images (columns, channel-major).
inline ForwardResult forward(const ModelState& m, const Mat& images, ForwardOptions opt = {}) {
  require(images.allFinite(), ErrorCode::non_finite, "forward: non-finite image data");
  const GeometryChain chain = geometry_chain(m);
  const Index batch = images.cols();
  ForwardResult res;
  res.cache.model_version = m.version;
  res.cache.batch = batch;
  GridGeometry g;
  Mat x = patch_blocks(m, images, g);

  for (std::size_t r = 0; r < m.layers.size(); ++r) {
    const Layer& layer = m.layers[r];
    const auto& enet = layer.spec.enet;
    const Mat& D = layer.dict.atoms;
    LayerCache lc;
    lc.input_geometry = g;
    lc.code_geometry = chain.layer_codes[r];
    lc.gram = D.transpose() * D;
    const double lip = sparse::lipschitz_constant(lc.gram, enet.lambda_prime);
    const Mat dtx = D.transpose() * x;
    const Index n = x.cols();
    lc.codes.resize(D.cols(), n);
    lc.active.resize(static_cast<std::size_t>(n));
    std::vector<char> ok(std::size_t(n), 1);
    parallel_for(std::size_t(n), [&](std::size_t c) {
      const Index j = Index(c);
      try {
        auto code = sparse::fista_solve(lc.gram, dtx.col(j), x.col(j).squaredNorm(), lip, enet);
        lc.codes.col(j) = code.coeffs;
        lc.active[c] = std::move(code.active_set);
        ok[c] = code.converged ? 1 : 0;
      } catch (const Error& e) {
        const Index img = j / g.cells(), cell = j % g.cells();
        throw Error(e.code(), "layer " + std::to_string(r + 1) + ", image " + std::to_string(img) +
                                  ", cell (" + std::to_string(cell / g.width) + ", " +
                                  std::to_string(cell % g.width) + "): " + e.what());
      }
    });
    for (char c : ok) lc.nonconverged += c ? 0 : 1;

    if (!layer.spec.batch_norm) {
      lc.scale = Vec::Ones(D.cols());
    } else if (opt.mode == NormMode::batch) {
      lc.scale = channel_scales(lc.codes, kBatchNormEps);
    } else if (opt.mode == NormMode::frozen) {
      require(opt.frozen_scales && opt.frozen_scales->size() == m.layers.size(),
              ErrorCode::invalid_argument, "forward: frozen mode needs one scale vector per layer");
      lc.scale = (*opt.frozen_scales)[r];
    } else {
      lc.scale = layer.running_scale.size() == D.cols() ? layer.running_scale
                                                        : Vec::Ones(D.cols());
    }
    const Mat normalized = lc.scale.cwiseInverse().asDiagonal() * lc.codes;
    GridGeometry next;
    Mat next_x = detail::regroup_blocks(normalized, lc.code_geometry, layer.spec.window, batch, next);
    lc.inputs = std::move(x);
    res.cache.layers.push_back(std::move(lc));
    x = std::move(next_x);
    g = next;
  }
  res.cache.final_geometry = g;
  res.features = detail::blocks_to_features(x, g, batch);
  return res;
}

/// Scales used by a forward pass, one vector per layer.
inline std::vector<Vec> cache_scales(const ForwardCache& c) {
  std::vector<Vec> s;
  for (const auto& l : c.layers) s.push_back(l.scale);
  return s;
}

/// Exponential moving average of batch-norm scales (momentum 0.9).
inline void update_running_scales(ModelState& m, const ForwardCache& c) {
  for (std::size_t r = 0; r < m.layers.size(); ++r) {
    auto& l = m.layers[r];
    if (!l.spec.batch_norm) continue;
    if (l.running_scale.size() != c.layers[r].scale.size())
      l.running_scale = c.layers[r].scale;
    else
      l.running_scale = kRunningMomentum * l.running_scale + (1.0 - kRunningMomentum) * c.layers[r].scale;
  }
}

/// Inference features in chunks (running normalisation).
inline Mat extract_features(const ModelState& m, const Mat& images, Index chunk = 256) {
  const GeometryChain chain = geometry_chain(m);
  Mat out(chain.feature_dim(), images.cols());
  for (Index s = 0; s < images.cols(); s += chunk) {
    const Index n = std::min(chunk, images.cols() - s);
    out.middleCols(s, n) = forward(m, images.middleCols(s, n)).features;
  }
  return out;
}

inline std::vector<int> predict(const ModelState& m, const Mat& images, Index chunk = 256) {
  return predict_labels(m.classifier, extract_features(m, images, chunk));
}

/// X^(r) for r = 1..s as (dim_r x batch) matrices.
inline std::vector<Mat> layer_outputs(const ModelState& m, const Mat& images) {
  ForwardResult fr = forward(m, images);
  std::vector<Mat> out;
  for (std::size_t r = 0; r + 1 < fr.cache.layers.size(); ++r)
    out.push_back(detail::blocks_to_features(fr.cache.layers[r + 1].inputs,
                                             fr.cache.layers[r + 1].input_geometry, images.cols()));
  if (!fr.cache.layers.empty()) out.push_back(fr.features);
  return out;
}

/// Image reconstructed from layer `depth`'s codes (1-based) by multiplying
/// back through the dictionaries; every regroup is inverted by
/// coverage-averaging and batch-norm scales are undone.
inline Vec reconstruct_from_layer(const ModelState& m, const Vec& image, std::size_t depth) {
  require(depth >= 1 && depth <= m.layers.size(), ErrorCode::invalid_argument,
          "reconstruct: depth must be in [1, " + std::to_string(m.layers.size()) + "]");
  const Mat img = image;
  const ForwardResult fr = forward(m, img);
  Mat v = m.layers[depth - 1].dict.atoms * fr.cache.layers[depth - 1].codes;
  for (std::size_t r = depth - 1; r-- > 0;) {
    const LayerCache& lc = fr.cache.layers[r];
    FeatureGrid grouped(fr.cache.layers[r + 1].input_geometry, v);
    const Mat normalized = unregroup_average(grouped, lc.code_geometry, m.layers[r].spec.window).data;
    v = m.layers[r].dict.atoms * (lc.scale.asDiagonal() * normalized);
  }
  FeatureGrid patches(fr.cache.layers.front().input_geometry, v);
  return flatten_image(unregroup_average(patches, m.image_shape, m.input_window));
}

}  // namespace ddl
