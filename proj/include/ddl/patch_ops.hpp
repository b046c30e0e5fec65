#pragma once

// Patch extraction and the regrouping operator that concatenates adjacent
// cells of a feature grid into the next layer's input vectors.
//
// Layout: a FeatureGrid stores `data` as (channels x height*width); column
// `row * width + col` holds one cell's vector. Inside a concatenated window the
// order is channel-major, then window row, then window column:
//   out(ch * w*w + dy * w + dx) = in(ch) at cell (oy*s + dy, ox*s + dx).

#include "ddl/core.hpp"

#include <string>

namespace ddl {

struct GridGeometry {
  Index channels = 1;
  Index height = 1;
  Index width = 1;

  Index cells() const { return height * width; }
  Index size() const { return channels * height * width; }
  bool valid() const { return channels >= 1 && height >= 1 && width >= 1; }
  friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
  std::string str() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }
};

struct WindowSpec {
  Index window = 1;
  Index stride = 1;

  bool valid() const { return stride >= 1 && window >= stride; }
  bool identity() const { return window == 1 && stride == 1; }
  friend bool operator==(const WindowSpec&, const WindowSpec&) = default;
};

struct FeatureGrid {
  GridGeometry geometry;
  Mat data;  // channels x cells

  FeatureGrid() = default;
  explicit FeatureGrid(GridGeometry g) : geometry(g), data(Mat::Zero(g.channels, g.cells())) {}
  FeatureGrid(GridGeometry g, Mat d) : geometry(g), data(std::move(d)) {
    require(data.rows() == g.channels && data.cols() == g.cells(), ErrorCode::dimension_mismatch,
            "FeatureGrid: data " + shape_str(data.rows(), data.cols()) +
                " does not match geometry " + g.str());
  }

  double& at(Index ch, Index row, Index col) { return data(ch, row * geometry.width + col); }
  double at(Index ch, Index row, Index col) const { return data(ch, row * geometry.width + col); }
};

/// Output geometry of a window pass, or throws when the grid is too small.
inline GridGeometry window_output(const GridGeometry& in, const WindowSpec& spec) {
  require(spec.valid(), ErrorCode::invalid_argument,
          "window spec needs 1 <= stride <= window (got window " + std::to_string(spec.window) +
              ", stride " + std::to_string(spec.stride) + ")");
  require(in.valid(), ErrorCode::geometry, "grid geometry " + in.str() + " is empty");
  require(in.height >= spec.window && in.width >= spec.window, ErrorCode::geometry,
          "grid " + in.str() + " is smaller than window " + std::to_string(spec.window));
  return {in.channels * spec.window * spec.window, (in.height - spec.window) / spec.stride + 1,
          (in.width - spec.window) / spec.stride + 1};
}

inline FeatureGrid regroup(const FeatureGrid& grid, const WindowSpec& spec) {
  const GridGeometry out_g = window_output(grid.geometry, spec);
  if (spec.identity()) return grid;
  const Index w = spec.window, s = spec.stride, ww = w * w;
  const Index in_w = grid.geometry.width;
  FeatureGrid out(out_g);
  for (Index oy = 0; oy < out_g.height; ++oy)
    for (Index ox = 0; ox < out_g.width; ++ox) {
      const Index cell = oy * out_g.width + ox;
      for (Index dy = 0; dy < w; ++dy)
        for (Index dx = 0; dx < w; ++dx) {
          const Index src = (oy * s + dy) * in_w + (ox * s + dx);
          for (Index ch = 0; ch < grid.geometry.channels; ++ch)
            out.data(ch * ww + dy * w + dx, cell) = grid.data(ch, src);
        }
    }
  return out;
}

/// Linear adjoint of regroup; overlapping contributions are summed.
inline FeatureGrid regroup_adjoint(const FeatureGrid& cotangent, const GridGeometry& input,
                                   const WindowSpec& spec) {
  const GridGeometry expect = window_output(input, spec);
  require(cotangent.geometry == expect, ErrorCode::geometry,
          "regroup_adjoint: cotangent geometry " + cotangent.geometry.str() + " but regroup of " +
              input.str() + " yields " + expect.str());
  if (spec.identity()) return cotangent;
  const Index w = spec.window, s = spec.stride, ww = w * w;
  FeatureGrid out(input);
  for (Index oy = 0; oy < expect.height; ++oy)
    for (Index ox = 0; ox < expect.width; ++ox) {
      const Index cell = oy * expect.width + ox;
      for (Index dy = 0; dy < w; ++dy)
        for (Index dx = 0; dx < w; ++dx) {
          const Index dst = (oy * s + dy) * input.width + (ox * s + dx);
          for (Index ch = 0; ch < input.channels; ++ch)
            out.data(ch, dst) += cotangent.data(ch * ww + dy * w + dx, cell);
        }
    }
  return out;
}

/// Number of windows covering each input cell (height*width vector).
inline Vec window_coverage(const GridGeometry& input, const WindowSpec& spec) {
  const GridGeometry out_g = window_output(input, spec);
  Vec count = Vec::Zero(input.cells());
  for (Index oy = 0; oy < out_g.height; ++oy)
    for (Index ox = 0; ox < out_g.width; ++ox)
      for (Index dy = 0; dy < spec.window; ++dy)
        for (Index dx = 0; dx < spec.window; ++dx)
          count[(oy * spec.stride + dy) * input.width + (ox * spec.stride + dx)] += 1.0;
  return count;
}

/// Approximate inverse of regroup: adjoint followed by division by coverage.
/// Uncovered cells stay zero.
inline FeatureGrid unregroup_average(const FeatureGrid& grouped, const GridGeometry& input,
                                     const WindowSpec& spec) {
  FeatureGrid out = regroup_adjoint(grouped, input, spec);
  const Vec cover = window_coverage(input, spec);
  for (Index c = 0; c < input.cells(); ++c)
    if (cover[c] > 0) out.data.col(c) /= cover[c];
  return out;
}

/// Interprets a channel-major flattened image (c, H, W) as a grid of pixels.
inline FeatureGrid image_grid(const Eigen::Ref<const Vec>& pixels, const GridGeometry& shape) {
  require(pixels.size() == shape.size(), ErrorCode::dimension_mismatch,
          "image has " + std::to_string(pixels.size()) + " values, shape " + shape.str() +
              " needs " + std::to_string(shape.size()));
  FeatureGrid g(shape);
  for (Index ch = 0; ch < shape.channels; ++ch)
    g.data.row(ch) = pixels.segment(ch * shape.cells(), shape.cells()).transpose();
  return g;
}

/// Inverse of image_grid.
inline Vec flatten_image(const FeatureGrid& g) {
  Vec out(g.geometry.size());
  for (Index ch = 0; ch < g.geometry.channels; ++ch)
    out.segment(ch * g.geometry.cells(), g.geometry.cells()) = g.data.row(ch).transpose();
  return out;
}

/// Cuts an image into (possibly overlapping) windows; each output cell is the
/// vectorized c*w*w patch.
inline FeatureGrid patchify(const Eigen::Ref<const Vec>& pixels, const GridGeometry& shape,
                            const WindowSpec& spec) {
  require(shape.height >= spec.window && shape.width >= spec.window, ErrorCode::geometry,
          "image " + shape.str() + " is smaller than window " + std::to_string(spec.window));
  return regroup(image_grid(pixels, shape), spec);
}

/// Adjoint of patchify, returned as a flattened image.
inline Vec patchify_adjoint(const FeatureGrid& cotangent, const GridGeometry& shape,
                            const WindowSpec& spec) {
  return flatten_image(regroup_adjoint(cotangent, shape, spec));
}

}  // namespace ddl
