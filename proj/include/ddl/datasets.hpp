#pragma once

// MNIST (IDX) and CIFAR-10 (binary batch) readers, synthetic test beds, and
// seeded mini-batch ordering.

#include "ddl/core.hpp"
#include "ddl/network.hpp"
#include "ddl/patch_ops.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace ddl {

struct LabeledImageSet {
  GridGeometry shape{1, 1, 1};  // channels x height x width
  Mat images;                   // shape.size() x n, pixels in [0, 1]
  std::vector<int> labels;
  int class_count = 0;

  Index size() const { return images.cols(); }
};

inline void validate(const LabeledImageSet& s) {
  require(s.size() >= 1, ErrorCode::invalid_argument, "image set is empty");
  require(s.images.rows() == s.shape.size(), ErrorCode::dimension_mismatch,
          "image set rows do not match shape " + s.shape.str());
  require(Index(s.labels.size()) == s.size(), ErrorCode::count_mismatch,
          "image set: label count differs from image count");
  for (int l : s.labels)
    require(l >= 0 && l < s.class_count, ErrorCode::invalid_argument,
            "image set: label " + std::to_string(l) + " out of range");
}

inline LabeledImageSet subset(const LabeledImageSet& s, const std::vector<Index>& idx) {
  LabeledImageSet out;
  out.shape = s.shape;
  out.class_count = s.class_count;
  out.images.resize(s.images.rows(), Index(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.images.col(Index(i)) = s.images.col(idx[i]);
    out.labels.push_back(s.labels[std::size_t(idx[i])]);
  }
  return out;
}

inline LabeledImageSet head(const LabeledImageSet& s, Index n) {
  std::vector<Index> idx(std::size_t(std::min(n, s.size())));
  std::iota(idx.begin(), idx.end(), Index(0));
  return subset(s, idx);
}

inline std::vector<int> class_histogram(const LabeledImageSet& s) {
  std::vector<int> h(std::size_t(s.class_count), 0);
  for (int l : s.labels) ++h[std::size_t(l)];
  return h;
}

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorCode::io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

/// Reads an IDX image/label file pair. Pixels are scaled by 1/255.
inline LabeledImageSet load_mnist(const std::string& images_path, const std::string& labels_path) {
  const auto ib = detail::read_file(images_path);
  const auto lb = detail::read_file(labels_path);
  require(ib.size() >= 16, ErrorCode::truncated, images_path + ": header truncated");
  require(lb.size() >= 8, ErrorCode::truncated, labels_path + ": header truncated");
  require(detail::be32(ib, 0) == kIdxImageMagic, ErrorCode::bad_magic,
          images_path + ": bad magic " + std::to_string(detail::be32(ib, 0)) + " (expected 2051)");
  require(detail::be32(lb, 0) == kIdxLabelMagic, ErrorCode::bad_magic,
          labels_path + ": bad magic " + std::to_string(detail::be32(lb, 0)) + " (expected 2049)");
  const std::size_t n = detail::be32(ib, 4), rows = detail::be32(ib, 8), cols = detail::be32(ib, 12);
  const std::size_t nl = detail::be32(lb, 4);
  require(ib.size() >= 16 + n * rows * cols, ErrorCode::truncated,
          images_path + ": payload truncated");
  require(lb.size() >= 8 + nl, ErrorCode::truncated, labels_path + ": payload truncated");
  require(n == nl, ErrorCode::count_mismatch,
          "image count " + std::to_string(n) + " != label count " + std::to_string(nl));
  require(n >= 1, ErrorCode::count_mismatch, images_path + ": no images");

  LabeledImageSet s;
  s.shape = {1, Index(rows), Index(cols)};
  s.class_count = 10;
  s.images.resize(Index(rows * cols), Index(n));
  const std::size_t px = rows * cols;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < px; ++p)
      s.images(Index(p), Index(i)) = double(ib[16 + i * px + p]) / 255.0;
  s.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.labels[i] = int(lb[8 + i]);
    require(s.labels[i] < 10, ErrorCode::invalid_argument,
            labels_path + ": label " + std::to_string(s.labels[i]) + " out of range");
  }
  return s;
}

inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

/// Concatenates CIFAR-10 binary batches (1 label byte + 3072 channel-major
/// pixel bytes per record).
inline LabeledImageSet load_cifar10(const std::vector<std::string>& paths) {
  require(!paths.empty(), ErrorCode::invalid_argument, "load_cifar10: no batch files");
  std::vector<std::vector<unsigned char>> files;
  std::size_t total = 0;
  for (const auto& p : paths) {
    files.push_back(detail::read_file(p));
    const std::size_t sz = files.back().size();
    require(sz > 0 && sz % kCifarRecord == 0, ErrorCode::truncated,
            p + ": size " + std::to_string(sz) + " is not a positive multiple of 3073");
    total += sz / kCifarRecord;
  }
  LabeledImageSet s;
  s.shape = {3, 32, 32};
  s.class_count = 10;
  s.images.resize(3 * 32 * 32, Index(total));
  s.labels.reserve(total);
  Index col = 0;
  for (const auto& f : files)
    for (std::size_t off = 0; off < f.size(); off += kCifarRecord, ++col) {
      const int label = f[off];
      require(label < 10, ErrorCode::invalid_argument,
              "cifar record " + std::to_string(col) + ": label " + std::to_string(label));
      s.labels.push_back(label);
      for (std::size_t p = 0; p + 1 < kCifarRecord; ++p)
        s.images(Index(p), col) = double(f[off + 1 + p]) / 255.0;
    }
  return s;
}

struct SyntheticDictionaryData {
  Dictionary dict;  // m x k, unit columns
  Mat codes;        // k x n, nonnegative, `sparsity` nonzeros per column
  Mat signals;      // m x n
  std::vector<std::vector<Index>> supports;  // sorted
};

/// x = D a + noise with D random unit-column and a nonnegative with exactly
/// `sparsity` nonzeros drawn from U[0.5, 1.5].
inline SyntheticDictionaryData synthetic_dictionary_dataset(Index m, Index k, Index n,
                                                            Index sparsity, double noise_sigma,
                                                            std::uint64_t seed) {
  require(sparsity >= 0 && sparsity <= k, ErrorCode::invalid_argument,
          "synthetic_dictionary_dataset: sparsity must be in [0, k]");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> amp(0.5, 1.5);
  SyntheticDictionaryData out;
  Mat D(m, k);
  for (Index j = 0; j < k; ++j)
    for (Index i = 0; i < m; ++i) D(i, j) = normal(rng);
  out.dict = project_unit_columns(Dictionary{D}, rng);
  out.codes = Mat::Zero(k, n);
  std::vector<Index> perm(static_cast<std::size_t>(k));
  for (Index c = 0; c < n; ++c) {
    std::iota(perm.begin(), perm.end(), Index(0));
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Index> sup(perm.begin(), perm.begin() + sparsity);
    std::sort(sup.begin(), sup.end());
    for (Index j : sup) out.codes(j, c) = amp(rng);
    out.supports.push_back(std::move(sup));
  }
  out.signals = out.dict.atoms * out.codes;
  if (noise_sigma > 0)
    for (Index c = 0; c < n; ++c)
      for (Index i = 0; i < m; ++i) out.signals(i, c) += noise_sigma * normal(rng);
  return out;
}

struct SyntheticImageConfig {
  int classes = 4;
  Index per_class = 100;
  Index side = 12;
  int strokes = 3;
  double noise = 0.05;
  std::uint64_t seed = 1;
};

/// Class-conditional images: each class is a fixed arrangement of short bars;
/// samples jitter each bar by up to one pixel, vary its intensity, and add
/// Gaussian pixel noise (clamped to [0, 1]). Samples are interleaved by class.
inline LabeledImageSet synthetic_image_set(const SyntheticImageConfig& cfg) {
  require(cfg.classes >= 2 && cfg.per_class >= 1 && cfg.side >= 6, ErrorCode::invalid_argument,
          "synthetic_image_set: needs >= 2 classes, >= 1 sample per class, side >= 6");
  std::mt19937_64 rng(mix_seed(cfg.seed, 0));
  struct Bar { int cy, cx, dy, dx, len; };
  const int dirs[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};
  std::uniform_int_distribution<int> pos(2, int(cfg.side) - 3);
  std::uniform_int_distribution<int> dir(0, 3);
  std::uniform_int_distribution<int> len(2, 4);
  std::vector<std::vector<Bar>> protos(std::size_t(cfg.classes));
  for (auto& p : protos)
    for (int s = 0; s < cfg.strokes; ++s) {
      const int d = dir(rng);
      p.push_back({pos(rng), pos(rng), dirs[d][0], dirs[d][1], len(rng)});
    }

  LabeledImageSet out;
  out.shape = {1, cfg.side, cfg.side};
  out.class_count = cfg.classes;
  const Index n = cfg.per_class * cfg.classes;
  out.images = Mat::Zero(cfg.side * cfg.side, n);
  std::mt19937_64 srng(mix_seed(cfg.seed, 1));
  std::uniform_int_distribution<int> jitter(-1, 1);
  std::uniform_real_distribution<double> inten(0.6, 1.0);
  std::normal_distribution<double> noise(0.0, cfg.noise);
  for (Index i = 0; i < n; ++i) {
    const int c = int(i % cfg.classes);
    auto img = out.images.col(i);
    for (const Bar& b : protos[std::size_t(c)]) {
      const int oy = jitter(srng), ox = jitter(srng);
      const double v = inten(srng);
      for (int t = -b.len / 2; t <= b.len - b.len / 2; ++t) {
        const int y = b.cy + oy + t * b.dy, x = b.cx + ox + t * b.dx;
        if (y >= 0 && y < cfg.side && x >= 0 && x < cfg.side)
          img[y * cfg.side + x] = std::max(img[y * cfg.side + x], v);
      }
    }
    for (Index p = 0; p < img.size(); ++p)
      img[p] = std::clamp(img[p] + (cfg.noise > 0 ? noise(srng) : 0.0), 0.0, 1.0);
    out.labels.push_back(c);
  }
  return out;
}

/// Seeded permutation of [0, n) for the given epoch, cut into batches; the
/// final partial batch is kept.
inline std::vector<std::vector<Index>> batch_iter(Index n, Index batch_size, std::uint64_t seed,
                                                  std::uint64_t epoch) {
  require(batch_size >= 1, ErrorCode::invalid_argument, "batch_iter: batch_size must be >= 1");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index(0));
  std::mt19937_64 rng(mix_seed(seed, epoch));
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<Index>> out;
  for (Index s = 0; s < n; s += batch_size)
    out.emplace_back(perm.begin() + s, perm.begin() + std::min(n, s + batch_size));
  return out;
}

}  // namespace ddl
