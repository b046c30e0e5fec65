#pragma once

// Binary checkpoint format:
//   "DDL1" | u32 format version | u64 body length | body | u32 CRC32
// The CRC covers everything before it. The body is a sequence of sections
//   u32 tag | u64 payload length | payload
// All integers are little-endian; reals are IEEE-754 binary64 bit patterns.

#include "ddl/network.hpp"

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

namespace ddl {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'D', 'D', 'L', '1'};

inline std::uint32_t crc32_bytes(const unsigned char* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = uInt(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return std::uint32_t(c);
}

inline std::uint32_t crc32_bytes(const std::vector<unsigned char>& b) {
  return crc32_bytes(b.data(), b.size());
}

namespace detail {

enum : std::uint32_t {
  kTagHeader = 1,
  kTagLayer = 2,
  kTagClassifier = 3,
  kTagRng = 4,
};

class Writer {
 public:
  std::vector<unsigned char> buf;

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back((unsigned char)(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back((unsigned char)(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(std::uint64_t(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) {
    u64(s.size());
    buf.insert(buf.end(), s.begin(), s.end());
  }
  void matrix(const Mat& m) {
    i64(m.rows());
    i64(m.cols());
    for (Index i = 0; i < m.size(); ++i) f64(m.data()[i]);
  }
  void vector(const Vec& v) {
    i64(v.size());
    for (Index i = 0; i < v.size(); ++i) f64(v[i]);
  }
  void section(std::uint32_t tag, const Writer& payload) {
    u32(tag);
    u64(payload.buf.size());
    buf.insert(buf.end(), payload.buf.begin(), payload.buf.end());
  }
};

class Reader {
 public:
  Reader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}

  bool done() const { return pos_ == n_; }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int64_t i64() { return std::int64_t(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), std::size_t(n));
    pos_ += std::size_t(n);
    return s;
  }
  Mat matrix() {
    const std::int64_t r = i64(), c = i64();
    require(r >= 0 && c >= 0, ErrorCode::truncated, "checkpoint: negative matrix dimensions");
    need(std::uint64_t(r) * std::uint64_t(c) * 8);
    Mat m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = f64();
    return m;
  }
  Vec vector() {
    const std::int64_t n = i64();
    require(n >= 0, ErrorCode::truncated, "checkpoint: negative vector length");
    need(std::uint64_t(n) * 8);
    Vec v(n);
    for (Index i = 0; i < n; ++i) v[i] = f64();
    return v;
  }
  Reader section(std::uint32_t expected_tag) {
    const std::uint32_t tag = u32();
    require(tag == expected_tag, ErrorCode::truncated,
            "checkpoint: expected section " + std::to_string(expected_tag) + ", found " +
                std::to_string(tag));
    const std::uint64_t len = u64();
    need(len);
    Reader r(p_ + pos_, std::size_t(len));
    pos_ += std::size_t(len);
    return r;
  }

 private:
  void need(std::uint64_t k) const {
    require(k <= n_ - pos_, ErrorCode::truncated, "checkpoint: section payload truncated");
  }
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> serialize(const ModelState& m) {
  using detail::Writer;
  Writer body;
  {
    Writer h;
    h.u64(m.epoch);
    h.u64(m.version);
    h.i64(m.image_shape.channels);
    h.i64(m.image_shape.height);
    h.i64(m.image_shape.width);
    h.i64(m.input_window.window);
    h.i64(m.input_window.stride);
    h.u64(m.layers.size());
    body.section(detail::kTagHeader, h);
  }
  for (const auto& l : m.layers) {
    Writer w;
    w.i64(l.spec.num_atoms);
    w.i64(l.spec.window.window);
    w.i64(l.spec.window.stride);
    w.f64(l.spec.enet.lambda);
    w.f64(l.spec.enet.lambda_prime);
    w.i64(l.spec.enet.max_iters);
    w.f64(l.spec.enet.tol);
    w.f64(l.spec.enet.activation_eps);
    w.u32(l.spec.batch_norm ? 1 : 0);
    w.matrix(l.dict.atoms);
    w.vector(l.running_scale);
    body.section(detail::kTagLayer, w);
  }
  {
    Writer c;
    c.f64(m.classifier.lambda_c);
    c.matrix(m.classifier.weights);
    body.section(detail::kTagClassifier, c);
  }
  {
    Writer r;
    std::ostringstream os;
    os << m.rng;
    r.bytes(os.str());
    body.section(detail::kTagRng, r);
  }
  Writer out;
  out.buf.insert(out.buf.end(), kCheckpointMagic, kCheckpointMagic + 4);
  out.u32(kCheckpointVersion);
  out.u64(body.buf.size());
  out.buf.insert(out.buf.end(), body.buf.begin(), body.buf.end());
  out.u32(crc32_bytes(out.buf));
  return out.buf;
}

inline ModelState deserialize(const std::vector<unsigned char>& b) {
  require(b.size() >= 4 && std::memcmp(b.data(), kCheckpointMagic, 4) == 0, ErrorCode::bad_magic,
          "checkpoint: missing DDL1 magic");
  require(b.size() >= 16, ErrorCode::truncated, "checkpoint: header truncated");
  detail::Reader head(b.data() + 4, 12);
  const std::uint32_t version = head.u32();
  require(version == kCheckpointVersion, ErrorCode::version_mismatch,
          "checkpoint: format version " + std::to_string(version) + ", expected " +
              std::to_string(kCheckpointVersion));
  const std::uint64_t body_len = head.u64();
  require(body_len <= b.size() && b.size() - 16 >= body_len + 4, ErrorCode::truncated,
          "checkpoint: file is " + std::to_string(b.size()) + " bytes, header announces " +
              std::to_string(body_len + 20));
  const std::size_t end = 16 + std::size_t(body_len);
  detail::Reader tail(b.data() + end, 4);
  const std::uint32_t stored = tail.u32();
  require(stored == crc32_bytes(b.data(), end), ErrorCode::checksum, "checkpoint: CRC32 mismatch");

  detail::Reader body(b.data() + 16, std::size_t(body_len));
  ModelState m;
  auto h = body.section(detail::kTagHeader);
  m.epoch = h.u64();
  m.version = h.u64();
  m.image_shape.channels = h.i64();
  m.image_shape.height = h.i64();
  m.image_shape.width = h.i64();
  m.input_window.window = h.i64();
  m.input_window.stride = h.i64();
  const std::uint64_t nl = h.u64();
  for (std::uint64_t r = 0; r < nl; ++r) {
    auto s = body.section(detail::kTagLayer);
    Layer l;
    l.spec.num_atoms = s.i64();
    l.spec.window.window = s.i64();
    l.spec.window.stride = s.i64();
    l.spec.enet.lambda = s.f64();
    l.spec.enet.lambda_prime = s.f64();
    l.spec.enet.max_iters = int(s.i64());
    l.spec.enet.tol = s.f64();
    l.spec.enet.activation_eps = s.f64();
    l.spec.batch_norm = s.u32() != 0;
    l.dict.atoms = s.matrix();
    l.running_scale = s.vector();
    m.layers.push_back(std::move(l));
  }
  auto c = body.section(detail::kTagClassifier);
  m.classifier.lambda_c = c.f64();
  m.classifier.weights = c.matrix();
  auto r = body.section(detail::kTagRng);
  std::istringstream is(r.bytes());
  is >> m.rng;
  require(!is.fail(), ErrorCode::truncated, "checkpoint: unreadable RNG state");
  require(body.done(), ErrorCode::truncated, "checkpoint: trailing bytes in body");
  validate_model(m);
  return m;
}

inline void save_checkpoint(const ModelState& m, const std::string& path) {
  const auto bytes = serialize(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(bool(out), ErrorCode::io, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  require(bool(out), ErrorCode::io, "write failed: " + path);
}

inline ModelState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorCode::io, "cannot open " + path);
  std::vector<unsigned char> b{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize(b);
}

inline bool bit_equal(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), sizeof(double) * std::size_t(a.size())) == 0);
}

/// Bitwise equality of every array, spec field and counter, including RNG state.
inline bool bit_identical(const ModelState& a, const ModelState& b) {
  if (a.epoch != b.epoch || a.version != b.version || !(a.image_shape == b.image_shape) ||
      !(a.input_window == b.input_window) || a.layers.size() != b.layers.size() ||
      !(a.rng == b.rng) ||
      std::bit_cast<std::uint64_t>(a.classifier.lambda_c) !=
          std::bit_cast<std::uint64_t>(b.classifier.lambda_c) ||
      !bit_equal(a.classifier.weights, b.classifier.weights))
    return false;
  for (std::size_t r = 0; r < a.layers.size(); ++r) {
    const auto &x = a.layers[r], &y = b.layers[r];
    const auto& e = x.spec.enet;
    const auto& f = y.spec.enet;
    if (x.spec.num_atoms != y.spec.num_atoms || !(x.spec.window == y.spec.window) ||
        x.spec.batch_norm != y.spec.batch_norm || e.max_iters != f.max_iters ||
        std::memcmp(&e.lambda, &f.lambda, 8) || std::memcmp(&e.lambda_prime, &f.lambda_prime, 8) ||
        std::memcmp(&e.tol, &f.tol, 8) || std::memcmp(&e.activation_eps, &f.activation_eps, 8) ||
        !bit_equal(x.dict.atoms, y.dict.atoms) || !bit_equal(x.running_scale, y.running_scale))
      return false;
  }
  return true;
}

}  // namespace ddl
