#include "ddl/checkpoint.hpp"
#include "toy_models.hpp"

#include <gtest/gtest.h>
#include <zlib.h>

#include <filesystem>

using namespace ddl;

namespace {

ErrorCode error_of(const std::vector<unsigned char>& b) {
  try {
    deserialize(b);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "deserialize accepted corrupt bytes";
  return ErrorCode::invalid_argument;
}

void put_u32(std::vector<unsigned char>& b, std::size_t off, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[off + std::size_t(i)] = static_cast<unsigned char>(v >> (8 * i));
}

}  // namespace

TEST(Crc32, KnownValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32_bytes(reinterpret_cast<const unsigned char*>(s.data()), s.size()), 0xCBF43926u);
}

TEST(Checkpoint, FreshModelRoundTrip) {
  const ModelState m = toy::make_model({1, 6, 6}, {3, 1}, {{5, {2, 2}}, {4}}, 3, 7);
  const auto bytes = serialize(m);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DDL1");
  EXPECT_TRUE(bit_identical(deserialize(bytes), m));
  EXPECT_EQ(serialize(deserialize(bytes)), bytes);
}

TEST(Checkpoint, TrainedModelRoundTripIncludingRng) {
  std::mt19937_64 rng(1);
  ModelState m = toy::make_model({1, 4, 4}, {2, 2}, {{3, {2, 2}}, {4}}, 3, 8, 0.05, 0.1, 0.01, true);
  for (int s = 0; s < 3; ++s) {
    const Mat imgs = toy::random_images(m.image_shape, 4, rng);
    train_step(m, imgs, toy::random_labels(4, 3, rng), 0.05);
  }
  m.rng.discard(17);
  const auto path = std::filesystem::temp_directory_path() / "ddl_ckpt_test.ddl";
  save_checkpoint(m, path.string());
  ModelState back = load_checkpoint(path.string());
  std::filesystem::remove(path);
  EXPECT_TRUE(bit_identical(back, m));
  EXPECT_EQ(back.rng(), m.rng());
  ASSERT_EQ(back.layers[0].running_scale.size(), 3);
}

TEST(Checkpoint, DistinctCorruptionErrors) {
  const ModelState m = toy::make_model({1, 4, 4}, {2, 2}, {{3}}, 2, 9);
  const auto good = serialize(m);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(error_of(bad_magic), ErrorCode::bad_magic);

  auto version = good;
  put_u32(version, 4, 2);
  EXPECT_EQ(error_of(version), ErrorCode::version_mismatch);

  auto truncated = good;
  truncated.resize(good.size() - 10);
  EXPECT_EQ(error_of(truncated), ErrorCode::truncated);

  for (std::size_t pos : {std::size_t(20), good.size() / 2, good.size() - 5}) {
    auto flipped = good;
    flipped[pos] ^= 0x40;
    EXPECT_EQ(error_of(flipped), ErrorCode::checksum) << "byte " << pos;
  }
}

TEST(Checkpoint, TrailerIsZlibCrc) {
  const auto b = serialize(toy::make_model({1, 4, 4}, {2, 2}, {{3}}, 2, 9));
  const uLong z = crc32(0L, b.data(), uInt(b.size() - 4));
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t(b[b.size() - 4 + std::size_t(i)]) << (8 * i);
  EXPECT_EQ(stored, std::uint32_t(z));
}

TEST(Checkpoint, MissingFileIsIoError) {
  try {
    load_checkpoint("/nonexistent/dir/model.ddl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::io);
  }
}
