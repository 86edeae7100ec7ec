#include "pcv/checkpoint.hpp"
#include "pcv/errors.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace {

using namespace pcv;
using namespace pcv::checkpoint;
using ad::Matrix;
using pcv::testing::random_matrix;
namespace fs = std::filesystem;

nn::ParameterStore sample_store(std::uint64_t seed) {
  nn::ParameterStore s;
  s.add("encoder.a.weight", random_matrix(3, 4, seed));
  s.add("encoder.a.bias", random_matrix(1, 4, seed + 1));
  s.add("encoder.bn.running_mean", random_matrix(1, 4, seed + 2), false);
  s.add("pde.w", random_matrix(2, 2, seed + 3));
  return s;
}

DataErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no DataError thrown";
  return DataErrorCode::kIo;
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto store = sample_store(1);
  const Checkpoint c = snapshot({{"model", {{"width", 4}}}}, store);
  const auto bytes = encode(c);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "PCVCKPT1");
  const Checkpoint back = decode(bytes);
  EXPECT_EQ(encode(back), bytes);
  EXPECT_EQ(back.config, c.config);
  EXPECT_EQ(back.tensors.size(), 4u);

  const fs::path path = fs::temp_directory_path() / "pcv_ckpt_test" / "a.pcvk";
  save(path, c);
  save(path.parent_path() / "b.pcvk", load(path));
  std::ifstream a(path, std::ios::binary), b(path.parent_path() / "b.pcvk", std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(a), {}), std::string(std::istreambuf_iterator<char>(b), {}));
}

TEST(Checkpoint, RestoreCopiesFloatValues) {
  const auto src = sample_store(2);
  auto dst = sample_store(50);
  const Checkpoint c = snapshot(nullptr, src);
  restore(c, dst, "encoder.");
  for (const auto* name : {"encoder.a.weight", "encoder.a.bias", "encoder.bn.running_mean"}) {
    EXPECT_EQ(dst.get(name).value(), src.get(name).value().cast<float>().cast<double>()) << name;
  }
  EXPECT_NE(dst.get("pde.w").value(), src.get("pde.w").value());
  // Once rounded, a second snapshot reproduces the same archive.
  auto again = sample_store(50);
  restore(c, again, "");
  EXPECT_EQ(encode(snapshot(nullptr, again)), encode(c));
}

TEST(Checkpoint, RestoreErrors) {
  const Checkpoint c = snapshot(nullptr, sample_store(3));
  nn::ParameterStore wrong_shape;
  wrong_shape.add("pde.w", Matrix::Zero(3, 2));
  EXPECT_EQ(code_of([&] { restore(c, wrong_shape, "pde."); }), DataErrorCode::kShapeMismatch);

  nn::ParameterStore bigger = sample_store(3);
  bigger.add("encoder.extra", Matrix::Zero(1, 1));
  EXPECT_EQ(code_of([&] { restore(c, bigger, "encoder."); }), DataErrorCode::kShapeMismatch);

  nn::ParameterStore smaller;
  smaller.add("pde.w", Matrix::Zero(2, 2));
  EXPECT_NO_THROW(restore(c, smaller, "pde."));
  EXPECT_THROW(restore(c, smaller, "encoder."), DataError);
  EXPECT_THROW(restore(c, smaller, "head."), DataError);
  EXPECT_TRUE(c.has_prefix("encoder."));
  EXPECT_FALSE(c.has_prefix("head."));
}

TEST(Checkpoint, CorruptedArchivesGiveNamedErrors) {
  const auto bytes = encode(snapshot({{"k", 1}}, sample_store(4)));

  auto bad_magic = bytes;
  bad_magic[7] = '2';
  EXPECT_EQ(code_of([&] { decode(bad_magic); }), DataErrorCode::kBadMagic);

  const std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 5);
  EXPECT_EQ(code_of([&] { decode(cut); }), DataErrorCode::kTruncatedPayload);

  auto extra = bytes;
  extra.push_back(0);
  EXPECT_EQ(code_of([&] { decode(extra); }), DataErrorCode::kTrailingBytes);

  auto garbled = bytes;
  garbled[16] = '!';
  EXPECT_EQ(code_of([&] { decode(garbled); }), DataErrorCode::kBadHeader);

  auto long_header = bytes;
  long_header[15] = 0x7F;
  EXPECT_EQ(code_of([&] { decode(long_header); }), DataErrorCode::kTruncatedPayload);

  const std::vector<std::uint8_t> tiny(bytes.begin(), bytes.begin() + 10);
  EXPECT_EQ(code_of([&] { decode(tiny); }), DataErrorCode::kBadHeader);

  EXPECT_EQ(code_of([] { load("/nonexistent/ckpt.pcvk"); }), DataErrorCode::kMissingFile);
}

}  // namespace
