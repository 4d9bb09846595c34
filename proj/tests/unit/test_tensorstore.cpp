#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "lmi/tensorstore.hpp"
#include "lmi/util.hpp"

using namespace lmi;
namespace fs = std::filesystem;

namespace {

Checkpoint sample_checkpoint(DType dtype, std::uint64_t seed) {
  Rng rng(seed);
  Checkpoint c;
  auto fill = [&](Tensor::Dims dims) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    if (dtype == DType::F32) {
      std::vector<float> v(n);
      for (auto& x : v) x = static_cast<float>(rng.normal());
      return Tensor::from_f32(std::move(dims), std::move(v));
    }
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return Tensor::from_f64(std::move(dims), std::move(v));
  };
  c.add("layer0.w", fill({3, 4}));
  c.add("layer0.b", fill({4}));
  c.add("head", fill({2, 3, 2}));
  c.meta()["config"] = "{\"k\":1}";
  c.meta()["provenance"] = "test";
  return c;
}

fs::path temp_file(const std::string& name) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  return fs::temp_directory_path() / (std::string("lmi_") + info->name() + "_" + name);
}

std::vector<std::uint8_t> bytes_of(const Checkpoint& c) { return serialize_checkpoint(c); }

}  // namespace

TEST(Tensor, ConstructionValidates) {
  EXPECT_THROW(Tensor::from_f32({}, {}), std::invalid_argument);
  EXPECT_THROW(Tensor::from_f32({2, 0}, {}), std::invalid_argument);
  EXPECT_THROW(Tensor::from_f32({2, 2}, {1, 2, 3}), std::invalid_argument);
  const Tensor t = Tensor::from_f64({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.get(5), 6.0);
}

TEST(Checkpoint, DuplicateNamesRejected) {
  Checkpoint c;
  c.add("w", Tensor::zeros({2}, DType::F32));
  EXPECT_THROW(c.add("w", Tensor::zeros({2}, DType::F32)), DuplicateTensorError);
}

TEST(Checkpoint, MixedDtypeRejected) {
  Checkpoint c;
  c.add("a", Tensor::zeros({2}, DType::F32));
  c.add("b", Tensor::zeros({2}, DType::F64));
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(c.dtype(), std::invalid_argument);
  const auto path = temp_file("mixed.lmic");
  fs::remove(path);
  EXPECT_THROW(write_checkpoint(c, path), std::invalid_argument);
  EXPECT_FALSE(fs::exists(path));
}

TEST(Lmic, RoundTripIsBitwiseF32AndF64) {
  for (DType dt : {DType::F32, DType::F64}) {
    const Checkpoint c = sample_checkpoint(dt, 17);
    const auto bytes = bytes_of(c);
    const Checkpoint back = deserialize_checkpoint(bytes);
    EXPECT_TRUE(back.bitwise_equal(c));
    EXPECT_EQ(back.meta(), c.meta());
    EXPECT_EQ(bytes_of(back), bytes);
  }
}

TEST(Lmic, SpecialValuesSurvive) {
  const float nan_payload = [] {
    std::uint32_t bits = 0x7fc12345u;
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }();
  Checkpoint c;
  c.add("x", Tensor::from_f32({6}, {-0.0f, std::numeric_limits<float>::denorm_min(),
                                    std::numeric_limits<float>::infinity(), nan_payload,
                                    std::numeric_limits<float>::max(), 1.0f}));
  const Checkpoint back = deserialize_checkpoint(bytes_of(c));
  EXPECT_TRUE(back.bitwise_equal(c));
  EXPECT_TRUE(std::signbit(back.at("x").f32()[0]));
}

TEST(Lmic, FileRoundTrip) {
  const Checkpoint c = sample_checkpoint(DType::F32, 3);
  const auto path = temp_file("rt.lmic");
  write_checkpoint(c, path);
  const Checkpoint back = read_checkpoint(path);
  EXPECT_TRUE(back.bitwise_equal(c));
  fs::remove(path);
}

TEST(Lmic, TensorsAreWrittenInSortedOrder) {
  const auto bytes = bytes_of(sample_checkpoint(DType::F32, 1));
  const std::string s(bytes.begin(), bytes.end());
  const auto head = s.find("head");
  const auto b = s.find("layer0.b");
  const auto w = s.find("layer0.w");
  ASSERT_NE(head, std::string::npos);
  EXPECT_LT(head, b);
  EXPECT_LT(b, w);
}

TEST(Lmic, BadMagicNamesTheMagic) {
  auto bytes = bytes_of(sample_checkpoint(DType::F32, 1));
  bytes[0] = 'X';
  try {
    deserialize_checkpoint(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("LMIC"), std::string::npos);
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Lmic, UnsupportedVersion) {
  auto bytes = bytes_of(sample_checkpoint(DType::F32, 1));
  bytes[4] = 2;
  EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
}

TEST(Lmic, EveryTruncationIsRejectedWithOffset) {
  const auto bytes = bytes_of(sample_checkpoint(DType::F64, 2));
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    const std::span<const std::uint8_t> prefix(bytes.data(), n);
    try {
      deserialize_checkpoint(prefix);
      FAIL() << "prefix of " << n << " bytes accepted";
    } catch (const FormatError& e) {
      EXPECT_LE(e.offset(), n);
    }
  }
}

TEST(Lmic, TrailingBytesRejected) {
  auto bytes = bytes_of(sample_checkpoint(DType::F32, 1));
  bytes.push_back(0);
  EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
}

TEST(Lmic, RandomCorruptionNeverCrashes) {
  const auto clean = bytes_of(sample_checkpoint(DType::F32, 4));
  Rng rng(99);
  for (int trial = 0; trial < 500; ++trial) {
    auto bytes = clean;
    const std::size_t i = rng.index(bytes.size());
    bytes[i] = static_cast<std::uint8_t>(rng.index(256));
    try {
      const Checkpoint c = deserialize_checkpoint(bytes);
      c.validate();
    } catch (const FormatError&) {
    } catch (const std::invalid_argument&) {
    }
  }
}

TEST(Digest, IgnoresMetadataAndTracksValues) {
  Checkpoint a = sample_checkpoint(DType::F32, 5);
  Checkpoint b = a;
  b.meta()["provenance"] = "other";
  EXPECT_EQ(tensor_digest(a), tensor_digest(b));
  b.at("head").set(0, b.at("head").get(0) + 1.0);
  EXPECT_NE(tensor_digest(a), tensor_digest(b));
  EXPECT_EQ(tensor_digest(a).size(), 64u);
}

TEST(Compat, IdenticalLayoutsAreCompatible) {
  const auto r = validate_compat(sample_checkpoint(DType::F32, 1), sample_checkpoint(DType::F32, 2));
  EXPECT_TRUE(r.compatible());
}

TEST(Compat, ReportsExtraMissingShapeAndDtype) {
  Checkpoint a = sample_checkpoint(DType::F32, 1);
  Checkpoint b = sample_checkpoint(DType::F32, 1);
  a.add("bias2", Tensor::zeros({4}, DType::F32));
  auto r = validate_compat(a, b);
  ASSERT_EQ(r.extra.size(), 1u);
  EXPECT_EQ(r.extra[0], "bias2");
  EXPECT_TRUE(r.missing.empty());
  r = validate_compat(b, a);
  ASSERT_EQ(r.missing.size(), 1u);
  EXPECT_EQ(r.missing[0], "bias2");

  Checkpoint c = sample_checkpoint(DType::F32, 1);
  c.replace("layer0.w", Tensor::zeros({4, 3}, DType::F32));
  r = validate_compat(b, c);
  ASSERT_EQ(r.shape_mismatches.size(), 1u);
  EXPECT_EQ(r.shape_mismatches[0].name, "layer0.w");
  EXPECT_FALSE(r.compatible());
  EXPECT_NE(r.describe().find("layer0.w"), std::string::npos);

  r = validate_compat(b, sample_checkpoint(DType::F64, 1));
  EXPECT_EQ(r.dtype_mismatches.size(), 3u);
  EXPECT_TRUE(r.same_layout());
  EXPECT_FALSE(r.compatible());
}

TEST(Utf8, Validation) {
  EXPECT_TRUE(is_valid_utf8("layer0.w"));
  EXPECT_TRUE(is_valid_utf8("\xc3\xa9"));
  EXPECT_FALSE(is_valid_utf8("\xc3"));
  EXPECT_FALSE(is_valid_utf8("\xff"));
  EXPECT_FALSE(is_valid_utf8("\xc0\xaf"));  // overlong
}
