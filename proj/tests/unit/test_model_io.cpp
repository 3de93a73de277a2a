#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "attrbench/autodiff.hpp"
#include "attrbench/model_io.hpp"
#include "../support/oracles.hpp"

using namespace attrbench;

namespace {

std::vector<std::uint8_t> le32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v >> 16),
          static_cast<std::uint8_t>(v >> 24)};
}

}  // namespace

TEST(ModelIo, RoundTripPreservesLogitsBitExactly) {
  const Model m = make_small_cnn({1, 12, 12}, 3, {4, 5, 7, 2}, 21);
  const Model back = decode_model(encode_model(m));
  ASSERT_EQ(back.layer_count(), m.layer_count());
  EXPECT_EQ(back.input_shape(), m.input_shape());
  std::mt19937_64 rng(3);
  const Tensor x = oracle::random_tensor({1, 12, 12}, rng);
  EXPECT_TRUE(bit_equal(predict(m, x), predict(back, x)));
  const auto& c0 = std::get<Conv2d>(m.layers()[0]);
  const auto& c1 = std::get<Conv2d>(back.layers()[0]);
  EXPECT_EQ(c1.stride, c0.stride);
  EXPECT_EQ(c1.padding, c0.padding);
}

TEST(ModelIo, LayoutStartsWithMagicVersionAndLayerCount) {
  const Model m = make_linear({2}, Tensor({1, 2}, std::vector<double>{1.0, 2.0}), Tensor({1}));
  const auto bytes = encode_model(m);
  ASSERT_GE(bytes.size(), 10u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "ATTB");
  EXPECT_EQ(bytes[4], kAttbVersion);
  EXPECT_EQ(bytes[5], 'M');
  EXPECT_EQ(std::vector<std::uint8_t>(bytes.begin() + 6, bytes.begin() + 10), le32(1));
}

TEST(ModelIo, CorruptionIsReportedWithOffset) {
  const Model m = make_linear({2}, Tensor({1, 2}, 1.0), Tensor({1}));
  auto bytes = encode_model(m);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_model(bad_magic), FormatError);

  auto bad_version = bytes;
  bad_version[4] = 99;
  EXPECT_THROW(decode_model(bad_version), FormatError);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  try {
    decode_model(truncated);
    FAIL() << "truncated container accepted";
  } catch (const FormatError& e) {
    EXPECT_LE(e.offset(), truncated.size());
  }

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_model(trailing), FormatError);
}

TEST(ModelIo, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "attrbench_model_io_test.attb";
  const Model m = make_small_cnn({1, 8, 8}, 2, {2, 2, 0, 1}, 4);
  save_model(m, path.string());
  const Model back = load_model(path.string());
  EXPECT_EQ(encode_model(back), encode_model(m));
  std::filesystem::remove(path);
  EXPECT_THROW(load_model(path.string()), FormatError);
}

TEST(AttributionStore, RoundTripByKey) {
  AttributionStore store;
  store[attribution_key("synth", 3, "Gradient", 1)] = Tensor({1, 2, 2}, std::vector<double>{0.5, -1, 2, 1e-300});
  store[attribution_key("synth", 4, "IntegratedGradients", 0)] = Tensor({3}, 7.0);
  const auto bytes = encode_attributions(store);
  EXPECT_EQ(bytes[5], 'A');
  const AttributionStore back = decode_attributions(bytes);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_TRUE(bit_equal(back.at("synth/3/Gradient/1"), store.at("synth/3/Gradient/1")));
  EXPECT_THROW(decode_model(bytes), FormatError);  // wrong content type
}
