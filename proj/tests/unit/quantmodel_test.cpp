// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "bflab/checkpoint.hpp"
#include "bflab/error.hpp"
#include "bflab/model.hpp"
#include "bflab/quant.hpp"
#include "micro.hpp"

namespace bflab {
namespace {

using num::DenseTensor;
using quant::BitLocation;

TEST(Quantize, AllZeroFallsBackToUnitScale) {
  auto q = quant::quantize(DenseTensor::vector({0, 0, 0}));
  EXPECT_EQ(q.scale, 1.0);
  EXPECT_EQ(q.codes, (std::vector<std::int8_t>{0, 0, 0}));
}

TEST(Quantize, ExactlyRepresentable) {
  auto q = quant::quantize(DenseTensor::vector({-1.27, 0, 1.27}));
  EXPECT_DOUBLE_EQ(q.scale, 0.01);
  EXPECT_EQ(q.codes, (std::vector<std::int8_t>{-127, 0, 127}));
  auto d = quant::dequantize(q);
  EXPECT_DOUBLE_EQ(d[0], -1.27);
  EXPECT_DOUBLE_EQ(d[2], 1.27);
}

TEST(Quantize, RoundsHalfAwayFromZero) {
  // 0.5 / (1/127) = 63.5 rounds away from zero to 64.
  auto q = quant::quantize(DenseTensor::vector({0.5, -1.0}));
  EXPECT_DOUBLE_EQ(q.scale, 1.0 / 127.0);
  EXPECT_EQ(q.codes, (std::vector<std::int8_t>{64, -127}));
}

TEST(Quantize, ZeroCodesDequantizeToZero) {
  quant::QuantTensor q{"t", {3}, {0, 0, 0}, 0.37};
  const auto d = quant::dequantize(q);
  for (double v : d.values()) EXPECT_EQ(v, 0.0);
}

TEST(Quantize, RoundTripWithinHalfScaleOnRandomTensors) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 1000; ++t) {
    std::normal_distribution<double> n(0.0, std::exp(double(t % 7) - 3.0));
    DenseTensor w({1 + rng() % 64});
    for (double& v : w.values()) v = n(rng);
    auto q = quant::quantize(w);
    ASSERT_GT(q.scale, 0.0);
    auto d = quant::dequantize(q);
    for (std::size_t i = 0; i < w.size(); ++i) {
      ASSERT_LE(std::abs(d[i] - w[i]), q.scale / 2 + 1e-12) << t << ":" << i;
    }
  }
}

TEST(FlipCode, TwosComplementExamples) {
  EXPECT_EQ(quant::flip_code(0, 0), 1);
  EXPECT_EQ(quant::flip_code(1, 7), -127);
  EXPECT_EQ(quant::flip_code(-1, 7), 127);
  EXPECT_EQ(quant::flip_code(0, 7), -128);
}

TEST(FlipBit, InvolutionAndHammingOne) {
  const auto p = testing::micro_params(1);
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const auto& q = p.quantized[rng() % p.quantized.size()];
    BitLocation loc{q.name, rng() % q.size(), static_cast<int>(rng() % 8)};
    auto once = model::flip_bit(p, loc);
    ASSERT_EQ(model::flip_bit(once, loc), p);
    int hamming = 0;
    for (std::size_t t = 0; t < p.quantized.size(); ++t) {
      ASSERT_EQ(once.quantized[t].scale, p.quantized[t].scale);
      for (std::size_t i = 0; i < p.quantized[t].size(); ++i) {
        hamming += std::popcount(static_cast<unsigned>(
            static_cast<std::uint8_t>(once.quantized[t].codes[i] ^ p.quantized[t].codes[i])));
      }
    }
    ASSERT_EQ(hamming, 1);
    ASSERT_EQ(once.floats, p.floats);
  }
}

TEST(FlipBit, InvalidLocations) {
  const auto p = testing::micro_params(1);
  EXPECT_THROW(model::flip_bit(p, {"nope", 0, 0}), LocationError);
  EXPECT_THROW(model::flip_bit(p, {"lm_head", p.quant("lm_head").size(), 0}),
               LocationError);
  EXPECT_THROW(model::flip_bit(p, {"lm_head", 0, 8}), LocationError);
}

TEST(Forward, SingleTokenAttentionIsOne) {
  const auto p = testing::micro_params(2, 2);
  std::vector<int> tok = {5};
  auto out = model::forward(p, tok);
  ASSERT_EQ(out.attention.size(), 2u);
  for (const auto& layer : out.attention) {
    for (const auto& head : layer) {
      ASSERT_EQ(head.dims(), (std::vector<std::size_t>{1, 1}));
      EXPECT_EQ(head[0], 1.0);
    }
  }
}

TEST(Forward, ShapesCausalityAndNormalization) {
  const auto p = testing::micro_params(3, 2);
  std::vector<int> tok = {1, 17, 40, 3, 88, 9, 9, 60};
  auto out = model::forward(p, tok);
  EXPECT_EQ(out.logits.dims(), (std::vector<std::size_t>{8, 96}));
  for (const auto& layer : out.attention) {
    for (const auto& a : layer) {
      for (std::size_t t = 0; t < 8; ++t) {
        double s = 0.0;
        for (std::size_t q = 0; q < 8; ++q) {
          if (q > t) EXPECT_EQ(a.at(t, q), 0.0);
          s += a.at(t, q);
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
    }
  }
}

TEST(Forward, OverlongInputIsRejected) {
  const auto p = testing::micro_params(3);
  std::vector<int> tok(49, 1);
  EXPECT_THROW(model::forward(p, tok), ContractError);
}

TEST(Forward, FlipAndUnflipRestoresOutputBitForBit) {
  const auto p = testing::micro_params(4, 2);
  std::vector<int> tok = {1, 30, 31, 32, 2};
  const auto base = model::forward(p, tok);
  for (const auto& q : p.quantized) {
    BitLocation loc{q.name, q.size() / 2, 6};
    auto flipped = model::flip_bit(p, loc);
    auto back = model::flip_bit(flipped, loc);
    auto out = model::forward(back, tok);
    EXPECT_EQ(out.logits, base.logits) << q.name;
  }
}

TEST(Forward, ToleratesMinus128Code) {
  auto p = testing::micro_params(4);
  auto& q = p.quant("lm_head");
  q.codes[0] = 0;
  auto flipped = model::flip_bit(p, {"lm_head", 0, 7});
  EXPECT_EQ(flipped.quant("lm_head").codes[0], -128);
  std::vector<int> tok = {1, 2, 3};
  EXPECT_TRUE(model::forward(flipped, tok).logits.all_finite());
}

TEST(GreedyDecode, ZeroBudgetAndDeterminism) {
  const auto p = testing::micro_params(5);
  std::vector<int> prefix = {1, 20, 21};
  EXPECT_EQ(model::greedy_decode(p, prefix, 0), prefix);
  auto a = model::greedy_decode(p, prefix, 10);
  auto b = model::greedy_decode(p, prefix, 10);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 13u);
}

TEST(GreedyDecode, TieBreaksToLowestId) {
  std::vector<double> row = {0.1, 0.7, 0.7, 0.2};
  EXPECT_EQ(model::argmax_lowest(row), 1u);
}

TEST(Checkpoint, ByteExactRoundTrip) {
  const auto p = testing::micro_params(6, 2);
  const auto bytes = checkpoint::serialize(p);
  const auto back = checkpoint::deserialize(bytes);
  EXPECT_EQ(back, p);
  EXPECT_EQ(checkpoint::serialize(back), bytes);
  const auto path = std::filesystem::temp_directory_path() / "bflab_ckpt_test.bflp";
  checkpoint::save_checkpoint(p, path);
  EXPECT_EQ(checkpoint::load_checkpoint(path), p);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsReportedByField) {
  const auto bytes = checkpoint::serialize(testing::micro_params(6));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    checkpoint::deserialize(bad_magic);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos) << e.what();
  }
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(checkpoint::deserialize(bad_version), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  EXPECT_THROW(checkpoint::deserialize(truncated), FormatError);
  auto bad_crc = bytes;
  bad_crc[bytes.size() / 2] ^= 1;
  EXPECT_THROW(checkpoint::deserialize(bad_crc), FormatError);
}

TEST(Checkpoint, DiffListsExactlyTheFlippedBits) {
  const auto p = testing::micro_params(7, 2);
  std::vector<BitLocation> flips = {
      {"h0.mlp.w_fc", 17, 3}, {"lm_head", 5, 7}, {"lm_head", 5, 0}, {"tok_emb", 900, 2}};
  auto attacked = p;
  for (const auto& f : flips) attacked.flip_bit_inplace(f);
  std::sort(flips.begin(), flips.end());
  EXPECT_EQ(checkpoint::diff(p, attacked), flips);
  EXPECT_TRUE(checkpoint::diff(p, p).empty());
}

TEST(ModelConfig, Validation) {
  auto c = testing::micro_config(1);
  c.n_head = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace bflab
