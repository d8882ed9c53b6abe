// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "bflab/error.hpp"
#include "bflab/kernels.hpp"
#include "bflab/tape.hpp"
#include "bflab/tensor.hpp"

namespace bflab::num {
namespace {

DenseTensor random_tensor(std::vector<std::size_t> dims, std::uint64_t seed,
                          double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  DenseTensor t(std::move(dims));
  for (double& v : t.values()) v = n(rng);
  return t;
}

TEST(DenseTensor, ShapeAndAccess) {
  auto m = DenseTensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m.at(1, 2), 6.0);
  EXPECT_EQ(m.row(1)[0], 4.0);
  EXPECT_THROW(DenseTensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Matmul, HandComputed) {
  auto a = DenseTensor::matrix(2, 2, {1, 2, 3, 4});
  auto b = DenseTensor::matrix(2, 2, {5, 6, 7, 8});
  auto c = matmul(a, b);
  EXPECT_EQ(c, DenseTensor::matrix(2, 2, {19, 22, 43, 50}));
  EXPECT_THROW(matmul(a, DenseTensor::matrix(3, 1, {1, 2, 3})), ShapeError);
}

TEST(Matmul, MatchesNaiveLoopBitForBit) {
  // Odd sizes exercise the tile tails.
  auto a = random_tensor({37, 29}, 1);
  auto b = random_tensor({29, 53}, 2);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 37; ++i) {
    for (std::size_t j = 0; j < 53; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 29; ++k) s += a.at(i, k) * b.at(k, j);
      ASSERT_EQ(c.at(i, j), s) << i << "," << j;
    }
  }
}

TEST(Softmax, RowsSumToOne) {
  auto x = random_tensor({5, 11}, 3, 10.0);
  auto p = softmax_rows(x);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 11; ++c) s += p.at(r, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  auto x = random_tensor({4, 16}, 4, 3.0);
  auto y = layernorm_rows(x, DenseTensor({16}, 1.0), DenseTensor({16}));
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 16; ++c) m += y.at(r, c);
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
    v /= 16;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(Gelu, DerivativeMatchesFiniteDifference) {
  for (double x : {-3.0, -1.0, -0.1, 0.0, 0.4, 2.5}) {
    const double h = 1e-5;
    const double fd = (gelu(x + h) - gelu(x - h)) / (2 * h);
    EXPECT_NEAR(gelu_derivative(x), fd, 1e-8) << x;
  }
}

TEST(CrossEntropy, UniformIsLogV) {
  std::vector<double> logits(96, 0.25);
  EXPECT_NEAR(cross_entropy_logits(logits, 5), std::log(96.0), 1e-12);
}

TEST(CrossEntropy, ClampsZeroProbability) {
  std::vector<double> probs = {1.0, 0.0};
  EXPECT_NEAR(cross_entropy(probs, 1), -std::log(kLogClamp), 1e-9);
}

TEST(Mse, HandComputed) {
  auto x = DenseTensor::matrix(2, 2, {1, 2, 3, 4});
  auto r = DenseTensor::matrix(2, 2, {1, 0, 0, 4});
  // Row squared distances 4 and 9; mean over rows.
  EXPECT_DOUBLE_EQ(mse_rows(x, r), 6.5);
}

TEST(Attention, CausalAndNormalized) {
  auto qkv = random_tensor({6, 24}, 5, 2.0);
  auto res = causal_attention(qkv, 2);
  ASSERT_EQ(res.probs.size(), 2u);
  for (const auto& p : res.probs) {
    for (std::size_t t = 0; t < 6; ++t) {
      double s = 0.0;
      for (std::size_t q = 0; q < 6; ++q) {
        if (q > t) EXPECT_EQ(p.at(t, q), 0.0);
        s += p.at(t, q);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Embedding, LookupAndBackward) {
  auto table = DenseTensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
  std::vector<int> ids = {2, 0, 2};
  auto e = embedding_lookup(table, ids);
  EXPECT_EQ(e, DenseTensor::matrix(3, 2, {5, 6, 1, 2, 5, 6}));
  DenseTensor g({3, 2});
  embedding_backward(ids, DenseTensor({3, 2}, 1.0), g);
  EXPECT_EQ(g, DenseTensor::matrix(3, 2, {1, 1, 0, 0, 2, 2}));
  std::vector<int> bad = {3};
  EXPECT_THROW(embedding_lookup(table, bad), IndexError);
}

// Central differences over every input element of a scalar-valued graph.
void check_gradient(const std::function<Var(GradTape&, Var)>& build,
                    DenseTensor x, double tol) {
  GradTape tape;
  Var xv = tape.parameter("x", x);
  Var loss = build(tape, xv);
  auto grads = tape.backward(loss);
  const DenseTensor& g = grads.at("x");
  const double h = 1e-5;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto eval = [&](double delta) {
      DenseTensor y = x;
      y[i] += delta;
      GradTape t;
      return t.scalar(build(t, t.parameter("x", y)));
    };
    const double fd = (eval(h) - eval(-h)) / (2 * h);
    EXPECT_NEAR(g[i], fd, tol * std::max(1.0, std::abs(fd))) << "element " << i;
  }
}

TEST(GradTape, MatmulLayerNormGeluChain) {
  auto w = random_tensor({4, 5}, 6);
  check_gradient(
      [&](GradTape& t, Var x) {
        Var h = t.matmul(x, t.constant(w));
        h = t.layernorm(h, t.constant(DenseTensor({5}, 1.3)),
                        t.constant(DenseTensor({5}, 0.1)));
        h = t.gelu(h);
        return t.cross_entropy_rows(h, {{0, 1}, {2, 4}});
      },
      random_tensor({3, 4}, 7), 1e-6);
}

TEST(GradTape, AttentionAndMass) {
  check_gradient(
      [](GradTape& t, Var x) {
        Var a = t.causal_attention(x, 2);
        Var mass = t.attention_mass(a, {{3, 0}, {2, 1}});
        Var ce = t.cross_entropy_rows(a, {{3, 2}});
        return t.weighted_sum({{mass, -1.0}, {ce, 0.5}});
      },
      random_tensor({4, 12}, 8), 1e-6);
}

TEST(GradTape, EmbeddingMseAndBias) {
  auto ref = random_tensor({3, 4}, 9);
  check_gradient(
      [&](GradTape& t, Var table) {
        Var e = t.embedding(table, {1, 0, 1});
        e = t.add_bias(e, t.constant(DenseTensor::vector({0.1, -0.2, 0.3, 0.0})));
        return t.mse_rows(e, ref);
      },
      random_tensor({2, 4}, 10), 1e-6);
}

TEST(GradTape, SharedParameterAccumulates) {
  GradTape tape;
  Var x = tape.parameter("x", DenseTensor::vector({2.0}));
  Var s = tape.sum(tape.add(x, tape.scale(x, 3.0)));
  auto g = tape.backward(s);
  EXPECT_DOUBLE_EQ(g.at("x")[0], 4.0);
}

}  // namespace
}  // namespace bflab::num
