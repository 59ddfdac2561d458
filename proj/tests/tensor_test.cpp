#include <gtest/gtest.h>

#include <cmath>

#include "asac/tensor.hpp"
#include "gradcheck.hpp"

using namespace asac;
using asac::testing::gradcheck;
using asac::testing::random_tensor;

namespace {

// Scalarises with fixed random weights so every output element matters.
Tensor weighted(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng, -1, 1, false)));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(Tensor, ConstructionAndShape) {
  auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ContractError);
  EXPECT_THROW(Tensor::scalar(1).dim(3), ContractError);
}

TEST(Tensor, ShapeMismatchIsAContractError) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({3, 2});
  EXPECT_THROW(add(a, b), ContractError);
  EXPECT_THROW(matmul(a, a), ContractError);
  EXPECT_THROW(reshape(a, {4}), ContractError);
}

TEST(Tensor, MatmulMatchesNaive) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({4, 5}, rng, -1, 1, false);
  auto b = random_tensor({5, 3}, rng, -1, 1, false);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += a.at(i * 5 + k) * b.at(k * 3 + j);
      EXPECT_NEAR(c.at(i * 3 + j), s, 1e-12);
    }
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(2);
  auto s = softmax_lastdim(random_tensor({3, 7}, rng, -30, 30, false));
  for (std::size_t r = 0; r < 3; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 7; ++c) total += s.at(r * 7 + c);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Tensor, BackwardAccumulatesOnLeaves) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  sum(mul(x, x)).backward();
  sum(x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 5.0);
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Tensor, DiamondGraphGradient) {
  // y = (x*x) + (x*x) shares a subexpression; gradient must be 4x.
  auto x = Tensor::from({1}, {3.0}, true);
  auto sq = mul(x, x);
  sum(add(sq, sq)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Tensor, StopGradientAndStraightThrough) {
  auto x = Tensor::from({2}, {1.0, -2.0}, true);
  auto v = Tensor::from({2}, {5.0, 6.0}, true);
  auto st = straight_through(x, v);
  EXPECT_DOUBLE_EQ(st.at(0), 5.0);
  sum(scale(st, 3.0)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_FALSE(v.has_grad());

  auto y = Tensor::from({1}, {2.0}, true);
  sum(mul(stop_gradient(y), y)).backward();
  EXPECT_DOUBLE_EQ(y.grad()[0], 2.0);
}

TEST(Tensor, DropoutIsIdentityInEval) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({10}, rng);
  auto y = dropout(x, 0.5, false, rng);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(x.at(i), y.at(i));
}

TEST(Tensor, DropoutKeepsExpectation) {
  std::mt19937_64 rng(4);
  auto x = Tensor::full({20000}, 1.0);
  auto y = dropout(x, 0.25, true, rng);
  double total = 0;
  for (double v : y.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-12);
    total += v;
  }
  EXPECT_NEAR(total / 20000, 1.0, 0.02);
}

// Finite-difference checks, one per primitive.

TEST(TensorGrad, Elementwise) {
  std::mt19937_64 rng(10);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  EXPECT_LT(gradcheck([&] { return weighted(add(a, b)); }, {a, b}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(sub(a, b)); }, {a, b}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(mul(a, b)); }, {a, b}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(scale(a, -1.7)); }, {a}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(exp(a)); }, {a}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(gelu(a)); }, {a}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(sigmoid(a)); }, {a}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(leaky_relu(a, 0.01)); }, {a}), kTol);
  auto pos = random_tensor({5}, rng, 0.5, 2.0);
  EXPECT_LT(gradcheck([&] { return weighted(log(pos)); }, {pos}), kTol);
}

TEST(TensorGrad, BroadcastAndReductions) {
  std::mt19937_64 rng(11);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({4}, rng);
  auto c = random_tensor({3, 4}, rng);
  EXPECT_LT(gradcheck([&] { return weighted(add_broadcast(a, b)); }, {a, b}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(add_broadcast(a, c)); }, {a, c}), kTol);
  EXPECT_LT(gradcheck([&] { return scale(sum(a), 0.3); }, {a}), kTol);
  EXPECT_LT(gradcheck([&] { return mean(mul(a, a)); }, {a}), kTol);
  auto d = random_tensor({2, 3, 4}, rng);
  EXPECT_LT(gradcheck([&] { return mse(a, d); }, {a, d}), kTol);
}

TEST(TensorGrad, LinearAlgebra) {
  std::mt19937_64 rng(12);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  EXPECT_LT(gradcheck([&] { return weighted(matmul(a, b)); }, {a, b}), kTol);
  auto x = random_tensor({2, 3, 4}, rng);
  auto y = random_tensor({2, 4, 5}, rng);
  EXPECT_LT(gradcheck([&] { return weighted(bmm(x, y)); }, {x, y}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(transpose(x)); }, {x}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(transpose(a)); }, {a}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(permute(x, {1, 2, 0})); }, {x}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(reshape(x, {6, 4})); }, {x}), kTol);
}

TEST(TensorGrad, Structural) {
  std::mt19937_64 rng(13);
  auto a = random_tensor({2, 3}, rng);
  auto b = random_tensor({1, 3}, rng);
  auto c = random_tensor({2, 2}, rng);
  EXPECT_LT(gradcheck([&] { return weighted(concat({a, b}, 0)); }, {a, b}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(concat({a, c}, 1)); }, {a, c}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(slice(a, 1, 1, 2)); }, {a}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(expand(a, 3)); }, {a}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(repeat_interleave(a, 3)); }, {a}), kTol);
  auto table = random_tensor({4, 3}, rng);
  const std::vector<std::size_t> idx{2, 0, 2, 3};
  EXPECT_LT(gradcheck([&] { return weighted(embedding(table, idx)); }, {table}), kTol);
}

TEST(TensorGrad, Normalisation) {
  std::mt19937_64 rng(14);
  auto x = random_tensor({3, 5}, rng, -3, 3);
  auto g = random_tensor({5}, rng);
  auto b = random_tensor({5}, rng);
  EXPECT_LT(gradcheck([&] { return weighted(softmax_lastdim(x)); }, {x}), kTol);
  EXPECT_LT(gradcheck([&] { return weighted(layer_norm(x, g, b)); }, {x, g, b}), kTol);
  EXPECT_LT(gradcheck(
                [&] {
                  std::mt19937_64 r(5);
                  return weighted(dropout(x, 0.3, true, r));
                },
                {x}),
            kTol);
}

TEST(TensorGrad, StraightThroughRoutesToThrough) {
  std::mt19937_64 rng(15);
  auto x = random_tensor({6}, rng);
  auto v = random_tensor({6}, rng, -1, 1, false);
  // d/dx of w . st(x, v) is w: identical to d/dx of w . x.
  sum(mul(straight_through(x, v), Tensor::full({6}, 2.5))).backward();
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 2.5);
}
