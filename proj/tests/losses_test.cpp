#include <gtest/gtest.h>

#include <cmath>

#include "asac/losses.hpp"
#include "asac/vq_controller.hpp"
#include "gradcheck.hpp"

using namespace asac;

TEST(ReconLoss, IdentityIsZero) {
  auto z = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(loss::recon_loss({{z, z}}).item(), 0.0);
}

TEST(ReconLoss, HandCase) {
  // Differences 1, 2, 1, 2 -> squares sum 10 over 4 elements.
  auto z = Tensor::from({2, 2}, {0, 0, 0, 0});
  auto zh = Tensor::from({2, 2}, {1, 2, -1, -2});
  EXPECT_DOUBLE_EQ(loss::recon_loss({{z, zh}}).item(), 2.5);
}

TEST(ReconLoss, GlobalMeanAcrossLayers) {
  auto a = Tensor::from({1}, {0});
  auto b = Tensor::from({3}, {0, 0, 0});
  // Squared errors 4 | 1,1,1 -> 7 / 4 elements.
  EXPECT_DOUBLE_EQ(loss::recon_loss({{a, Tensor::from({1}, {2})}, {b, Tensor::from({3}, {1, 1, 1})}}).item(), 1.75);
}

TEST(ReconLoss, ShapeMismatch) {
  EXPECT_THROW(loss::recon_loss({{Tensor::zeros({2}), Tensor::zeros({3})}}), ContractError);
}

TEST(VqLoss, CodesEqualEncoderIsZero) {
  auto z = Tensor::from({1, 2}, {0.3, -0.7}, true);
  EXPECT_EQ(vq::vq_loss(z, z.detach(), 1.0).item(), 0.0);
}

TEST(VqLoss, HandCase) {
  // Both terms are mean((z - e)^2) = 0.5 at beta = 1.
  auto z = Tensor::from({1, 2}, {1, 0}, true);
  auto e = Tensor::from({1, 2}, {0, 0});
  EXPECT_DOUBLE_EQ(vq::vq_loss(z, e, 1.0).item(), 1.0);
}

TEST(VqLoss, GradientOnlyFromCommitmentTerm) {
  auto z = Tensor::from({1, 2}, {1, 0}, true);
  auto e = Tensor::from({1, 2}, {0, 0});
  vq::vq_loss(z, e, 0.25).backward();
  // d/dz of 0.25 * mean((z - e)^2) = 0.25 * 2 (z - e) / 2.
  EXPECT_DOUBLE_EQ(z.grad()[0], 0.25);
  EXPECT_DOUBLE_EQ(z.grad()[1], 0.0);
}

TEST(CrossEntropy, UniformIsLogM) {
  for (std::size_t m : {2u, 5u, 10u}) {
    auto logits = Tensor::zeros({3, m});
    const std::vector<int> labels{0, 1, 1};
    EXPECT_NEAR(loss::ce_multiclass(logits, labels).item(), std::log(static_cast<double>(m)), 1e-9);
  }
}

TEST(CrossEntropy, FloorCapsHugeLoss) {
  auto logits = Tensor::from({1, 2}, {0.0, 2000.0});
  const std::vector<int> labels{0};
  EXPECT_NEAR(loss::ce_multiclass(logits, labels).item(), -std::log(1e-12), 1e-9);
}

TEST(CrossEntropy, Gradient) {
  std::mt19937_64 rng(1);
  auto logits = asac::testing::random_tensor({4, 3}, rng, -2, 2);
  const std::vector<int> labels{0, 2, 1, 2};
  EXPECT_LT(asac::testing::gradcheck([&] { return loss::ce_multiclass(logits, labels); }, {logits}), 1e-6);
}

TEST(CrossEntropy, LabelOutOfRange) {
  const std::vector<int> labels{3};
  EXPECT_THROW(loss::ce_multiclass(Tensor::zeros({1, 3}), labels), ContractError);
}

TEST(BinaryCrossEntropy, HalfProbabilityIsLn2) {
  EXPECT_NEAR(loss::bce_probability(0.5, 1), std::log(2.0), 1e-9);
  const std::vector<int> y{1};
  EXPECT_NEAR(loss::bce_binary(Tensor::zeros({1, 1}), y).item(), std::log(2.0), 1e-9);
}

TEST(BinaryCrossEntropy, ClampKeepsLossFinite) {
  EXPECT_TRUE(std::isfinite(loss::bce_probability(0.0, 1)));
  EXPECT_TRUE(std::isfinite(loss::bce_probability(1.0, 0)));
  const std::vector<int> y{0};
  EXPECT_TRUE(std::isfinite(loss::bce_binary(Tensor::from({1, 1}, {800.0}), y).item()));
}

TEST(BinaryCrossEntropy, GradientMultilabel) {
  std::mt19937_64 rng(2);
  auto logits = asac::testing::random_tensor({3, 2}, rng, -3, 3);
  const std::vector<int> y{1, 0, 0, 0, 1, 1};
  EXPECT_LT(asac::testing::gradcheck([&] { return loss::bce_binary(logits, y); }, {logits}), 1e-6);
}

TEST(TotalLoss, HandCase) {
  const auto b = loss::total_loss(1.0, 2.0, 3.0, 0.01);
  EXPECT_EQ(b.total, 1.05);
  auto t = loss::total_loss(Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(3.0), 0.01);
  EXPECT_EQ(t.item(), 1.05);
}

TEST(TotalLoss, BaselineIsTaskOnly) {
  auto task = Tensor::scalar(0.7);
  EXPECT_EQ(loss::total_loss(task, Tensor(), Tensor(), 0.01).item(), 0.7);
}
