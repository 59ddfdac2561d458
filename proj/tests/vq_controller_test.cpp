#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "asac/vq_controller.hpp"
#include "gradcheck.hpp"

using namespace asac;
using namespace asac::vq;
using asac::testing::random_tensor;

namespace {

CodebookState make_codebook(std::vector<double> values, std::size_t dim, double decay = 0.99,
                            double threshold = 0.0) {
  const std::size_t k = values.size() / dim;
  CodebookState cb;
  cb.embeddings = Tensor::from({k, dim}, values);
  cb.ema_cluster_size = Tensor::full({k}, 1.0);
  cb.ema_sum = Tensor::from({k, dim}, values);
  cb.decay = decay;
  cb.dead_threshold = threshold;
  return cb;
}

void set_identity(Linear& l) {
  auto w = l.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < std::min(l.in_features, l.out_features); ++i) w[i * l.out_features + i] = 1.0;
  auto b = l.bias.mutable_data();
  std::fill(b.begin(), b.end(), 0.0);
}

}  // namespace

TEST(ControllerConfig, Validation) {
  ControllerConfig c;
  c.input_dim = 5;
  c.latent_dim = 32;
  c.codebook_dim = 12;
  EXPECT_THROW(c.validate(), ConfigurationError);
  c.codebook_dim = 16;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.chunks_per_row(), 2u);
  c.ema_decay = 1.0;
  EXPECT_THROW(c.validate(), ConfigurationError);
}

TEST(Quantize, MatchesBruteForceNearest) {
  std::mt19937_64 rng(1);
  auto cb = CodebookState::random(16, 4, 0.99, 2.0, rng);
  auto z = random_tensor({10, 8}, rng, -1, 1, false);
  auto q = quantize(z, cb);
  ASSERT_EQ(q.indices.size(), 20u);
  for (std::size_t c = 0; c < 20; ++c) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < 16; ++j) {
      double d = 0;
      for (std::size_t i = 0; i < 4; ++i) d += std::pow(z.at(c * 4 + i) - cb.embeddings.at(j * 4 + i), 2);
      best = std::min(best, d);
    }
    EXPECT_DOUBLE_EQ(q.distances[c], best);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(q.codes.at(c * 4 + i), cb.embeddings.at(q.indices[c] * 4 + i));
  }
}

TEST(Quantize, TieGoesToLowestIndex) {
  auto cb = make_codebook({1, 0, -1, 0, 1, 0}, 2);
  auto q = quantize(Tensor::from({1, 2}, {0, 0}), cb);
  EXPECT_EQ(q.indices[0], 0u);
}

TEST(Quantize, ExactCodeMapsToItself) {
  std::mt19937_64 rng(2);
  auto cb = CodebookState::random(8, 3, 0.99, 2.0, rng);
  std::vector<double> v(cb.embeddings.data().begin() + 15, cb.embeddings.data().begin() + 18);
  auto q = quantize(Tensor::from({1, 3}, v), cb);
  EXPECT_EQ(q.indices[0], 5u);
  EXPECT_EQ(q.distances[0], 0.0);
}

TEST(Quantize, RejectsPartialChunks) {
  std::mt19937_64 rng(3);
  auto cb = CodebookState::random(4, 3, 0.99, 2.0, rng);
  EXPECT_THROW(quantize(Tensor::zeros({2, 4}), cb), ContractError);
}

TEST(Quantize, StraightThroughGradient) {
  std::mt19937_64 rng(4);
  auto cb = CodebookState::random(8, 2, 0.99, 2.0, rng);
  cb.embeddings.set_requires_grad(true);
  auto z = random_tensor({3, 4}, rng);
  auto w = random_tensor({3, 4}, rng, -1, 1, false);
  auto q = quantize(z, cb);
  // Downstream loss on z_q: the z_q gradient is w, and it must reach z_e unchanged.
  sum(mul(q.z_q, w)).backward();
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(z.grad()[i], w.at(i));
  EXPECT_FALSE(cb.embeddings.has_grad());
}

TEST(EmaUpdate, ClusterSizeAndInvariant) {
  auto cb = make_codebook({0, 0, 10, 10}, 2, 0.9);
  std::mt19937_64 rng(5);
  const std::vector<double> chunks{1, 1, 3, 3};
  const std::vector<std::size_t> idx{0, 0};
  ema_update(cb, chunks, idx, rng);
  EXPECT_DOUBLE_EQ(cb.ema_cluster_size.at(0), 0.9 + 0.1 * 2);
  EXPECT_DOUBLE_EQ(cb.ema_cluster_size.at(1), 0.9);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t i = 0; i < 2; ++i)
      EXPECT_NEAR(cb.embeddings.at(j * 2 + i),
                  cb.ema_sum.at(j * 2 + i) / std::max(cb.ema_cluster_size.at(j), kEmaDivisorFloor), 1e-15);
  // sum_0 = 0.9 * 0 + 0.1 * (1 + 3) = 0.4; embedding = 0.4 / 1.1.
  EXPECT_NEAR(cb.embeddings.at(0), 0.4 / 1.1, 1e-15);
}

TEST(EmaUpdate, TotalClusterSizeFollowsEma) {
  std::mt19937_64 rng(6);
  auto cb = CodebookState::random(5, 2, 0.95, 0.0, rng);
  for (int step = 0; step < 20; ++step) {
    double before = 0;
    for (double s : cb.ema_cluster_size.data()) before += s;
    auto z = random_tensor({7, 2}, rng, -1, 1, false);
    auto q = quantize(z, cb);
    ema_update(cb, z.data(), q.indices, rng);
    double after = 0;
    for (double s : cb.ema_cluster_size.data()) {
      EXPECT_GE(s, 0.0);
      after += s;
    }
    EXPECT_NEAR(after, 0.95 * before + 0.05 * 7, 1e-12);
  }
}

TEST(EmaUpdate, EmptyBatchIsNoOp) {
  auto cb = make_codebook({1, 2, 3, 4}, 2);
  std::mt19937_64 rng(7);
  ema_update(cb, {}, {}, rng);
  EXPECT_EQ(cb.embeddings.at(3), 4.0);
  EXPECT_EQ(cb.ema_cluster_size.at(0), 1.0);
}

TEST(EmaUpdate, DeadCodeRevivedFromBatch) {
  // Code 1 is never chosen; with threshold 0.95 it dies on the first update.
  auto cb = make_codebook({0, 0, 100, 100}, 2, 0.9, 0.95);
  std::mt19937_64 rng(8);
  const std::vector<double> chunks{0.5, -0.5, 0.25, 0.75};
  const std::vector<std::size_t> idx{0, 0};
  ema_update(cb, chunks, idx, rng);
  const double x = cb.embeddings.at(2), y = cb.embeddings.at(3);
  const bool from_batch = (x == 0.5 && y == -0.5) || (x == 0.25 && y == 0.75);
  EXPECT_TRUE(from_batch);
  EXPECT_EQ(cb.ema_cluster_size.at(1), 1.0);
  EXPECT_EQ(cb.ema_sum.at(2), x);
}

TEST(EmaUpdate, TwoClusterStreamConverges) {
  std::mt19937_64 rng(9);
  auto cb = CodebookState::random(2, 2, 0.9, 0.0, rng);
  std::normal_distribution<double> noise(0.0, 0.05);
  const double means[2][2] = {{1.0, 1.0}, {-1.0, 0.5}};
  for (int step = 0; step < 500; ++step) {
    std::vector<double> chunks;
    for (int i = 0; i < 32; ++i) {
      const auto& m = means[i % 2];
      chunks.push_back(m[0] + noise(rng));
      chunks.push_back(m[1] + noise(rng));
    }
    auto z = Tensor::from({32, 2}, chunks);
    auto q = quantize(z, cb);
    ema_update(cb, chunks, q.indices, rng);
  }
  for (const auto& m : means) {
    double best = 1e9;
    for (std::size_t j = 0; j < 2; ++j)
      best = std::min(best, std::hypot(cb.embeddings.at(j * 2) - m[0], cb.embeddings.at(j * 2 + 1) - m[1]));
    EXPECT_LT(best, 0.05);
  }
}

TEST(Controller, IdentityLayersReproduceNonNegativeInput) {
  ControllerConfig c;
  c.input_dim = 4;
  c.latent_dim = 4;
  c.codebook_dim = 4;
  c.codebook_size = 3;
  ParameterStore store;
  std::mt19937_64 rng(10);
  AttentionController ctl(c, store, "c", rng);
  set_identity(ctl.encoder_in());
  set_identity(ctl.encoder_out());
  set_identity(ctl.decoder_in());
  set_identity(ctl.decoder_out());
  auto x = Tensor::from({1, 4}, {0.5, 1.0, 0.0, 2.0});
  auto z = ctl.encode(x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(z.at(i), x.at(i));
  auto zq = Tensor::from({1, 4}, {0.1, 0.2, 0.3, 0.4});
  auto y = ctl.decode(zq);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y.at(i), zq.at(i));
}

TEST(Controller, TaskEmbeddingContract) {
  ControllerConfig c;
  c.input_dim = 3;
  c.latent_dim = 4;
  c.codebook_dim = 2;
  c.codebook_size = 4;
  ParameterStore store;
  std::mt19937_64 rng(11);
  AttentionController plain(c, store, "a", rng);
  EXPECT_THROW(plain.decode(Tensor::zeros({2, 4}), Tensor::zeros({2, 3})), ConfigurationError);
  c.decoder_task_dim = 3;
  AttentionController tasked(c, store, "b", rng);
  EXPECT_NO_THROW(tasked.decode(Tensor::zeros({2, 4}), Tensor::zeros({2, 3})));
  EXPECT_THROW(tasked.decode(Tensor::zeros({2, 4})), ConfigurationError);
}

TEST(Controller, CodebookIsANonTrainableBuffer) {
  ControllerConfig c;
  c.input_dim = 3;
  c.latent_dim = 4;
  c.codebook_dim = 2;
  ParameterStore store;
  std::mt19937_64 rng(12);
  AttentionController ctl(c, store, "ctl", rng);
  for (const auto& e : store.entries()) {
    const bool is_codebook = e.name.find(".codebook.") != std::string::npos;
    EXPECT_EQ(e.trainable, !is_codebook) << e.name;
  }
}

TEST(Controller, GradientThroughWholeController) {
  ControllerConfig c;
  c.input_dim = 3;
  c.latent_dim = 4;
  c.codebook_dim = 2;
  c.codebook_size = 5;
  ParameterStore store;
  std::mt19937_64 rng(13);
  AttentionController ctl(c, store, "ctl", rng);
  auto x = random_tensor({4, 3}, rng);
  std::vector<Tensor> inputs{x};
  for (auto& e : store.entries())
    if (e.trainable) inputs.push_back(e.tensor);
  FrozenQuantization frozen;
  bool first = true;
  auto f = [&] {
    if (first) frozen.record(); else frozen.replay();
    first = false;
    auto out = ctl.forward(x);
    // Only the commitment term of vq_loss carries gradient; the codebook term is
    // stop-gradient on both sides, which central differences cannot see.
    return add(mse(out.reconstruction, x), mse(out.z_e, out.quantized.codes));
  };
  EXPECT_LT(asac::testing::gradcheck(f, inputs), 1e-6);
}

TEST(Controller, ReplayedQuantizationIsShiftedEncoderOutput) {
  std::mt19937_64 rng(14);
  auto cb = CodebookState::random(4, 2, 0.99, 2.0, rng);
  auto z = random_tensor({2, 2}, rng, -1, 1, false);
  FrozenQuantization frozen;
  frozen.record();
  auto base = quantize(z, cb);
  frozen.replay();
  auto moved = Tensor::from({2, 2}, {z.at(0) + 0.5, z.at(1), z.at(2), z.at(3)});
  auto q = quantize(moved, cb);
  EXPECT_DOUBLE_EQ(q.z_q.at(0), base.codes.at(0) + 0.5);
  EXPECT_EQ(q.indices, base.indices);
}
