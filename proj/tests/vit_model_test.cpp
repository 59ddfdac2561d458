#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "asac/binary_io.hpp"
#include "asac/vit_model.hpp"
#include "gradcheck.hpp"

using namespace asac;
using namespace asac::model;
using asac::testing::random_tensor;

namespace {

ModelConfig tiny(bool use_asac, TaskMode mode = TaskMode::none) {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.num_layers = 2;
  c.num_heads = 2;
  c.model_dim = 8;
  c.ffn_dim = 12;
  c.use_asac = use_asac;
  c.task_mode = mode;
  c.num_tasks = 2;
  c.task_dim = 3;
  c.controller.latent_dim = 4;
  c.controller.codebook_dim = 2;
  c.controller.codebook_size = 6;
  return c;
}

std::vector<Tensor> trainable(AsacModel& m) {
  std::vector<Tensor> out;
  for (auto& e : m.parameters().entries())
    if (e.trainable) out.push_back(e.tensor);
  return out;
}

}  // namespace

TEST(Patchify, CountsAndOrder) {
  std::vector<double> ramp(64);
  for (std::size_t i = 0; i < 64; ++i) ramp[i] = static_cast<double>(i);
  auto p = patchify(Tensor::from({1, 8, 8}, ramp), 4);
  EXPECT_EQ(p.shape(), (Shape{4, 16}));
  // Patch 1 is the top-right block; its first row is pixels 4..7 of image row 0.
  EXPECT_EQ(p.at(16 + 0), 4.0);
  EXPECT_EQ(p.at(16 + 4), 12.0);
  // Patch 2 starts at image row 4.
  EXPECT_EQ(p.at(32), 32.0);
}

TEST(Patchify, InverseRoundTrip) {
  std::mt19937_64 rng(1);
  auto img = random_tensor({2, 8, 8}, rng, 0, 1, false);
  auto p = patchify(img, 4);
  const std::size_t grid = 2, ps = 4;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        const std::size_t patch = (y / ps) * grid + x / ps;
        const std::size_t within = c * ps * ps + (y % ps) * ps + x % ps;
        ASSERT_EQ(p.at(patch * 32 + within), img.at((c * 8 + y) * 8 + x));
      }
}

TEST(Patchify, ConstantImage) {
  auto p = patchify(Tensor::full({1, 8, 8}, 0.25), 2);
  for (double v : p.data()) EXPECT_EQ(v, 0.25);
}

TEST(Patchify, RejectsIndivisibleSize) { EXPECT_THROW(patchify(Tensor::zeros({1, 8, 8}), 3), ContractError); }

TEST(ModelConfig, SequenceLength) {
  EXPECT_EQ(tiny(true).seq_len(), 5u);
  EXPECT_EQ(tiny(true, TaskMode::input).seq_len(), 6u);
  EXPECT_EQ(tiny(true, TaskMode::decoder).seq_len(), 5u);
  EXPECT_EQ(tiny(true, TaskMode::both).seq_len(), 6u);
}

TEST(ModelConfig, ValidationNamesKey) {
  auto c = tiny(true);
  c.patch_size = 3;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "model.patch_size");
  }
  auto d = tiny(false, TaskMode::decoder);
  EXPECT_THROW(d.validate(), ConfigError);
}

TEST(ModelConfig, JsonRoundTripAndStrictness) {
  auto c = tiny(true, TaskMode::both);
  c.head_kind = HeadKind::multilabel;
  c.num_classes = 3;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(model_config_from_json(j)), j);
  nlohmann::json bad = j;
  bad["controller"]["codebook_sise"] = 4;
  try {
    model_config_from_json(bad);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "model.controller.codebook_sise");
  }
  nlohmann::json wrong_type = j;
  wrong_type["model_dim"] = "wide";
  EXPECT_THROW(model_config_from_json(wrong_type), ConfigError);
}

TEST(Model, ForwardShapes) {
  for (auto kind : {HeadKind::binary, HeadKind::multiclass, HeadKind::multilabel}) {
    auto c = tiny(true);
    c.head_kind = kind;
    c.num_classes = 3;
    AsacModel m(c, 1);
    std::mt19937_64 rng(2);
    auto out = m.forward(random_tensor({4, 1, 8, 8}, rng, 0, 1, false), {}, ForwardContext{});
    EXPECT_EQ(out.logits.shape(), (Shape{4, c.output_width()}));
    EXPECT_EQ(out.layers.size(), 2u);
  }
}

TEST(Model, TaskIdsRequiredWhenConditioned) {
  AsacModel m(tiny(true, TaskMode::input), 1);
  auto x = Tensor::zeros({2, 1, 8, 8});
  EXPECT_THROW(m.forward(x, {}, ForwardContext{}), ContractError);
  const std::vector<std::size_t> bad{0, 2};
  EXPECT_THROW(m.forward(x, bad, ForwardContext{}), ContractError);
  const std::vector<std::size_t> ok{0, 1};
  EXPECT_NO_THROW(m.forward(x, ok, ForwardContext{}));
}

TEST(Model, TaskIdChangesOutput) {
  for (auto mode : {TaskMode::input, TaskMode::decoder, TaskMode::both}) {
    AsacModel m(tiny(true, mode), 3);
    std::mt19937_64 rng(4);
    auto x = random_tensor({1, 1, 8, 8}, rng, 0, 1, false);
    const std::vector<std::size_t> t0{0}, t1{1};
    auto a = m.forward(x, t0, ForwardContext{}).logits.at(0);
    auto b = m.forward(x, t1, ForwardContext{}).logits.at(0);
    EXPECT_NE(a, b) << to_string(mode);
  }
}

TEST(Model, BaselineHasNoControllerParameters) {
  AsacModel base(tiny(false), 1);
  for (const auto& e : base.parameters().entries()) EXPECT_EQ(e.name.find("controller"), std::string::npos);
  AsacModel asac(tiny(true), 1);
  EXPECT_GT(asac.parameters().entries().size(), base.parameters().entries().size());
}

TEST(Model, SameSeedSameWeights) {
  AsacModel a(tiny(true), 9), b(tiny(true), 9);
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
}

TEST(Model, FullModelGradientCheck) {
  AsacModel m(tiny(true), 5);
  std::mt19937_64 rng(6);
  auto x = random_tensor({2, 1, 8, 8}, rng, 0, 1);
  auto inputs = trainable(m);
  inputs.push_back(x);
  vq::FrozenQuantization frozen;
  bool first = true;
  auto f = [&] {
    if (first) frozen.record(); else frozen.replay();
    first = false;
    std::mt19937_64 drop(7);
    auto out = m.forward(x, {}, ForwardContext{true, &drop});
    Tensor total = sum(mul(out.logits, out.logits));
    for (const auto& l : out.layers) {
      total = add(total, mse(l.scores, l.reconstruction));
      // Gradient-carrying part of vq_loss (commitment term).
      total = add(total, mse(l.controller->z_e, l.controller->quantized.codes));
    }
    return total;
  };
  EXPECT_LT(asac::testing::gradcheck(f, inputs), 1e-4);
}

TEST(Checkpoint, RoundTripBitExact) {
  AsacModel m(tiny(true, TaskMode::both), 11);
  const auto bytes = serialize_checkpoint(m);
  auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(to_json(back.config()), to_json(m.config()));

  const auto path = (std::filesystem::temp_directory_path() / "asac_ckpt_test.asac").string();
  save_checkpoint(m, path);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path)), bytes);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruption) {
  AsacModel m(tiny(false), 1);
  auto bytes = serialize_checkpoint(m);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), io::FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), io::FormatError);
}

TEST(Checkpoint, CopyParameters) {
  AsacModel a(tiny(true), 1), b(tiny(true), 2);
  copy_parameters(a, b);
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
  AsacModel other(tiny(false), 1);
  EXPECT_ANY_THROW(copy_parameters(a, other));
}
