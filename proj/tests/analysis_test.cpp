#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "asac/analysis.hpp"
#include "asac/trainer.hpp"

using namespace asac;
using namespace asac::analysis;

namespace {

// P(D' >= d) by enumerating every split of the pooled sample.
double brute_force_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  const double d = ks_statistic(a, b);
  std::vector<bool> pick(pooled.size(), false);
  std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(a.size()), true);
  std::size_t total = 0, hits = 0;
  do {
    std::vector<double> x, y;
    for (std::size_t i = 0; i < pooled.size(); ++i) (pick[i] ? x : y).push_back(pooled[i]);
    ++total;
    hits += ks_statistic(x, y) >= d - 1e-12;
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return static_cast<double>(hits) / static_cast<double>(total);
}

model::AsacModel small_model(std::size_t image, bool use_asac = true) {
  model::ModelConfig c;
  c.image_size = image;
  c.patch_size = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.model_dim = 8;
  c.ffn_dim = 8;
  c.use_asac = use_asac;
  c.controller.latent_dim = 8;
  c.controller.codebook_dim = 4;
  c.controller.codebook_size = 8;
  return model::AsacModel(c, 5);
}

}  // namespace

TEST(Ks, StatisticHandCases) {
  const std::vector<double> a{1, 2, 3};
  EXPECT_EQ(ks_statistic(a, a), 0.0);
  const std::vector<double> b{10, 11};
  EXPECT_EQ(ks_statistic(a, b), 1.0);
  const std::vector<double> c{1, 2, 3, 4};
  const std::vector<double> d{3, 4, 5, 6};
  EXPECT_DOUBLE_EQ(ks_statistic(c, d), 0.5);
}

TEST(Ks, IdenticalSamplesGivePOne) {
  const std::vector<double> a{0.1, 0.5, 0.9, 0.5};
  for (auto m : {KsMethod::exact, KsMethod::asymptotic, KsMethod::automatic}) {
    auto r = ks_two_sample(a, a, m);
    EXPECT_EQ(r.d, 0.0);
    EXPECT_EQ(r.p, 1.0);
  }
}

TEST(Ks, ExactMatchesPermutationEnumeration) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> small(0, 4);
  for (std::size_t na = 3; na <= 5; ++na)
    for (std::size_t nb = 3; nb <= 5; ++nb)
      for (int trial = 0; trial < 4; ++trial) {
        // Integer values make ties common.
        std::vector<double> a(na), b(nb);
        for (auto& v : a) v = small(rng);
        for (auto& v : b) v = small(rng) + (trial % 2);
        const double expect = brute_force_p(a, b);
        EXPECT_NEAR(ks_exact_p(a, b, ks_statistic(a, b)), expect, 0.02) << na << "x" << nb << " trial " << trial;
      }
}

TEST(Ks, PDecreasesWithDistance) {
  std::vector<double> a(40), b(40);
  for (std::size_t i = 0; i < 40; ++i) a[i] = static_cast<double>(i);
  double prev = 1.1;
  for (double shift : {0.0, 5.0, 10.0, 20.0, 30.0}) {
    for (std::size_t i = 0; i < 40; ++i) b[i] = static_cast<double>(i) + shift;
    const auto r = ks_two_sample(a, b);
    EXPECT_LE(r.p, prev);
    prev = r.p;
  }
  EXPECT_LT(prev, 1e-6);
}

TEST(Ks, AsymptoticAgreesWithExactOnLargerSamples) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01;
  std::vector<double> a(80), b(80);
  for (auto& v : a) v = n01(rng);
  for (auto& v : b) v = n01(rng) + 0.4;
  const auto ex = ks_two_sample(a, b, KsMethod::exact);
  const auto as = ks_two_sample(a, b, KsMethod::asymptotic);
  EXPECT_EQ(ex.d, as.d);
  EXPECT_NEAR(ex.p, as.p, 0.02);
}

TEST(Ks, KolmogorovQLimits) {
  EXPECT_EQ(kolmogorov_q(0.0), 1.0);
  EXPECT_NEAR(kolmogorov_q(1.36), 0.0494, 1e-3);
  EXPECT_LT(kolmogorov_q(5.0), 1e-20);
  for (double l = 0.05; l < 3.0; l += 0.05) EXPECT_GE(kolmogorov_q(l), kolmogorov_q(l + 0.05));
}

TEST(Ks, MethodNames) {
  EXPECT_EQ(ks_method_from_string("auto"), KsMethod::automatic);
  EXPECT_EQ(ks_method_from_string("exact"), KsMethod::exact);
  EXPECT_THROW(ks_method_from_string("fast"), ContractError);
}

TEST(Ks, SampleModes) {
  UsageHistogram h{0, 0, {2, 0, 1}};
  EXPECT_EQ(ks_sample(h, SampleMode::counts), (std::vector<double>{2, 0, 1}));
  EXPECT_EQ(ks_sample(h, SampleMode::codes), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(h.total(), 3u);
}

TEST(Pairwise, SymmetricWithUnitDiagonal) {
  std::vector<UsageHistogram> hs{{0, 0, {5, 3, 0, 1}}, {0, 1, {0, 1, 6, 2}}, {0, 2, {4, 4, 1, 0}}};
  for (auto mode : {SampleMode::counts, SampleMode::codes}) {
    auto m = pairwise_ks(hs, mode);
    ASSERT_EQ(m.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(m[i][i], 1.0);
      for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_EQ(m[i][j], m[j][i]);
        EXPECT_GE(m[i][j], 0.0);
        EXPECT_LE(m[i][j], 1.0);
      }
    }
  }
  EXPECT_THROW(pairwise_ks({hs[0]}, SampleMode::counts), ContractError);
}

TEST(Usage, TotalsMatchChunkCount) {
  auto m = small_model(24);
  auto ds = data::triangles(1, 6, 24);
  auto hs = codebook_usage(m, ds, 0, 4);
  ASSERT_EQ(hs.size(), 2u);
  const auto& cc = m.config();
  const std::size_t chunks = cc.controller.latent_dim / cc.controller.codebook_dim;
  for (const auto& h : hs) {
    EXPECT_EQ(h.counts.size(), cc.controller.codebook_size);
    EXPECT_EQ(h.total(), ds.size() * cc.num_heads * cc.seq_len() * chunks);
  }
}

TEST(Usage, CountsMatchIndependentRecount) {
  auto m = small_model(24);
  auto ds = data::triangles(2, 5, 24);
  auto hs = codebook_usage(m, ds, 0, 2);
  auto idx = code_indices(m, ds, 0, 3);
  ASSERT_EQ(idx.size(), hs.size());
  for (std::size_t l = 0; l < hs.size(); ++l) {
    std::vector<std::uint64_t> recount(hs[l].counts.size(), 0);
    for (auto i : idx[l]) ++recount.at(i);
    EXPECT_EQ(recount, hs[l].counts);
  }
}

TEST(Usage, MultitaskFiltersByTask) {
  auto m = small_model(24);
  auto ds = data::multitask_triangles(3, 8, 24);
  auto h0 = codebook_usage(m, ds, 0);
  auto h1 = codebook_usage(m, ds, 1);
  EXPECT_EQ(h0[0].total(), h1[0].total());
  EXPECT_EQ(h0[0].task, 0u);
  EXPECT_EQ(h1[0].task, 1u);
  auto all = codebook_usage(m, data::triangles(3, 8, 24), 0);
  EXPECT_EQ(all[0].total(), 2 * h0[0].total());
}

TEST(Usage, BaselineHasNoCodebook) {
  auto m = small_model(24, false);
  auto ds = data::triangles(1, 2, 24);
  EXPECT_THROW(codebook_usage(m, ds, 0), ContractError);
}

TEST(Usage, JsonRoundTrip) {
  std::vector<UsageHistogram> hs{{0, 1, {1, 2, 3}}, {1, 1, {0, 0, 9}}};
  const auto j = to_json(hs);
  auto back = usages_from_json(j);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].layer, 1u);
  EXPECT_EQ(back[1].counts, hs[1].counts);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(matrix_to_json({{1.0, 0.5}, {0.5, 1.0}})["matrix"][0][1], 0.5);
}
