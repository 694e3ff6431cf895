#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dusss/contrastive.hpp"
#include "dusss/data.hpp"
#include "dusss/pretrain.hpp"
#include "dusss/rng.hpp"

using namespace dusss;

namespace {

Tensor tau_of(double t) { return Tensor::scalar(t); }

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -1, double hi = 1) {
  std::vector<double> v(r * c);
  for (double& x : v) x = uniform(rng, lo, hi);
  return Tensor::from({r, c}, v);
}

std::vector<Sample> synthetic_pairs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticSample s = make_synthetic_sample(rng, 32);
    out.push_back(Sample{"s" + std::to_string(i), s.image, s.mask, s.caption, SplitTag::Labeled});
  }
  return out;
}

}  // namespace

TEST(InfoNce, UniformScoresGiveLogN) {
  for (std::size_t n : {2u, 4u, 8u})
    EXPECT_NEAR(info_nce(Tensor::full({n, n}, 0.3), tau_of(0.07)).item(), std::log(double(n)), 1e-12);
  EXPECT_NEAR(info_nce(Tensor::full({2, 2}, 0.0), tau_of(1.0)).item(), 0.693147, 1e-6);
  EXPECT_NEAR(info_nce(Tensor::full({4, 4}, 0.0), tau_of(1.0)).item(), 1.386294, 1e-6);
}

TEST(InfoNce, TwoByTwoHandValue) {
  Tensor s = Tensor::from({2, 2}, {1, 0, 0, 1});
  const double expect = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
  EXPECT_NEAR(info_nce(s, tau_of(0.5)).item(), expect, 1e-12);
  EXPECT_NEAR(expect, 0.126928, 1e-6);
}

TEST(InfoNce, RejectsBadInputs) {
  EXPECT_THROW(info_nce(Tensor::zeros({1, 1}), tau_of(1.0)), std::invalid_argument);
  EXPECT_THROW(info_nce(Tensor::zeros({2, 3}), tau_of(1.0)), std::invalid_argument);
  EXPECT_THROW(info_nce(Tensor::from({2, 2}, {0, NAN, 0, 0}), tau_of(1.0)), std::invalid_argument);
  EXPECT_THROW(info_nce(Tensor::zeros({2, 2}), tau_of(0.0)), std::invalid_argument);
}

TEST(InfoNce, NonNegativeAndVanishesWithDiagonalDominance) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) EXPECT_GE(info_nce(random_matrix(rng, 5, 5), tau_of(0.1)).item(), 0.0);
  double previous = std::log(4.0);
  for (double gap : {1.0, 5.0, 20.0, 100.0}) {
    Tensor s = Tensor::from({4, 4}, {gap, 0, 0, 0, 0, gap, 0, 0, 0, 0, gap, 0, 0, 0, 0, gap});
    const double l = info_nce(s, tau_of(1.0)).item();
    EXPECT_LT(l, previous);
    previous = l;
  }
  EXPECT_LT(previous, 1e-40);
}

TEST(InfoNce, LoweringAnOffDiagonalScoreLowersTheLoss) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    Tensor s = random_matrix(rng, 4, 4);
    std::size_t i = uniform_index(rng, 4), j = uniform_index(rng, 4);
    if (i == j) j = (j + 1) % 4;
    std::vector<double> v(s.data().begin(), s.data().end());
    v[i * 4 + j] -= uniform(rng, 0.01, 1.0);
    EXPECT_LT(info_nce(Tensor::from({4, 4}, v), tau_of(0.2)).item(), info_nce(s, tau_of(0.2)).item());
  }
}

TEST(CmcLoss, DefinitionAndSymmetry) {
  Rng rng(3);
  Tensor a = random_matrix(rng, 6, 6), b = random_matrix(rng, 6, 6);
  Tensor tau = tau_of(0.07);
  EXPECT_NEAR(cmc_loss(a, b, tau).item(), 0.5 * (info_nce(a, tau).item() + info_nce(b, tau).item()), 1e-12);
  EXPECT_NEAR(cmc_loss(a, a, tau).item(), info_nce(a, tau).item(), 1e-12);
  EXPECT_NEAR(cmc_loss(Tensor::zeros({2, 2}), Tensor::zeros({2, 2}), tau).item(), std::log(2.0), 1e-12);
  EXPECT_THROW(cmc_loss(Tensor::zeros({2, 2}), Tensor::zeros({3, 3}), tau), std::invalid_argument);
}

TEST(ImcLoss, DefinitionAndSeparability) {
  Rng rng(4);
  Tensor a = random_matrix(rng, 5, 5), b = random_matrix(rng, 5, 5);
  Tensor tau = tau_of(0.3);
  EXPECT_NEAR(imc_loss(a, b, tau).item(), 0.5 * (info_nce(a, tau).item() + info_nce(b, tau).item()), 1e-12);
  EXPECT_NEAR(imc_loss(Tensor::zeros({2, 2}), Tensor::zeros({2, 2}), tau).item(), std::log(2.0), 1e-12);
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_LT(imc_loss(eye, eye, tau_of(0.07)).item(), std::log(3.0));
  EXPECT_THROW(imc_loss(eye, Tensor(), tau), std::invalid_argument);
}

TEST(TgLoss, HandCases) {
  Tensor tau = tau_of(0.07);
  EXPECT_NEAR(tg_loss(Tensor::full({2, 3}, 1.0), Tensor::full({2, 3}, 1.0), tau).item(), std::log(2.0), 1e-12);
  Tensor e = Tensor::from({2, 2}, {1, 0, 0, 1});
  EXPECT_LT(tg_loss(e, e, tau).item(), 0.01);
  EXPECT_THROW(tg_loss(Tensor::zeros({1, 2}), Tensor::zeros({1, 2}), tau), std::invalid_argument);
  EXPECT_THROW(tg_loss(Tensor::zeros({2, 2}), Tensor::zeros({3, 2}), tau), std::invalid_argument);
}

TEST(TgLoss, SymmetricSimilarityGivesEqualHalves) {
  Tensor v = Tensor::from({3, 3}, {1, 0.3, 0.3, 0.3, 1, 0.3, 0.3, 0.3, 1});
  Tensor t = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor tau = tau_of(0.5);
  Tensor sim = matmul(normalize(v, 1), transpose(normalize(t, 1)));
  EXPECT_NEAR(info_nce(sim, tau).item(), info_nce(transpose(sim), tau).item(), 1e-12);
  EXPECT_NEAR(tg_loss(v, t, tau).item(), info_nce(sim, tau).item(), 1e-12);
}

TEST(MaskPool, WeightedAverageOfPixelFeatures) {
  // Two channels on a 1x2 image; the mask keeps only the second pixel.
  Tensor v = Tensor::from({1, 2, 1, 2}, {1, 3, 5, 7});
  Tensor m = Tensor::from({1, 1, 2}, {0, 1});
  Tensor p = mask_pool(v, m);
  EXPECT_EQ(p[0], 3.0);
  EXPECT_EQ(p[1], 7.0);
  Tensor half = mask_pool(v, Tensor::from({1, 1, 2}, {0.5, 0.5}));
  EXPECT_EQ(half[0], 2.0);
  EXPECT_THROW(mask_pool(v, Tensor::zeros({1, 2, 2})), std::invalid_argument);
}

TEST(Temperature, ClampedToRange) {
  Temperature t{Tensor::scalar(std::log(1e-5))};
  EXPECT_NEAR(t.value(), Temperature::kMin, 1e-15);
  t.log_tau = Tensor::scalar(std::log(1e5));
  EXPECT_NEAR(t.value(), Temperature::kMax, 1e-12);
  t.log_tau = Tensor::scalar(std::log(0.07));
  EXPECT_NEAR(t.value(), 0.07, 1e-15);
}

TEST(Pretraining, LossOnFrozenBatchIsReproducible) {
  const Vocabulary vocab = Vocabulary::synthetic();
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  std::vector<Sample> pairs = synthetic_pairs(8, 5);
  std::vector<const Sample*> batch;
  for (const auto& s : pairs) batch.push_back(&s);
  auto run = [&] {
    Vlm vlm(cfg, 11);
    PretrainOptions opts;
    opts.batch_size = 8;
    Pretrainer trainer(vlm, opts);
    Rng rng(3);
    return trainer.step(batch, vocab, rng);
  };
  PretrainLosses a = run(), b = run();
  EXPECT_NEAR(a.l_cmc, b.l_cmc, 1e-12);
  EXPECT_NEAR(a.l_imc, b.l_imc, 1e-12);
  EXPECT_NEAR(a.total, b.total, 1e-12);
  EXPECT_TRUE(std::isfinite(a.total));
  EXPECT_GT(a.l_cmc, 0.0);
}
