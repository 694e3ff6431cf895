#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dusss/data.hpp"
#include "dusss/gradcheck.hpp"
#include "dusss/models.hpp"
#include "dusss/verify.hpp"

using namespace dusss;

namespace {

Tensor random_images(Rng& rng, std::size_t b, std::size_t size) {
  std::vector<double> v(b * size * size);
  for (double& x : v) x = uniform01(rng);
  return Tensor::from({b, 1, size, size}, v);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor param(const NamedTensors& named, const std::string& name) {
  for (const auto& [n, t] : named)
    if (n == name) return t;
  throw std::runtime_error("no parameter " + name);
}

TokenBatch one_sequence(std::vector<std::size_t> ids, std::size_t l_max) {
  ids.resize(l_max, Vocabulary::kPad);
  return TokenBatch{ids, 1, l_max};
}

}  // namespace

TEST(ImageEncoder, ShapeContract) {
  ModelConfig cfg;
  Rng rng(1);
  ImageEncoder enc(cfg, rng);
  ImageFeatures f = enc.encode(random_images(rng, 1, 32));
  EXPECT_EQ(f.patch_grid.shape(), (Shape{1, 32, 4, 4}));
  EXPECT_EQ(f.cls.shape(), (Shape{1, 32}));
  EXPECT_EQ(f.semantic.shape(), (Shape{1, 16}));
}

TEST(ImageEncoder, IdenticalImagesGiveIdenticalFeatures) {
  ModelConfig cfg;
  Rng rng(2);
  ImageEncoder enc(cfg, rng);
  Tensor img = random_images(rng, 1, 32);
  Tensor pair = concat({img, img}, 0);
  ImageFeatures f = enc.encode(pair);
  const std::size_t n = f.semantic.dim(1);
  for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(f.semantic[i], f.semantic[n + i]);
  EXPECT_EQ(values(enc.encode(img).cls), values(enc.encode(img).cls));
}

TEST(ImageEncoder, ZeroImageThroughBiasFreeStackGivesZeroGrid) {
  ModelConfig cfg;
  Rng rng(3);
  ImageEncoder enc(cfg, rng);
  NamedTensors named;
  enc.collect("image_encoder", named);
  for (auto& [n, t] : named)
    if (n.ends_with(".bias") || n.ends_with("pos_embed"))
      for (double& v : t.mutable_data()) v = 0.0;
  ImageFeatures f = enc.encode(Tensor::zeros({1, 1, 32, 32}));
  for (double v : f.patch_grid.data()) EXPECT_EQ(v, 0.0);
}

TEST(ImageEncoder, RejectsNonDivisibleSize) {
  ModelConfig cfg;
  cfg.image_size = 30;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  ModelConfig ok;
  Rng rng(4);
  ImageEncoder enc(ok, rng);
  EXPECT_THROW(enc.encode(Tensor::zeros({1, 1, 24, 24})), std::invalid_argument);
}

TEST(ImageEncoder, ShapeContractAcrossSupportedSizes) {
  for (std::size_t size : {16u, 32u, 64u})
    for (std::size_t patch : {4u, 8u}) {
      ModelConfig cfg;
      cfg.image_size = size;
      cfg.patch = patch;
      cfg.validate();
      Rng rng(size + patch);
      ImageEncoder enc(cfg, rng);
      GroundingDecoder dec(cfg, rng);
      SegNetwork seg(cfg, rng);
      Tensor img = random_images(rng, 2, size);
      ImageFeatures f = enc.encode(img);
      const std::size_t p = size / patch;
      EXPECT_EQ(f.patch_grid.shape(), (Shape{2, cfg.d, p, p}));
      EXPECT_EQ(dec(f.patch_grid).shape(), (Shape{2, cfg.d, size, size}));
      EXPECT_EQ(seg.forward(img).shape(), (Shape{2, size, size}));
    }
}

TEST(TextEncoder, ShapeContractWithMaskedPadRows) {
  ModelConfig cfg;
  Rng rng(5);
  TextEncoder enc(cfg, rng);
  TextFeatures f = enc.encode(one_sequence({Vocabulary::kCls, 5, 6, 7, 8}, cfg.l_max));
  ASSERT_EQ(f.token_grid.shape(), (Shape{1, 16, 32}));
  std::size_t zero_rows = 0;
  for (std::size_t r = 0; r < 16; ++r) {
    bool all_zero = true;
    for (std::size_t c = 0; c < 32; ++c) all_zero &= f.token_grid[r * 32 + c] == 0.0;
    zero_rows += all_zero;
  }
  EXPECT_EQ(zero_rows, 11u);
  EXPECT_EQ(f.pooled.shape(), (Shape{1, 32}));
  EXPECT_EQ(f.cls.shape(), (Shape{1, 32}));
  EXPECT_EQ(f.semantic.shape(), (Shape{1, 16}));
}

TEST(TextEncoder, SameTokensGiveSamePooledFeature) {
  ModelConfig cfg;
  Rng rng(6);
  TextEncoder enc(cfg, rng);
  TokenBatch t = one_sequence({Vocabulary::kCls, 9, 4, 11}, cfg.l_max);
  EXPECT_EQ(values(enc.encode(t).pooled), values(enc.encode(t).pooled));
}

TEST(TextEncoder, PermutingPadPositionsLeavesPooledFeatureUnchanged) {
  ModelConfig cfg;
  Rng rng(7);
  TextEncoder enc(cfg, rng);
  TokenBatch t = one_sequence({Vocabulary::kCls, 9, 4, 11, 3}, cfg.l_max);
  const std::vector<double> before = values(enc.encode(t).pooled);
  NamedTensors named;
  enc.collect("text_encoder", named);
  // Reverse the position embeddings of the pad slots and scramble the pad embedding.
  Tensor pos = param(named, "text_encoder.pos_embed");
  auto p = pos.mutable_data();
  const std::size_t d = cfg.d;
  for (std::size_t a = 5, b = cfg.l_max - 1; a < b; ++a, --b)
    for (std::size_t c = 0; c < d; ++c) std::swap(p[a * d + c], p[b * d + c]);
  Tensor tok = param(named, "text_encoder.token_embed");
  for (std::size_t c = 0; c < d; ++c) tok.mutable_data()[Vocabulary::kPad * d + c] += 3.0;
  const std::vector<double> after = values(enc.encode(t).pooled);
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(before[i], after[i], 1e-12);
}

TEST(TextEncoder, RejectsUnknownTokenId) {
  ModelConfig cfg;
  Rng rng(8);
  TextEncoder enc(cfg, rng);
  EXPECT_THROW(enc.encode(one_sequence({Vocabulary::kCls, cfg.vocab_size}, cfg.l_max)),
               std::invalid_argument);
}

TEST(GaussianHead, SigmaIsPositiveForManyInputs) {
  Rng rng(9);
  GaussianHead head(32, 16, rng);
  std::vector<double> v(10000 * 32);
  for (double& x : v) x = uniform(rng, -5, 5);
  GaussianEmbedding g = head(Tensor::from({10000, 32}, v));
  for (double s : g.sigma.data()) ASSERT_GT(s, 0.0);
}

TEST(GaussianHead, ZeroHeadGivesStandardGaussian) {
  Rng rng(10);
  GaussianHead head(32, 16, rng);
  head.zero();
  GaussianEmbedding g = head(Tensor::zeros({2, 32}));
  for (double m : g.mu.data()) EXPECT_EQ(m, 0.0);
  for (double s : g.sigma.data()) EXPECT_EQ(s, 1.0);
}

TEST(GaussianHead, WassersteinGradientMatchesFiniteDifferences) {
  Rng rng(11);
  GaussianHead head(6, 4, rng);
  NamedTensors named;
  head.collect("h", named);
  std::vector<double> v(2 * 6);
  for (double& x : v) x = uniform(rng, -1, 1);
  Tensor cls = Tensor::from({2, 6}, v);
  auto f = [&](const std::vector<Tensor>&) {
    GaussianEmbedding g = head(cls);
    Tensor dmu = sub(slice(g.mu, 0, 0, 1), slice(g.mu, 0, 1, 1));
    Tensor dsig = sub(slice(g.sigma, 0, 0, 1), slice(g.sigma, 0, 1, 1));
    return add(sum(square(dmu)), sum(square(dsig)));
  };
  GradcheckResult r = gradcheck(f, tensors_of(named));
  EXPECT_GT(r.checked, 0u);
  EXPECT_LE(r.max_error, 1e-5);
}

TEST(Grounding, LiftsPatchGridToPixels) {
  ModelConfig cfg;
  Rng rng(12);
  GroundingDecoder dec(cfg, rng);
  EXPECT_EQ(cfg.ground_stages(), 3u);
  EXPECT_EQ(dec(Tensor::zeros({1, 32, 4, 4})).shape(), (Shape{1, 32, 32, 32}));
  EXPECT_THROW(dec(Tensor::zeros({1, 32, 8, 8})), std::invalid_argument);
}

TEST(Grounding, ConstantGridStaysConstantThroughIdentityStages) {
  ModelConfig cfg;
  Rng rng(13);
  GroundingDecoder dec(cfg, rng);
  dec.set_identity();
  std::vector<double> v(32 * 16);
  for (std::size_t c = 0; c < 32; ++c)
    for (std::size_t i = 0; i < 16; ++i) v[c * 16 + i] = 0.1 * static_cast<double>(c) + 0.5;
  Tensor out = dec(Tensor::from({1, 32, 4, 4}, v));
  for (std::size_t c = 0; c < 32; ++c)
    for (std::size_t i = 0; i < 32 * 32; ++i)
      ASSERT_NEAR(out[c * 1024 + i], 0.1 * static_cast<double>(c) + 0.5, 1e-12);
}

TEST(SegNetwork, ZeroFinalLayerGivesHalfProbabilities) {
  ModelConfig cfg;
  Rng rng(14);
  SegNetwork net(cfg, rng);
  net.zero_final_layer();
  Tensor logits = net.forward(random_images(rng, 2, 32));
  EXPECT_EQ(logits.shape(), (Shape{2, 32, 32}));
  Tensor probs = sigmoid(logits);
  for (double v : probs.data()) ASSERT_EQ(v, 0.5);
}

TEST(SegNetwork, DeterministicAndShapeChecked) {
  ModelConfig cfg;
  Rng rng(15);
  SegNetwork net(cfg, rng);
  Tensor img = random_images(rng, 1, 32);
  EXPECT_EQ(values(net.forward(img)), values(net.forward(img)));
  EXPECT_THROW(net.forward(Tensor::zeros({1, 1, 16, 16})), std::exception);
}

TEST(Vlm, SameSeedGivesSameParameters) {
  ModelConfig cfg;
  Vlm a(cfg, 21), b(cfg, 21);
  NamedTensors pa = a.named_parameters(), pb = b.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_EQ(values(pa[i].second), values(pb[i].second));
  }
  EXPECT_EQ(pa.front().first.rfind("image_encoder.", 0), 0u);
}

TEST(Models, EndToEndGradcheckAtTwentyPoints) {
  VerifyOptions opts;
  opts.filter = "grad.model.";
  opts.points = 20;
  for (const CheckResult& r : run_verify(opts)) EXPECT_TRUE(r.passed) << r.name << ": " << r.detail;
}
