#include "dusss/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dusss {

void SSSConfig::validate() const {
  if (!(a > 0.0)) throw std::invalid_argument("SSS scale a must be positive");
  if (!(lambda > 0.0)) throw std::invalid_argument("SSS lambda must be positive");
  if (!std::isfinite(b)) throw std::invalid_argument("SSS offset b must be finite");
}

double semantic_distance(std::span<const double> s1, std::span<const double> s2) {
  if (s1.size() != s2.size())
    throw std::invalid_argument("semantic_distance: length mismatch " + std::to_string(s1.size()) +
                                " vs " + std::to_string(s2.size()));
  double acc = 0.0;
  for (std::size_t i = 0; i < s1.size(); ++i) acc += (s1[i] - s2[i]) * (s1[i] - s2[i]);
  return std::sqrt(acc);
}

double wasserstein2_sq(const DiagGaussian& g1, const DiagGaussian& g2) {
  if (g1.mu.size() != g2.mu.size() || g1.sigma.size() != g2.sigma.size() ||
      g1.mu.size() != g1.sigma.size())
    throw std::invalid_argument("wasserstein2_sq: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < g1.mu.size(); ++i) {
    acc += (g1.mu[i] - g2.mu[i]) * (g1.mu[i] - g2.mu[i]);
    acc += (g1.sigma[i] - g2.sigma[i]) * (g1.sigma[i] - g2.sigma[i]);
  }
  return acc;
}

double uncertainty_level(double d2w, const SSSConfig& cfg) { return cfg.a * d2w + cfg.b; }

double relative_uncertainty(double d_u, double d_s) { return d_u / std::max(d_s, kSemanticFloor); }

double sss_factor(double rel_u, const SSSConfig& cfg) { return std::exp(-cfg.lambda * rel_u); }

double uncertain_sim(double sim, double d_sss) { return 1.0 - (1.0 - sim) * d_sss; }

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::clamp(dot / (std::max(std::sqrt(na), kNormFloor) * std::max(std::sqrt(nb), kNormFloor)),
                    -1.0, 1.0);
}

PairwiseScores pairwise_scores(const Tensor& semantic_a, const GaussianEmbedding& gauss_a,
                               const Tensor& semantic_b, const GaussianEmbedding& gauss_b,
                               const SSSConfig& cfg, bool sss_enabled) {
  if (semantic_a.rank() != 2 || semantic_a.shape() != semantic_b.shape())
    throw std::invalid_argument("pairwise_scores: batch mismatch " + shape_str(semantic_a.shape()) +
                                " vs " + shape_str(semantic_b.shape()));
  const std::size_t n = semantic_a.dim(0), ds = semantic_a.dim(1);
  if (n < 2) throw std::invalid_argument("pairwise_scores: batch size must be >= 2");

  PairwiseScores out;
  out.sim = clamp(matmul(normalize(semantic_a, 1, kNormFloor), transpose(normalize(semantic_b, 1, kNormFloor))),
                  -1.0, 1.0);
  if (!sss_enabled) {
    out.sim_hat = out.sim;
    return out;
  }
  cfg.validate();
  if (gauss_a.mu.shape() != gauss_b.mu.shape() || gauss_a.mu.dim(0) != n)
    throw std::invalid_argument("pairwise_scores: Gaussian batch mismatch");
  const std::size_t du = gauss_a.mu.dim(1);

  auto pair_diff = [n](const Tensor& a, const Tensor& b, std::size_t width) {
    return sub(reshape(a, {n, 1, width}), reshape(b, {1, n, width}));
  };
  out.d_s = l2_norm(pair_diff(semantic_a, semantic_b, ds), 2);
  out.d_2w = add(sum(square(pair_diff(gauss_a.mu, gauss_b.mu, du)), 2),
                 sum(square(pair_diff(gauss_a.sigma, gauss_b.sigma, du)), 2));
  Tensor d_u = add_scalar(scale(out.d_2w, cfg.a), cfg.b);
  Tensor rel = div(d_u, clamp_min(out.d_s, kSemanticFloor));
  Tensor d_sss = exp(scale(rel, -cfg.lambda));
  out.sim_hat = sub(Tensor::scalar(1.0), mul(sub(Tensor::scalar(1.0), out.sim), d_sss));
  return out;
}

}  // namespace dusss
