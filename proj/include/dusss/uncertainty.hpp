#pragma once

// Semantic Similarity-Supervision: similarities between two embeddings are
// relaxed towards 1 by an exponential of their relative uncertainty,
//   D_u = a * W2(g1, g2) + b,   rel = D_u / max(D_s, eps),
//   D_sss = exp(-lambda * rel), sim_hat = 1 - (1 - sim) * D_sss,
// where W2 is the squared 2-Wasserstein distance of diagonal Gaussians
// and D_s is the Euclidean distance of semantic embeddings.

#include <span>
#include <vector>

#include "dusss/models.hpp"
#include "dusss/tensor.hpp"

namespace dusss {

struct SSSConfig {
  double a = 1.0;
  double b = 0.0;
  double lambda = 1.0;

  void validate() const;  // a > 0, lambda > 0
};

inline constexpr double kSemanticFloor = 1e-8;
inline constexpr double kNormFloor = 1e-12;

struct DiagGaussian {
  std::vector<double> mu, sigma;
};

double semantic_distance(std::span<const double> s1, std::span<const double> s2);
double wasserstein2_sq(const DiagGaussian& g1, const DiagGaussian& g2);
double uncertainty_level(double d2w, const SSSConfig& cfg);
double relative_uncertainty(double d_u, double d_s);
double sss_factor(double rel_u, const SSSConfig& cfg);
double uncertain_sim(double sim, double d_sss);
// Cosine of L2-normalized vectors, norms floored at kNormFloor, clamped to [-1, 1].
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct PairwiseScores {
  Tensor sim;      // [N,N] cosine of normalized semantic embeddings
  Tensor d_s;      // [N,N] semantic distance
  Tensor d_2w;     // [N,N] squared 2-Wasserstein distance
  Tensor sim_hat;  // [N,N] uncertainty-modulated similarity
};

// Row i scores anchor i against candidate j. With `sss_enabled` false the
// Gaussian terms are skipped and sim_hat is sim itself.
PairwiseScores pairwise_scores(const Tensor& semantic_a, const GaussianEmbedding& gauss_a,
                               const Tensor& semantic_b, const GaussianEmbedding& gauss_b,
                               const SSSConfig& cfg, bool sss_enabled = true);

}  // namespace dusss
