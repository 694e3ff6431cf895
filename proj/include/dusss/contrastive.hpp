#pragma once

#include "dusss/tensor.hpp"

namespace dusss {

// Learnable temperature stored as log(tau); the effective value is clamped
// to [kMin, kMax].
struct Temperature {
  static constexpr double kMin = 0.01;
  static constexpr double kMax = 100.0;

  Tensor log_tau;

  Tensor tau() const;
  double value() const;
};

// Mean over anchors i of -log softmax_j(scores[i][j] / tau)[i]; positives sit
// on the diagonal. `tau` is a one-element tensor.
Tensor info_nce(const Tensor& scores, const Tensor& tau);

// Cross-modal loss: mean of image->text and text->image InfoNCE.
Tensor cmc_loss(const Tensor& i2t, const Tensor& t2i, const Tensor& tau);
// Intra-modal loss: mean of image->augmented-image and text->augmented-text InfoNCE.
Tensor imc_loss(const Tensor& i2i, const Tensor& t2t, const Tensor& tau);

// Mask-weighted average of pixel features: v_f [B,d,H,W], mask [B,H,W] -> [B,d].
Tensor mask_pool(const Tensor& v_f, const Tensor& mask);

// Bidirectional InfoNCE on plain cosine similarity between pooled
// text-conditioned visual vectors [K,d] and text vectors [K,d].
Tensor tg_loss(const Tensor& v_f_t, const Tensor& t_f, const Tensor& tau);

}  // namespace dusss
