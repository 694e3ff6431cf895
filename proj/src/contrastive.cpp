#include "dusss/contrastive.hpp"

#include <cmath>
#include <stdexcept>

#include "dusss/uncertainty.hpp"

namespace dusss {

Tensor Temperature::tau() const {
  return exp(clamp(log_tau, std::log(kMin), std::log(kMax)));
}

double Temperature::value() const { return tau().item(); }

Tensor info_nce(const Tensor& scores, const Tensor& tau) {
  if (scores.rank() != 2 || scores.dim(0) != scores.dim(1))
    throw std::invalid_argument("info_nce: expects a square score matrix, got " +
                                shape_str(scores.shape()));
  if (scores.dim(0) < 2) throw std::invalid_argument("info_nce: batch size must be >= 2");
  for (double v : scores.data())
    if (!std::isfinite(v)) throw std::invalid_argument("info_nce: non-finite score");
  if (tau.numel() != 1 || !(tau.item() > 0.0))
    throw std::invalid_argument("info_nce: temperature must be a positive scalar");
  Tensor logits = div(scores, tau);
  return mean(sub(logsumexp(logits, 1), diagonal(logits)));
}

Tensor cmc_loss(const Tensor& i2t, const Tensor& t2i, const Tensor& tau) {
  if (i2t.shape() != t2i.shape())
    throw std::invalid_argument("cmc_loss: mismatched batch sizes " + shape_str(i2t.shape()) +
                                " vs " + shape_str(t2i.shape()));
  return scale(add(info_nce(i2t, tau), info_nce(t2i, tau)), 0.5);
}

Tensor imc_loss(const Tensor& i2i, const Tensor& t2t, const Tensor& tau) {
  if (!i2i.defined() || !t2t.defined())
    throw std::invalid_argument("imc_loss: missing augmented view");
  if (i2i.shape() != t2t.shape())
    throw std::invalid_argument("imc_loss: mismatched batch sizes");
  return scale(add(info_nce(i2i, tau), info_nce(t2t, tau)), 0.5);
}

Tensor mask_pool(const Tensor& v_f, const Tensor& mask) {
  if (v_f.rank() != 4 || mask.rank() != 3 || v_f.dim(0) != mask.dim(0) ||
      v_f.dim(2) != mask.dim(1) || v_f.dim(3) != mask.dim(2))
    throw std::invalid_argument("mask_pool: shape mismatch " + shape_str(v_f.shape()) + " vs " +
                                shape_str(mask.shape()));
  const std::size_t b = v_f.dim(0), d = v_f.dim(1), hw = v_f.dim(2) * v_f.dim(3);
  Tensor m = reshape(mask, {b, 1, hw});
  Tensor weighted = sum(mul(reshape(v_f, {b, d, hw}), m), 2);
  return div(weighted, clamp_min(sum(m, 2), 1e-8));
}

Tensor tg_loss(const Tensor& v_f_t, const Tensor& t_f, const Tensor& tau) {
  if (v_f_t.rank() != 2 || v_f_t.shape() != t_f.shape())
    throw std::invalid_argument("tg_loss: shape mismatch " + shape_str(v_f_t.shape()) + " vs " +
                                shape_str(t_f.shape()));
  if (v_f_t.dim(0) < 2) throw std::invalid_argument("tg_loss: K must be >= 2");
  Tensor sim = matmul(normalize(v_f_t, 1, kNormFloor), transpose(normalize(t_f, 1, kNormFloor)));
  return scale(add(info_nce(sim, tau), info_nce(transpose(sim), tau)), 0.5);
}

}  // namespace dusss
