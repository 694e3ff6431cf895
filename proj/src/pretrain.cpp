#include "dusss/pretrain.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "dusss/checkpoint.hpp"
#include "dusss/contrastive.hpp"
#include "dusss/semiseg.hpp"

namespace dusss {

namespace {

std::vector<Tensor> pretrain_params(const Vlm& vlm, const PretrainOptions& opt) {
  NamedTensors named;
  vlm.image_encoder.collect("image_encoder", named);
  vlm.text_encoder.collect("text_encoder", named);
  if (opt.sss_enabled) {
    vlm.image_gaussian.collect("image_gaussian", named);
    vlm.text_gaussian.collect("text_gaussian", named);
  }
  if (opt.w_tg > 0.0) vlm.grounding.collect("grounding", named);
  named.emplace_back("log_tau", vlm.log_tau);
  return tensors_of(named);
}

std::size_t argmax_row(std::span<const double> m, std::size_t n, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < n; ++j)
    if (m[row * n + j] > m[row * n + best]) best = j;
  return best;
}

}  // namespace

Retrieval retrieval_top1(const Vlm& vlm, const std::vector<Sample>& pairs, const Vocabulary& vocab,
                         std::size_t batch_size) {
  if (batch_size < 2) throw std::invalid_argument("retrieval_top1: batch size must be >= 2");
  NoGradGuard ng;
  std::size_t hits_i2t = 0, hits_t2i = 0, total = 0;
  const std::size_t size = vlm.cfg.image_size;
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    const std::size_t end = std::min(pairs.size(), start + batch_size);
    const std::size_t n = end - start;
    if (n < 2) break;
    std::vector<const std::vector<double>*> px;
    std::vector<const std::string*> texts;
    for (std::size_t i = start; i < end; ++i) {
      px.push_back(&pairs[i].image.pixels);
      texts.push_back(&pairs[i].text);
    }
    Tensor is = normalize(vlm.image_encoder.encode(stack_images(px, size)).semantic, 1, kNormFloor);
    Tensor ts = normalize(vlm.text_encoder.encode(make_token_batch(texts, vocab, vlm.cfg.l_max)).semantic,
                          1, kNormFloor);
    Tensor sim = matmul(is, transpose(ts));
    Tensor sim_t = transpose(sim);
    for (std::size_t i = 0; i < n; ++i) {
      if (*texts[argmax_row(sim.data(), n, i)] == *texts[i]) ++hits_i2t;
      if (*texts[argmax_row(sim_t.data(), n, i)] == *texts[i]) ++hits_t2i;
    }
    total += n;
  }
  if (total == 0) return {};
  return {static_cast<double>(hits_i2t) / static_cast<double>(total),
          static_cast<double>(hits_t2i) / static_cast<double>(total)};
}

Pretrainer::Pretrainer(Vlm& vlm, const PretrainOptions& options)
    : vlm_(vlm), options_(options), adam_(pretrain_params(vlm, options), options.adam) {
  options_.sss.validate();
}

PretrainLosses Pretrainer::step(const std::vector<const Sample*>& batch, const Vocabulary& vocab,
                                Rng& rng) {
  if (batch.size() < 2) throw std::invalid_argument("pretrain step: batch size must be >= 2");
  const std::size_t size = vlm_.cfg.image_size, l_max = vlm_.cfg.l_max;

  std::vector<const std::vector<double>*> px;
  std::vector<const std::string*> texts;
  for (const Sample* s : batch) {
    px.push_back(&s->image.pixels);
    texts.push_back(&s->text);
  }
  const Tensor images = stack_images(px, size);
  const TokenBatch tokens = make_token_batch(texts, vocab, l_max);

  const ImageFeatures img = vlm_.image_encoder.encode(images);
  const TextFeatures txt = vlm_.text_encoder.encode(tokens);
  GaussianEmbedding ig, tg;
  if (options_.sss_enabled) {
    ig = vlm_.image_gaussian(img.cls);
    tg = vlm_.text_gaussian(txt.cls);
  }
  const Tensor tau = Temperature{vlm_.log_tau}.tau();

  PretrainLosses out;
  const PairwiseScores i2t =
      pairwise_scores(img.semantic, ig, txt.semantic, tg, options_.sss, options_.sss_enabled);
  Tensor l_cmc = cmc_loss(i2t.sim_hat, transpose(i2t.sim_hat), tau);
  out.l_cmc = l_cmc.item();
  Tensor total = l_cmc;

  if (options_.imc_enabled) {
    std::vector<Sample> views;
    views.reserve(batch.size());
    for (const Sample* s : batch) {
      Sample v = augment(*s, options_.augment, rng);
      if (options_.view_noise > 0)
        for (double& p : v.image.pixels) p = std::clamp(p + options_.view_noise * normal(rng), 0.0, 1.0);
      views.push_back(std::move(v));
    }
    std::vector<const std::vector<double>*> vpx;
    std::vector<const std::string*> vtexts;
    for (const auto& v : views) {
      vpx.push_back(&v.image.pixels);
      vtexts.push_back(&v.text);
    }
    const ImageFeatures img2 = vlm_.image_encoder.encode(stack_images(vpx, size));
    const TextFeatures txt2 = vlm_.text_encoder.encode(make_token_batch(vtexts, vocab, l_max));
    GaussianEmbedding ig2, tg2;
    if (options_.sss_enabled) {
      ig2 = vlm_.image_gaussian(img2.cls);
      tg2 = vlm_.text_gaussian(txt2.cls);
    }
    const PairwiseScores i2i =
        pairwise_scores(img.semantic, ig, img2.semantic, ig2, options_.sss, options_.sss_enabled);
    const PairwiseScores t2t =
        pairwise_scores(txt.semantic, tg, txt2.semantic, tg2, options_.sss, options_.sss_enabled);
    Tensor l_imc = imc_loss(i2i.sim_hat, t2t.sim_hat, tau);
    out.l_imc = l_imc.item();
    total = add(total, l_imc);
  }

  if (options_.w_tg > 0.0) {
    const Tensor v_f = vlm_.grounding(img.patch_grid);
    const Tensor y_text = text_mask(v_f, txt.pooled);
    Tensor l_tg = tg_loss(mask_pool(v_f, y_text), txt.pooled, tau);
    out.l_tg = l_tg.item();
    total = add(total, scale(l_tg, options_.w_tg));
  }
  out.total = total.item();
  if (!std::isfinite(out.total))
    throw std::runtime_error("pretrain: non-finite loss (l_cmc=" + std::to_string(out.l_cmc) +
                             ", l_imc=" + std::to_string(out.l_imc) + ", l_tg=" +
                             std::to_string(out.l_tg) + ")");

  adam_.zero_grad();
  total.backward();
  for (auto& p : adam_.params())
    if (!p.has_grad()) p.node().grad_buffer();
  adam_.step();
  if (options_.round_f32) round_to_float(vlm_.named_parameters());
  return out;
}

PretrainResult pretrain(Vlm& vlm, const std::vector<Sample>& pairs, const Vocabulary& vocab,
                        const PretrainOptions& options,
                        const std::optional<std::filesystem::path>& step_csv,
                        const std::optional<std::filesystem::path>& epoch_csv) {
  if (pairs.size() < 2) throw std::invalid_argument("pretrain: need at least 2 image-text pairs");
  if (options.batch_size < 2) throw std::invalid_argument("pretrain: batch_size must be >= 2");
  if (options.round_f32) round_to_float(vlm.named_parameters());

  std::ofstream steps_out, epochs_out;
  if (step_csv) {
    steps_out.open(*step_csv);
    if (!steps_out) throw std::runtime_error("cannot write " + step_csv->string());
    steps_out << "step,l_cmc,l_imc,l_tg\n";
  }
  if (epoch_csv) {
    epochs_out.open(*epoch_csv);
    if (!epochs_out) throw std::runtime_error("cannot write " + epoch_csv->string());
    epochs_out << "epoch,l_cmc,l_imc,l_tg,top1_i2t,top1_t2i,tau\n";
  }

  Pretrainer trainer(vlm, options);
  Rng rng = make_rng(options.seed, "pretrain");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  PretrainResult result;
  std::size_t step_no = 0;
  char buf[256];
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), rng);
    PretrainEpoch log;
    log.epoch = epoch;
    std::size_t n_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      if (end - start < 2) break;
      std::vector<const Sample*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&pairs[order[i]]);
      const PretrainLosses l = trainer.step(batch, vocab, rng);
      ++step_no;
      ++n_steps;
      if (steps_out) {
        std::snprintf(buf, sizeof buf, "%zu,%.9f,%.9f,%.9f\n", step_no, l.l_cmc, l.l_imc, l.l_tg);
        steps_out << buf;
      }
      log.mean.l_cmc += l.l_cmc;
      log.mean.l_imc += l.l_imc;
      log.mean.l_tg += l.l_tg;
      log.mean.total += l.total;
    }
    const double inv = 1.0 / static_cast<double>(n_steps);
    log.mean.l_cmc *= inv;
    log.mean.l_imc *= inv;
    log.mean.l_tg *= inv;
    log.mean.total *= inv;
    const Retrieval r = retrieval_top1(vlm, pairs, vocab, options.batch_size);
    log.top1_i2t = r.i2t;
    log.top1_t2i = r.t2i;
    log.tau = Temperature{vlm.log_tau}.value();
    if (epochs_out) {
      std::snprintf(buf, sizeof buf, "%zu,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f\n", epoch, log.mean.l_cmc,
                    log.mean.l_imc, log.mean.l_tg, log.top1_i2t, log.top1_t2i, log.tau);
      epochs_out << buf;
      epochs_out.flush();
    }
    result.epochs.push_back(log);
  }
  return result;
}

}  // namespace dusss
