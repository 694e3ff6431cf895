#include "dusss/semiseg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dusss/checkpoint.hpp"
#include "dusss/contrastive.hpp"
#include "dusss/metrics.hpp"

namespace dusss {

namespace {

std::vector<Tensor> trainable(const TeacherStudent& ts, const SemiOptions& opt, const Vlm* vlm) {
  std::vector<Tensor> params = tensors_of(ts.student.named_parameters());
  if (opt.use_text && opt.finetune_grounding && vlm)
    for (auto& t : tensors_of(vlm->grounding_parameters())) params.push_back(t);
  return params;
}

std::string describe(const char* name, const Tensor& t) {
  if (!t.defined()) return std::string(name) + ": <none>";
  double lo = INFINITY, hi = -INFINITY;
  std::size_t bad = 0;
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      ++bad;
      continue;
    }
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::ostringstream os;
  os << name << ' ' << shape_str(t.shape()) << " min=" << lo << " max=" << hi
     << " non-finite=" << bad;
  return os.str();
}

double sigmoid_ramp(std::size_t epoch, std::size_t rampup) {
  if (rampup == 0 || epoch >= rampup) return 1.0;
  const double p = 1.0 - static_cast<double>(epoch) / static_cast<double>(rampup);
  return std::exp(-5.0 * p * p);
}

}  // namespace

std::string to_string(MergeMode m) { return m == MergeMode::Literal ? "literal" : "logit"; }

MergeMode parse_merge_mode(const std::string& s) {
  if (s == "literal") return MergeMode::Literal;
  if (s == "logit") return MergeMode::Logit;
  throw std::invalid_argument("unknown merge_mode '" + s + "' (literal|logit)");
}

void ema_update(const NamedTensors& teacher, const NamedTensors& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("EMA alpha must be in [0, 1], got " + std::to_string(alpha));
  if (teacher.size() != student.size())
    throw std::invalid_argument("ema_update: architecture mismatch (parameter count)");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].first != student[i].first ||
        teacher[i].second.shape() != student[i].second.shape())
      throw std::invalid_argument("ema_update: architecture mismatch at " + teacher[i].first);
    Tensor t = teacher[i].second;
    auto tv = t.mutable_data();
    auto sv = student[i].second.data();
    for (std::size_t j = 0; j < tv.size(); ++j) tv[j] = alpha * tv[j] + (1.0 - alpha) * sv[j];
  }
}

Tensor text_mask_logits(const Tensor& v_f, const Tensor& t_f) {
  if (v_f.rank() != 4 || t_f.rank() != 2 || v_f.dim(0) != t_f.dim(0) || v_f.dim(1) != t_f.dim(1))
    throw std::invalid_argument("text_mask: dimension mismatch " + shape_str(v_f.shape()) +
                                " vs " + shape_str(t_f.shape()));
  const std::size_t b = v_f.dim(0), d = v_f.dim(1);
  return sum(mul(v_f, reshape(t_f, {b, d, 1, 1})), 1);
}

Tensor text_mask(const Tensor& v_f, const Tensor& t_f) {
  return sigmoid(text_mask_logits(v_f, t_f));
}

Tensor sup_loss(const Tensor& y_l, const Tensor& y_gt) {
  if (y_l.shape() != y_gt.shape())
    throw std::invalid_argument("sup_loss: shape mismatch " + shape_str(y_l.shape()) + " vs " +
                                shape_str(y_gt.shape()));
  return bce(y_l, y_gt);
}

Tensor merge_pseudo(const Tensor& y_t, const Tensor& y_text) {
  if (y_t.shape() != y_text.shape())
    throw std::invalid_argument("merge_pseudo: shape mismatch " + shape_str(y_t.shape()) +
                                " vs " + shape_str(y_text.shape()));
  return sigmoid(add(y_t, y_text));
}

SemiLossTerms semi_losses(const Tensor& y_s, const Tensor& merged, const Tensor& y_text) {
  if (y_s.shape() != merged.shape() || y_s.shape() != y_text.shape())
    throw std::invalid_argument("semi_losses: shape mismatch");
  SemiLossTerms t;
  t.merged = bce(y_s, merged.detach());
  t.text = bce(y_s, y_text.detach());
  t.semi = scale(add(t.merged, t.text), 0.5);
  return t;
}

TeacherStudent::TeacherStudent(const ModelConfig& cfg, std::uint64_t seed, double alpha_)
    : alpha(alpha_) {
  Rng a = make_rng(seed, "segnet");
  Rng b = a;
  student = SegNetwork(cfg, a);
  teacher = SegNetwork(cfg, b);
}

void TeacherStudent::ema_update() {
  dusss::ema_update(teacher.named_parameters(), student.named_parameters(), alpha);
}

SemiTrainer::SemiTrainer(const ModelConfig& cfg, const SemiOptions& options, Vlm* vlm)
    : cfg_(cfg),
      options_(options),
      vlm_(vlm),
      ts_(cfg, derive_seed(options.seed, "teacher_student"), options.alpha),
      adam_(trainable(ts_, options, vlm), options.adam) {
  if (options.use_text && !vlm && options.finetune_grounding)
    throw std::invalid_argument("grounding fine-tuning needs a VLM");
  if (options.round_f32) {
    round_to_float(ts_.student.named_parameters());
    round_to_float(ts_.teacher.named_parameters());
  }
}

LossReport SemiTrainer::train_step(const LabeledBatch* labeled, const UnlabeledBatch* unlabeled,
                                   double semi_weight) {
  if (!labeled && !unlabeled) throw std::invalid_argument("train_step: empty batch");
  LossReport rep;
  Tensor total;
  auto accumulate = [&](const Tensor& term, double w) {
    if (w == 0.0) return;
    Tensor t = w == 1.0 ? term : scale(term, w);
    total = total.defined() ? add(total, t) : t;
  };

  Tensor y_l, y_s, y_t, y_text, merged;
  auto abort_step = [&](const std::string& reason) {
    std::ostringstream os;
    os << "non-finite loss (" << reason << "; l_sup=" << rep.l_sup << ", l_semi=" << rep.l_semi
       << ", l_tg=" << rep.l_tg << ")\n  " << describe("y_l", y_l) << "\n  " << describe("y_s", y_s)
       << "\n  " << describe("y_t", y_t) << "\n  " << describe("y_text", y_text) << "\n  "
       << describe("merged", merged);
    throw std::runtime_error(os.str());
  };
  try {
    if (labeled) {
      y_l = sigmoid(ts_.student.forward(labeled->images));
      Tensor l = sup_loss(y_l, labeled->masks);
      rep.l_sup = l.item();
      accumulate(l, 1.0);
    }
    if (unlabeled) {
      y_s = sigmoid(ts_.student.forward(unlabeled->student_images));
      Tensor t_logits;
      {
        NoGradGuard ng;
        t_logits = ts_.teacher.forward(unlabeled->teacher_images);
      }
      y_t = sigmoid(t_logits);
      if (options_.use_text) {
        Tensor text_logits = unlabeled->text_logits;
        Tensor tg;
        if (options_.finetune_grounding) {
          Tensor patch_grid, t_f;
          {
            NoGradGuard ng;
            patch_grid = vlm_->image_encoder.encode(unlabeled->vlm_images).patch_grid;
            t_f = vlm_->text_encoder.encode(unlabeled->tokens).pooled;
          }
          Tensor v_f = vlm_->grounding(patch_grid);
          Tensor logits = text_mask_logits(v_f, t_f);
          Tensor tau = Temperature{vlm_->log_tau.detach()}.tau();
          tg = tg_loss(mask_pool(v_f, sigmoid(logits)), t_f, tau);
          text_logits = logits.detach();
        } else if (unlabeled->pooled_visual.defined()) {
          Tensor tau = Temperature{vlm_ ? vlm_->log_tau.detach() : Tensor::scalar(std::log(0.07))}.tau();
          tg = tg_loss(unlabeled->pooled_visual, unlabeled->pooled_text, tau);
        }
        if (!text_logits.defined()) throw std::invalid_argument("train_step: missing text guidance");
        y_text = sigmoid(text_logits);
        merged = options_.merge == MergeMode::Literal ? merge_pseudo(y_t, y_text)
                                                      : sigmoid(add(t_logits, text_logits));
        SemiLossTerms terms = semi_losses(y_s, merged, y_text);
        rep.l_semi_merged = terms.merged.item();
        rep.l_semi_text = terms.text.item();
        rep.l_semi = 0.5 * (rep.l_semi_merged + rep.l_semi_text);
        accumulate(terms.semi, semi_weight);
        if (tg.defined() && y_s.dim(0) >= 2) {
          rep.l_tg = tg.item();
          if (tg.requires_grad()) accumulate(tg, options_.w_tg);
        }
      } else {
        Tensor l = bce(y_s, y_t.detach());
        rep.l_semi = l.item();
        accumulate(l, semi_weight);
      }
    }
  } catch (const TensorError& e) {
    abort_step(e.what());
  }
  rep.total = rep.l_sup + semi_weight * rep.l_semi + options_.w_tg * rep.l_tg;
  if (!std::isfinite(rep.total)) abort_step("total");

  adam_.zero_grad();
  if (total.defined() && total.requires_grad()) {
    total.backward();
    for (auto& p : adam_.params())
      if (!p.has_grad()) p.node().grad_buffer();
    adam_.step();
    if (options_.round_f32) {
      round_to_float(ts_.student.named_parameters());
      if (options_.finetune_grounding && vlm_) round_to_float(vlm_->grounding_parameters());
    }
  }
  ts_.ema_update();
  if (options_.round_f32) round_to_float(ts_.teacher.named_parameters());
  return rep;
}

TextGuidance compute_text_guidance(const Vlm& vlm, const GrayImage& image, const std::string& text,
                                   const Vocabulary& vocab) {
  NoGradGuard ng;
  Tensor img = stack_images({&image.pixels}, image.width);
  TokenBatch tokens = make_token_batch({&text}, vocab, vlm.cfg.l_max);
  Tensor patch_grid = vlm.image_encoder.encode(img).patch_grid;
  Tensor t_f = vlm.text_encoder.encode(tokens).pooled;
  Tensor v_f = vlm.grounding(patch_grid);
  Tensor logits = text_mask_logits(v_f, t_f);
  Tensor pooled = mask_pool(v_f, sigmoid(logits));
  return {{logits.data().begin(), logits.data().end()},
          {pooled.data().begin(), pooled.data().end()},
          {t_f.data().begin(), t_f.data().end()}};
}

std::vector<std::vector<double>> predict(const SegNetwork& net,
                                         const std::vector<const GrayImage*>& images,
                                         std::size_t batch) {
  NoGradGuard ng;
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t end = std::min(images.size(), start + batch);
    std::vector<const std::vector<double>*> px;
    for (std::size_t i = start; i < end; ++i) px.push_back(&images[i]->pixels);
    Tensor probs = sigmoid(net.forward(stack_images(px, images[start]->width)));
    const std::size_t hw = images[start]->pixels.size();
    for (std::size_t i = 0; i < end - start; ++i)
      out.emplace_back(probs.data().begin() + static_cast<long>(i * hw),
                       probs.data().begin() + static_cast<long>((i + 1) * hw));
  }
  return out;
}

std::string epoch_csv_header(bool use_text) {
  return use_text ? "epoch,l_sup,l_semi,l_semi_merged,l_semi_text,l_tg,val_dice,val_miou"
                  : "epoch,l_sup,l_semi,val_dice,val_miou";
}

std::string epoch_csv_row(const EpochLog& e, bool use_text) {
  char buf[256];
  if (use_text)
    std::snprintf(buf, sizeof buf, "%zu,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f,%.9f", e.epoch, e.mean.l_sup,
                  e.mean.l_semi, e.mean.l_semi_merged, e.mean.l_semi_text, e.mean.l_tg, e.val_dice,
                  e.val_miou);
  else
    std::snprintf(buf, sizeof buf, "%zu,%.9f,%.9f,%.9f,%.9f", e.epoch, e.mean.l_sup, e.mean.l_semi,
                  e.val_dice, e.val_miou);
  return buf;
}

TrainLoopResult train_loop(const ModelConfig& cfg, const SemiOptions& options,
                           const std::vector<Sample>& train, const std::vector<Sample>& val,
                           const Vocabulary& vocab, Vlm* vlm,
                           const std::optional<std::filesystem::path>& csv_path) {
  if (options.use_text && !vlm) throw std::invalid_argument("train_loop: text guidance needs a VLM");
  if (train.empty()) throw std::invalid_argument("train_loop: empty training set");
  if (options.batch_labeled == 0 || options.batch_unlabeled == 0)
    throw std::invalid_argument("train_loop: batch sizes must be positive");

  const LabeledSplit split = split_labeled(train, options.labeled_frac, options.seed);
  if (split.labeled.empty()) throw std::invalid_argument("train_loop: no labeled samples");
  const std::size_t size = cfg.image_size;

  std::vector<TextGuidance> guidance;
  if (options.use_text && !options.finetune_grounding)
    for (const auto& u : split.unlabeled)
      guidance.push_back(compute_text_guidance(*vlm, u.image, u.text, vocab));

  std::vector<const GrayImage*> val_images;
  std::vector<std::vector<double>> val_gts;
  std::vector<std::string> val_ids;
  for (const auto& s : val) {
    if (!s.mask) throw std::invalid_argument("train_loop: validation sample without mask: " + s.id);
    val_images.push_back(&s.image);
    val_gts.push_back(s.mask->pixels);
    val_ids.push_back(s.id);
  }

  SemiTrainer trainer(cfg, options, vlm);
  Rng rng = make_rng(options.seed, "train_loop");
  std::vector<std::size_t> lab_order(split.labeled.size()), unl_order(split.unlabeled.size());
  std::iota(lab_order.begin(), lab_order.end(), 0);
  std::iota(unl_order.begin(), unl_order.end(), 0);
  std::size_t unl_cursor = unl_order.size();

  std::ofstream csv;
  if (csv_path) {
    csv.open(*csv_path);
    if (!csv) throw std::runtime_error("cannot write " + csv_path->string());
    csv << epoch_csv_header(options.use_text) << '\n';
  }

  TrainLoopResult result;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= options.max_epochs; ++epoch) {
    shuffle(lab_order.begin(), lab_order.end(), rng);
    const double w_semi = options.w_semi * sigmoid_ramp(epoch - 1, options.rampup_epochs);
    EpochLog log;
    log.epoch = epoch;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < lab_order.size(); start += options.batch_labeled) {
      const std::size_t end = std::min(lab_order.size(), start + options.batch_labeled);
      std::vector<GrayImage> imgs, masks;
      for (std::size_t i = start; i < end; ++i) {
        Sample a = augment(split.labeled[lab_order[i]], options.augment, rng);
        imgs.push_back(std::move(a.image));
        masks.push_back(std::move(*a.mask));
      }
      std::vector<const std::vector<double>*> ip, mp;
      for (std::size_t i = 0; i < imgs.size(); ++i) {
        ip.push_back(&imgs[i].pixels);
        mp.push_back(&masks[i].pixels);
      }
      LabeledBatch lb{stack_images(ip, size), reshape(stack_images(mp, size), {imgs.size(), size, size})};

      std::optional<UnlabeledBatch> ub;
      if (!unl_order.empty() && (options.w_semi > 0.0 || options.use_text)) {
        std::vector<std::size_t> pick;
        for (std::size_t k = 0; k < options.batch_unlabeled && k < unl_order.size(); ++k) {
          if (unl_cursor >= unl_order.size()) {
            shuffle(unl_order.begin(), unl_order.end(), rng);
            unl_cursor = 0;
          }
          pick.push_back(unl_order[unl_cursor++]);
        }
        std::vector<double> stud, teach, logits, pv, pt;
        std::vector<const std::string*> texts;
        for (std::size_t idx : pick) {
          const auto& u = split.unlabeled[idx];
          teach.insert(teach.end(), u.image.pixels.begin(), u.image.pixels.end());
          const double jitter = options.augment.brightness > 0
                                    ? uniform(rng, -options.augment.brightness, options.augment.brightness)
                                    : 0.0;
          for (double v : u.image.pixels)
            stud.push_back(std::clamp(v + jitter + options.student_noise * normal(rng), 0.0, 1.0));
          texts.push_back(&u.text);
          if (!guidance.empty()) {
            const auto& g = guidance[idx];
            logits.insert(logits.end(), g.logits.begin(), g.logits.end());
            pv.insert(pv.end(), g.pooled.begin(), g.pooled.end());
            pt.insert(pt.end(), g.t_f.begin(), g.t_f.end());
          }
        }
        const std::size_t nb = pick.size();
        ub.emplace();
        ub->student_images = Tensor::from({nb, 1, size, size}, std::move(stud));
        ub->teacher_images = Tensor::from({nb, 1, size, size}, std::move(teach));
        if (!guidance.empty()) {
          ub->text_logits = Tensor::from({nb, size, size}, std::move(logits));
          ub->pooled_visual = Tensor::from({nb, cfg.d}, std::move(pv));
          ub->pooled_text = Tensor::from({nb, cfg.d}, std::move(pt));
        }
        if (options.use_text && options.finetune_grounding) {
          ub->vlm_images = ub->teacher_images;
          ub->tokens = make_token_batch(texts, vocab, cfg.l_max);
        }
      }
      const LossReport r = trainer.train_step(&lb, ub ? &*ub : nullptr, w_semi);
      log.mean.l_sup += r.l_sup;
      log.mean.l_semi += r.l_semi;
      log.mean.l_semi_merged += r.l_semi_merged;
      log.mean.l_semi_text += r.l_semi_text;
      log.mean.l_tg += r.l_tg;
      log.mean.total += r.total;
      ++steps;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    for (double* v : {&log.mean.l_sup, &log.mean.l_semi, &log.mean.l_semi_merged,
                      &log.mean.l_semi_text, &log.mean.l_tg, &log.mean.total})
      *v *= inv;

    if (!val_images.empty()) {
      const EvalResult ev = evaluate(val_ids, predict(trainer.models().student, val_images), val_gts);
      log.val_dice = ev.dice;
      log.val_miou = ev.miou;
    }
    if (csv) csv << epoch_csv_row(log, options.use_text) << '\n';
    result.epochs.push_back(log);

    if (log.val_dice > result.best_val_dice) {
      result.best_val_dice = log.val_dice;
      result.best_val_miou = log.val_miou;
      result.best_epoch = epoch;
      result.best_student.clear();
      for (const auto& [name, t] : trainer.models().student.named_parameters())
        result.best_student.emplace_back(name, t.detach());
      since_best = 0;
    } else if (epoch > options.rampup_epochs && ++since_best >= options.patience) {
      break;
    }
  }
  for (const auto& [name, t] : trainer.models().teacher.named_parameters())
    result.final_teacher.emplace_back(name, t.detach());
  return result;
}

}  // namespace dusss
