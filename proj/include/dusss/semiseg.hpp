#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dusss/data.hpp"
#include "dusss/models.hpp"
#include "dusss/optim.hpp"
#include "dusss/tensor.hpp"

namespace dusss {

// How the teacher pseudo-label and the text-guided mask are combined.
//  Literal: sigmoid(p_teacher + p_text), both already probabilities.
//  Logit:   sigmoid(logit_teacher + logit_text).
enum class MergeMode { Literal, Logit };

std::string to_string(MergeMode m);
MergeMode parse_merge_mode(const std::string& s);

// teacher <- alpha * teacher + (1 - alpha) * student, name by name.
void ema_update(const NamedTensors& teacher, const NamedTensors& student, double alpha);

// Per-pixel t_f . v_f: v_f [B,d,H,W], t_f [B,d] -> [B,H,W].
Tensor text_mask_logits(const Tensor& v_f, const Tensor& t_f);
Tensor text_mask(const Tensor& v_f, const Tensor& t_f);

Tensor sup_loss(const Tensor& y_l, const Tensor& y_gt);
Tensor merge_pseudo(const Tensor& y_t, const Tensor& y_text);

struct SemiLossTerms {
  Tensor merged;  // soft-target BCE against the merged pseudo-label
  Tensor text;    // soft-target BCE against the text-guided mask
  Tensor semi;    // (merged + text) / 2
};

// Targets are detached before use.
SemiLossTerms semi_losses(const Tensor& y_s, const Tensor& merged, const Tensor& y_text);

struct LossReport {
  double l_sup = 0.0;
  double l_semi_merged = 0.0;
  double l_semi_text = 0.0;
  double l_semi = 0.0;
  double l_tg = 0.0;
  double total = 0.0;
};

struct SemiOptions {
  double alpha = 0.99;
  MergeMode merge = MergeMode::Literal;
  bool use_text = true;            // false: plain Mean Teacher
  double w_semi = 1.0;
  double w_tg = 0.1;
  std::size_t rampup_epochs = 20;  // sigmoid ramp of w_semi; early stopping waits for it
  bool finetune_grounding = false;
  AdamOptions adam{1e-3};
  std::size_t batch_labeled = 8;
  std::size_t batch_unlabeled = 8;
  std::size_t max_epochs = 100;
  std::size_t patience = 20;
  double labeled_frac = 0.5;
  double student_noise = 0.03;     // Gaussian pixel noise on the student branch
  AugmentSpec augment{0.5, 0.5, 0.1, 0.0};
  bool round_f32 = true;           // keep parameters binary32-representable
  std::uint64_t seed = 7;
};

class TeacherStudent {
 public:
  TeacherStudent(const ModelConfig& cfg, std::uint64_t seed, double alpha);

  SegNetwork student;
  SegNetwork teacher;
  double alpha;

  void ema_update();
};

struct LabeledBatch {
  Tensor images;  // [B,1,H,W]
  Tensor masks;   // [B,H,W] in {0,1}
};

// Frozen-VLM signals for unlabeled images, computed once per sample.
struct TextGuidance {
  std::vector<double> logits;  // H*W, t_f . v_f
  std::vector<double> pooled;  // d, mask-pooled pixel feature
  std::vector<double> t_f;     // d
};

struct UnlabeledBatch {
  Tensor student_images;  // perturbed view
  Tensor teacher_images;  // clean view
  // Frozen-VLM path: [B,H,W] logits plus pooled vectors for L_tg.
  Tensor text_logits;
  Tensor pooled_visual;
  Tensor pooled_text;
  // Trainable-grounding path.
  Tensor vlm_images;
  TokenBatch tokens;
};

class SemiTrainer {
 public:
  // `vlm` may be null when options.use_text is false.
  SemiTrainer(const ModelConfig& cfg, const SemiOptions& options, Vlm* vlm);

  LossReport train_step(const LabeledBatch* labeled, const UnlabeledBatch* unlabeled,
                        double semi_weight);
  LossReport train_step(const LabeledBatch* labeled, const UnlabeledBatch* unlabeled) {
    return train_step(labeled, unlabeled, options_.w_semi);
  }

  TeacherStudent& models() { return ts_; }
  const TeacherStudent& models() const { return ts_; }
  const SemiOptions& options() const { return options_; }

 private:
  ModelConfig cfg_;
  SemiOptions options_;
  Vlm* vlm_;
  TeacherStudent ts_;
  Adam adam_;
};

TextGuidance compute_text_guidance(const Vlm& vlm, const GrayImage& image, const std::string& text,
                                   const Vocabulary& vocab);

// Probability maps of `net` for each sample image.
std::vector<std::vector<double>> predict(const SegNetwork& net, const std::vector<const GrayImage*>& images,
                                         std::size_t batch = 16);

struct EpochLog {
  std::size_t epoch = 0;
  LossReport mean;
  double val_dice = 0.0;
  double val_miou = 0.0;
};

struct TrainLoopResult {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_dice = -1.0;
  double best_val_miou = 0.0;
  NamedTensors best_student;  // detached copies
  NamedTensors final_teacher;
};

// Trains until early stop or max epochs. `vlm` is required when
// options.use_text is set. Writes the per-epoch CSV when csv_path is set.
TrainLoopResult train_loop(const ModelConfig& cfg, const SemiOptions& options,
                           const std::vector<Sample>& train, const std::vector<Sample>& val,
                           const Vocabulary& vocab, Vlm* vlm,
                           const std::optional<std::filesystem::path>& csv_path = std::nullopt);

std::string epoch_csv_header(bool use_text);
std::string epoch_csv_row(const EpochLog& e, bool use_text);

}  // namespace dusss
