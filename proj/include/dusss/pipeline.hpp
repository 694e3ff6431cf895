#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dusss/config.hpp"
#include "dusss/data.hpp"
#include "dusss/metrics.hpp"
#include "dusss/models.hpp"
#include "dusss/pretrain.hpp"
#include "dusss/semiseg.hpp"

namespace dusss {

struct Dataset {
  std::filesystem::path dir;
  std::vector<Sample> samples;
  Vocabulary vocab;
};

Dataset load_dataset(const std::filesystem::path& dir);

// Model configuration with the vocabulary size filled in.
ModelConfig model_config(const RunConfig& cfg, const Vocabulary& vocab);

// Step 1 on every image-text pair of the dataset (masks are not read). When
// out_dir is set, writes vlm.json/vlm.bin, pretrain_steps.csv,
// pretrain_epochs.csv and config.json there.
struct PretrainRun {
  Vlm vlm;
  PretrainResult result;
};
PretrainRun run_pretrain(const RunConfig& cfg, const Dataset& data,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt);

Vlm load_vlm(const RunConfig& cfg, const Vocabulary& vocab, const std::filesystem::path& stem);

// Step 2. `vlm` may be null when cfg.semi.use_text is false. When out_dir is
// set, writes train_semi.csv, seg.json/seg.bin (best-validation student),
// teacher.json/teacher.bin and config.json.
TrainLoopResult run_train_semi(const RunConfig& cfg, const Dataset& data, Vlm* vlm,
                               const std::optional<std::filesystem::path>& out_dir = std::nullopt);

SegNetwork load_segnet(const RunConfig& cfg, const Vocabulary& vocab,
                       const std::filesystem::path& stem);

std::vector<Sample> split_samples(const Dataset& data, const std::string& split);

EvalResult evaluate_model(const SegNetwork& net, const std::vector<Sample>& samples);
// Predictions are <pred_dir>/<id>.pgm, read as probabilities pixel / 255.
EvalResult evaluate_pred_dir(const std::filesystem::path& pred_dir,
                             const std::vector<Sample>& samples);

struct InferOutput {
  GrayImage mask;                    // thresholded student prediction, {0, 1}
  std::optional<GrayImage> heatmap;  // text-guided mask, min-max scaled to [0, 1]
};
InferOutput infer(const SegNetwork& net, const GrayImage& image, const Vlm* vlm,
                  const std::optional<std::string>& text, const Vocabulary& vocab);

}  // namespace dusss
