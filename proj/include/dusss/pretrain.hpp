#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dusss/data.hpp"
#include "dusss/models.hpp"
#include "dusss/optim.hpp"
#include "dusss/uncertainty.hpp"

namespace dusss {

struct PretrainOptions {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  AdamOptions adam{1e-3};
  SSSConfig sss;
  bool sss_enabled = true;
  bool imc_enabled = true;
  double w_tg = 0.1;
  // Views for the intra-modal terms; geometric transforms would change the
  // caption's position phrase, so only photometric jitter and synonyms.
  AugmentSpec augment{0.0, 0.0, 0.1, 0.3};
  double view_noise = 0.03;
  bool round_f32 = true;
  std::uint64_t seed = 7;
};

struct PretrainLosses {
  double l_cmc = 0.0;
  double l_imc = 0.0;
  double l_tg = 0.0;
  double total = 0.0;
};

struct PretrainEpoch {
  std::size_t epoch = 0;
  PretrainLosses mean;
  double top1_i2t = 0.0;
  double top1_t2i = 0.0;
  double tau = 0.0;
};

struct Retrieval {
  double i2t = 0.0;
  double t2i = 0.0;
};

// In-batch top-1 retrieval over consecutive batches of `pairs` by cosine of
// the semantic embeddings. A retrieved item counts as correct when its
// caption equals the query's caption, since captions repeat within a batch.
Retrieval retrieval_top1(const Vlm& vlm, const std::vector<Sample>& pairs, const Vocabulary& vocab,
                         std::size_t batch_size);

class Pretrainer {
 public:
  Pretrainer(Vlm& vlm, const PretrainOptions& options);

  // One optimizer step on a batch of image-text pairs.
  PretrainLosses step(const std::vector<const Sample*>& batch, const Vocabulary& vocab, Rng& rng);

 private:
  Vlm& vlm_;
  PretrainOptions options_;
  Adam adam_;
};

struct PretrainResult {
  std::vector<PretrainEpoch> epochs;
};

// Trains `vlm` in place. The step CSV has columns step,l_cmc,l_imc,l_tg; the
// epoch CSV adds retrieval accuracy and the temperature.
PretrainResult pretrain(Vlm& vlm, const std::vector<Sample>& pairs, const Vocabulary& vocab,
                        const PretrainOptions& options,
                        const std::optional<std::filesystem::path>& step_csv = std::nullopt,
                        const std::optional<std::filesystem::path>& epoch_csv = std::nullopt);

}  // namespace dusss
