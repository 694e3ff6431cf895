#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dusss {

// Foreground iff probability >= threshold.
std::vector<std::uint8_t> threshold_mask(std::span<const double> probs, double threshold = 0.5);

// 2|p ∩ y| / (|p| + |y|); 1 when both masks are empty.
double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
// |p ∩ y| / |p ∪ y|; 1 when both masks are empty.
double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

struct SampleScore {
  std::string id;
  double dice = 0.0;
  double iou = 0.0;
};

struct EvalResult {
  double dice = 0.0;
  double miou = 0.0;
  std::vector<SampleScore> per_sample;
};

// probs and gts are parallel to ids; gts are binary maps in {0, 1}.
EvalResult evaluate(const std::vector<std::string>& ids,
                    const std::vector<std::vector<double>>& probs,
                    const std::vector<std::vector<double>>& gts);

// Columns id,dice,iou with a final MEAN row.
void write_eval_csv(const EvalResult& result, const std::filesystem::path& path);

}  // namespace dusss
