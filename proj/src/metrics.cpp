#include "dusss/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace dusss {

namespace {

struct Counts {
  std::size_t inter = 0, pred = 0, gt = 0;
};

Counts count(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("metric shape mismatch: " + std::to_string(pred.size()) + " vs " +
                                std::to_string(gt.size()) + " pixels");
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    c.pred += pred[i] != 0;
    c.gt += gt[i] != 0;
    c.inter += (pred[i] != 0) && (gt[i] != 0);
  }
  return c;
}

}  // namespace

std::vector<std::uint8_t> threshold_mask(std::span<const double> probs, double threshold) {
  std::vector<std::uint8_t> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= threshold ? 1 : 0;
  return out;
}

double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  const Counts c = count(pred, gt);
  if (c.pred + c.gt == 0) return 1.0;
  return 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.pred + c.gt);
}

double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  const Counts c = count(pred, gt);
  const std::size_t uni = c.pred + c.gt - c.inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.inter) / static_cast<double>(uni);
}

EvalResult evaluate(const std::vector<std::string>& ids,
                    const std::vector<std::vector<double>>& probs,
                    const std::vector<std::vector<double>>& gts) {
  if (ids.size() != probs.size()) throw std::invalid_argument("evaluate: ids/predictions mismatch");
  if (gts.size() != ids.size()) throw std::invalid_argument("evaluate: missing ground truth");
  EvalResult r;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (gts[i].empty()) throw std::invalid_argument("evaluate: missing ground truth for " + ids[i]);
    const auto p = threshold_mask(probs[i]);
    const auto g = threshold_mask(gts[i]);
    SampleScore s{ids[i], dice(p, g), iou(p, g)};
    r.dice += s.dice;
    r.miou += s.iou;
    r.per_sample.push_back(std::move(s));
  }
  if (!ids.empty()) {
    r.dice /= static_cast<double>(ids.size());
    r.miou /= static_cast<double>(ids.size());
  }
  return r;
}

void write_eval_csv(const EvalResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  char buf[128];
  out << "id,dice,iou\n";
  for (const auto& s : result.per_sample) {
    std::snprintf(buf, sizeof buf, "%.9f,%.9f", s.dice, s.iou);
    out << s.id << ',' << buf << '\n';
  }
  std::snprintf(buf, sizeof buf, "MEAN,%.9f,%.9f", result.dice, result.miou);
  out << buf << '\n';
}

}  // namespace dusss
