#include "dusss/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "dusss/checkpoint.hpp"

namespace dusss {

namespace fs = std::filesystem;

namespace {

void write_config(const RunConfig& cfg, const fs::path& dir) {
  std::ofstream out(dir / "config.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "config.json").string());
  out << cfg.to_json() << '\n';
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir.string());
  Dataset d;
  d.dir = dir;
  d.samples = load_manifest(dir / "manifest.jsonl");
  d.vocab = Vocabulary::load(dir / "vocab.json");
  return d;
}

ModelConfig model_config(const RunConfig& cfg, const Vocabulary& vocab) {
  ModelConfig m = cfg.model;
  m.vocab_size = vocab.size();
  m.validate();
  return m;
}

PretrainRun run_pretrain(const RunConfig& cfg, const Dataset& data,
                         const std::optional<fs::path>& out_dir) {
  cfg.validate();
  if (data.samples.size() < 2) throw std::runtime_error("pretrain: dataset has fewer than 2 pairs");
  for (const auto& s : data.samples)
    if (s.image.width != cfg.model.image_size || s.image.height != cfg.model.image_size)
      throw std::runtime_error("pretrain: image " + s.id + " does not match model.image_size");
  PretrainRun run{Vlm(model_config(cfg, data.vocab), derive_seed(cfg.seed, "vlm"), cfg.tau_init), {}};
  std::optional<fs::path> steps, epochs;
  if (out_dir) {
    ensure_dir(*out_dir);
    write_config(cfg, *out_dir);
    steps = *out_dir / "pretrain_steps.csv";
    epochs = *out_dir / "pretrain_epochs.csv";
  }
  run.result = pretrain(run.vlm, data.samples, data.vocab, cfg.pretrain_options(), steps, epochs);
  if (out_dir) save_checkpoint(*out_dir / "vlm", run.vlm.named_parameters());
  return run;
}

Vlm load_vlm(const RunConfig& cfg, const Vocabulary& vocab, const fs::path& stem) {
  Vlm vlm(model_config(cfg, vocab), derive_seed(cfg.seed, "vlm"), cfg.tau_init);
  assign_checkpoint(load_checkpoint(stem), vlm.named_parameters());
  return vlm;
}

TrainLoopResult run_train_semi(const RunConfig& cfg, const Dataset& data, Vlm* vlm,
                               const std::optional<fs::path>& out_dir) {
  cfg.validate();
  const SemiOptions opt = cfg.semi_options();
  if (opt.use_text && !vlm) throw std::runtime_error("train-semi: text guidance needs a VLM checkpoint");
  const auto train = select_split(data.samples, {SplitTag::Labeled, SplitTag::Unlabeled});
  const auto val = select_split(data.samples, {SplitTag::Val});
  if (train.empty()) throw std::runtime_error("train-semi: dataset has no training samples");
  std::optional<fs::path> csv;
  if (out_dir) {
    ensure_dir(*out_dir);
    write_config(cfg, *out_dir);
    csv = *out_dir / "train_semi.csv";
  }
  TrainLoopResult res =
      train_loop(model_config(cfg, data.vocab), opt, train, val, data.vocab, vlm, csv);
  if (out_dir) {
    save_checkpoint(*out_dir / "seg", res.best_student);
    save_checkpoint(*out_dir / "teacher", res.final_teacher);
  }
  return res;
}

SegNetwork load_segnet(const RunConfig& cfg, const Vocabulary& vocab, const fs::path& stem) {
  Rng rng = make_rng(cfg.seed, "segnet");
  SegNetwork net(model_config(cfg, vocab), rng);
  assign_checkpoint(load_checkpoint(stem), net.named_parameters());
  return net;
}

std::vector<Sample> split_samples(const Dataset& data, const std::string& split) {
  const SplitTag tag = parse_split(split);
  if (tag == SplitTag::Unlabeled)
    throw std::invalid_argument("the unlabeled split has no ground truth to evaluate against");
  return select_split(data.samples, {tag});
}

EvalResult evaluate_model(const SegNetwork& net, const std::vector<Sample>& samples) {
  std::vector<std::string> ids;
  std::vector<const GrayImage*> images;
  std::vector<std::vector<double>> gts;
  for (const auto& s : samples) {
    if (!s.mask) throw std::runtime_error("missing ground truth for " + s.id);
    ids.push_back(s.id);
    images.push_back(&s.image);
    gts.push_back(s.mask->pixels);
  }
  if (samples.empty()) return {};
  return evaluate(ids, predict(net, images), gts);
}

EvalResult evaluate_pred_dir(const fs::path& pred_dir, const std::vector<Sample>& samples) {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> probs, gts;
  for (const auto& s : samples) {
    if (!s.mask) throw std::runtime_error("missing ground truth for " + s.id);
    const fs::path p = pred_dir / (s.id + ".pgm");
    if (!fs::exists(p)) throw std::runtime_error("missing prediction " + p.string());
    GrayImage pred = load_pgm(p);
    if (pred.pixels.size() != s.mask->pixels.size())
      throw std::runtime_error("prediction " + p.string() + " has the wrong size");
    ids.push_back(s.id);
    probs.push_back(std::move(pred.pixels));
    gts.push_back(s.mask->pixels);
  }
  if (samples.empty()) return {};
  return evaluate(ids, probs, gts);
}

InferOutput infer(const SegNetwork& net, const GrayImage& image, const Vlm* vlm,
                  const std::optional<std::string>& text, const Vocabulary& vocab) {
  InferOutput out;
  const auto probs = predict(net, {&image}, 1).front();
  out.mask = GrayImage(image.height, image.width);
  const auto bin = threshold_mask(probs);
  for (std::size_t i = 0; i < bin.size(); ++i) out.mask.pixels[i] = bin[i];
  if (text && vlm) {
    const TextGuidance g = compute_text_guidance(*vlm, image, *text, vocab);
    GrayImage heat(image.height, image.width);
    std::vector<double> p(g.logits.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-g.logits[i]));
    const auto [lo, hi] = std::minmax_element(p.begin(), p.end());
    const double range = *hi - *lo;
    for (std::size_t i = 0; i < p.size(); ++i)
      heat.pixels[i] = range > 0 ? (p[i] - *lo) / range : 0.0;
    out.heatmap = std::move(heat);
  }
  return out;
}

}  // namespace dusss
