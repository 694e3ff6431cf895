// dusss: synthetic data generation, VLM pretraining, text-guided
// semi-supervised segmentation, evaluation, inference and self-checks.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dusss/checkpoint.hpp"
#include "dusss/config.hpp"
#include "dusss/pipeline.hpp"
#include "dusss/verify.hpp"

namespace fs = std::filesystem;
using namespace dusss;

namespace {

constexpr int kOk = 0, kRuntime = 1, kUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConfigFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--config", config, "JSON run config with flat dotted keys");
    app->add_option("--set", sets, "Override a config key, key=value (repeatable)");
    app->add_option("--seed", seed, "Random seed");
  }

  // File first, then --set, then dedicated flags.
  RunConfig load() const {
    RunConfig cfg;
    if (!config.empty()) cfg.apply_file(config);
    std::vector<std::string> problems;
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) {
        problems.push_back("--set expects key=value, got '" + kv + "'");
        continue;
      }
      try {
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
      } catch (const ConfigError& e) {
        for (const auto& p : e.problems()) problems.push_back(p);
      }
    }
    if (!problems.empty()) throw ConfigError(problems);
    if (seed) cfg.seed = *seed;
    return cfg;
  }
};

fs::path config_beside(const fs::path& stem) { return stem.parent_path() / "config.json"; }

void print_config_problems(const ConfigError& e) {
  std::cerr << "error: " << e.what() << '\n';
}

void check_threads_env() {
  const char* env = std::getenv("DUSSS_THREADS");
  if (!env) return;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1)
    throw UsageError(std::string("DUSSS_THREADS must be a positive integer, got '") + env + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-guided semi-supervised segmentation with uncertainty-aware vision-language pretraining"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic captioned segmentation dataset");
  GenOptions gen_opt;
  std::string gen_out;
  gen->add_option("--count", gen_opt.count, "Number of samples")->check(CLI::Range(8, 1000000));
  gen->add_option("--seed", gen_opt.seed, "Random seed");
  gen->add_option("--size", gen_opt.size, "Image side length")->check(CLI::Range(16, 1024));
  gen->add_option("--val-frac", gen_opt.val_frac, "Fraction tagged val")->check(CLI::Range(0.0, 0.5));
  gen->add_option("--test-frac", gen_opt.test_frac, "Fraction tagged test")->check(CLI::Range(0.0, 0.5));
  gen->add_option("--out", gen_out, "Output directory")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Step 1: contrastive vision-language pretraining");
  ConfigFlags pre_cfg;
  pre_cfg.add(pre);
  std::string pre_data, pre_out;
  bool dry_run = false, no_sss = false, no_imc = false;
  std::optional<std::size_t> pre_epochs;
  pre->add_option("--data", pre_data, "Dataset directory");
  pre->add_option("--out", pre_out, "Output directory");
  pre->add_option("--epochs", pre_epochs, "Pretraining epochs");
  pre->add_flag("--no-sss", no_sss, "Plain cosine similarity instead of the uncertainty-modulated one");
  pre->add_flag("--no-imc", no_imc, "Drop the intra-modal contrastive term");
  pre->add_flag("--dry-run", dry_run, "Validate the configuration and exit");

  // train-semi
  auto* semi = app.add_subcommand("train-semi", "Step 2: teacher-student semi-supervised segmentation");
  ConfigFlags semi_cfg;
  semi_cfg.add(semi);
  std::string semi_data, semi_out, semi_vlm;
  bool no_text = false;
  std::optional<double> labeled_frac;
  std::optional<std::size_t> semi_epochs;
  semi->add_option("--data", semi_data, "Dataset directory");
  semi->add_option("--vlm", semi_vlm, "Pretrained VLM checkpoint stem");
  semi->add_option("--out", semi_out, "Output directory");
  semi->add_option("--labeled-frac", labeled_frac, "Labeled fraction")
      ->check(CLI::IsMember({0.25, 0.5, 1.0}));
  semi->add_option("--epochs", semi_epochs, "Maximum epochs");
  semi->add_flag("--no-text", no_text, "Plain Mean Teacher without text guidance");
  semi->add_flag("--dry-run", dry_run, "Validate the configuration and exit");

  // eval
  auto* ev = app.add_subcommand("eval", "Dice / IoU of a checkpoint or a prediction directory");
  std::string ev_ckpt, ev_data, ev_split = "val", ev_pred, ev_out, ev_config;
  ev->add_option("--checkpoint", ev_ckpt, "Segmentation checkpoint stem");
  ev->add_option("--pred-dir", ev_pred, "Directory of <id>.pgm probability maps");
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--split", ev_split, "labeled | val | test")->check(CLI::IsMember({"labeled", "val", "test"}));
  ev->add_option("--out", ev_out, "CSV path (id,dice,iou)");
  ev->add_option("--config", ev_config, "Run config (default: config.json beside the checkpoint)");

  // infer
  auto* inf = app.add_subcommand("infer", "Predict a mask and an optional text-guided heatmap");
  std::string inf_ckpt, inf_image, inf_text, inf_vlm, inf_vocab, inf_mask, inf_heat, inf_config;
  inf->add_option("--checkpoint", inf_ckpt, "Segmentation checkpoint stem")->required();
  inf->add_option("--image", inf_image, "Input PGM")->required();
  inf->add_option("--text", inf_text, "Caption for the heatmap");
  inf->add_option("--vlm", inf_vlm, "VLM checkpoint stem (needed for the heatmap)");
  inf->add_option("--vocab", inf_vocab, "vocab.json of the dataset")->required();
  inf->add_option("--out-mask", inf_mask, "Output mask PGM")->required();
  inf->add_option("--out-heatmap", inf_heat, "Output heatmap PGM");
  inf->add_option("--config", inf_config, "Run config (default: config.json beside the checkpoint)");

  // verify
  auto* ver = app.add_subcommand("verify", "Gradient, identity and monotonicity self-checks");
  VerifyOptions ver_opt;
  ver->add_option("--filter", ver_opt.filter, "Run checks whose name contains this string");
  ver->add_option("--points", ver_opt.points, "Random points per gradient check")->check(CLI::Range(1, 1000));
  ver->add_flag("--list", [&](std::int64_t) {
    for (const auto& n : verify_check_names()) std::cout << n << '\n';
    std::exit(kOk);
  }, "List check names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    check_threads_env();
    if (*gen) {
      gen_synthetic(gen_opt, gen_out);
      std::cout << "wrote " << gen_opt.count << " samples to " << gen_out << '\n';
      return kOk;
    }

    if (*pre) {
      RunConfig cfg = pre_cfg.load();
      if (!pre_data.empty()) cfg.data_dir = pre_data;
      if (!pre_out.empty()) cfg.out_dir = pre_out;
      if (pre_epochs) cfg.pretrain.epochs = *pre_epochs;
      if (no_sss) cfg.sss_enabled = false;
      if (no_imc) cfg.imc = false;
      auto problems = cfg.problems();
      if (cfg.data_dir.empty()) problems.push_back("paths.data (or --data) is required");
      if (cfg.out_dir.empty() && !dry_run) problems.push_back("paths.out (or --out) is required");
      if (!problems.empty()) throw ConfigError(problems);
      if (dry_run) {
        std::cout << cfg.to_json() << "\nconfiguration ok\n";
        return kOk;
      }
      const Dataset data = load_dataset(cfg.data_dir);
      const PretrainRun run = run_pretrain(cfg, data, fs::path(cfg.out_dir));
      const auto& first = run.result.epochs.front();
      const auto& last = run.result.epochs.back();
      std::cout << "pretrain: " << run.result.epochs.size() << " epochs, l_cmc " << first.mean.l_cmc
                << " -> " << last.mean.l_cmc << ", top1 i2t " << last.top1_i2t << " t2i "
                << last.top1_t2i << "\ncheckpoint " << (fs::path(cfg.out_dir) / "vlm").string()
                << '\n';
      return kOk;
    }

    if (*semi) {
      RunConfig cfg = semi_cfg.load();
      if (!semi_data.empty()) cfg.data_dir = semi_data;
      if (!semi_out.empty()) cfg.out_dir = semi_out;
      if (!semi_vlm.empty()) cfg.vlm_path = semi_vlm;
      if (labeled_frac) cfg.semi.labeled_frac = *labeled_frac;
      if (semi_epochs) cfg.semi.max_epochs = *semi_epochs;
      if (no_text) cfg.semi.use_text = false;
      auto problems = cfg.problems();
      if (cfg.data_dir.empty()) problems.push_back("paths.data (or --data) is required");
      if (cfg.out_dir.empty() && !dry_run) problems.push_back("paths.out (or --out) is required");
      if (cfg.semi.use_text && cfg.vlm_path.empty())
        problems.push_back("paths.vlm (or --vlm) is required unless --no-text is given");
      if (!problems.empty()) throw ConfigError(problems);
      if (dry_run) {
        std::cout << cfg.to_json() << "\nconfiguration ok\n";
        return kOk;
      }
      const Dataset data = load_dataset(cfg.data_dir);
      std::optional<Vlm> vlm;
      if (cfg.semi.use_text) vlm = load_vlm(cfg, data.vocab, cfg.vlm_path);
      const TrainLoopResult res = run_train_semi(cfg, data, vlm ? &*vlm : nullptr, fs::path(cfg.out_dir));
      std::cout << "train-semi: " << res.epochs.size() << " epochs, best epoch " << res.best_epoch
                << ", val dice " << res.best_val_dice << ", val miou " << res.best_val_miou
                << "\ncheckpoint " << (fs::path(cfg.out_dir) / "seg").string() << '\n';
      return kOk;
    }

    if (*ev) {
      if (ev_ckpt.empty() == ev_pred.empty())
        throw UsageError("eval needs exactly one of --checkpoint or --pred-dir");
      const Dataset data = load_dataset(ev_data);
      const auto samples = split_samples(data, ev_split);
      EvalResult res;
      if (!ev_pred.empty()) {
        res = evaluate_pred_dir(ev_pred, samples);
      } else {
        RunConfig cfg;
        const fs::path cfg_path = ev_config.empty() ? config_beside(ev_ckpt) : fs::path(ev_config);
        if (fs::exists(cfg_path)) cfg.apply_file(cfg_path);
        res = evaluate_model(load_segnet(cfg, data.vocab, ev_ckpt), samples);
      }
      if (!ev_out.empty()) write_eval_csv(res, ev_out);
      std::cout << ev_split << ": " << res.per_sample.size() << " samples, dice " << res.dice
                << ", miou " << res.miou << '\n';
      return kOk;
    }

    if (*inf) {
      RunConfig cfg;
      const fs::path cfg_path = inf_config.empty() ? config_beside(inf_ckpt) : fs::path(inf_config);
      if (fs::exists(cfg_path)) cfg.apply_file(cfg_path);
      if (!inf_heat.empty() && (inf_text.empty() || inf_vlm.empty()))
        throw UsageError("--out-heatmap needs --text and --vlm");
      const Vocabulary vocab = Vocabulary::load(inf_vocab);
      const SegNetwork net = load_segnet(cfg, vocab, inf_ckpt);
      std::optional<Vlm> vlm;
      if (!inf_vlm.empty()) vlm = load_vlm(cfg, vocab, inf_vlm);
      const GrayImage image = load_pgm(inf_image);
      std::optional<std::string> text;
      if (!inf_text.empty()) text = inf_text;
      const InferOutput out = infer(net, image, vlm ? &*vlm : nullptr, text, vocab);
      save_pgm(out.mask, inf_mask);
      if (!inf_heat.empty() && out.heatmap) save_pgm(*out.heatmap, inf_heat);
      std::cout << "wrote " << inf_mask << (inf_heat.empty() ? "" : " and " + inf_heat) << '\n';
      return kOk;
    }

    if (*ver) {
      const auto results = run_verify(ver_opt);
      if (results.empty()) throw UsageError("no check matches filter '" + ver_opt.filter + "'");
      print_verify_table(std::cout, results);
      for (const auto& r : results)
        if (!r.passed) return kRuntime;
      return kOk;
    }
  } catch (const ConfigError& e) {
    print_config_problems(e);
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
