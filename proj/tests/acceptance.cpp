// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dusss/checkpoint.hpp"
#include "dusss/metrics.hpp"
#include "dusss/pipeline.hpp"
#include "dusss/rng.hpp"
#include "dusss/uncertainty.hpp"
#include "dusss/verify.hpp"

using namespace dusss;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> failures(const std::vector<CheckResult>& results) {
  std::vector<std::string> out;
  for (const auto& r : results)
    if (!r.passed) out.push_back(r.name + " (" + r.detail + ")");
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (const auto& i : items) s += (s.empty() ? "" : "; ") + i;
  return s;
}

// 256-pair dataset and the default VLM shared by criteria 4 and 5.
struct SharedRun {
  fs::path work;
  Dataset data;
  std::optional<PretrainRun> full_vlm;
  double full_vlm_seconds = 0.0;

  const Dataset& dataset() {
    if (data.samples.empty()) {
      GenOptions g;
      g.count = 256;
      g.seed = 7;
      fs::remove_all(work / "data");
      gen_synthetic(g, work / "data");
      data = load_dataset(work / "data");
    }
    return data;
  }

  PretrainRun& vlm() {
    if (!full_vlm) {
      const Dataset& d = dataset();
      RunConfig cfg;
      const auto t0 = Clock::now();
      full_vlm = run_pretrain(cfg, d, work / "vlm_full");
      full_vlm_seconds = seconds_since(t0);
    }
    return *full_vlm;
  }
};

Outcome gradient_suite() {
  VerifyOptions opts;
  opts.filter = "grad.";
  opts.points = 10;
  const auto t0 = Clock::now();
  const auto results = run_verify(opts);
  const double secs = seconds_since(t0);
  const auto bad = failures(results);
  Outcome o;
  o.passed = bad.empty() && !results.empty() && secs < 60.0;
  o.detail = std::to_string(results.size() - bad.size()) + "/" + std::to_string(results.size()) +
             " checks at 10 points, rel err <= 1e-5, " + fmt(secs, 3) + " s (limit 60 s)";
  if (!bad.empty()) o.detail += "; failed: " + join(bad);
  return o;
}

Outcome identities() {
  VerifyOptions opts;
  opts.filter = "identity.";
  opts.exact_tol = 1e-12;
  const auto results = run_verify(opts);
  const auto bad = failures(results);
  Outcome o;
  o.passed = bad.empty() && !results.empty();
  o.detail = std::to_string(results.size() - bad.size()) + "/" + std::to_string(results.size()) +
             " identities within 1e-12";
  if (!bad.empty()) o.detail += "; failed: " + join(bad);
  return o;
}

Outcome monotonicity() {
  const CheckResult real = check_monotonicity(1000, 7, uncertain_sim);
  const CheckResult swapped =
      check_monotonicity(1000, 7, [](double sim, double d) { return sim * d; });
  const CheckResult flipped =
      check_monotonicity(1000, 7, [](double sim, double d) { return 1.0 + (1.0 - sim) * d; });
  Outcome o;
  o.passed = real.passed && !swapped.passed && !flipped.passed;
  o.detail = "1000 triples: " + real.detail + "; mutants caught: sim*d " +
             (swapped.passed ? "no" : "yes") + ", 1+(1-sim)*d " + (flipped.passed ? "no" : "yes");
  return o;
}

Outcome pretraining(SharedRun& shared) {
  const PretrainRun& run = shared.vlm();
  const auto& epochs = run.result.epochs;
  const double first = epochs.front().mean.l_cmc;
  const double last = epochs.back().mean.l_cmc;
  const double drop = 1.0 - last / first;
  const double i2t = epochs.back().top1_i2t, t2i = epochs.back().top1_t2i;
  Outcome o;
  o.passed = epochs.size() <= 200 && drop >= 0.5 && i2t >= 0.9 && t2i >= 0.9 &&
             shared.full_vlm_seconds < 600.0;
  o.detail = std::to_string(shared.dataset().samples.size()) + " pairs, " +
             std::to_string(epochs.size()) + " epochs: L_cmc " + fmt(first) + " -> " + fmt(last) +
             " (drop " + fmt(100 * drop, 3) + "%, need >= 50%), top-1 i2t " + fmt(i2t) + " t2i " +
             fmt(t2i) + " (need >= 0.9), " + fmt(shared.full_vlm_seconds, 4) + " s (limit 600 s)";
  return o;
}

Outcome ablation(SharedRun& shared) {
  const Dataset& data = shared.dataset();
  const fs::path dir = shared.work / "ablation";
  fs::create_directories(dir);

  struct Variant {
    std::string name;
    bool text = true;
    bool sss = true;
    bool imc = true;
    double w_tg = -1.0;  // < 0 keeps the default
  };
  const std::vector<Variant> variants = {{"full"},
                                         {"no_text", false},
                                         {"no_sss", true, false},
                                         {"no_dcl", true, true, false},
                                         {"no_tg", true, true, true, 0.0}};
  const std::vector<std::uint64_t> seeds = {1, 2, 3};

  std::ofstream csv(dir / "ablation.csv");
  csv << "variant,seed,epochs,best_epoch,val_dice,val_miou\n";
  std::vector<double> means;
  for (const Variant& v : variants) {
    RunConfig base;
    base.sss_enabled = v.sss;
    base.imc = v.imc;
    if (v.w_tg >= 0.0) base.pretrain.w_tg = v.w_tg;

    std::optional<PretrainRun> own;
    Vlm* vlm = nullptr;
    if (v.text) {
      if (v.name == "full") {
        vlm = &shared.vlm().vlm;
      } else {
        own = run_pretrain(base, data, dir / ("vlm_" + v.name));
        vlm = &own->vlm;
      }
    }

    double sum = 0.0;
    for (std::uint64_t seed : seeds) {
      RunConfig cfg = base;
      cfg.seed = seed;
      cfg.semi.labeled_frac = 0.5;
      cfg.semi.use_text = v.text;
      const auto r = run_train_semi(cfg, data, vlm, dir / (v.name + "_seed" + std::to_string(seed)));
      csv << v.name << ',' << seed << ',' << r.epochs.size() << ',' << r.best_epoch << ','
          << std::setprecision(9) << r.best_val_dice << ',' << r.best_val_miou << '\n';
      csv.flush();
      std::cout << "  ablation " << v.name << " seed " << seed << ": val dice "
                << fmt(r.best_val_dice) << '\n'
                << std::flush;
      sum += r.best_val_dice;
    }
    means.push_back(sum / static_cast<double>(seeds.size()));
  }

  const double full = means[0];
  bool ok = full - means[1] >= 0.02;
  std::string detail = "mean val Dice over seeds 1-3: full " + fmt(full);
  for (std::size_t i = 1; i < variants.size(); ++i) {
    detail += ", " + variants[i].name + " " + fmt(means[i]);
    if (i >= 2 && full < means[i]) ok = false;
  }
  detail += "; need full - no_text >= 0.02 (got " + fmt(full - means[1]) +
            ") and full >= each ablation";
  return {ok, detail};
}

Outcome metric_correctness() {
  std::vector<std::string> bad;
  const std::vector<std::uint8_t> p2 = {1, 1, 0, 0}, g2 = {0, 1, 1, 0};
  if (dice(p2, g2) != 0.5) bad.push_back("dice 2/2 overlap 1 = " + fmt(dice(p2, g2), 17));
  if (std::abs(iou(p2, g2) - 1.0 / 3.0) > 0.0)
    bad.push_back("iou overlap 1 union 3 = " + fmt(iou(p2, g2), 17));
  const std::vector<std::uint8_t> empty(4, 0), ones(4, 1);
  if (dice(p2, p2) != 1.0 || iou(p2, p2) != 1.0) bad.push_back("pred == gt");
  if (dice(empty, g2) != 0.0) bad.push_back("empty pred");
  if (iou(std::vector<std::uint8_t>{1, 0, 0, 0}, std::vector<std::uint8_t>{0, 0, 1, 1}) != 0.0)
    bad.push_back("disjoint iou");

  Rng rng = make_rng(13, "acceptance.metrics");
  std::uniform_int_distribution<int> size_dist(1, 256);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t violations = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = static_cast<std::size_t>(size_dist(rng));
    const double pp = unit(rng), pg = unit(rng);
    std::vector<std::uint8_t> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = unit(rng) < pp;
      b[i] = unit(rng) < pg;
    }
    const double d = dice(a, b), j = iou(a, b);
    if (!(d >= j) || d < 0.0 || d > 1.0 || j < 0.0 || j > 1.0) ++violations;
  }
  if (violations) bad.push_back(std::to_string(violations) + " pairs with dice < miou");
  Outcome o;
  o.passed = bad.empty();
  o.detail = "hand cases dice 0.5, miou 1/3 exact; dice >= miou over 1000 random pairs";
  if (!bad.empty()) o.detail += "; failed: " + join(bad);
  return o;
}

Outcome determinism(const fs::path& work) {
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  GenOptions g;
  g.count = 96;
  g.seed = 21;
  gen_synthetic(g, dir / "data");
  const Dataset data = load_dataset(dir / "data");

  RunConfig cfg;
  cfg.seed = 4;
  cfg.pretrain.epochs = 3;
  cfg.semi.max_epochs = 40;
  cfg.semi.patience = 40;
  cfg.semi.rampup_epochs = 5;
  cfg.semi.labeled_frac = 0.5;

  std::vector<std::string> bad;
  std::optional<TrainLoopResult> first;
  for (const char* tag : {"a", "b"}) {
    PretrainRun pre = run_pretrain(cfg, data, dir / tag / "vlm");
    auto r = run_train_semi(cfg, data, &pre.vlm, dir / tag / "semi");
    SegNetwork net = load_segnet(cfg, data.vocab, dir / tag / "semi" / "seg");
    write_eval_csv(evaluate_model(net, split_samples(data, "val")), dir / tag / "eval.csv");
    if (!first) first = std::move(r);
  }
  for (const char* f : {"vlm/pretrain_steps.csv", "vlm/pretrain_epochs.csv", "semi/train_semi.csv",
                        "eval.csv", "semi/seg.bin", "vlm/vlm.bin"})
    if (read_bytes(dir / "a" / f) != read_bytes(dir / "b" / f) || read_bytes(dir / "a" / f).empty())
      bad.push_back(std::string(f) + " differs between runs");

  const NamedTensors loaded = load_checkpoint(dir / "a" / "semi" / "seg");
  std::size_t mismatched = 0, values = 0;
  if (loaded.size() != first->best_student.size()) {
    bad.push_back("checkpoint tensor count differs");
  } else {
    for (std::size_t i = 0; i < loaded.size(); ++i) {
      const auto& [name, t] = loaded[i];
      const Tensor& ref = first->best_student[i].second;
      const auto x = t.data();
      const auto y = ref.data();
      if (name != first->best_student[i].first || x.size() != y.size()) {
        ++mismatched;
        continue;
      }
      values += x.size();
      if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) ++mismatched;
    }
  }
  if (mismatched) bad.push_back(std::to_string(mismatched) + " tensors not bit-exact after reload");

  const SegNetwork reloaded = load_segnet(cfg, data.vocab, dir / "a" / "semi" / "seg");
  const double reload_dice = evaluate_model(reloaded, split_samples(data, "val")).dice;
  const double diff = std::abs(reload_dice - first->best_val_dice);
  if (!(diff <= 1e-6)) bad.push_back("reload val Dice differs by " + fmt(diff));
  if (!(first->best_val_dice > 0.0)) bad.push_back("val Dice is 0, reload comparison is vacuous");

  Outcome o;
  o.passed = bad.empty();
  o.detail = "pretrain/train/eval CSVs and checkpoints byte-identical across 2 runs; " +
             std::to_string(values) + " checkpoint values bit-exact; reload val Dice " +
             fmt(reload_dice, 9) + " vs " + fmt(first->best_val_dice, 9) + " (|diff| " + fmt(diff) +
             " <= 1e-6)";
  if (!bad.empty()) o.detail += "; failed: " + join(bad);
  return o;
}

Outcome degenerate(const fs::path& work) {
  std::vector<std::string> bad;
  std::vector<std::string> notes;

  // Identical semantic embeddings (D_s = 0) with different uncertainty.
  {
    const Tensor s = Tensor::from({2, 3}, {0.3, -0.2, 0.9, 0.3, -0.2, 0.9});
    GaussianEmbedding ga{Tensor::from({2, 2}, {0.0, 1.0, 2.0, -1.0}),
                         Tensor::from({2, 2}, {1.0, 0.5, 2.0, 1.5}), Tensor::zeros({2, 2})};
    const PairwiseScores p = pairwise_scores(s, ga, s, ga, SSSConfig{});
    const auto sim_hat = p.sim_hat.data();
    const auto d_s = p.d_s.data();
    bool ok = true;
    for (std::size_t i = 0; i < sim_hat.size(); ++i)
      ok = ok && std::isfinite(sim_hat[i]) && d_s[i] == 0.0 && std::abs(sim_hat[i] - 1.0) <= 1e-12;
    if (!ok) bad.push_back("D_s = 0 pairs");
    notes.push_back("D_s=0 -> sim_hat " + fmt(sim_hat[1], 12));
  }

  // Fully labeled run: the unlabeled set is empty, L_semi contributes 0.
  {
    const fs::path dir = work / "degenerate";
    fs::remove_all(dir);
    GenOptions g;
    g.count = 32;
    g.seed = 31;
    gen_synthetic(g, dir / "data");
    const Dataset data = load_dataset(dir / "data");
    RunConfig cfg;
    cfg.seed = 2;
    cfg.pretrain.epochs = 2;
    cfg.semi.max_epochs = 3;
    cfg.semi.labeled_frac = 1.0;
    try {
      PretrainRun pre = run_pretrain(cfg, data, std::nullopt);
      const auto r = run_train_semi(cfg, data, &pre.vlm, dir / "semi");
      double max_semi = 0.0;
      bool finite = true;
      for (const auto& e : r.epochs) {
        max_semi = std::max(max_semi, std::abs(e.mean.l_semi));
        finite = finite && std::isfinite(e.mean.l_sup) && std::isfinite(e.val_dice);
      }
      if (!finite || max_semi != 0.0 || r.epochs.size() != 3) bad.push_back("labeled-frac 1.0 run");
      notes.push_back("labeled-frac 1.0 -> " + std::to_string(r.epochs.size()) +
                      " epochs, L_semi " + fmt(max_semi) + ", val dice " + fmt(r.best_val_dice));
    } catch (const std::exception& e) {
      bad.push_back(std::string("labeled-frac 1.0 threw: ") + e.what());
    }
  }

  // Both masks empty.
  {
    const std::vector<std::uint8_t> empty(16, 0);
    const EvalResult r = evaluate({"blank"}, {std::vector<double>(16, 0.1)}, {std::vector<double>(16, 0.0)});
    if (dice(empty, empty) != 1.0 || iou(empty, empty) != 1.0 || r.dice != 1.0 || r.miou != 1.0)
      bad.push_back("both-empty masks");
    notes.push_back("both-empty masks -> dice " + fmt(r.dice) + ", miou " + fmt(r.miou));
  }

  Outcome o;
  o.passed = bad.empty();
  o.detail = join(notes);
  if (!bad.empty()) o.detail += "; failed: " + join(bad);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  fs::path work = fs::temp_directory_path() / "dusss_acceptance";
  std::vector<int> only;
  app.add_option("--work-dir", work, "Directory for datasets, checkpoints and logs");
  app.add_option("--only", only, "Run only these criteria (1-8)")->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  SharedRun shared;
  shared.work = work;
  const std::set<int> selected(only.begin(), only.end());
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"analytic identities", identities},
      {"sim_hat monotonicity", monotonicity},
      {"pretraining sanity", [&] { return pretraining(shared); }},
      {"directional ablation", [&] { return ablation(shared); }},
      {"metric correctness", metric_correctness},
      {"determinism and persistence", [&] { return determinism(work); }},
      {"degenerate inputs", [&] { return degenerate(work); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << "  [" << id << "] " << criteria[i].first << ": "
              << o.detail << '\n'
              << std::flush;
  }
  return failed ? 1 : 0;
}
