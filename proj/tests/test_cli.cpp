#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <sys/wait.h>

#include "dusss/data.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run cli(const std::string& args, const std::string& env = "") {
  TempDir log("cli_log");
  const auto out_path = log / "out.txt";
  const std::string cmd =
      env + " '" + std::string(DUSSS_CLI) + "' " + args + " > '" + out_path.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return {code, read_file(out_path)};
}

std::size_t line_count(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

// Shared tiny dataset and trained checkpoints, built once for the suite.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli_pipeline");
    const std::string d = dir_->path().string();
    ASSERT_EQ(cli("gen-data --count 24 --seed 3 --out '" + d + "/data'").code, 0);
    ASSERT_EQ(cli("pretrain --data '" + d + "/data' --out '" + d + "/vlm' --epochs 1").code, 0);
    ASSERT_EQ(cli("train-semi --data '" + d + "/data' --vlm '" + d + "/vlm/vlm' --out '" + d +
                  "/semi' --epochs 2")
                  .code,
              0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string p(const std::string& rel) { return "'" + (dir_->path() / rel).string() + "'"; }
  static fs::path path(const std::string& rel) { return dir_->path() / rel; }

  static TempDir* dir_;
};

TempDir* CliPipeline::dir_ = nullptr;

}  // namespace

TEST(Cli, GenDataWritesRequestedCount) {
  TempDir dir("cli_gen");
  auto r = cli("gen-data --count 40 --seed 9 --out '" + (dir / "d").string() + "'");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(line_count(read_file(dir / "d/manifest.jsonl")), 40u);
  EXPECT_TRUE(fs::exists(dir / "d/vocab.json"));
}

TEST(Cli, GenDataRerunIsByteIdentical) {
  TempDir dir("cli_gen_rerun");
  ASSERT_EQ(cli("gen-data --count 16 --seed 4 --out '" + (dir / "a").string() + "'").code, 0);
  ASSERT_EQ(cli("gen-data --count 16 --seed 4 --out '" + (dir / "b").string() + "'").code, 0);
  EXPECT_EQ(read_file(dir / "a/manifest.jsonl"), read_file(dir / "b/manifest.jsonl"));
  EXPECT_EQ(read_file(dir / "a/images/s00005.pgm"), read_file(dir / "b/images/s00005.pgm"));
  EXPECT_EQ(read_file(dir / "a/masks/s00005.pgm"), read_file(dir / "b/masks/s00005.pgm"));
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli("gen-data --count 16").code, 2);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("no-such-command").code, 2);
  EXPECT_EQ(cli("verify --points 0").code, 2);
}

TEST(Cli, ThreadsEnvValidated) {
  auto bad = cli("verify --filter identity.ema", "DUSSS_THREADS=abc");
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.out.find("DUSSS_THREADS"), std::string::npos);
  EXPECT_EQ(cli("verify --filter identity.ema", "DUSSS_THREADS=0").code, 2);
  EXPECT_EQ(cli("verify --filter identity.ema", "DUSSS_THREADS=2").code, 0);
}

TEST(Cli, PretrainDryRunAndConfigProblems) {
  TempDir dir("cli_dry");
  auto ok = cli("pretrain --data '" + dir.path().string() + "' --dry-run");
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("configuration ok"), std::string::npos);

  auto bad = cli("pretrain --dry-run --set semi.alpha=2 --set sss.lambda=-1");
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.out.find("semi.alpha"), std::string::npos);
  EXPECT_NE(bad.out.find("sss.lambda"), std::string::npos);
  EXPECT_NE(bad.out.find("paths.data"), std::string::npos);

  write_file(dir / "c.json", R"({"semi.alfa": 0.9})");
  auto unknown = cli("pretrain --dry-run --data x --config '" + (dir / "c.json").string() + "'");
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.out.find("semi.alfa"), std::string::npos);
}

TEST(Cli, TrainSemiArgumentChecks) {
  TempDir dir("cli_semi_args");
  const std::string d = dir.path().string();
  EXPECT_EQ(cli("train-semi --data '" + d + "' --out '" + d + "/o' --labeled-frac 0.3 --no-text").code, 2);
  auto no_vlm = cli("train-semi --data '" + d + "' --out '" + d + "/o'");
  EXPECT_EQ(no_vlm.code, 2);
  EXPECT_NE(no_vlm.out.find("vlm"), std::string::npos);
  EXPECT_EQ(cli("train-semi --data '" + d + "' --no-text --dry-run").code, 0);
}

TEST_F(CliPipeline, PretrainWritesArtifacts) {
  for (const char* f : {"vlm.json", "vlm.bin", "config.json", "pretrain_steps.csv", "pretrain_epochs.csv"})
    EXPECT_TRUE(fs::exists(path(std::string("vlm/") + f))) << f;
}

TEST_F(CliPipeline, TrainSemiTextCsvHeader) {
  const auto csv = read_file(path("semi/train_semi.csv"));
  EXPECT_EQ(first_line(csv), "epoch,l_sup,l_semi,l_semi_merged,l_semi_text,l_tg,val_dice,val_miou");
  EXPECT_EQ(line_count(csv), 3u);
  EXPECT_TRUE(fs::exists(path("semi/seg.bin")));
  EXPECT_TRUE(fs::exists(path("semi/teacher.json")));
}

TEST_F(CliPipeline, TrainSemiNoTextAndFullyLabeled) {
  auto r = cli("train-semi --data " + p("data") + " --out " + p("nt") + " --epochs 1 --no-text");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto csv = read_file(path("nt/train_semi.csv"));
  EXPECT_EQ(first_line(csv), "epoch,l_sup,l_semi,val_dice,val_miou");
  EXPECT_EQ(csv.find("l_semi_text"), std::string::npos);

  auto full = cli("train-semi --data " + p("data") + " --out " + p("full") +
                  " --epochs 1 --no-text --labeled-frac 1.0");
  EXPECT_EQ(full.code, 0) << full.out;
}

TEST_F(CliPipeline, TrainSemiRerunIsByteIdentical) {
  auto r = cli("train-semi --data " + p("data") + " --vlm " + p("vlm/vlm") + " --out " + p("semi2") +
               " --epochs 2");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(read_file(path("semi/train_semi.csv")), read_file(path("semi2/train_semi.csv")));
  EXPECT_EQ(read_file(path("semi/seg.bin")), read_file(path("semi2/seg.bin")));
}

TEST_F(CliPipeline, EvalGroundTruthPredictionsScoreOne) {
  const auto samples = dusss::load_manifest(path("data/manifest.jsonl"));
  fs::create_directories(path("gt_pred"));
  for (const auto& s : samples)
    if (s.split == dusss::SplitTag::Val)
      fs::copy_file(path("data/masks/" + s.id + ".pgm"), path("gt_pred") / (s.id + ".pgm"));
  auto r = cli("eval --data " + p("data") + " --split val --pred-dir " + p("gt_pred") + " --out " +
               p("gt_eval.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto csv = read_file(path("gt_eval.csv"));
  EXPECT_EQ(first_line(csv), "id,dice,iou");
  EXPECT_NE(csv.find("MEAN,1.0"), std::string::npos) << csv;
}

TEST_F(CliPipeline, EvalNeedsExactlyOneSource) {
  EXPECT_EQ(cli("eval --data " + p("data") + " --split val").code, 2);
  EXPECT_EQ(cli("eval --data " + p("data") + " --split val --checkpoint " + p("semi/seg") +
                " --pred-dir " + p("gt_pred"))
                .code,
            2);
  auto r = cli("eval --data " + p("data") + " --split val --checkpoint " + p("semi/seg"));
  EXPECT_EQ(r.code, 0) << r.out;
}

TEST_F(CliPipeline, InferDeterministicWithFullRangeHeatmap) {
  const std::string base = "infer --checkpoint " + p("semi/seg") + " --image " +
                           p("data/images/s00000.pgm") + " --vocab " + p("data/vocab.json") +
                           " --vlm " + p("vlm/vlm") + " --text 'one large lesion in center region'";
  ASSERT_EQ(cli(base + " --out-mask " + p("m1.pgm") + " --out-heatmap " + p("h1.pgm")).code, 0);
  ASSERT_EQ(cli(base + " --out-mask " + p("m2.pgm") + " --out-heatmap " + p("h2.pgm")).code, 0);
  EXPECT_EQ(read_file(path("m1.pgm")), read_file(path("m2.pgm")));
  EXPECT_EQ(read_file(path("h1.pgm")), read_file(path("h2.pgm")));

  const auto heat = dusss::load_pgm(path("h1.pgm"));
  const auto [lo, hi] = std::minmax_element(heat.pixels.begin(), heat.pixels.end());
  EXPECT_EQ(*lo, 0.0);
  EXPECT_EQ(*hi, 1.0);

  const auto mask = dusss::load_pgm(path("m1.pgm"));
  for (double v : mask.pixels) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

TEST_F(CliPipeline, InferHeatmapNeedsTextAndVlm) {
  auto r = cli("infer --checkpoint " + p("semi/seg") + " --image " + p("data/images/s00000.pgm") +
               " --vocab " + p("data/vocab.json") + " --out-mask " + p("m3.pgm") + " --out-heatmap " +
               p("h3.pgm"));
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, VerifyFilterAndList) {
  auto r = cli("verify --filter wasserstein --points 3");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(line_count(r.out), 3u) << r.out;
  EXPECT_NE(r.out.find("grad.loss.wasserstein"), std::string::npos);
  EXPECT_NE(r.out.find("2/2 checks passed"), std::string::npos);

  auto list = cli("verify --list");
  EXPECT_EQ(list.code, 0);
  EXPECT_NE(list.out.find("monotonicity.sim_hat_in_d_u"), std::string::npos);
}
