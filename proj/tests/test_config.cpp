#include <gtest/gtest.h>

#include <algorithm>

#include "dusss/config.hpp"
#include "test_util.hpp"

using namespace dusss;

namespace {

bool mentions(const std::vector<std::string>& problems, const std::string& needle) {
  return std::any_of(problems.begin(), problems.end(),
                     [&](const std::string& p) { return p.find(needle) != std::string::npos; });
}

}  // namespace

TEST(Config, DefaultsValidate) {
  RunConfig c;
  EXPECT_TRUE(c.problems().empty());
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, KeysAreUnique) {
  auto keys = RunConfig::keys();
  auto sorted = keys;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
  EXPECT_NE(std::find(keys.begin(), keys.end(), "semi.alpha"), keys.end());
  EXPECT_NE(std::find(keys.begin(), keys.end(), "sss.lambda"), keys.end());
}

TEST(Config, UnknownKeysAndTypeErrorsReportedTogether) {
  RunConfig c;
  try {
    c.apply_json(R"({"semi.alfa": 0.9, "sss.a": "big", "semi.text": 3})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.problems().size(), 3u);
    EXPECT_TRUE(mentions(e.problems(), "semi.alfa"));
    EXPECT_TRUE(mentions(e.problems(), "sss.a"));
    EXPECT_TRUE(mentions(e.problems(), "semi.text"));
  }
}

TEST(Config, OutOfRangeValuesAllListed) {
  RunConfig c;
  c.set("semi.alpha", "1.5");
  c.set("semi.labeled_frac", "0.3");
  c.set("sss.lambda", "-1");
  c.set("model.patch", "5");
  auto p = c.problems();
  EXPECT_EQ(p.size(), 4u);
  EXPECT_TRUE(mentions(p, "semi.alpha"));
  EXPECT_TRUE(mentions(p, "semi.labeled_frac"));
  EXPECT_TRUE(mentions(p, "sss.lambda"));
  EXPECT_TRUE(mentions(p, "model.patch"));
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, SetParsesJsonOrBareString) {
  RunConfig c;
  c.set("semi.alpha", "0.95");
  EXPECT_DOUBLE_EQ(c.semi.alpha, 0.95);
  c.set("semi.text", "false");
  EXPECT_FALSE(c.semi.use_text);
  c.set("paths.data", "some/dir");
  EXPECT_EQ(c.data_dir, "some/dir");
  c.set("semi.merge_mode", "logit");
  EXPECT_EQ(c.semi.merge, MergeMode::Logit);
  EXPECT_THROW(c.set("semi.merge_mode", "average"), ConfigError);
}

TEST(Config, InvalidJsonRejected) {
  RunConfig c;
  EXPECT_THROW(c.apply_json("{not json"), ConfigError);
  EXPECT_THROW(c.apply_json("[1, 2]"), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  RunConfig a;
  a.set("seed", "123");
  a.set("semi.w_semi", "0.25");
  a.set("contrastive.imc", "false");
  a.set("paths.out", "\"runs/x\"");
  RunConfig b;
  b.apply_json(a.to_json());
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(b.seed, 123u);
  EXPECT_FALSE(b.imc);
  EXPECT_EQ(b.out_dir, "runs/x");
}

TEST(Config, ApplyFile) {
  TempDir dir("config");
  write_file(dir / "c.json", R"({"semi.epochs": 3, "sss.enabled": false})");
  RunConfig c;
  c.apply_file(dir / "c.json");
  EXPECT_EQ(c.semi.max_epochs, 3u);
  EXPECT_FALSE(c.sss_enabled);
  EXPECT_THROW(c.apply_file(dir / "missing.json"), ConfigError);
}

TEST(Config, StageOptionsCarrySharedFields) {
  RunConfig c;
  c.set("seed", "99");
  c.set("sss.enabled", "false");
  c.set("contrastive.imc", "false");
  auto p = c.pretrain_options();
  EXPECT_EQ(p.seed, 99u);
  EXPECT_FALSE(p.sss_enabled);
  EXPECT_FALSE(p.imc_enabled);
  EXPECT_EQ(c.semi_options().seed, 99u);
}
