#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <unistd.h>

#include "ctxdet/cli.hpp"

namespace fs = std::filesystem;
using namespace ctxdet;

namespace {

const char* kTinyConfig =
    "train_scenes = 6\n"
    "eval_scenes = 3\n"
    "synth.max_points = 256\n"
    "model.num_seeds = 64\n"
    "model.encoder_support = 64\n"
    "model.num_clusters = 8\n"
    "model.feature_dim = 8\n"
    "model.head_hidden = 16\n"
    "model.box_pool_dim = 8\n"
    "train.epochs = 2\n"
    "train.decay_epochs = 1\n";

struct Run {
  int rc;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "ctxdet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int rc = run_cli(int(argv.size()), argv.data(), out, err);
  return {rc, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

class CliChain : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("ctxdet_cli_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    std::ofstream(root_ / "tiny.cfg") << kTinyConfig;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }
  static std::string p(const std::string& name) { return (root_ / name).string(); }
  static std::string cfg() { return p("tiny.cfg"); }
  static fs::path root_;
};

fs::path CliChain::root_;

TEST_F(CliChain, GenerateTrainDetectEvalCount) {
  auto g = cli({"generate", "--config", cfg(), "--out", p("data")});
  ASSERT_EQ(g.rc, 0) << g.err;
  EXPECT_EQ(load_scene_dir(p("data/train")).size(), 6u);
  EXPECT_EQ(load_scene_dir(p("data/eval")).size(), 3u);

  auto t = cli({"train", "--config", cfg(), "--scenes", p("data/train"), "--checkpoint", p("m.ckpt")});
  ASSERT_EQ(t.rc, 0) << t.err;
  auto log = nlohmann::json::parse(slurp(p("m.ckpt.loss.json")));
  EXPECT_EQ(log.size(), 2u);

  auto d = cli({"detect", "--config", cfg(), "--scenes", p("data/eval"), "--checkpoint", p("m.ckpt"), "--out",
                p("pred.txt")});
  ASSERT_EQ(d.rc, 0) << d.err;
  EXPECT_NO_THROW(load_predictions(p("pred.txt"), 4));

  auto e = cli({"eval", "--config", cfg(), "--scenes", p("data/eval"), "--predictions", p("pred.txt"), "--iou",
                "0.25", "--out", p("eval.json")});
  ASSERT_EQ(e.rc, 0) << e.err;
  auto ej = nlohmann::json::parse(slurp(p("eval.json")));
  EXPECT_EQ(ej["iou_thresholds"], nlohmann::json::array({0.25}));
  EXPECT_NE(e.out.find("mAP"), std::string::npos);

  auto c = cli({"count", "--config", cfg(), "--scenes", p("data/eval"), "--predictions", p("pred.txt")});
  ASSERT_EQ(c.rc, 0) << c.err;
  EXPECT_EQ(c.out.rfind("confidence 0.95", 0), 0u) << c.out;
}

TEST_F(CliChain, GroundTruthAsPredictionsScoresPerfectly) {
  ASSERT_EQ(cli({"generate", "--config", cfg(), "--out", p("gt")}).rc, 0);
  PredictionMap preds;
  for (const auto& s : load_scene_dir(p("gt/eval")))
    for (const auto& g : s.gt) preds[s.id].push_back({g.box, g.class_id, 1.0});
  save_predictions(p("gt_pred.txt"), preds);

  auto e = cli({"eval", "--config", cfg(), "--scenes", p("gt/eval"), "--predictions", p("gt_pred.txt"), "--out",
                p("gt_eval.json")});
  ASSERT_EQ(e.rc, 0) << e.err;
  auto ej = nlohmann::json::parse(slurp(p("gt_eval.json")));
  EXPECT_EQ(ej["map"]["0.25"].get<double>(), 1.0);
  EXPECT_EQ(ej["map"]["0.5"].get<double>(), 1.0);

  auto c = cli({"count", "--config", cfg(), "--scenes", p("gt/eval"), "--predictions", p("gt_pred.txt"), "--out",
                p("gt_count.json")});
  ASSERT_EQ(c.rc, 0) << c.err;
  auto cj = nlohmann::json::parse(slurp(p("gt_count.json")));
  for (const char* k : {"m_rmse", "m_nz_rmse", "m_rrmse", "m_nz_rrmse"}) EXPECT_EQ(cj[k].get<double>(), 0.0) << k;
}

TEST_F(CliChain, AblateReportsEveryCombinationWithOneSchema) {
  auto a = cli({"ablate", "--config", cfg(), "--out", p("ablate.json")});
  ASSERT_EQ(a.rc, 0) << a.err;
  auto j = nlohmann::ordered_json::parse(slurp(p("ablate.json")));
  ASSERT_EQ(j["rows"].size(), 8u);
  std::set<std::string> labels;
  for (const auto& row : j["rows"]) {
    labels.insert(row["config"].get<std::string>());
    std::vector<std::string> keys;
    for (auto it = row.begin(); it != row.end(); ++it) keys.push_back(it.key());
    EXPECT_EQ(keys, (std::vector<std::string>{"config", "gcm", "pcm", "hcm", "per_class_ap", "map"}));
  }
  EXPECT_EQ(labels.size(), 8u);
  EXPECT_TRUE(j["context_on_minus_off"].contains("0.25"));
}

TEST_F(CliChain, RepeatedRunsProduceIdenticalFiles) {
  for (const char* tag : {"r1", "r2"}) {
    const std::string t(tag);
    ASSERT_EQ(cli({"generate", "--config", cfg(), "--seed", "3", "--out", p(t)}).rc, 0);
    ASSERT_EQ(cli({"train", "--config", cfg(), "--seed", "3", "--scenes", p(t + "/train"), "--checkpoint",
                   p(t + ".ckpt")})
                  .rc,
              0);
    ASSERT_EQ(cli({"detect", "--config", cfg(), "--scenes", p(t + "/eval"), "--checkpoint", p(t + ".ckpt"), "--out",
                   p(t + ".pred")})
                  .rc,
              0);
  }
  EXPECT_EQ(slurp(p("r1.pred")), slurp(p("r2.pred")));
  EXPECT_EQ(slurp(p("r1.ckpt.loss.json")), slurp(p("r2.ckpt.loss.json")));
  EXPECT_EQ(slurp(p("r1/eval/") + synth_scene_id(6) + ".scene"), slurp(p("r2/eval/") + synth_scene_id(6) + ".scene"));
}

TEST_F(CliChain, ErrorsExitNonZeroWithAMessage) {
  auto none = cli({});
  EXPECT_NE(none.rc, 0);

  auto bad_iou = cli({"eval", "--scenes", p("x"), "--predictions", p("y"), "--iou", "0.3"});
  EXPECT_NE(bad_iou.rc, 0);

  auto missing = cli({"eval", "--scenes", p("no_such_dir"), "--predictions", p("y")});
  EXPECT_EQ(missing.rc, 1);
  EXPECT_NE(missing.err.find("ctxdet eval: error:"), std::string::npos) << missing.err;

  auto bad_stages = cli({"generate", "--stages", "0.6,0.5", "--out", p("s")});
  EXPECT_EQ(bad_stages.rc, 1);

  auto bad_ckpt = cli({"detect", "--config", cfg(), "--scenes", p("no_such_dir"), "--checkpoint", p("nope.ckpt"),
                       "--out", p("o.txt")});
  EXPECT_EQ(bad_ckpt.rc, 1);
}

TEST_F(CliChain, BinaryRunsAsAProcess) {
  const std::string cmd = std::string(CTXDET_CLI_PATH) + " generate --config " + cfg() + " --out " + p("proc") +
                          " > " + p("proc.log") + " 2>&1";
  EXPECT_EQ(std::system(cmd.c_str()), 0) << slurp(p("proc.log"));
  EXPECT_EQ(load_scene_dir(p("proc/eval")).size(), 3u);
  const std::string bad = std::string(CTXDET_CLI_PATH) + " frobnicate > " + p("proc2.log") + " 2>&1";
  EXPECT_NE(std::system(bad.c_str()), 0);
}
