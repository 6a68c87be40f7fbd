#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ctxdet/experiment.hpp"
#include "ctxdet/grad_check.hpp"
#include "ctxdet/pipeline.hpp"
#include "ctxdet/train.hpp"

using namespace ctxdet;

namespace {

PipelineConfig small_config() {
  PipelineConfig c;
  c.synth.max_points = 512;
  c.model.num_seeds = 64;
  c.model.encoder_support = 128;
  c.model.num_clusters = 16;
  c.model.feature_dim = 16;
  c.model.head_hidden = 32;
  c.model.box_pool_dim = 16;
  c.train.epochs = 3;
  c.train.decay_epochs = {2};
  return c;
}

std::vector<Scene> scenes(const PipelineConfig& c, std::size_t n, std::size_t first = 0) {
  std::vector<Scene> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_scene(c.synth, first + i));
  return out;
}

Box3 cube(double x, double side = 2.0) { return {{x, 0, 0}, {side, side, side}}; }

}  // namespace

TEST(Pipeline, ForwardIsDeterministic) {
  const auto cfg = small_config();
  const Scene s = synth_scene(cfg.synth, 3);
  ModelParams p = init_model(cfg.model, 5);
  Tape a, b;
  auto fa = forward(a, s.points, p, cfg.model);
  auto fb = forward(b, s.points, p, cfg.model);
  EXPECT_EQ(a.value(fa.seed_features), b.value(fb.seed_features));
  EXPECT_EQ(a.value(fa.cascade.outputs.back()), b.value(fb.cascade.outputs.back()));
  EXPECT_EQ(fa.cascade.boxes, fb.cascade.boxes);
}

TEST(Pipeline, ProposalCountEqualsClusterCount) {
  const auto cfg = small_config();
  ModelParams p = init_model(cfg.model, 1);
  Tape t;
  auto fp = forward(t, synth_scene(cfg.synth, 0).points, p, cfg.model);
  EXPECT_EQ(fp.proposals.boxes.size(), cfg.model.num_clusters);
  EXPECT_EQ(t.value(fp.proposals.features).shape(), (Shape{cfg.model.num_clusters, proposal_dim(cfg.model)}));
  EXPECT_EQ(fp.cascade.boxes.size(), cfg.model.cascade.stages() + 1);
}

TEST(Pipeline, TooFewPointsIsAnInputError) {
  const auto cfg = small_config();
  ModelParams p = init_model(cfg.model, 1);
  std::vector<Vec3> pts(cfg.model.num_seeds - 1);
  EXPECT_THROW(detect_scene(pts, p, cfg.model), InputError);
}

TEST(Pipeline, ContextSwitchesNeverChangeOutputShapes) {
  auto cfg = small_config();
  const Scene s = synth_scene(cfg.synth, 1);
  ModelParams p = init_model(cfg.model, 2);
  std::optional<Shape> shape;
  for (const auto& cc : ContextConfig::all_combinations()) {
    cfg.model.context = cc;
    Tape t;
    auto fp = forward(t, s.points, p, cfg.model);
    const Shape out = t.value(fp.cascade.outputs.back()).shape();
    if (!shape) shape = out;
    EXPECT_EQ(out, *shape) << cc.label();
    EXPECT_LE(detect_scene(s.points, p, cfg.model).detections.size(), cfg.model.num_clusters);
  }
}

TEST(Cascade, ZeroResidualHeadsKeepProposalBoxes) {
  const auto cfg = small_config();
  ModelParams p = make_model(cfg.model);  // all-zero weights
  Tape t;
  auto fp = forward(t, synth_scene(cfg.synth, 2).points, p, cfg.model);
  for (std::size_t s = 1; s < fp.cascade.boxes.size(); ++s) EXPECT_EQ(fp.cascade.boxes[s], fp.cascade.boxes[0]);
}

TEST(Cascade, SingleStageEqualsBaselineHead) {
  auto cfg = small_config();
  cfg.model.cascade.thresholds = {0.5};
  ModelParams p = init_model(cfg.model, 3);
  const Scene s = synth_scene(cfg.synth, 4);
  Tape t;
  auto fp = forward(t, s.points, p, cfg.model);
  Tape u;
  StageResult base = baseline_refine(u, s.points, u.constant(t.value(fp.proposals.features)), fp.proposals.boxes,
                                     p.stages[0], cfg.model);
  EXPECT_EQ(t.value(fp.cascade.outputs[0]), u.value(base.output));
  EXPECT_EQ(fp.cascade.boxes[1], base.refined);
}

TEST(Cascade, StageCountMustMatchThresholds) {
  auto cfg = small_config();
  ModelParams p = init_model(cfg.model, 3);
  cfg.model.cascade.thresholds = {0.5, 0.6};
  Tape t;
  EXPECT_THROW(forward(t, synth_scene(cfg.synth, 0).points, p, cfg.model), ConfigError);
}

TEST(Targets, ExactBoxIsPositiveAtEveryThreshold) {
  std::vector<GroundTruth> gt{{cube(0), 2}};
  for (double u : {0.05, 0.5, 0.99}) {
    auto a = assign_targets({cube(0)}, gt, u);
    EXPECT_TRUE(a.positive[0]);
    EXPECT_EQ(a.gt_index[0], 0u);
  }
}

TEST(Targets, IouJustAboveHalfIsPositiveOnlyAtFirstStage) {
  // Cubes of side 2 shifted by d along x: IoU = (2 - d) / (2 + d) = 0.52.
  const double d = 2.0 * 0.48 / 1.52;
  ASSERT_NEAR(iou3d(cube(0), cube(d)), 0.52, 1e-12);
  std::vector<GroundTruth> gt{{cube(0), 0}};
  std::vector<bool> pos;
  for (double u : {0.5, 0.55, 0.6}) pos.push_back(assign_targets({cube(d)}, gt, u).positive[0]);
  EXPECT_EQ(pos, (std::vector<bool>{true, false, false}));
}

TEST(Targets, NoGroundTruthMeansAllNegative) {
  auto a = assign_targets({cube(0), cube(3)}, {}, 0.25);
  EXPECT_EQ(a.positive, (std::vector<char>{0, 0}));
}

TEST(Targets, TiesGoToLowestGroundTruthIndex) {
  std::vector<GroundTruth> gt{{cube(1), 0}, {cube(-1), 1}};
  auto a = assign_targets({cube(0)}, gt, 0.2);
  EXPECT_TRUE(a.positive[0]);
  EXPECT_EQ(a.gt_index[0], 0u);
}

TEST(Targets, PositivesShrinkAsThresholdsRise) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> c(-1, 1), s(0.3, 1.5);
  const std::vector<double> u{0.25, 0.5, 0.55, 0.6, 0.75};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<GroundTruth> gt;
    std::vector<Box3> props;
    for (int i = 0; i < 3; ++i) gt.push_back({{{c(rng), c(rng), c(rng)}, {s(rng), s(rng), s(rng)}}, 0});
    for (int i = 0; i < 20; ++i) props.push_back({{c(rng), c(rng), c(rng)}, {s(rng), s(rng), s(rng)}});
    for (std::size_t t = 0; t + 1 < u.size(); ++t) {
      auto lo = assign_targets(props, gt, u[t]), hi = assign_targets(props, gt, u[t + 1]);
      for (std::size_t i = 0; i < props.size(); ++i)
        if (hi.positive[i]) {
          EXPECT_TRUE(lo.positive[i]);
        }
    }
  }
}

TEST(Pipeline, LossGradientMatchesFiniteDifferencesOnAParameterProbe) {
  const auto cfg = small_config();
  const Scene s = synth_scene(cfg.synth, 6);
  ModelParams p = init_model(cfg.model, 7);

  Trace trace;
  {
    Tape t;
    auto fp = forward(t, s.points, p, cfg.model);
    trace = fp.trace;
    t.backward(scene_loss(t, fp, s, cfg.model, cfg.train));
    p.zero_grad();
    t.accumulate_param_grads();
  }
  std::vector<std::pair<Tensor*, std::size_t>> all;
  p.for_each([&](const std::string&, Tensor& w) {
    for (std::size_t i = 0; i < w.size(); ++i) all.push_back({&w, i});
  });
  std::mt19937_64 rng(8);
  std::vector<double*> probes;
  std::vector<double> analytic;
  for (int k = 0; k < 32; ++k) {
    auto [w, i] = all[std::uniform_int_distribution<std::size_t>(0, all.size() - 1)(rng)];
    probes.push_back(&w->storage()[i]);
    analytic.push_back(w->grad()[i]);
  }
  auto loss = [&] {
    Tape t;
    auto fp = forward(t, s.points, p, cfg.model, &trace);
    return t.value(scene_loss(t, fp, s, cfg.model, cfg.train))[0];
  };
  auto rep = grad_check_probes(loss, probes, analytic, 1e-3);
  EXPECT_TRUE(rep.passed) << "max rel err " << rep.max_rel_error << " analytic " << rep.analytic << " numeric "
                          << rep.numeric;
}

TEST(Training, ZeroLearningRateLeavesParametersUnchanged) {
  auto cfg = small_config();
  cfg.train.learning_rate = 0.0;
  cfg.train.epochs = 2;
  const auto data = scenes(cfg, 3);
  TrainResult r = train_toy(data, cfg.model, cfg.train);
  ModelParams init = init_model(cfg.model, stream_seed(cfg.train.seed, 0));
  auto a = r.params.to_named(), b = init.to_named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].value, b[i].value) << a[i].name;
}

TEST(Training, SameSeedGivesBitIdenticalParameters) {
  auto cfg = small_config();
  cfg.train.epochs = 2;
  const auto data = scenes(cfg, 4);
  auto a = train_toy(data, cfg.model, cfg.train).params.to_named();
  auto b = train_toy(data, cfg.model, cfg.train).params.to_named();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].value, b[i].value) << a[i].name;
}

TEST(Training, EmptyDatasetIsRejected) {
  auto cfg = small_config();
  EXPECT_THROW(train_toy({}, cfg.model, cfg.train), ArgumentError);
}

TEST(Training, NonFiniteInputReportsTheEpoch) {
  auto cfg = small_config();
  auto data = scenes(cfg, 1);
  data[0].points[0].x = std::nan("");
  try {
    train_toy(data, cfg.model, cfg.train);
    FAIL() << "expected a training error";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.epoch(), 0u);
  } catch (const std::exception&) {
    // Non-finite coordinates may also be caught earlier by input validation.
    SUCCEED();
  }
}

class TrainedModel : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = new PipelineConfig(small_config());
    cfg_->train.epochs = 12;
    cfg_->train.decay_epochs = {9};
    data_ = new std::vector<Scene>(scenes(*cfg_, 30));
    result_ = new TrainResult(train_toy(*data_, cfg_->model, cfg_->train));
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete data_;
    delete result_;
  }
  static PipelineConfig* cfg_;
  static std::vector<Scene>* data_;
  static TrainResult* result_;
};

PipelineConfig* TrainedModel::cfg_ = nullptr;
std::vector<Scene>* TrainedModel::data_ = nullptr;
TrainResult* TrainedModel::result_ = nullptr;

TEST_F(TrainedModel, RegressionLossesAreFiniteAndFall) {
  // The total is not monotone: better proposals create more positives and
  // so more class and residual terms. The vote and size terms do fall.
  const auto& h = result_->history;
  ASSERT_EQ(h.size(), 12u);
  for (const auto& e : h) EXPECT_TRUE(std::isfinite(e.mean_loss));
  EXPECT_LT(h.back().vote, h.front().vote);
  EXPECT_LT(h.back().size, h.front().size);
}

TEST_F(TrainedModel, VotesMoveTowardObjectCenters) {
  double vote_err = 0, seed_err = 0;
  std::size_t n = 0;
  for (const auto& s : *data_) {
    Tape t;
    auto fp = forward(t, s.points, result_->params, cfg_->model);
    const auto votes = rows_to_points(t.value(fp.votes[static_cast<std::size_t>(PrimitiveKind::center)]));
    for (std::size_t i = 0; i < fp.seeds.size(); ++i) {
      auto g = containing_box(s.gt, fp.seeds[i], kSeedOwnershipMargin);
      if (!g) continue;
      vote_err += distance(votes[i], s.gt[*g].box.center);
      seed_err += distance(fp.seeds[i], s.gt[*g].box.center);
      ++n;
    }
  }
  ASSERT_GT(n, 0u);
  EXPECT_LT(vote_err / double(n), seed_err / double(n));
}

TEST_F(TrainedModel, ProposalsOverlapObjectsBetterThanUntrained) {
  auto mean_best_iou = [&](ModelParams& params) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& s : *data_) {
      Tape t;
      auto fp = forward(t, s.points, params, cfg_->model);
      for (const auto& g : s.gt) {
        double best = 0.0;
        for (const auto& b : fp.proposals.boxes) best = std::max(best, iou3d(b, g.box));
        sum += best;
        ++n;
      }
    }
    return sum / double(n);
  };
  ModelParams untrained = init_model(cfg_->model, 99);
  EXPECT_GT(mean_best_iou(result_->params), mean_best_iou(untrained));
}

TEST_F(TrainedModel, StageReportFollowsKeptDetections) {
  auto dets = detect_all(*data_, result_->params, cfg_->model);
  auto rep = stage_matched_iou(*data_, dets);
  ASSERT_EQ(rep.mean_iou.size(), cfg_->model.cascade.stages() + 1);
  for (double v : rep.mean_iou) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  if (rep.matched > 0) {
    EXPECT_GE(rep.final_stage(), 0.25);
  }
}
