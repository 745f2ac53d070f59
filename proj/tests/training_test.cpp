// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#include "ems/training.hpp"
#include "grad_check.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace ems {
namespace {

TrainConfig tiny_config(ModelFamily family = ModelFamily::Transformer) {
  TrainConfig c;
  c.family = family;
  c.steps = 12;
  c.batch_size = 2;
  c.learning_rate = 2e-3;
  c.warmup_steps = 3;
  c.seed = 21;
  c.transformer.layers = 1;
  c.transformer.d_model = 16;
  c.transformer.heads = 2;
  c.transformer.ff_dim = 24;
  c.npc.hidden = 12;
  c.npc.codebook_size = 8;
  return c;
}

struct Fixture {
  std::vector<FeatureSequence> data;
  FeatureNormalizer norm;
  std::vector<IntensityTrack> tracks;

  Fixture() {
    CorpusConfig cc;
    cc.per_class = 2;
    cc.duration_s = 0.4;
    cc.seed = 3;
    cc.features.mel_bins = 10;
    data = generate_corpus(cc);
    norm = FeatureNormalizer::fit(data);
    for (const auto& fs : data) tracks.push_back(ground_truth_track(fs));
  }

  template <typename S>
  TrainingSet<S> set() const {
    return prepare_training_set<S>(data, tracks, norm);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

std::vector<nlohmann::json> stream(const std::vector<MetricsRecord>& log) {
  std::vector<nlohmann::json> out;
  for (const auto& r : log) out.push_back(r.to_json(false));
  return out;
}

TEST(Inputs, JointAndSeparate) {
  MatF x = MatF::Constant(4, 3, 1.0f), e = MatF::Constant(4, 3, 0.5f);
  EXPECT_TRUE(make_joint_input(x, e).isApproxToConstant(1.5f));
  const MatF s = make_separate_input(x, e);
  EXPECT_EQ(s.cols(), 6);
  EXPECT_EQ(s(2, 4), 0.5f);
  EXPECT_THROW(make_joint_input(x, MatF(MatF::Zero(4, 2))), DimensionError);
  EXPECT_THROW(make_separate_input(x, MatF(MatF::Zero(3, 3))), DimensionError);
}

TEST(Losses, ScopeAndAdditivity) {
  Rng rng(1);
  MatF pj = nn::random_normal<float>(6, 3, 1.0, rng), tj = nn::random_normal<float>(6, 3, 1.0, rng);
  MatF ps = nn::random_normal<float>(6, 1, 1.0, rng), ts = nn::random_normal<float>(6, 1, 1.0, rng);
  MaskPlan plan;
  plan.length = 6;
  plan.entries = {{1, MaskAction::Zero, -1}, {4, MaskAction::Keep, -1}};
  const auto a = compute_losses(pj, ps, tj, ts, plan, LossScope::MaskedOnly);
  EXPECT_EQ(a.total, a.l_score + a.l_joint_input);
  EXPECT_FALSE(a.l_vq.has_value());
  // Unmasked rows do not enter the masked-only loss.
  MatF pj2 = pj;
  pj2.row(0).array() += 5.0f;
  EXPECT_EQ(compute_losses(pj2, ps, tj, ts, plan, LossScope::MaskedOnly).total, a.total);
  EXPECT_NE(compute_losses(pj2, ps, tj, ts, plan, LossScope::AllFrames).total, compute_losses(pj, ps, tj, ts, plan, LossScope::AllFrames).total);
  // Hand oracle for the score term.
  const double ls = (std::abs(ps(1, 0) - ts(1, 0)) + std::abs(ps(4, 0) - ts(4, 0))) / 2.0;
  EXPECT_NEAR(a.l_score, ls, 1e-6);
  MaskPlan none;
  none.length = 6;
  EXPECT_THROW(compute_losses(pj, ps, tj, ts, none, LossScope::MaskedOnly), Error);
}

TEST(Inputs, Identities) {
  Rng rng(4);
  const MatF x = nn::random_normal<float>(5, 3, 1.0, rng), e = nn::random_normal<float>(5, 3, 1.0, rng);
  const MatF z = MatF::Zero(5, 3);
  EXPECT_TRUE(make_joint_input(x, z) == x);
  EXPECT_TRUE(make_joint_input(z, e) == e);
  EXPECT_TRUE(make_joint_input(MatF(2.5f * x), MatF(2.5f * e)).isApprox(2.5f * make_joint_input(x, e), 1e-6f));
  const MatF s = make_separate_input(x, e);
  EXPECT_TRUE(s.leftCols(3) == x);
  EXPECT_TRUE(s.rightCols(3) == e);
  EXPECT_TRUE(make_separate_input(x, z).rightCols(3).isZero(0.0f));
}

TEST(Losses, WorkedValues) {
  MaskPlan all;
  all.length = 1;
  all.entries = {{0, MaskAction::Zero, -1}};
  MatD jp(1, 2), jt(1, 2), sp(1, 1), st(1, 1);
  jp << 1.0, -2.0;
  jt = jp;
  sp << 0.3;
  st << 0.5;
  const auto a = compute_losses(jp, sp, jt, st, all, LossScope::MaskedOnly);
  EXPECT_NEAR(a.l_score, 0.2, 1e-12);
  EXPECT_EQ(a.l_joint_input, 0.0);
  const auto b = compute_losses(jp, st, jt, st, all, LossScope::AllFrames);
  EXPECT_EQ(b.l_score, 0.0);
  EXPECT_EQ(b.total, 0.0);
}

TEST(Losses, AdditiveAndNonNegativeOverRandomInstances) {
  Rng rng(99);
  for (int i = 0; i < 1000; ++i) {
    const int T = 1 + static_cast<int>(uniform_index(rng, 20)), d = 1 + static_cast<int>(uniform_index(rng, 6));
    const MatD jp = nn::random_normal<double>(T, d, 1.0, rng), jt = nn::random_normal<double>(T, d, 1.0, rng);
    const MatD sp = nn::random_normal<double>(T, 1, 1.0, rng), st = nn::random_normal<double>(T, 1, 1.0, rng);
    MaskPlan plan;
    plan.length = T;
    for (int t = 0; t < T; ++t)
      if (t == 0 || uniform01(rng) < 0.3) plan.entries.push_back({t, MaskAction::Zero, -1});
    for (auto scope : {LossScope::MaskedOnly, LossScope::AllFrames}) {
      const auto l = compute_losses(jp, sp, jt, st, plan, scope);
      ASSERT_GE(l.l_score, 0.0);
      ASSERT_GE(l.l_joint_input, 0.0);
      ASSERT_NEAR(l.total, l.l_score + l.l_joint_input, 1e-9);
    }
  }
}

TEST(Losses, ScopeDefaultsPerFamily) {
  EXPECT_EQ(tiny_config(ModelFamily::Transformer).scope(), LossScope::MaskedOnly);
  EXPECT_EQ(tiny_config(ModelFamily::Npc).scope(), LossScope::AllFrames);
  auto c = tiny_config();
  c.loss_scope = LossScope::AllFrames;
  EXPECT_EQ(c.scope(), LossScope::AllFrames);
}

TEST(SslModel, UtteranceLossGradientCheck) {
  for (auto mode : {InputMode::Joint, InputMode::Separate}) {
    auto cfg = tiny_config();
    cfg.input_mode = mode;
    cfg.span = 2;
    SslModel<double> model(cfg, 5);
    Rng rng(2);
    MatD x = nn::random_normal<double>(10, 5, 1.0, rng);
    std::vector<float> s{0.1f, 0.8f, 0.3f, 0.9f, 0.2f, 0.5f, 0.4f, 0.7f, 0.6f, 0.0f};
    const auto r = testing::check_gradients(model.parameters(), [&](Tape<double>& t) {
      return utterance_loss(model, t, cfg, x, s, 77).total;
    });
    EXPECT_LT(r.worst_rel_error, 1e-4) << r.worst_param;
  }
}

TEST(Trainer, AdditiveRecordsAndDeterminism) {
  const auto data = fixture().set<float>();
  for (auto family : {ModelFamily::Transformer, ModelFamily::Npc}) {
    Trainer<float> a(tiny_config(family), 10), b(tiny_config(family), 10);
    const auto la = pretrain(a, data), lb = pretrain(b, data);
    ASSERT_EQ(la.size(), 12u);
    EXPECT_EQ(stream(la), stream(lb));
    for (const auto& r : la) {
      EXPECT_TRUE(std::isfinite(r.loss.total));
      EXPECT_NEAR(r.loss.total, r.loss.l_score + r.loss.l_joint_input + r.loss.l_vq.value_or(0.0), 1e-12);
      EXPECT_EQ(r.loss.l_vq.has_value(), family == ModelFamily::Npc);
    }
    EXPECT_EQ(a.step(), 12);
  }
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  const auto data = fixture().set<float>();
  auto cfg = tiny_config();
  Trainer<float> full(cfg, 10);
  const auto lf = pretrain(full, data);

  auto half = cfg;
  half.steps = 5;
  Trainer<float> first(half, 10);
  pretrain(first, data);
  const auto path = std::filesystem::temp_directory_path() / "ems_resume_test.ckpt";
  save_checkpoint(first.checkpoint(), path);
  auto rest = cfg;
  rest.steps = 7;
  Trainer<float> second(rest, 10);
  second.load(load_checkpoint(path), true);
  const auto ls = pretrain(second, data);
  std::filesystem::remove(path);
  ASSERT_EQ(ls.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(ls[i].to_json(false), lf[i + 5].to_json(false));
}

TEST(Trainer, WarmStartTagsStrategyTransition) {
  const auto data = fixture().set<float>();
  auto base = tiny_config();
  base.strategy = MaskStrategy::Uniform;
  base.steps = 3;
  Trainer<float> a(base, 10);
  pretrain(a, data);
  auto ck = a.checkpoint();
  auto next = base;
  next.strategy = MaskStrategy::Ems;
  Trainer<float> b(next, 10);
  b.load(ck, false);
  const auto log = pretrain(b, data);
  EXPECT_TRUE(log.front().transition);
  EXPECT_EQ(log.front().step, 4);
  EXPECT_EQ(log.front().strategy, "ems");
  EXPECT_FALSE(log.back().transition);
  ASSERT_EQ(b.strategy_history().size(), 2u);
  EXPECT_EQ(b.strategy_history()[1]["step"], 4);
}

TEST(Trainer, ArchitectureMismatchIsRejected) {
  Trainer<float> a(tiny_config(), 10);
  auto other = tiny_config();
  other.transformer.d_model = 8;
  Trainer<float> b(other, 10);
  EXPECT_THROW(b.load(a.checkpoint(), false), ArchitectureMismatch);
  Trainer<float> c(tiny_config(ModelFamily::Npc), 10);
  EXPECT_THROW(c.load(a.checkpoint(), false), ArchitectureMismatch);
}

TEST(Trainer, SpanLongerThanBudgetIsAConfigError) {
  const auto data = fixture().set<float>();
  auto cfg = tiny_config();
  cfg.k_percent = 5;
  cfg.span = 9;
  Trainer<float> a(cfg, 10);
  EXPECT_THROW(pretrain(a, data), ConfigError);
}

TEST(Trainer, BatchesAreDistinctAndReproducible) {
  Trainer<float> a(tiny_config(), 10);
  const auto b1 = a.batch_for(3, 8), b2 = a.batch_for(3, 8);
  EXPECT_EQ(b1, b2);
  ASSERT_EQ(b1.size(), 2u);
  EXPECT_NE(b1[0], b1[1]);
  EXPECT_EQ(a.batch_for(1, 1).size(), 1u);
}

TEST(Trainer, NonFiniteInputIsReported) {
  auto data = fixture().set<float>();
  data.features[0](0, 0) = std::numeric_limits<float>::quiet_NaN();
  Trainer<float> a(tiny_config(), 10);
  EXPECT_THROW(a.pretrain_step(data, {0}), NumericError);
}

TEST(Trainer, ZeroLearningRateKeepsParameters) {
  const auto data = fixture().set<float>();
  for (auto family : {ModelFamily::Transformer, ModelFamily::Npc}) {
    auto cfg = tiny_config(family);
    cfg.learning_rate = 0.0;
    cfg.steps = 3;
    Trainer<float> a(cfg, 10), b(cfg, 10);
    const auto log = pretrain(a, data);
    ASSERT_EQ(log.size(), 3u);
    EXPECT_GT(log[0].loss.total, 0.0);
    auto pa = a.model().parameters(), pb = b.model().parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa[i]->value == pb[i]->value) << pa[i]->name;
  }
}

TEST(Trainer, ZeroStepsLeavesModelUntouched) {
  const auto data = fixture().set<float>();
  auto cfg = tiny_config();
  cfg.steps = 0;
  Trainer<float> a(cfg, 10), b(cfg, 10);
  EXPECT_TRUE(pretrain(a, data).empty());
  auto pa = a.model().parameters(), pb = b.model().parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa[i]->value == pb[i]->value);
}

}  // namespace
}  // namespace ems
