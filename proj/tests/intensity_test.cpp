// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#include "ems/intensity.hpp"
#include "ems/stats.hpp"
#include "grad_check.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace ems {
namespace {

ExtractorConfig small_extractor(int d) {
  ExtractorConfig c;
  c.input_dim = d;
  c.conv_layers = 2;
  c.conv_channels = 6;
  c.conv_kernel = 3;
  c.lstm_hidden = 5;
  c.fc_hidden = 4;
  c.seed = 4;
  return c;
}

FeatureSequence from_frames(MatF frames) {
  FeatureSequence fs;
  fs.truth_frame_intensity.assign(static_cast<std::size_t>(frames.rows()), 0.0f);
  fs.frames = std::move(frames);
  fs.utterance_id = "u";
  return fs;
}

TEST(Heuristic, ConstantFramesScoreZero) {
  const auto tr = heuristic_intensity(from_frames(MatF::Constant(9, 4, -2.0f)));
  EXPECT_EQ(tr.scores, std::vector<float>(9, 0.0f));
  EXPECT_EQ(tr.source, IntensitySource::Heuristic);
  EXPECT_EQ(heuristic_intensity(from_frames(MatF::Constant(1, 4, 3.0f))).scores, std::vector<float>{0.0f});
}

TEST(Heuristic, SinglePeakScoresOne) {
  MatF f = MatF::Constant(7, 5, -3.0f);
  f.row(4).setConstant(1.0f);
  f(1, 0) = -2.5f;
  const auto tr = heuristic_intensity(from_frames(f));
  EXPECT_EQ(tr.scores[4], 1.0f);
  for (std::size_t t = 0; t < 7; ++t) {
    if (t != 4) EXPECT_LT(tr.scores[t], 1.0f);
    EXPECT_GE(tr.scores[t], 0.0f);
  }
}

// median rank correlation against the generator envelope over 100 utterances
TEST(Heuristic, TracksGroundTruth) {
  const GeneratorConfig g;
  const LogMelExtractor fx(FeatureConfig{}, g.sample_rate);
  std::vector<double> rho;
  for (int s = 0; s < 100; ++s) {
    const auto fs = extract_features(synth_utterance(emotion_from_index(s % 4), 1.0, 1000 + s, g), fx);
    const auto tr = heuristic_intensity(fs);
    const std::vector<double> a(tr.scores.begin(), tr.scores.end()), b(fs.truth_frame_intensity.begin(), fs.truth_frame_intensity.end());
    rho.push_back(stats::spearman(a, b));
  }
  EXPECT_GT(stats::median(rho), 0.5);
}

TEST(Extractor, ScoresBoundedAndDistributionNormalized) {
  IntensityExtractor<float> model(small_extractor(6));
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const int T = 1 + static_cast<int>(uniform_index(rng, 12));
    const double scale = i % 10 == 0 ? 50.0 : 2.0;
    const auto fs = from_frames(nn::random_normal<float>(T, 6, scale, rng));
    const auto p = predict_intensity(model, fs);
    ASSERT_EQ(p.track.scores.size(), static_cast<std::size_t>(T));
    for (float v : p.track.scores) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
    double sum = 0.0;
    for (double q : p.emotion_distribution) {
      ASSERT_GE(q, 0.0);
      sum += q;
    }
    ASSERT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Extractor, InferenceIsDeterministic) {
  IntensityExtractor<float> model(small_extractor(6));
  Rng rng(9);
  const auto fs = from_frames(nn::random_normal<float>(10, 6, 1.0, rng));
  const auto a = predict_intensity(model, fs), b = predict_intensity(model, fs);
  EXPECT_EQ(a.track.scores, b.track.scores);
  EXPECT_EQ(a.emotion_distribution, b.emotion_distribution);
  IntensityExtractor<float> twin(small_extractor(6));
  EXPECT_EQ(predict_intensity(twin, fs).track.scores, a.track.scores);
}

TEST(Extractor, DimensionMismatchAndNonFinite) {
  IntensityExtractor<float> model(small_extractor(6));
  EXPECT_THROW(predict_intensity(model, from_frames(MatF::Zero(4, 5))), DimensionError);
  MatF f = MatF::Zero(4, 6);
  f(2, 3) = std::numeric_limits<float>::infinity();
  EXPECT_THROW(predict_intensity(model, from_frames(f)), NumericError);
  auto bad = small_extractor(6);
  bad.lstm_hidden = 0;
  EXPECT_THROW(IntensityExtractor<float>{bad}, ConfigError);
}

TEST(Extractor, RegressionGradientCheck) {
  auto cfg = small_extractor(8);
  cfg.conv_layers = 2;
  IntensityExtractor<double> model(cfg);
  Rng rng(10);
  const MatD x = nn::random_normal<double>(6, 8, 1.0, rng);
  const std::vector<float> truth{0.0f, 0.2f, 0.9f, 1.0f, 0.4f, 0.1f};
  const auto r = testing::check_gradients(model.parameters(), [&](Tape<double>& t) {
    return extractor_loss(model, t, x, truth, Emotion::Sad, 0.3).total;
  });
  EXPECT_LT(r.worst_rel_error, 1e-4) << r.worst_param;
}

struct Data {
  std::vector<FeatureSequence> train, dev, test;
  Data() {
    CorpusConfig cc;
    auto all = generate_corpus(cc);
    auto parts = split_corpus(all, {0.6, 0.1, 0.3}, 0);
    train = std::move(parts[0]);
    dev = std::move(parts[1]);
    test = std::move(parts[2]);
  }
};

TEST(Training, ZeroEpochsKeepsInitialization) {
  CorpusConfig cc;
  cc.per_class = 2;
  cc.duration_s = 0.3;
  cc.features.mel_bins = 6;
  const auto data = generate_corpus(cc);
  IntensityExtractor<float> a(small_extractor(6)), b(small_extractor(6));
  IntensityTrainConfig tc;
  tc.epochs = 0;
  EXPECT_TRUE(train_intensity(a, data, {}, tc).empty());
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa[i]->value == pb[i]->value) << pa[i]->name;
}

TEST(Training, DeterministicPerSeedAndCheckpointRoundTrip) {
  CorpusConfig cc;
  cc.per_class = 3;
  cc.duration_s = 0.3;
  cc.features.mel_bins = 6;
  const auto data = generate_corpus(cc);
  IntensityTrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  IntensityExtractor<float> a(small_extractor(6)), b(small_extractor(6));
  const auto la = train_intensity(a, data, data, tc), lb = train_intensity(b, data, data, tc);
  ASSERT_EQ(la.size(), 3u);
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i].epoch, static_cast<int>(i));
    EXPECT_EQ(la[i].train_loss, lb[i].train_loss);
    EXPECT_EQ(la[i].dev_mae, lb[i].dev_mae);
  }

  const auto path = std::filesystem::temp_directory_path() / "ems_extractor_test.ckpt";
  save_checkpoint(extractor_checkpoint(a), path);
  auto back = extractor_from_checkpoint<float>(load_checkpoint(path));
  std::filesystem::remove(path);
  for (const auto& fs : data) EXPECT_EQ(predict_intensity(back, fs).track.scores, predict_intensity(a, fs).track.scores);

  Checkpoint wrong = extractor_checkpoint(a);
  wrong.header["kind"] = "ssl";
  EXPECT_THROW(extractor_from_checkpoint<float>(wrong), ArchitectureMismatch);
}

TEST(Training, NonFiniteLossAborts) {
  CorpusConfig cc;
  cc.per_class = 1;
  cc.duration_s = 0.3;
  cc.features.mel_bins = 6;
  auto data = generate_corpus(cc);
  data[1].truth_frame_intensity[0] = std::numeric_limits<float>::quiet_NaN();
  IntensityExtractor<float> m(small_extractor(6));
  IntensityTrainConfig tc;
  tc.epochs = 1;
  EXPECT_THROW(train_intensity(m, data, {}, tc), NumericError);
}

// Default recipe on the default corpus, seed 0.
TEST(Training, DefaultRecipeLearns) {
  const Data d;
  ExtractorConfig ec;
  ec.input_dim = static_cast<int>(d.train.front().dim());
  IntensityExtractor<float> model(ec);
  const IntensityTrainConfig tc;
  const auto log = train_intensity(model, d.train, d.dev, tc);
  ASSERT_EQ(log.size(), static_cast<std::size_t>(tc.epochs + 1));
  EXPECT_LT(log[5].train_loss, log[0].train_loss);
  EXPECT_GT(log.back().dev_accuracy, 0.25);
  EXPECT_LE(evaluate_extractor(model, d.test).mae, 0.1);
}

TEST(Align, ResampleEndpointsAndIdentity) {
  const std::vector<float> same{0.3f, 0.1f, 0.7f};
  EXPECT_EQ(resample_linear(same, 3), same);
  std::vector<float> ramp(10);
  for (int i = 0; i < 10; ++i) ramp[i] = static_cast<float>(i) / 9.0f;
  const auto r = resample_linear(ramp, 5);
  ASSERT_EQ(r.size(), 5u);
  EXPECT_EQ(r.front(), 0.0f);
  EXPECT_EQ(r.back(), 1.0f);
  for (std::size_t i = 1; i < r.size(); ++i) EXPECT_NEAR(r[i] - r[i - 1], 0.25f, 1e-6f);
  EXPECT_EQ(resample_linear({0.0f, 1.0f}, 3), (std::vector<float>{0.0f, 0.5f, 1.0f}));
  EXPECT_THROW(resample_linear(ramp, 0), ConfigError);
}

TEST(Align, LinearMap) {
  Rng rng(12);
  ScoreAligner<double> al("a", 6, rng, false);
  IntensityTrack tr{{0.2f, 0.9f, 0.4f}, IntensitySource::Model, "u"};
  const auto base = align_scores(tr, al, 3);
  EXPECT_EQ(base.embeddings.rows(), 3);
  EXPECT_EQ(base.embeddings.cols(), 6);
  EXPECT_EQ(al.dim(), 6);
  IntensityTrack half = tr;
  for (auto& v : half.scores) v *= 0.5f;
  EXPECT_TRUE(align_scores(half, al, 3).embeddings.isApprox(0.5 * base.embeddings, 1e-7));
  for (auto* p : [&] { nn::ParamList<double> ps; al.collect(ps); return ps; }()) p->value.setZero();
  EXPECT_TRUE(align_scores(tr, al, 5).embeddings.isZero());
  EXPECT_EQ(align_scores(tr, al, 5).embeddings.rows(), 5);
}

}  // namespace
}  // namespace ems
