// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#include "ems/probes.hpp"

#include <gtest/gtest.h>

#include <numeric>

namespace ems {
namespace {

ProbeData noise_data(std::size_t n, int dim, int classes, std::uint64_t seed) {
  Rng rng(seed);
  ProbeData d;
  d.x = nn::random_normal<double>(static_cast<Eigen::Index>(n), dim, 1.0, rng);
  for (std::size_t i = 0; i < n; ++i) d.y.push_back(static_cast<int>(i % static_cast<std::size_t>(classes)));
  return d;
}

// class-dependent means, well separated
ProbeData blob_data(std::size_t n, int dim, int classes, std::uint64_t seed) {
  auto d = noise_data(n, dim, classes, seed);
  for (std::size_t i = 0; i < n; ++i) d.x(static_cast<Eigen::Index>(i), d.y[i] % dim) += 4.0;
  return d;
}

void permute_labels(ProbeData& d, std::uint64_t seed) {
  Rng rng(seed);
  shuffle_in_place(d.y, rng);
}

ProbeConfig quick() {
  ProbeConfig c;
  c.epochs = 40;
  return c;
}

TEST(Stats, BinomialTail) {
  EXPECT_DOUBLE_EQ(stats::binomial_upper_tail(0, 10, 0.3), 1.0);
  EXPECT_NEAR(stats::binomial_upper_tail(2, 3, 0.5), 0.5, 1e-12);
  EXPECT_NEAR(stats::binomial_upper_tail(3, 3, 0.5), 0.125, 1e-12);
  // 30/72 at chance 0.25: summed by hand from the pmf
  double tail = 0.0;
  for (int k = 30; k <= 72; ++k) {
    double lc = std::lgamma(73.0) - std::lgamma(k + 1.0) - std::lgamma(73.0 - k);
    tail += std::exp(lc + k * std::log(0.25) + (72 - k) * std::log(0.75));
  }
  EXPECT_NEAR(stats::binomial_upper_tail(30, 72, 0.25), tail, 1e-12);
}

TEST(Probe, OneHotFeaturesAreSolved) {
  auto tr = noise_data(80, 4, 4, 1), te = noise_data(40, 4, 4, 2);
  tr.x = detail::one_hot(tr.y, 4);
  te.x = detail::one_hot(te.y, 4);
  const auto r = train_probe(tr, te, 4, quick());
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.per_seed.size(), 3u);
  EXPECT_TRUE(r.above_chance());
}

TEST(Probe, PermutedLabelsSitAtChance) {
  auto tr = blob_data(400, 8, 4, 3), te = blob_data(2000, 8, 4, 4);
  permute_labels(tr, 5);
  permute_labels(te, 6);
  for (int hidden : {0, 16}) {
    auto cfg = quick();
    cfg.hidden = hidden;
    const auto r = train_probe(tr, te, 4, cfg);
    EXPECT_NEAR(r.accuracy, 0.25, 0.05) << hidden;
    EXPECT_DOUBLE_EQ(r.chance, 0.25);
  }
}

TEST(Probe, SeparableBlobsAndHeadlineIsSeedMean) {
  const auto tr = blob_data(200, 8, 4, 7), te = blob_data(200, 8, 4, 8);
  auto cfg = quick();
  cfg.seeds = {4, 5, 6, 7};
  const auto r = train_probe(tr, te, 4, cfg);
  EXPECT_GT(r.accuracy, 0.9);
  ASSERT_EQ(r.per_seed.size(), 4u);
  EXPECT_NEAR(r.accuracy, std::accumulate(r.per_seed.begin(), r.per_seed.end(), 0.0) / 4.0, 1e-12);
  EXPECT_NEAR(r.error_rate, 1.0 - r.accuracy, 1e-12);
  EXPECT_EQ(r.seeds, cfg.seeds);
  EXPECT_EQ(train_probe(tr, te, 4, cfg).per_seed, r.per_seed);
  EXPECT_LT(r.p_value, 1e-6);
  const auto j = r.to_json();
  EXPECT_EQ(j["config_hash"], r.config_hash);
}

TEST(Probe, SingleClassTrainingIsRejected) {
  auto tr = noise_data(20, 3, 4, 1);
  std::fill(tr.y.begin(), tr.y.end(), 2);
  EXPECT_THROW(train_probe(tr, tr, 4, quick()), ConfigError);
  auto cfg = quick();
  cfg.seeds.clear();
  EXPECT_THROW(train_probe(noise_data(20, 3, 4, 1), noise_data(20, 3, 4, 2), 4, cfg), ConfigError);
}

TEST(FrameProbe, ConstantLabelsAreFlagged) {
  auto tr = noise_data(60, 3, 8, 1), te = noise_data(30, 3, 8, 2);
  std::fill(tr.y.begin(), tr.y.end(), 5);
  std::fill(te.y.begin(), te.y.end(), 5);
  const auto r = frame_probe(tr, te, 8, quick());
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  EXPECT_TRUE(r.degenerate);
  EXPECT_FALSE(r.warning.empty());
  EXPECT_EQ(r.task, ProbeTask::FrameLabel);
}

TEST(FrameProbe, ShuffledLabelsSitAtChance) {
  auto tr = blob_data(800, 8, 8, 11), te = blob_data(3000, 8, 8, 12);
  permute_labels(tr, 1);
  permute_labels(te, 2);
  const auto r = frame_probe(tr, te, 8, quick());
  EXPECT_NEAR(r.accuracy, 1.0 / 8.0, 0.05);
  EXPECT_FALSE(r.degenerate);
}

TEST(FrameProbe, LabelLengthMismatch) {
  UtteranceRepresentation rep{"a", Eigen::RowVectorXd::Zero(3), MatF::Zero(5, 3)};
  FeatureSequence fs;
  fs.frame_units = {1, 2, 3};
  EXPECT_THROW(frame_probe_data({rep}, {fs}, 0), DimensionError);
  fs.frame_units = {1, 2, 3, 4, 5};
  EXPECT_EQ(frame_probe_data({rep}, {fs}, 0).y.size(), 5u);
  EXPECT_EQ(frame_probe_data({rep}, {fs}, 2).y, (std::vector<int>{1, 4}));
  EXPECT_THROW(pooled_probe_data({rep}, {}), DimensionError);
}

struct Reps {
  std::vector<FeatureSequence> data;
  std::vector<IntensityTrack> tracks;
  FeatureNormalizer norm;
  Reps() {
    CorpusConfig cc;
    cc.per_class = 2;
    cc.duration_s = 0.3;
    cc.features.mel_bins = 8;
    data = generate_corpus(cc);
    norm = FeatureNormalizer::fit(data);
    for (const auto& fs : data) tracks.push_back(ground_truth_track(fs));
  }
};

TrainConfig small(ModelFamily f, std::uint64_t seed) {
  TrainConfig c;
  c.family = f;
  c.seed = seed;
  c.transformer.layers = 1;
  c.transformer.d_model = 12;
  c.transformer.heads = 2;
  c.transformer.ff_dim = 16;
  c.npc.hidden = 10;
  c.npc.codebook_size = 8;
  return c;
}

TEST(Representations, ShapeDeterminismAndDistinctModels) {
  const Reps r;
  const auto set = prepare_training_set<float>(r.data, r.tracks, r.norm);
  for (auto family : {ModelFamily::Transformer, ModelFamily::Npc}) {
    for (auto strategy : {MaskStrategy::Ems, MaskStrategy::Uniform}) {
      auto cfg = small(family, 1);
      cfg.strategy = strategy;
      SslModel<float> a(cfg, 8), b(cfg, 8), c(small(family, 2), 8);
      const auto ra = extract_representations(a, cfg, set), rb = extract_representations(b, cfg, set), rc = extract_representations(c, cfg, set);
      const int width = family == ModelFamily::Transformer ? 12 : 10;
      ASSERT_EQ(ra.size(), r.data.size());
      bool differ = false;
      for (std::size_t i = 0; i < ra.size(); ++i) {
        EXPECT_EQ(ra[i].pooled.size(), width);
        EXPECT_EQ(ra[i].frames.rows(), r.data[i].frames.rows());
        EXPECT_EQ(ra[i].id, r.data[i].utterance_id);
        EXPECT_TRUE(ra[i].frames == rb[i].frames);
        EXPECT_TRUE(ra[i].pooled == rb[i].pooled);
        differ |= !(ra[i].frames == rc[i].frames);
      }
      EXPECT_TRUE(differ);
    }
  }
}

CellSpec cell(const std::string& name, MaskStrategy s, double p) {
  CellSpec c;
  c.name = name;
  c.strategy = s;
  c.parameter = p;
  return c;
}

TEST(Compare, ReportShapeAndMeans) {
  const std::vector<CellSpec> cells{cell("ems(15%)", MaskStrategy::Ems, 15), cell("ems(25%)", MaskStrategy::Ems, 25),
                                    cell("uniform(15%)", MaskStrategy::Uniform, 15)};
  const auto rep = compare_strategies(cells, [](const CellSpec& c) {
    CellResult r;
    r.seeds = {1, 2, 3};
    r.utterance_accuracy = {c.parameter / 100.0, 0.5, 0.6 + c.parameter / 1000.0};
    r.frame_error_rate = {0.7, 0.8, 0.9};
    r.p_values = {0.01, 0.02, 0.03};
    return r;
  });
  EXPECT_TRUE(rep.complete);
  ASSERT_EQ(rep.cells.size(), 3u);
  for (const auto& c : rep.cells) {
    EXPECT_EQ(c.utterance_accuracy.size(), 3u);
    EXPECT_NEAR(c.mean_accuracy(), (c.utterance_accuracy[0] + c.utterance_accuracy[1] + c.utterance_accuracy[2]) / 3.0, 1e-9);
  }
  const auto j = rep.to_json();
  EXPECT_EQ(j["cells"]["ems"].size(), 2u);
  EXPECT_EQ(j["cells"]["uniform"].size(), 1u);
  const auto& e25 = j["cells"]["ems"]["25/joint/transformer"];
  EXPECT_EQ(e25["utterance_accuracy"].size(), 3u);
  EXPECT_NEAR(e25["mean_accuracy"].get<double>(), (0.25 + 0.5 + 0.625) / 3.0, 1e-9);

  const std::string csv = rep.to_csv();
  const auto lines = std::count(csv.begin(), csv.end(), '\n');
  // header + 3 cells x (3 seeds x 2 metrics + 2 means) + references
  EXPECT_EQ(lines, 1 + 3 * 8 + static_cast<long>(published_reference_rows().size()));
  EXPECT_NE(csv.find("cell,ems(25%),transformer,ems,25,joint,2,utterance_accuracy,0.500000,ok"), std::string::npos);
}

TEST(Compare, FailedCellMarksIncompleteAndDuplicatesAreRejected) {
  const std::vector<CellSpec> cells{cell("a", MaskStrategy::Ems, 25), cell("b", MaskStrategy::Uniform, 15)};
  const auto rep = compare_strategies(cells, [](const CellSpec& c) -> CellResult {
    if (c.strategy == MaskStrategy::Uniform) throw NumericError("diverged");
    CellResult r;
    r.seeds = {1};
    r.utterance_accuracy = {0.5};
    return r;
  });
  EXPECT_FALSE(rep.complete);
  ASSERT_EQ(rep.cells.size(), 2u);
  ASSERT_TRUE(rep.cells[1].error.has_value());
  EXPECT_EQ(rep.to_json()["cells"]["uniform"]["15/joint/transformer"]["error"], "diverged");
  EXPECT_NE(rep.to_csv().find(",failed\n"), std::string::npos);
  EXPECT_THROW(compare_strategies({cells[0], cells[0]}, [](const CellSpec&) { return CellResult{}; }), ConfigError);
}

TEST(Compare, PublishedRowsAreAnnotationsOnly) {
  const auto j = ComparisonReport{}.to_json();
  auto find = [&](const std::string& method, const std::string& param, const std::string& metric) {
    for (const auto& r : j["reference"])
      if (r["method"] == method && r["parameter"] == param && r["metric"] == metric) return r;
    return nlohmann::json();
  };
  const auto mj = find("mockingjay", "", "accuracy_percent"), ems = find("mockingjay+ems", "25%", "accuracy_percent");
  EXPECT_DOUBLE_EQ(mj["value"].get<double>(), 50.28);
  EXPECT_DOUBLE_EQ(ems["value"].get<double>(), 57.42);
  EXPECT_DOUBLE_EQ(find("npc", "", "accuracy_percent")["value"].get<double>(), 59.08);
  EXPECT_DOUBLE_EQ(find("separate_input", "5", "accuracy_percent")["value"].get<double>(), 60.56);
  EXPECT_DOUBLE_EQ(find("joint_input", "5", "accuracy_percent")["value"].get<double>(), 62.14);
  EXPECT_DOUBLE_EQ(find("mockingjay+ems", "15%", "phoneme_error_rate_percent")["value"].get<double>(), 63.03);
  for (const auto& r : j["reference"]) {
    EXPECT_FALSE(r["reproduced"].get<bool>());
    EXPECT_EQ(r["note"], kReferenceFlag);
  }
  EXPECT_EQ(j["reference"].size(), 18u);
}

}  // namespace
}  // namespace ems
