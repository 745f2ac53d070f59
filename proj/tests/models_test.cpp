// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#include "ems/intensity.hpp"
#include "ems/models.hpp"
#include "grad_check.hpp"

#include <gtest/gtest.h>

namespace ems {
namespace {

using testing::check_gradients;

TransformerConfig tiny_transformer(int in = 6, int out = 6) {
  TransformerConfig c;
  c.input_dim = in;
  c.output_dim = out;
  c.layers = 2;
  c.d_model = 16;
  c.heads = 2;
  c.ff_dim = 24;
  c.seed = 5;
  return c;
}

NpcConfig small_npc() {
  NpcConfig c;
  c.input_dim = 6;
  c.output_dim = 6;
  c.hidden = 8;
  c.codebook_size = 16;
  c.seed = 9;
  return c;
}

TEST(Vq, NearestMatchesBruteForce) {
  Rng rng(3);
  MatD z = nn::random_normal<double>(40, 5, 1.0, rng);
  MatD cb = nn::random_normal<double>(12, 5, 1.0, rng);
  const auto a = vq_nearest(z, cb);
  for (Eigen::Index t = 0; t < z.rows(); ++t) {
    int best = 0;
    double bd = 1e300;
    for (Eigen::Index j = 0; j < cb.rows(); ++j) {
      double d = 0;
      for (Eigen::Index c = 0; c < z.cols(); ++c) d += (z(t, c) - cb(j, c)) * (z(t, c) - cb(j, c));
      if (d < bd) {
        bd = d;
        best = static_cast<int>(j);
      }
    }
    EXPECT_EQ(a.indices[static_cast<std::size_t>(t)], best);
  }
}

TEST(Vq, QuantizedRowsAreCodebookRowsAndStraightThrough) {
  Rng rng(4);
  Parameter<double> z("z", nn::random_normal<double>(7, 3, 1.0, rng));
  Parameter<double> cb("cb", nn::random_normal<double>(5, 3, 1.0, rng));
  Tape<double> tape;
  auto r = vq_quantize(tape.leaf(z), tape.leaf(cb), 0.25);
  for (Eigen::Index t = 0; t < 7; ++t) EXPECT_TRUE(r.quantized.value().row(t) == cb.value.row(r.indices[static_cast<std::size_t>(t)]));
  // d(sum(w * q))/dz == w exactly
  MatD w = nn::random_normal<double>(7, 3, 1.0, rng);
  Var<double> s = ag::mean_rows(ag::mul(r.quantized, tape.constant(w)));
  Var<double> total = ag::matmul(s, tape.constant(MatD::Ones(3, 1)));
  tape.backward(total);
  EXPECT_LT((z.grad - w / 7.0).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(cb.grad.cwiseAbs().maxCoeff(), 0.0);
}

// The VQ loss value is (1+b)*mse(z, q) but its gradient follows the
// stop-gradient split: z sees only the commitment share b, the codebook only
// the codebook share 1. Compare each against the matching fraction of the
// finite-difference slope of the value.
TEST(Vq, LossGradientsFollowStopGradientSplit) {
  const double beta = 0.25;
  Rng rng(6);
  Parameter<double> z("z", nn::random_normal<double>(6, 4, 1.0, rng));
  Parameter<double> cb("cb", nn::random_normal<double>(5, 4, 1.0, rng));
  auto value = [&] {
    Tape<double> t;
    return vq_quantize(t.leaf(z), t.leaf(cb), beta).loss.scalar();
  };
  {
    Tape<double> t;
    t.backward(vq_quantize(t.leaf(z), t.leaf(cb), beta).loss);
  }
  auto check = [&](Parameter<double>& p, double share) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double orig = p.value.data()[i];
      p.value.data()[i] = orig + 1e-6;
      const double up = value();
      p.value.data()[i] = orig - 1e-6;
      const double down = value();
      p.value.data()[i] = orig;
      const double numeric = share * (up - down) / 2e-6;
      EXPECT_NEAR(p.grad.data()[i], numeric, 1e-7 + 1e-5 * std::abs(numeric)) << p.name << " entry " << i;
    }
  };
  check(z, beta / (1 + beta));
  check(cb, 1 / (1 + beta));
}

TEST(Transformer, ShapesAndSingleFrame) {
  TransformerEncoder<float> enc(tiny_transformer(6, 4));
  Rng rng(1);
  for (int T : {1, 9}) {
    Tape<float> tape;
    auto out = enc.forward(tape, tape.constant(nn::random_normal<float>(T, 6, 1.0, rng)));
    EXPECT_EQ(out.hidden.rows(), T);
    EXPECT_EQ(out.hidden.cols(), 16);
    EXPECT_EQ(out.joint.cols(), 4);
    EXPECT_EQ(out.score.cols(), 1);
    EXPECT_FALSE(out.vq_loss.has_value());
  }
  Tape<float> tape;
  EXPECT_THROW(enc.forward(tape, tape.constant(MatF::Zero(3, 5))), DimensionError);
}

TEST(Transformer, PermutationEquivariantWithoutPositions) {
  auto cfg = tiny_transformer();
  cfg.positional_encoding = false;
  TransformerEncoder<double> enc(cfg);
  Rng rng(2);
  MatD x = nn::random_normal<double>(8, 6, 1.0, rng);
  std::vector<int> perm{3, 0, 7, 1, 6, 2, 5, 4};
  MatD px(8, 6);
  for (int i = 0; i < 8; ++i) px.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  Tape<double> t1, t2;
  const MatD h = enc.forward(t1, t1.constant(x)).hidden.value();
  const MatD ph = enc.forward(t2, t2.constant(px)).hidden.value();
  for (int i = 0; i < 8; ++i) EXPECT_LT((ph.row(i) - h.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Transformer, SameSeedSameWeights) {
  TransformerEncoder<float> a(tiny_transformer()), b(tiny_transformer());
  auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa[i]->value == pb[i]->value) << pa[i]->name;
}

TEST(Transformer, GradientCheck) {
  TransformerEncoder<double> enc(tiny_transformer());
  Rng rng(7);
  MatD x = nn::random_normal<double>(8, 6, 1.0, rng);
  MatD tj = nn::random_normal<double>(8, 6, 1.0, rng);
  MatD ts = nn::random_normal<double>(8, 1, 1.0, rng);
  std::vector<bool> rows{true, false, true, true, false, true, true, true};
  const auto r = check_gradients(enc.parameters(), [&](Tape<double>& t) {
    auto out = enc.forward(t, t.constant(x));
    return ag::add(ag::l1_mean(out.joint, t.constant(tj), rows), ag::l1_mean(out.score, t.constant(ts), rows));
  });
  EXPECT_LT(r.worst_rel_error, 1e-4) << r.worst_param;
}

TEST(Npc, ReceptiveFieldCases) {
  NpcConfig one;
  one.masked_kernel = 5;
  one.conv_blocks = 0;
  EXPECT_EQ(receptive_field(one).radius, 2);
  NpcConfig two;
  two.masked_kernel = 1;
  two.conv_blocks = 2;
  two.conv_kernel = 3;
  EXPECT_EQ(receptive_field(two).radius, 2);
  EXPECT_EQ(receptive_field(NpcConfig{}).radius, 9);
  EXPECT_EQ(receptive_field(NpcConfig{}).size, 19);
  NpcConfig even;
  even.conv_kernel = 4;
  EXPECT_THROW(receptive_field(even), ConfigError);
}

// Perturbation probe of h_t: which input frames move it.
std::vector<int> influencing_offsets(NpcEncoder<double>& enc, const MatD& x, int t) {
  Tape<double> t0;
  const MatD base = enc.forward(t0, t0.constant(x)).hidden.value();
  std::vector<int> offs;
  for (int s = 0; s < x.rows(); ++s) {
    MatD px = x;
    px.row(s).array() += 1.0;
    Tape<double> t1;
    const MatD h = enc.forward(t1, t1.constant(px)).hidden.value();
    if ((h.row(t) - base.row(t)).cwiseAbs().maxCoeff() > 1e-12) offs.push_back(s - t);
  }
  return offs;
}

TEST(Npc, EmpiricalRadiusMatchesFormulaAndHidesCenter) {
  NpcEncoder<double> enc(small_npc());
  Rng rng(8);
  MatD x = nn::random_normal<double>(41, 6, 1.0, rng);
  const auto offs = influencing_offsets(enc, x, 20);
  ASSERT_FALSE(offs.empty());
  const int r = enc.receptive().radius;
  EXPECT_EQ(*std::max_element(offs.begin(), offs.end()), r);
  EXPECT_EQ(-*std::min_element(offs.begin(), offs.end()), r);
  EXPECT_EQ(std::count(offs.begin(), offs.end(), 0), 0);
}

TEST(Npc, PerturbationsOutsideRadiusDoNotMoveHt) {
  NpcEncoder<double> enc(small_npc());
  const int r = enc.receptive().radius;
  Rng rng(10);
  double worst = 0;
  for (int probe = 0; probe < 100; ++probe) {
    const int T = 2 * r + 1 + static_cast<int>(uniform_index(rng, 30));
    MatD x = nn::random_normal<double>(T, 6, 1.0, rng);
    const int t = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(T)));
    std::vector<int> outside;
    for (int s = 0; s < T; ++s)
      if (std::abs(s - t) > r) outside.push_back(s);
    if (outside.empty()) continue;
    const int s = outside[uniform_index(rng, outside.size())];
    Tape<double> t0, t1;
    const MatD h0 = enc.forward(t0, t0.constant(x)).hidden.value();
    x.row(s) += nn::random_normal<double>(1, 6, 3.0, rng);
    const MatD h1 = enc.forward(t1, t1.constant(x)).hidden.value();
    worst = std::max(worst, (h1.row(t) - h0.row(t)).cwiseAbs().maxCoeff());
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(Npc, ShortInputIsRejected) {
  NpcEncoder<float> enc(small_npc());
  Tape<float> tape;
  EXPECT_THROW(enc.forward(tape, tape.constant(MatF::Zero(10, 6))), DimensionError);
}

TEST(Npc, EmsRowGetsZeroGradientAndFlagOffIsBase) {
  NpcEncoder<double> ems(small_npc()), base(small_npc());
  Rng rng(11);
  const int T = 45;
  MatD x = nn::random_normal<double>(T, 6, 1.0, rng);
  std::vector<float> scores(T);
  for (int t = 0; t < T; ++t) scores[static_cast<std::size_t>(t)] = t % 15 == 1 ? 0.9f : 0.2f;
  const int k = ems.config().masked_kernel;
  const int pos = ems_kernel_position(scores, k, ems.config().stride());
  ASSERT_EQ(pos, 2);
  ASSERT_EQ(build_kernel_mask(k, ems.config().mask_m, 1)(pos - 1, 0), 1.0f);

  Tape<double> t1;
  auto out = ems.forward(t1, t1.constant(x), std::span<const float>(scores));
  Var<double> l = ag::add(ag::l1_mean(out.joint, t1.constant(MatD::Zero(T, 6)), std::vector<bool>(T, true)), *out.vq_loss);
  nn::zero_grads(ems.parameters());
  t1.backward(l);
  const auto& g = ems.masked_weight().grad;
  const int cin = ems.config().input_dim;
  EXPECT_EQ(g.middleRows((pos - 1) * cin, cin).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(g.cwiseAbs().maxCoeff(), 0.0);

  Tape<double> t2, t3;
  const MatD a = ems.forward(t2, t2.constant(x)).joint.value();
  const MatD b = base.forward(t3, t3.constant(x)).joint.value();
  EXPECT_TRUE(a == b);
}

NpcConfig grad_npc(bool quantize) {
  auto cfg = small_npc();
  cfg.masked_kernel = 5;
  cfg.mask_m = 1;
  cfg.conv_blocks = 1;
  cfg.codebook_size = 6;
  cfg.quantize = quantize;
  return cfg;
}

struct NpcProblem {
  MatD x, tj, ts;
  std::vector<float> scores{0.1f, 0.2f, 0.9f, 0.3f, 0.2f, 0.1f, 0.0f, 0.4f, 0.5f};
  NpcProblem() {
    Rng rng(12);
    x = nn::random_normal<double>(9, 6, 1.0, rng);
    tj = nn::random_normal<double>(9, 6, 1.0, rng);
    ts = nn::random_normal<double>(9, 1, 1.0, rng);
  }
  Var<double> head_loss(Tape<double>& t, const EncoderOutput<double>& out) const {
    std::vector<bool> all(9, true);
    return ag::add(ag::l1_mean(out.joint, t.constant(tj), all), ag::l1_mean(out.score, t.constant(ts), all));
  }
};

TEST(Npc, GradientCheckWithoutQuantizer) {
  NpcEncoder<double> enc(grad_npc(false));
  NpcProblem pb;
  const auto r = check_gradients(enc.parameters(), [&](Tape<double>& t) {
    return pb.head_loss(t, enc.forward(t, t.constant(pb.x), std::span<const float>(pb.scores)));
  });
  EXPECT_LT(r.worst_rel_error, 1e-4) << r.worst_param;
}

// With the quantizer on, gradients above the bottleneck are straight-through
// by construction, so only the head parameters are compared with finite
// differences of the full objective.
TEST(Npc, GradientCheckHeadsWithQuantizer) {
  NpcEncoder<double> enc(grad_npc(true));
  NpcProblem pb;
  nn::ParamList<double> heads;
  for (auto* p : enc.parameters())
    if (p->name.rfind("npc.projection", 0) == 0 || p->name.rfind("npc.score", 0) == 0) heads.push_back(p);
  ASSERT_EQ(heads.size(), 4u);
  const auto r = check_gradients(heads, [&](Tape<double>& t) {
    auto out = enc.forward(t, t.constant(pb.x), std::span<const float>(pb.scores));
    return ag::add(pb.head_loss(t, out), *out.vq_loss);
  });
  EXPECT_LT(r.worst_rel_error, 1e-4) << r.worst_param;
}

TEST(Extractor, GradientCheck) {
  ExtractorConfig cfg;
  cfg.input_dim = 8;
  cfg.conv_layers = 2;
  cfg.conv_channels = 6;
  cfg.conv_kernel = 3;
  cfg.lstm_hidden = 4;
  cfg.fc_hidden = 5;
  cfg.seed = 13;
  IntensityExtractor<double> model(cfg);
  Rng rng(14);
  MatD x = nn::random_normal<double>(6, 8, 1.0, rng);
  std::vector<float> truth{0.1f, 0.5f, 0.9f, 0.7f, 0.3f, 0.2f};
  const auto r = check_gradients(model.parameters(), [&](Tape<double>& t) {
    return extractor_loss(model, t, x, truth, Emotion::Angry, 0.2).total;
  });
  EXPECT_LT(r.worst_rel_error, 1e-4) << r.worst_param;
}

}  // namespace
}  // namespace ems
