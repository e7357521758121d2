#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "savae/analysis.hpp"
#include "savae/oracle.hpp"
#include "test_support.hpp"

using namespace savae;
using namespace savae::analysis;
using savae::testing::fd_gradient;
using savae::testing::max_rel_error;

namespace {

struct Small {
  SeqGenerator gen{GenConfig{12, 6, 6, 2, Wiring::OutputLayer}};
  SeqEncoder enc{EncConfig{12, 6, 6, 2}};
  ModelParams theta = gen.init_oracle(3, 0.5, 2.0);
  ModelParams phi = enc.init(4, 0.3);
  std::vector<int> x{1, 5, 7, 2, 9};
};

double kl_std(double m1, double m2, double lv) { return 0.5 * (m1 * m1 + m2 * m2) + std::exp(lv) - lv - 1.0; }

}  // namespace

TEST(Landscape, RequiresTwoLatentDimensions) {
  SeqGenerator g(GenConfig{5, 2, 2, 3, Wiring::OutputLayer});
  auto th = g.zeros();
  EXPECT_THROW(LandscapeEvaluator(g, th, {1, 2}, 4, 1), DimensionError);
}

TEST(Landscape, LatentFreeDecoderLeavesTheKlBowl) {
  Small s;
  s.theta.at("gen.out.W_z") = Tensor(s.theta.at("gen.out.W_z").shape());
  LandscapeEvaluator f(s.gen, s.theta, s.x, 8, 1);
  GridSpec g{-3, 3, 21};
  auto grid = elbo_landscape(f, g, -0.5);
  const double offset = grid.value(0, 0) - kl_std(g.axis(0), g.axis(0), -0.5);
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = 0; j < g.n; ++j)
      EXPECT_NEAR(grid.value(i, j) - kl_std(g.axis(i), g.axis(j), -0.5), offset, 1e-10);
  EXPECT_EQ(grid.optimum(), std::make_pair(0.0, 0.0));
}

TEST(Landscape, OptimumIsTheGridMinimum) {
  Small s;
  LandscapeEvaluator f(s.gen, s.theta, s.x, 8, 2);
  GridSpec g{-3, 3, 25};
  auto grid = elbo_landscape(f, g);
  for (double v : grid.values) EXPECT_LE(grid.min_value(), v);
  ASSERT_EQ(grid.points.front().method, "optimum");
  EXPECT_EQ(grid.points.front().neg_elbo, grid.min_value());
  // The searched log variance is at least as good as 0 at the optimum.
  auto [o1, o2] = grid.optimum();
  EXPECT_LE(f.at(VarParams::single({o1, o2}, {grid.log_var, grid.log_var})),
            f.at(VarParams::single({o1, o2}, {0.0, 0.0})) + 1e-12);
}

TEST(Landscape, CommonRandomNumbersAndDeterminism) {
  Small s;
  LandscapeEvaluator f(s.gen, s.theta, s.x, 6, 3);
  LandscapeEvaluator again(s.gen, s.theta, s.x, 6, 3);
  auto lam = VarParams::single({0.3, -0.7}, {-1.0, 0.2});
  EXPECT_EQ(f.at(lam), again.at(lam));
  // Batch position does not change a point's value.
  Tensor mu(Shape{3, 2}, {0.0, 0.0, 0.3, -0.7, 1.0, 1.0});
  Tensor lv(Shape{3, 2}, {0.0, 0.0, -1.0, 0.2, 0.0, 0.0});
  EXPECT_NEAR(f(mu, lv)[1], f.at(lam), 1e-12);
  EXPECT_NE(LandscapeEvaluator(s.gen, s.theta, s.x, 6, 4).at(lam), f.at(lam));
}

TEST(Landscape, MarkedPointsFlagOutOfRange) {
  Small s;
  LandscapeEvaluator f(s.gen, s.theta, s.x, 4, 1);
  GridSpec g{-3, 3, 7};
  auto inside = mark(f, g, "vae", 0, VarParams::single({1.0, -2.9}, {0.0, 0.0}));
  auto outside = mark(f, g, "svi", 0, VarParams::single({3.5, 0.0}, {0.0, 0.0}));
  EXPECT_TRUE(inside.in_range);
  EXPECT_FALSE(outside.in_range);
  EXPECT_EQ(inside.neg_elbo, f.at(VarParams::single({1.0, -2.9}, {0.0, 0.0})));
}

TEST(Landscape, TrajectoryMarksEveryIterate) {
  Small s;
  TokenBatch xb({s.x});
  SeqLikelihood lik(s.gen, xb);
  ElboObjective obj(lik, s.theta, 1.0, 1.0);
  svi::Config c;
  c.steps = 6;
  auto tr = svi::forward(VarParams::prior(1, 2), obj, c, 5);
  LandscapeEvaluator f(s.gen, s.theta, s.x, 4, 1);
  auto grid = elbo_landscape(f, GridSpec{-3, 3, 5}, 0.0);
  mark_trajectory(grid, f, "sa_vae", tr);
  ASSERT_EQ(grid.points.size(), 1u + 7u);
  EXPECT_EQ(grid.points.back().step, 6u);
  EXPECT_EQ(grid.points.back().mu1, tr.final_lambda().mu[0]);
}

TEST(Curves, EncoderRowAtZeroStepsIsPlainEvaluation) {
  Small s;
  std::vector<std::vector<int>> data;
  NoiseStream rng(1);
  for (int i = 0; i < 30; ++i) data.push_back(s.gen.sample(s.theta, Tensor(Shape{1, 2}, {rng.normal(), rng.normal()}), 5, rng)[0]);
  EvalOptions o;
  o.batch_size = 10;
  auto rows = refinement_curves("sa_vae", s.gen, &s.enc, s.theta, s.phi, data, {0, 10, 20, 40},
                                {InferenceMode::RandomRefine, InferenceMode::EncoderRefine}, o);
  ASSERT_EQ(rows.size(), 8u);
  o.mode = InferenceMode::Encoder;
  EXPECT_EQ(rows[4].bound, evaluate(s.gen, &s.enc, s.theta, s.phi, data, o).neg_elbo);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(rows[i].init, InferenceMode::RandomRefine);
  EXPECT_EQ(rows[7].steps, 40u);
  // Without an encoder only random-init rows are produced.
  EXPECT_EQ(refinement_curves("svi", s.gen, nullptr, s.theta, {}, data, {0, 10},
                              {InferenceMode::RandomRefine, InferenceMode::EncoderRefine}, o)
                .size(),
            2u);
}

TEST(OutputSaliency, ZeroLatentPathwayGivesZero) {
  Small s;
  s.theta.at("gen.out.W_z") = Tensor(s.theta.at("gen.out.W_z").shape());
  auto r = output_saliency(s.gen, s.theta, VarParams::single({0.5, 0.1}, {0.0, 0.0}), s.x, 5, 1);
  for (double v : r.saliency) EXPECT_EQ(v, 0.0);
}

TEST(OutputSaliency, ScalesWithLatentWeightsOnLinearToy) {
  // W_h = 0, b = 0, z = 0 (deterministic q): logits are z W_z = 0, so every
  // token probability is 1/V and d log p / dz = W_z (e_x - 1/V), linear in W_z.
  Small s;
  s.theta.at("gen.out.W_h") = Tensor(s.theta.at("gen.out.W_h").shape());
  s.theta.at("gen.out.b") = Tensor(s.theta.at("gen.out.b").shape());
  auto lam = VarParams::single({0.0, 0.0}, {-80.0, -80.0});
  auto base = output_saliency(s.gen, s.theta, lam, s.x, 3, 1);
  s.theta.at("gen.out.W_z").vec() *= 2.0;
  auto doubled = output_saliency(s.gen, s.theta, lam, s.x, 3, 1);
  for (std::size_t t = 0; t < s.x.size(); ++t) {
    EXPECT_GT(doubled.saliency[t], base.saliency[t]);
    EXPECT_NEAR(doubled.saliency[t], 2.0 * base.saliency[t], 1e-9);
  }
}

TEST(OutputSaliency, MatchesFiniteDifferenceGradient) {
  Small s;
  auto lam = VarParams::single({0.4, -0.2}, {-200.0, -200.0});  // z = mu exactly
  auto r = output_saliency(s.gen, s.theta, lam, s.x, 1, 1);
  for (std::size_t t = 0; t < s.x.size(); ++t) {
    auto logp_t = [&](const Vector& z) {
      ad::Tape tape;
      ad::ParamVars th(tape, s.theta, false);
      Tensor zt(Shape{1, 2}, {z[0], z[1]});
      return -s.gen.token_nll(tape, th, TokenBatch({s.x}), tape.constant(zt)).value()[t];
    };
    Vector z0(2);
    z0 << 0.4, -0.2;
    EXPECT_NEAR(r.saliency[t], fd_gradient(logp_t, z0).norm(), 1e-6) << t;
    EXPECT_NEAR(r.logprob[t], logp_t(z0), 1e-12);
  }
}

TEST(OutputSaliency, ReproducibleNonnegativeAndStableInSampleCount) {
  SeqGenerator gen(GenConfig{30, 6, 8, 2, Wiring::OutputLayer});
  auto theta = gen.init_oracle(9, 0.5, 2.0);
  std::vector<int> x{3, 14, 15, 9, 26, 5, 3, 5, 8, 9, 7, 9, 3, 2, 3, 8, 4, 6, 2, 6};
  auto lam = VarParams::single({0.3, -0.4}, {-1.5, -1.5});
  auto a = output_saliency(gen, theta, lam, x, 5, 11);
  EXPECT_EQ(a.saliency, output_saliency(gen, theta, lam, x, 5, 11).saliency);
  for (double v : a.saliency) EXPECT_GE(v, 0.0);
  auto many = output_saliency(gen, theta, lam, x, 50, 11);
  EXPECT_GT(spearman(a.saliency, many.saliency), 0.9);
}

TEST(InputSaliency, ZeroWeightsAfterEmbeddingGiveZero) {
  Small s;
  for (auto& [n, t] : s.phi)
    if (n != "enc.emb") t = Tensor(t.shape());
  for (double v : input_saliency(s.enc, s.phi, s.theta, s.x, 5, 1)) EXPECT_EQ(v, 0.0);
}

TEST(InputSaliency, DeterministicPosteriorCollapsesTheExpectation) {
  Small s;
  s.phi.at("enc.head.b")[2] = s.phi.at("enc.head.b")[3] = -60.0;
  auto one = input_saliency(s.enc, s.phi, s.theta, s.x, 1, 1);
  auto two = input_saliency(s.enc, s.phi, s.theta, s.x, 2, 1);
  for (std::size_t t = 0; t < s.x.size(); ++t) EXPECT_NEAR(one[t], two[t], 1e-10);
  EXPECT_EQ(input_saliency(s.enc, s.phi, s.theta, s.x, 2, 1), two);
}

TEST(InputSaliency, MatchesFiniteDifferences) {
  Small s;  // tokens of x are distinct, so each embedding row feeds one position
  const std::size_t n = 3;
  auto noise = posterior_noise(n, 2, 7);
  auto sal = input_saliency(s.enc, s.phi, s.theta, s.x, n, 7);
  for (std::size_t t = 0; t < s.x.size(); ++t) {
    auto f = [&](const Vector& row) {
      ModelParams p = s.phi;
      p.at("enc.emb").mat().row(s.x[t]) = row.transpose();
      auto lam = s.enc.encode(p, TokenBatch({s.x}));
      double total = 0.0;
      for (const auto& e : noise) {
        double sq = 0.0;
        for (std::size_t j = 0; j < 2; ++j) {
          const double z = lam.mu[j] + std::exp(0.5 * lam.log_var[j]) * e[j];
          sq += z * z;
        }
        total += std::sqrt(sq);
      }
      return total / n;
    };
    Vector w = s.phi.at("enc.emb").mat().row(s.x[t]).transpose();
    EXPECT_NEAR(sal[t], fd_gradient(f, w).norm(), 1e-7) << t;
  }
}

TEST(Aggregates, UniformSaliencyAndCounts) {
  std::vector<SaliencyRecord> recs;
  for (std::size_t e = 0; e < 4; ++e)
    for (std::size_t p = 0; p < 5; ++p) recs.push_back({e, p, static_cast<int>((e + p) % 6), 0.7, 0.2, -1.0 - p});
  std::vector<std::size_t> counts{1, 2, 4, 8, 16, 0};
  auto a = saliency_aggregates(recs, counts);
  EXPECT_TRUE(a.class_skipped);
  EXPECT_TRUE(a.by_class.empty());
  for (const auto* m : {&a.by_position, &a.by_log2_frequency, &a.by_logprob}) {
    std::size_t total = 0;
    for (const auto& [_, b] : *m) {
      EXPECT_NEAR(b.out_mean, 0.7, 1e-15);
      EXPECT_NEAR(b.in_mean, 0.2, 1e-15);
      total += b.count;
    }
    EXPECT_EQ(total, recs.size());
  }
  EXPECT_EQ(a.by_position.size(), 5u);
  std::map<int, std::string> tags{{0, "DT"}, {1, "NN"}};
  auto tagged = saliency_aggregates(recs, counts, &tags);
  EXPECT_FALSE(tagged.class_skipped);
  std::size_t total = 0;
  for (const auto& [_, b] : tagged.by_class) total += b.count;
  EXPECT_EQ(total, recs.size());
  EXPECT_TRUE(tagged.by_class.contains("UNK"));
}

TEST(Aggregates, CorrelationIsReported) {
  std::vector<SaliencyRecord> recs;
  for (int i = 0; i < 10; ++i) recs.push_back({0, static_cast<std::size_t>(i), 0, 1.0 + i, 0.0, -2.0 * i});
  auto a = saliency_aggregates(recs, {10});
  EXPECT_NEAR(a.corr_out_logprob, -1.0, 1e-12);
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {10, 20, 30, 45}), 1.0, 1e-12);
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0, 1e-12);
}
