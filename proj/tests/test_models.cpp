#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "savae/models.hpp"
#include "savae/variational.hpp"
#include "test_support.hpp"

using namespace savae;
using savae::testing::fd_gradient;
using savae::testing::max_rel_error;
using savae::testing::random_tensor;

namespace {

ModelParams random_params(const ModelParams& layout, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  ModelParams out;
  for (const auto& [n, t] : layout) out.add(n, random_tensor(t.shape(), rng, scale));
  return out;
}

std::vector<std::vector<int>> all_sequences(int V, std::size_t T) {
  std::vector<std::vector<int>> out{{}};
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::vector<int>> next;
    for (const auto& s : out)
      for (int v = 0; v < V; ++v) {
        next.push_back(s);
        next.back().push_back(v);
      }
    out = std::move(next);
  }
  return out;
}

double neg_ll(const SeqGenerator& g, const ModelParams& th, const TokenBatch& x, const Tensor& z) {
  double s = 0.0;
  for (double v : g.log_likelihood(th, x, z)) s -= v;
  return s;
}

}  // namespace

TEST(TokenBatch, TimeMajorLayout) {
  TokenBatch x({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(x.rows(), 2u);
  EXPECT_EQ(x.length(), 3u);
  EXPECT_EQ(std::vector<int>(x.time_major().begin(), x.time_major().end()), (std::vector<int>{1, 4, 2, 5, 3, 6}));
  auto p1 = x.at_position(1);
  EXPECT_EQ(std::vector<int>(p1.begin(), p1.end()), (std::vector<int>{2, 5}));
  EXPECT_EQ(x.sequence(1), (std::vector<int>{4, 5, 6}));
  EXPECT_THROW(TokenBatch({{1, 2}, {3}}), ShapeError);
  EXPECT_THROW(TokenBatch(std::vector<std::vector<int>>{}), EmptyInput);
}

TEST(Generator, ParameterLayoutPerWiring) {
  SeqGenerator out(GenConfig{7, 3, 4, 2, Wiring::OutputLayer});
  auto p = out.zeros();
  EXPECT_EQ(p.at("gen.out.W_z").shape(), (Shape{2, 7}));
  EXPECT_EQ(p.at("gen.out.W_h").shape(), (Shape{4, 7}));
  EXPECT_EQ(p.at("gen.lstm.W").shape(), (Shape{3 + 4, 16}));
  EXPECT_FALSE(p.contains("gen.init.W"));

  SeqGenerator init(GenConfig{7, 3, 4, 2, Wiring::HiddenInit});
  auto q = init.zeros();
  EXPECT_FALSE(q.contains("gen.out.W_z"));
  EXPECT_EQ(q.at("gen.init.W").shape(), (Shape{2, 4}));
  EXPECT_EQ(q.at("gen.lstm.W").shape(), (Shape{3 + 2 + 4, 16}));
}

TEST(Generator, UniformLogitsGiveTLn2) {
  SeqGenerator g(GenConfig{2, 3, 3, 2, Wiring::OutputLayer});
  auto th = g.zeros();
  TokenBatch x({{0, 1, 1, 0}});
  Tensor z(Shape{1, 2}, {0.7, -1.3});
  EXPECT_NEAR(g.log_likelihood(th, x, z)[0], -4.0 * std::numbers::ln2, 1e-14);
}

TEST(Generator, SingleStepMatchesHandSoftmax) {
  // h_0 = 0, so the first token sees only b + z W_z. Pick them so the logits
  // are [1, 0, 0].
  SeqGenerator g(GenConfig{3, 2, 2, 1, Wiring::OutputLayer});
  auto th = g.zeros();
  th.at("gen.out.b") = Tensor::vector({0.25, 0.0, 0.0});
  th.at("gen.out.W_z") = Tensor(Shape{1, 3}, {0.375, 0.0, 0.0});
  Tensor z(Shape{1, 1}, {2.0});
  const double lse = std::log(std::exp(1.0) + 2.0);
  for (int tok = 0; tok < 3; ++tok) {
    TokenBatch x(std::vector<std::vector<int>>{{tok}});
    const double expect = (tok == 0 ? 1.0 : 0.0) - lse;
    EXPECT_NEAR(g.log_likelihood(th, x, z)[0], expect, 1e-12) << tok;
  }
}

TEST(Generator, OutOfRangeTokenThrows) {
  SeqGenerator g(GenConfig{4, 2, 2, 1, Wiring::OutputLayer});
  TokenBatch x({{0, 4}});
  EXPECT_THROW(g.log_likelihood(g.zeros(), x, Tensor(Shape{1, 1})), VocabError);
}

class Wirings : public ::testing::TestWithParam<Wiring> {};

TEST_P(Wirings, ExhaustiveNormalization) {
  SeqGenerator g(GenConfig{3, 4, 5, 2, GetParam()});
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    auto th = random_params(g.zeros(), 100 + trial, 1.0);
    std::mt19937_64 rng(trial);
    auto seqs = all_sequences(3, 2);
    TokenBatch x(seqs);
    Tensor z1 = random_tensor(Shape{1, 2}, rng);
    Tensor z(Shape{seqs.size(), 2});
    for (std::size_t r = 0; r < seqs.size(); ++r) z.mat().row(static_cast<Eigen::Index>(r)) = z1.mat().row(0);
    double total = 0.0;
    for (double l : g.log_likelihood(th, x, z)) total += std::exp(l);
    EXPECT_NEAR(total, 1.0, 1e-8);
  }
}

TEST_P(Wirings, TeacherForcingIsCausal) {
  SeqGenerator g(GenConfig{6, 3, 4, 2, GetParam()});
  auto th = random_params(g.zeros(), 5);
  Tensor z(Shape{2, 2}, {0.3, -0.2, 0.3, -0.2});
  TokenBatch x({{1, 2, 3, 4}, {1, 2, 3, 0}});
  ad::Tape tape;
  ad::ParamVars tv(tape, th, false);
  auto nll = g.token_nll(tape, tv, x, tape.constant(z)).value();
  // Rows differ only in the last token: every earlier position agrees exactly.
  for (std::size_t t = 0; t + 1 < 4; ++t) EXPECT_EQ(nll[2 * t], nll[2 * t + 1]) << t;
  EXPECT_NE(nll[6], nll[7]);
}

TEST_P(Wirings, LatentGradientMatchesFiniteDifferences) {
  SeqGenerator g(GenConfig{5, 3, 4, 2, GetParam()});
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    auto th = random_params(g.zeros(), 200 + trial);
    std::mt19937_64 rng(trial);
    TokenBatch x({{0, 3, 2, 4}, {1, 1, 0, 2}});
    Tensor z0 = random_tensor(Shape{2, 2}, rng);
    ad::Tape tape;
    ad::ParamVars tv(tape, th, false);
    auto zv = tape.leaf(z0);
    auto loss = ad::sum(g.token_nll(tape, tv, x, zv));
    tape.backward(loss);
    Vector analytic = tape.grad(zv).vec();
    Vector fd = fd_gradient(
        [&](const Vector& v) {
          Tensor z = z0;
          z.vec() = v;
          return neg_ll(g, th, x, z);
        },
        z0.vec());
    EXPECT_LT(max_rel_error(analytic, fd), 1e-5) << trial;
  }
}

TEST_P(Wirings, CachedLogitsAreBitIdentical) {
  SeqGenerator g(GenConfig{9, 4, 5, 2, GetParam()});
  auto th = random_params(g.zeros(), 9);
  TokenBatch x({{1, 2, 3}, {4, 5, 6}, {7, 8, 0}});
  SeqLikelihood plain(g, x), cached(g, x);
  cached.cache(th);
  Tensor z(Shape{3, 2}, {0.1, 0.2, -0.3, 0.4, 0.5, -0.6});
  ad::Tape a, b;
  ad::ParamVars ta(a, th, false), tb(b, th, false);
  auto za = a.leaf(z), zb = b.leaf(z);
  auto la = ad::sum(plain.neg_log_likelihood(a, ta, za));
  auto lb = ad::sum(cached.neg_log_likelihood(b, tb, zb));
  EXPECT_EQ(la.value()[0], lb.value()[0]);
  a.backward(la);
  b.backward(lb);
  EXPECT_EQ(a.grad(za).vec(), b.grad(zb).vec());
}

TEST_P(Wirings, SamplingIsSeededAndInRange) {
  SeqGenerator g(GenConfig{11, 3, 4, 2, GetParam()});
  auto th = random_params(g.zeros(), 3, 1.0);
  Tensor z(Shape{4, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  NoiseStream r1(42), r2(42);
  auto a = g.sample(th, z, 6, r1), b = g.sample(th, z, 6, r2);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 4u);
  for (const auto& s : a) {
    ASSERT_EQ(s.size(), 6u);
    for (int t : s) EXPECT_TRUE(t >= 0 && t < 11);
  }
}

INSTANTIATE_TEST_SUITE_P(Models, Wirings, ::testing::Values(Wiring::OutputLayer, Wiring::HiddenInit));

TEST(Generator, FirstTokenFrequenciesMatchModel) {
  SeqGenerator g(GenConfig{3, 2, 2, 1, Wiring::OutputLayer});
  auto th = g.zeros();
  th.at("gen.out.b") = Tensor::vector({0.5, -0.5, 0.0});
  const std::size_t n = 20000;
  Tensor z(Shape{n, 1});
  NoiseStream rng(7);
  auto seqs = g.sample(th, z, 1, rng);
  const double lse = std::log(std::exp(0.5) + std::exp(-0.5) + 1.0);
  for (int v = 0; v < 3; ++v) {
    const double p = std::exp(th.at("gen.out.b")[v] - lse);
    double hits = 0;
    for (const auto& s : seqs) hits += s[0] == v;
    EXPECT_NEAR(hits / n, p, 3.0 * std::sqrt(p * (1 - p) / n)) << v;
  }
}

TEST(Generator, LowTemperatureIsArgmax) {
  SeqGenerator g(GenConfig{4, 2, 2, 1, Wiring::OutputLayer});
  auto th = g.zeros();
  th.at("gen.out.b") = Tensor::vector({0.0, 0.3, 0.1, 0.2});
  NoiseStream rng(1);
  auto s = g.sample(th, Tensor(Shape{50, 1}), 1, rng, 1e-3);
  for (const auto& row : s) EXPECT_EQ(row[0], 1);
  EXPECT_THROW(g.sample(th, Tensor(Shape{1, 1}), 1, rng, 0.0), ConfigError);
}

TEST(Generator, InitializationRanges) {
  SeqGenerator g(GenConfig{100, 8, 8, 2, Wiring::OutputLayer});
  auto oracle = g.init_oracle(1);
  double widest = 0.0;
  for (const auto& [n, t] : oracle) {
    const double m = t.vec().cwiseAbs().maxCoeff();
    if (n == "gen.out.W_z") {
      widest = m;
      EXPECT_LE(m, 5.0);
    } else {
      EXPECT_LE(m, 1.0) << n;
    }
  }
  EXPECT_GT(widest, 1.0);  // 200 draws from U(-5, 5)
  EXPECT_EQ(g.init_oracle(1), oracle);

  auto learned = g.init_learned(2);
  for (const auto& [n, t] : learned) {
    EXPECT_LE(t.vec().cwiseAbs().maxCoeff(), 0.1) << n;
    EXPECT_GT(t.vec().cwiseAbs().maxCoeff(), 0.0) << n;
  }
}

TEST(Encoder, ZeroWeightsGiveBias) {
  SeqEncoder e(EncConfig{6, 3, 4, 2});
  auto phi = e.zeros();
  phi.at("enc.head.b") = Tensor::vector({0.5, -1.0, 2.0, -3.0});
  auto lam = e.encode(phi, TokenBatch({{1, 2, 3}, {5, 0, 4}}));
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_EQ(lam.mu.at(r, 0), 0.5);
    EXPECT_EQ(lam.mu.at(r, 1), -1.0);
    EXPECT_EQ(lam.log_var.at(r, 0), 2.0);
    EXPECT_EQ(lam.log_var.at(r, 1), -3.0);
  }
}

TEST(Encoder, OrderSensitiveAndDeterministic) {
  SeqEncoder e(EncConfig{6, 3, 4, 2});
  auto phi = e.init(11, 0.5);
  auto a = e.encode(phi, TokenBatch({{1, 2, 3}}));
  auto b = e.encode(phi, TokenBatch({{3, 2, 1}}));
  EXPECT_NE(a.flatten(), b.flatten());
  EXPECT_EQ(e.encode(phi, TokenBatch({{1, 2, 3}})), a);
  EXPECT_EQ(a.rows(), 1u);
  EXPECT_EQ(a.dim(), 2u);
}

TEST(Encoder, RowsAreIndependent) {
  SeqEncoder e(EncConfig{6, 3, 4, 2});
  auto phi = e.init(12, 0.5);
  auto both = e.encode(phi, TokenBatch({{1, 2, 3}, {4, 0, 5}}));
  auto second = e.encode(phi, TokenBatch({{4, 0, 5}}));
  EXPECT_LT((both.row(1).flatten() - second.flatten()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Encoder, SharedEmbeddingReadsGeneratorTable) {
  SeqEncoder e(EncConfig{6, 3, 4, 2, true});
  EXPECT_FALSE(e.zeros().contains("enc.emb"));
  EXPECT_EQ(e.embedding_name(), "gen.emb");
}

TEST(Encoder, EmptySequenceThrows) {
  SeqEncoder e(EncConfig{6, 3, 4, 2});
  ad::Tape tape;
  ad::ParamVars ph(tape, e.zeros(), false);
  EXPECT_THROW(e.encode_embedded(tape, ph, {}), EmptyInput);
}

TEST(EndToEnd, NegElboGradientMatchesFiniteDifferences) {
  // V=5, H=4, d=2: neg-ELBO of a batch through encoder, sampling and decoder
  // as a function of (phi, theta) at a fixed noise seed.
  SeqGenerator g(GenConfig{5, 3, 4, 2, Wiring::OutputLayer});
  SeqEncoder e(EncConfig{5, 3, 4, 2});
  TokenBatch x({{0, 3, 2, 4}, {1, 1, 0, 2}, {4, 4, 3, 1}});
  ModelParams th0 = random_params(g.zeros(), 31);
  ModelParams ph0 = random_params(e.zeros(), 32);
  ModelParams all0 = th0;
  for (const auto& [n, t] : ph0) all0.add(n, t);

  auto taped = [&](ad::Tape& tape, const ModelParams& all, bool grad) {
    ad::ParamVars pv(tape, all, grad);
    auto lam = e.encode(tape, pv, x);
    auto mu = ad::slice(lam, 1, 0, 2), lv = ad::slice(lam, 1, 2, 4);
    SeqLikelihood lik(g, x);
    auto nll = lik.neg_log_likelihood(tape, pv, ad::gaussian_sample(mu, lv));
    return std::make_pair(pv, ad::mean(ad::add(nll, ad::kl_rows(mu, lv))));
  };
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    ad::Tape tape(seed);
    auto [pv, loss] = taped(tape, all0, true);
    tape.backward(loss);
    auto analytic = pv.gradients();
    auto fd = fd_gradient(
        [&](const ModelParams& p) {
          ad::Tape t(seed);
          return taped(t, p, false).second.value()[0];
        },
        all0);
    EXPECT_LT(max_rel_error(analytic, fd), 1e-5) << seed;
  }
}
