#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "savae/autodiff.hpp"
#include "savae/models.hpp"
#include "savae/ops.hpp"
#include "test_support.hpp"

using namespace savae;
using namespace savae::ad;
using savae::testing::fd_gradient;
using savae::testing::max_rel_error;
using savae::testing::random_tensor;

namespace {

ModelParams single(const std::string& name, Tensor t) {
  ModelParams p;
  p.add(name, std::move(t));
  return p;
}

double taped_value(const std::function<Var(Tape&, const ParamVars&)>& f, const ModelParams& p,
                   std::uint64_t seed) {
  Tape tape(seed);
  ParamVars pv(tape, p, false);
  return f(tape, pv).value().item();
}

ModelParams taped_grad(const std::function<Var(Tape&, const ParamVars&)>& f, const ModelParams& p,
                       std::uint64_t seed) {
  auto tv = ad::forward(f, p, seed);
  return ad::backward(tv);
}

double fd_check(const std::function<Var(Tape&, const ParamVars&)>& f, const ModelParams& p,
                std::uint64_t seed = 7) {
  auto analytic = taped_grad(f, p, seed);
  auto numeric = fd_gradient([&](const ModelParams& q) { return taped_value(f, q, seed); }, p);
  return max_rel_error(analytic, numeric);
}

}  // namespace

TEST(Forward, SumOfSquares) {
  auto p = single("u", Tensor::vector({1, 2, 3}));
  auto tv = ad::forward([](Tape&, const ParamVars& v) { return sum(square(v["u"])); }, p, 0);
  EXPECT_EQ(tv.value, 14.0);
}

TEST(Forward, DeterministicForFixedSeed) {
  auto p = ModelParams();
  p.add("mu", Tensor::matrix(1, 3, {0.5, -1, 2}));
  p.add("lv", Tensor::matrix(1, 3, {0.1, 0.2, -0.3}));
  auto f = [](Tape&, const ParamVars& v) { return mean(gaussian_sample(v["mu"], v["lv"])); };
  auto a = ad::forward(f, p, 42);
  auto b = ad::forward(f, p, 42);
  EXPECT_EQ(a.value, b.value);
  auto c = ad::forward(f, p, 43);
  EXPECT_NE(a.value, c.value);
}

TEST(Forward, NonFiniteIdentifiesNode) {
  auto p = single("u", Tensor::vector({800.0}));
  try {
    ad::forward([](Tape&, const ParamVars& v) { return sum(exp(v["u"])); }, p, 0);
    FAIL() << "expected NonFiniteValue";
  } catch (const NonFiniteValue& e) {
    EXPECT_EQ(e.index, 1u);
    EXPECT_NE(std::string(e.what()).find("exp"), std::string::npos);
  }
}

TEST(Backward, QuadraticGradient) {
  auto p = single("u", Tensor::vector({1, 2}));
  auto g = taped_grad([](Tape&, const ParamVars& v) { return sum(square(v["u"])); }, p, 0);
  EXPECT_EQ(g.at("u"), Tensor::vector({2, 4}));
}

TEST(Backward, ConstantFunctionAndUnusedInputsGetZero) {
  ModelParams p;
  p.add("used", Tensor::vector({1, 2}));
  p.add("unused", Tensor::vector({3, 4, 5}));
  auto g = taped_grad([](Tape& t, const ParamVars&) { return sum(t.constant(Tensor::vector({1, 1}))); }, p, 0);
  EXPECT_EQ(g.squared_norm(), 0.0);
  auto g2 = taped_grad([](Tape&, const ParamVars& v) { return sum(v["used"]); }, p, 0);
  EXPECT_EQ(g2.at("unused"), Tensor(Shape{3}));
  EXPECT_EQ(g2.at("used"), Tensor::vector({1, 1}));
}

TEST(Backward, TapeIsSingleUse) {
  auto p = single("u", Tensor::vector({1, 2}));
  auto tv = ad::forward([](Tape&, const ParamVars& v) { return sum(v["u"]); }, p, 0);
  ad::backward(tv);
  EXPECT_THROW(ad::backward(tv), UsedTape);
}

TEST(Primitives, CrossEntropyUniformIsLn2) {
  Tape t;
  std::vector<int> target{0};
  auto ce = softmax_cross_entropy(t.constant(Tensor::matrix(1, 2, {0, 0})), target);
  EXPECT_NEAR(ce.value().item(), std::log(2.0), 1e-15);
}

TEST(Primitives, CrossEntropyRejectsOutOfVocabTarget) {
  Tape t;
  std::vector<int> target{2};
  EXPECT_THROW(softmax_cross_entropy(t.constant(Tensor::matrix(1, 2, {0, 0})), target), VocabError);
}

TEST(Primitives, GaussianSampleCollapsesToMean) {
  // At log var -40 the draw is mu + e^-20 * eps, so the deviation is bounded
  // by 2.1e-9 |eps|; the 1e-12 collapse is checked at log var -60.
  const std::vector<double> mu{0.25, -1.5, 7};
  for (double lv : {-40.0, -60.0}) {
    Tape t(3);
    auto z = gaussian_sample(t.constant(Tensor::matrix(1, 3, mu)), t.constant(Tensor::filled(Shape{1, 3}, lv))).value();
    NoiseStream replay(3);
    for (std::size_t i = 0; i < 3; ++i) {
      const double eps = replay.normal();
      EXPECT_LE(std::abs(z[i] - mu[i]), std::exp(0.5 * lv) * std::abs(eps) * (1 + 1e-12) + 1e-15);
      if (lv == -60.0) EXPECT_NEAR(z[i], mu[i], 1e-12);
    }
  }
  Tape t(3);
  auto z = gaussian_sample(t.constant(Tensor::matrix(1, 1, {0.0})), t.constant(Tensor::filled(Shape{1, 1}, -40.0)));
  EXPECT_LT(std::abs(z.value()[0]), 1e-8);
}

TEST(Primitives, EmbeddingGradientScattersIntoLookedUpRows) {
  std::mt19937_64 rng(1);
  auto p = single("E", random_tensor({5, 3}, rng));
  std::vector<int> idx{1, 3, 1};
  auto g = taped_grad([&](Tape&, const ParamVars& v) { return sum(embedding_lookup(v["E"], idx)); }, p, 0);
  const auto& G = g.at("E");
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(G.at(r, c), r == 1 ? 2.0 : r == 3 ? 1.0 : 0.0);
}

TEST(Primitives, ShapeErrorNamesBothShapes) {
  Tape t;
  auto a = t.constant(Tensor(Shape{2, 3}));
  auto b = t.constant(Tensor(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(a, t.constant(Tensor(Shape{3, 2}))), ShapeError);
  EXPECT_THROW(mul(a, t.constant(Tensor(Shape{2, 2}))), ShapeError);
  EXPECT_THROW(slice(a, 1, 2, 4), ShapeError);
}

// Every primitive against central differences on randomized inputs.
TEST(Primitives, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(1, 4);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = dim(rng), n = dim(rng), k = dim(rng);
    ModelParams p;
    p.add("A", random_tensor({m, k}, rng));
    p.add("B", random_tensor({k, n}, rng));
    p.add("C", random_tensor({m, n}, rng));
    p.add("r", random_tensor({n}, rng));
    p.add("E", random_tensor({4, n}, rng));
    p.add("W", random_tensor({m, n}, rng, 0.1));  // random projection weights for the scalar read-out
    std::vector<int> targets(m), idx(m);
    for (std::size_t i = 0; i < m; ++i) {
      targets[i] = static_cast<int>(rng() % n);
      idx[i] = static_cast<int>(rng() % 4);
    }
    auto readout = [](Var x, Var w) { return sum(mul(x, w)); };
    std::vector<std::function<Var(Tape&, const ParamVars&)>> cases = {
        [&](Tape&, const ParamVars& v) { return readout(matmul(v["A"], v["B"]), v["W"]); },
        [&](Tape&, const ParamVars& v) { return readout(add(v["C"], v["r"]), v["W"]); },
        [&](Tape&, const ParamVars& v) { return readout(sub(mul(v["C"], v["C"]), v["W"]), v["W"]); },
        [&](Tape&, const ParamVars& v) { return readout(sigmoid(v["C"]), v["W"]); },
        [&](Tape&, const ParamVars& v) { return readout(tanh(v["C"]), v["W"]); },
        [&](Tape&, const ParamVars& v) { return readout(exp(scale(v["C"], 0.5)), v["W"]); },
        [&](Tape&, const ParamVars& v) { return sum(softmax_cross_entropy(add(v["C"], v["r"]), targets)); },
        [&](Tape&, const ParamVars& v) { return readout(embedding_lookup(v["E"], idx), v["W"]); },
        [&](Tape&, const ParamVars& v) {
          auto c = concat({v["C"], v["W"]}, static_cast<int>(trial % 2));
          return sum(square(c));
        },
        [&](Tape&, const ParamVars& v) { return sum(square(slice(v["C"], 1, 0, (n + 1) / 2))); },
        [&](Tape&, const ParamVars& v) { return readout(gaussian_sample(v["C"], scale(v["W"], 3.0)), v["C"]); },
        [&](Tape&, const ParamVars& v) { return mean(row_sum(add_scalar(square(v["C"]), 1.0))); },
        [&](Tape&, const ParamVars& v) { return readout(block_sum(concat({v["C"], v["W"], v["C"]}, 0), m), v["W"]); },
        [&](Tape&, const ParamVars& v) { return readout(sqrt(add_scalar(square(v["C"]), 0.5)), v["W"]); },
    };
    for (std::size_t c = 0; c < cases.size(); ++c) {
      const double err = fd_check(cases[c], p, 100 + trial);
      worst = std::max(worst, err);
      EXPECT_LT(err, 1e-5) << "case " << c << " trial " << trial;
    }
  }
  RecordProperty("max_rel_error", std::to_string(worst));
}

TEST(WholeModel, LstmSoftmaxNllMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const std::size_t V = 6, E = 3, H = 4;
  ModelParams p;
  p.add("emb", random_tensor({V, E}, rng, 0.5));
  p.add("W", random_tensor({E + H, 4 * H}, rng, 0.5));
  p.add("b", random_tensor({4 * H}, rng, 0.5));
  p.add("out", random_tensor({H, V}, rng, 0.5));
  const std::vector<int> seq{2, 5, 1};
  auto f = [&](Tape& t, const ParamVars& v) {
    LstmState s{t.constant(Tensor(Shape{1, H})), t.constant(Tensor(Shape{1, H}))};
    std::vector<Var> losses;
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      s = lstm_step(embedding_lookup(v["emb"], std::span<const int>(&seq[i], 1)), s, v["W"], v["b"]);
      losses.push_back(softmax_cross_entropy(matmul(s.h, v["out"]), std::span<const int>(&seq[i + 1], 1)));
    }
    return sum(concat(losses, 0));
  };
  EXPECT_LT(fd_check(f, p), 1e-6);
}

TEST(Replay, ValueAndGradientBitIdentical) {
  std::mt19937_64 rng(9);
  ModelParams p;
  p.add("mu", random_tensor({3, 2}, rng));
  p.add("lv", random_tensor({3, 2}, rng));
  auto f = [](Tape&, const ParamVars& v) { return sum(square(gaussian_sample(v["mu"], v["lv"]))); };
  auto a = ad::forward(f, p, 11);
  auto b = ad::forward(f, p, 11);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(ad::backward(a), ad::backward(b));
}

TEST(Linearity, MinibatchGradientIsSumOfPerExample) {
  std::mt19937_64 rng(12);
  ModelParams p;
  p.add("W", random_tensor({3, 4}, rng));
  auto x = random_tensor({5, 3}, rng);
  std::vector<int> targets{0, 3, 1, 2, 3};
  auto batch = taped_grad(
      [&](Tape& t, const ParamVars& v) { return sum(softmax_cross_entropy(matmul(t.constant(x), v["W"]), targets)); },
      p, 0);
  auto total = p.zeros_like();
  for (std::size_t i = 0; i < 5; ++i) {
    Tensor row(Shape{1, 3});
    row.mat() = x.mat().row(static_cast<Eigen::Index>(i));
    auto g = taped_grad(
        [&](Tape& t, const ParamVars& v) {
          return sum(softmax_cross_entropy(matmul(t.constant(row), v["W"]), std::span<const int>(&targets[i], 1)));
        },
        p, 0);
    total.axpy(1.0, g);
  }
  EXPECT_LT((batch.flatten() - total.flatten()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(ModelParamsTest, FlattenRoundTripAndDuplicateNames) {
  std::mt19937_64 rng(1);
  ModelParams p;
  p.add("a", random_tensor({2, 3}, rng));
  p.add("b", random_tensor({4}, rng));
  EXPECT_EQ(p.total_dim(), 10u);
  EXPECT_EQ(p.unflatten(p.flatten()), p);
  EXPECT_THROW(p.add("a", Tensor(Shape{1})), ConfigError);
  EXPECT_THROW(p.unflatten(Vector::Zero(3)), ShapeError);
}

TEST(Checkpoint, BinaryRoundTripIsExact) {
  std::mt19937_64 rng(2);
  ModelParams p;
  p.add("gen.emb", random_tensor({3, 2}, rng));
  p.add("scalar", Tensor::scalar(std::nextafter(1.0, 2.0)));
  std::stringstream ss;
  checkpoint::write(ss, p);
  EXPECT_EQ(checkpoint::read(ss), p);
  std::stringstream bad("NOTACKPT");
  EXPECT_THROW(checkpoint::read(bad), IoError);
}

TEST(Checkpoint, LittleEndianLayout) {
  ModelParams p;
  p.add("x", Tensor::vector({1.0}));
  std::stringstream ss;
  checkpoint::write(ss, p);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 8u + 8 + 4 + 1 + 4 + 8 + 8);
  // 1.0 = 0x3FF0000000000000, least significant byte first.
  EXPECT_EQ(static_cast<unsigned char>(bytes.back()), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(bytes[bytes.size() - 2]), 0xF0);
}
