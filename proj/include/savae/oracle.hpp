#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "savae/models.hpp"
#include "savae/parallel.hpp"
#include "savae/rng.hpp"

namespace savae {

struct OracleSpec {
  std::size_t vocab = 1000;
  std::size_t embed = 100;
  std::size_t hidden = 100;
  std::size_t length = 5;
  std::size_t latent = 2;
  double narrow = 1.0;  // U(-narrow, narrow) for every weight not reading z
  double wide = 5.0;    // U(-wide, wide) for output weights reading z
  std::size_t n_train = 5000;
  std::size_t n_valid = 5000;
  std::size_t n_test = 5000;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab < 2) throw ConfigError("oracle: vocab must be >= 2");
    if (embed == 0 || hidden == 0 || latent == 0) throw ConfigError("oracle: dimensions must be positive");
    if (length == 0) throw ConfigError("oracle: length must be positive");
    if (!(narrow >= 0.0) || !(wide >= 0.0)) throw ConfigError("oracle: init ranges must be nonnegative");
  }

  GenConfig generator_config() const { return {vocab, embed, hidden, latent, Wiring::OutputLayer}; }

  friend bool operator==(const OracleSpec&, const OracleSpec&) = default;
};

struct Dataset {
  std::vector<std::vector<int>> train, valid, test;

  const std::vector<std::vector<int>>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "valid") return valid;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "'");
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline ModelParams build_oracle(const OracleSpec& spec) {
  spec.validate();
  return SeqGenerator(spec.generator_config()).init_oracle(derive_seed(spec.seed, stream::kInit), spec.narrow,
                                                           spec.wide);
}

/// Ancestral sample of one sequence per index: z ~ N(0, I), then tokens one
/// at a time. Example i of split s uses its own seed, so the result does not
/// depend on how the work is divided.
inline std::vector<std::vector<int>> sample_sequences(const SeqGenerator& gen, const ModelParams& theta,
                                                      std::size_t n, std::size_t length, std::uint64_t seed,
                                                      std::size_t threads = 1) {
  std::vector<std::vector<int>> out(n);
  const std::size_t d = gen.config().latent;
  parallel_for(n, threads, [&](std::size_t i) {
    NoiseStream rng(derive_seed(seed, i));
    Tensor z(Shape{1, d});
    for (auto& v : z.values()) v = rng.normal();
    out[i] = gen.sample(theta, z, length, rng).front();
  });
  return out;
}

inline Dataset sample_dataset(const SeqGenerator& gen, const ModelParams& theta, const OracleSpec& spec,
                              std::size_t threads = 1) {
  const auto base = derive_seed(spec.seed, stream::kData);
  Dataset ds;
  ds.train = sample_sequences(gen, theta, spec.n_train, spec.length, derive_seed(base, 0), threads);
  ds.valid = sample_sequences(gen, theta, spec.n_valid, spec.length, derive_seed(base, 1), threads);
  ds.test = sample_sequences(gen, theta, spec.n_test, spec.length, derive_seed(base, 2), threads);
  return ds;
}

/// -log p(x) per sequence, estimated as -log((1/S) sum_s p(x | z_s)) with
/// z_s ~ N(0, I) shared across sequences.
inline std::vector<double> marginal_nll_estimates(const SeqGenerator& gen, const ModelParams& theta,
                                                  const std::vector<std::vector<int>>& seqs, std::size_t n_samples,
                                                  std::uint64_t seed, std::size_t threads = 1) {
  if (n_samples == 0) throw ConfigError("true NLL estimate needs at least one sample");
  const std::size_t d = gen.config().latent, V = gen.config().vocab;
  const auto S = static_cast<Eigen::Index>(n_samples);
  RowMatrix Z(S, static_cast<Eigen::Index>(d));
  NoiseStream rng(seed);
  for (Eigen::Index s = 0; s < S; ++s)
    for (Eigen::Index j = 0; j < Z.cols(); ++j) Z(s, j) = rng.normal();

  std::vector<double> out(seqs.size());
  if (gen.config().wiring == Wiring::OutputLayer) {
    // h_t does not depend on z here, so each sequence needs one LSTM pass and
    // the S samples only shift the logits by z W_z.
    const RowMatrix ZW = Z * theta.at("gen.out.W_z").mat();
    parallel_for(seqs.size(), threads, [&](std::size_t i) {
      TokenBatch x(std::vector<std::vector<int>>{seqs[i]});
      ad::Tape tape;
      ad::ParamVars th(tape, theta, false);
      const Tensor base = gen.base_logits(tape, th, x, ad::Var{}).value();
      Vector ll = Vector::Zero(S);
      RowMatrix L(S, static_cast<Eigen::Index>(V));
      for (std::size_t t = 0; t < x.length(); ++t) {
        L = ZW.rowwise() + base.mat().row(static_cast<Eigen::Index>(t));
        const Vector mx = L.rowwise().maxCoeff();
        const Vector lse = mx.array() + (L.colwise() - mx).array().exp().rowwise().sum().log();
        ll += L.col(x.token(0, t)) - lse;
      }
      const double m = ll.maxCoeff();
      out[i] = -(m + std::log((ll.array() - m).exp().sum() / static_cast<double>(n_samples)));
    });
    return out;
  }
  const Tensor zt = Tensor::from_matrix(Z);
  parallel_for(seqs.size(), threads, [&](std::size_t i) {
    TokenBatch x(std::vector<std::vector<int>>(n_samples, seqs[i]));
    auto ll = gen.log_likelihood(theta, x, zt);
    const double m = *std::max_element(ll.begin(), ll.end());
    double s = 0.0;
    for (double v : ll) s += std::exp(v - m);
    out[i] = -(m + std::log(s / static_cast<double>(n_samples)));
  });
  return out;
}

/// Mean over sequences of the prior-sampling estimate of -log p(x).
inline double true_nll_estimate(const SeqGenerator& gen, const ModelParams& theta,
                                const std::vector<std::vector<int>>& seqs, std::size_t n_samples, std::uint64_t seed,
                                std::size_t threads = 1) {
  if (seqs.empty()) throw EmptyInput("true NLL estimate of an empty dataset");
  auto per = marginal_nll_estimates(gen, theta, seqs, n_samples, seed, threads);
  double s = 0.0;
  for (double v : per) s += v;
  return s / static_cast<double>(per.size());
}

}  // namespace savae
