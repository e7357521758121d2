#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "savae/autodiff.hpp"
#include "savae/ops.hpp"
#include "savae/rng.hpp"
#include "savae/variational.hpp"

namespace savae {

/// Rectangular batch of equal-length token sequences, stored time-major so the
/// tokens at one position are contiguous.
class TokenBatch {
 public:
  TokenBatch() = default;
  explicit TokenBatch(const std::vector<std::vector<int>>& seqs) {
    if (seqs.empty()) throw EmptyInput("TokenBatch: no sequences");
    rows_ = seqs.size();
    length_ = seqs.front().size();
    if (length_ == 0) throw EmptyInput("TokenBatch: empty sequence");
    tokens_.resize(rows_ * length_);
    for (std::size_t i = 0; i < rows_; ++i) {
      if (seqs[i].size() != length_)
        throw ShapeError("TokenBatch: sequence " + std::to_string(i) + " has length " +
                         std::to_string(seqs[i].size()) + ", expected " + std::to_string(length_));
      for (std::size_t t = 0; t < length_; ++t) tokens_[t * rows_ + i] = seqs[i][t];
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t length() const { return length_; }
  std::span<const int> at_position(std::size_t t) const { return {tokens_.data() + t * rows_, rows_}; }
  /// All tokens, time-major: position 0 for every row, then position 1, ...
  std::span<const int> time_major() const { return tokens_; }
  int token(std::size_t row, std::size_t t) const { return tokens_[t * rows_ + row]; }
  std::vector<int> sequence(std::size_t row) const {
    std::vector<int> out(length_);
    for (std::size_t t = 0; t < length_; ++t) out[t] = token(row, t);
    return out;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t length_ = 0;
  std::vector<int> tokens_;
};

namespace ad {

struct LstmState {
  Var h;
  Var c;
};

/// One LSTM step. W is (input + hidden) x 4H with gate blocks [i | f | o | g].
inline LstmState lstm_step(Var x, LstmState s, Var W, Var b) {
  const std::size_t H = s.h.value().cols();
  auto gates = add(matmul(concat({x, s.h}, 1), W), b);
  auto i = sigmoid(slice(gates, 1, 0, H));
  auto f = sigmoid(slice(gates, 1, H, 2 * H));
  auto o = sigmoid(slice(gates, 1, 2 * H, 3 * H));
  auto g = tanh(slice(gates, 1, 3 * H, 4 * H));
  auto c = add(mul(f, s.c), mul(i, g));
  return {mul(o, tanh(c)), c};
}

/// Per-row totals of time-major per-position values.
inline Var per_row_sum(Var time_major, std::size_t rows) { return block_sum(time_major, rows); }

}  // namespace ad

/// How the latent code enters the generator.
enum class Wiring {
  OutputLayer,  // z concatenated with h_t at the output layer of every step
  HiddenInit,   // h_0 = affine(z) and z appended to every LSTM input
};

struct GenConfig {
  std::size_t vocab = 1000;
  std::size_t embed = 100;
  std::size_t hidden = 100;
  std::size_t latent = 2;
  Wiring wiring = Wiring::OutputLayer;

  friend bool operator==(const GenConfig&, const GenConfig&) = default;
};

struct EncConfig {
  std::size_t vocab = 1000;
  std::size_t embed = 100;
  std::size_t hidden = 100;
  std::size_t latent = 2;
  bool share_embedding = false;  // read the generator's table instead of enc.emb

  friend bool operator==(const EncConfig&, const EncConfig&) = default;
};

namespace detail {
inline void fill_uniform(Tensor& t, NoiseStream& rng, double lo, double hi) {
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
}
}  // namespace detail

/// LSTM language model conditioned on z. Parameters live in a ModelParams
/// under the "gen." prefix; this class only knows the shapes and wiring.
class SeqGenerator {
 public:
  explicit SeqGenerator(GenConfig cfg) : cfg_(cfg) {
    if (cfg.vocab == 0 || cfg.embed == 0 || cfg.hidden == 0 || cfg.latent == 0)
      throw ConfigError("generator dimensions must be positive");
  }
  const GenConfig& config() const { return cfg_; }

  std::size_t lstm_input() const {
    return cfg_.embed + (cfg_.wiring == Wiring::HiddenInit ? cfg_.latent : 0);
  }

  /// All parameters zero; shapes only.
  ModelParams zeros() const {
    const auto V = cfg_.vocab, E = cfg_.embed, H = cfg_.hidden, d = cfg_.latent;
    ModelParams p;
    p.add("gen.emb", Tensor(Shape{V, E}));
    p.add("gen.lstm.W", Tensor(Shape{lstm_input() + H, 4 * H}));
    p.add("gen.lstm.b", Tensor(Shape{4 * H}));
    if (cfg_.wiring == Wiring::HiddenInit) {
      p.add("gen.init.W", Tensor(Shape{d, H}));
      p.add("gen.init.b", Tensor(Shape{H}));
    }
    p.add("gen.out.W_h", Tensor(Shape{H, V}));
    if (cfg_.wiring == Wiring::OutputLayer) p.add("gen.out.W_z", Tensor(Shape{d, V}));
    p.add("gen.out.b", Tensor(Shape{V}));
    return p;
  }

  /// Trainable initialization: every parameter U(-scale, scale).
  ModelParams init_learned(std::uint64_t seed, double scale = 0.1) const {
    NoiseStream rng(seed);
    auto p = zeros();
    for (auto& [name, t] : p) detail::fill_uniform(t, rng, -scale, scale);
    return p;
  }

  /// Oracle initialization: everything U(-narrow, narrow) except the output
  /// weights reading z, which are U(-wide, wide).
  ModelParams init_oracle(std::uint64_t seed, double narrow = 1.0, double wide = 5.0) const {
    NoiseStream rng(seed);
    auto p = zeros();
    for (auto& [name, t] : p) {
      const double r = name == "gen.out.W_z" ? wide : narrow;
      detail::fill_uniform(t, rng, -r, r);
    }
    return p;
  }

  /// Hidden states that produce the logits of each position, stacked
  /// time-major ((T*rows) x H). Position 0 is predicted from h_0.
  ad::Var hidden_states(ad::Tape& tape, const ad::ParamVars& th, const TokenBatch& x, ad::Var z) const {
    const std::size_t B = x.rows(), T = x.length(), H = cfg_.hidden;
    ad::LstmState s{tape.constant(Tensor(Shape{B, H})), tape.constant(Tensor(Shape{B, H}))};
    if (cfg_.wiring == Wiring::HiddenInit) s.h = ad::add(ad::matmul(z, th["gen.init.W"]), th["gen.init.b"]);
    std::vector<ad::Var> hs{s.h};
    for (std::size_t t = 0; t + 1 < T; ++t) {
      auto in = ad::embedding_lookup(th["gen.emb"], x.at_position(t));
      if (cfg_.wiring == Wiring::HiddenInit) in = ad::concat({in, z}, 1);
      s = ad::lstm_step(in, s, th["gen.lstm.W"], th["gen.lstm.b"]);
      hs.push_back(s.h);
    }
    return hs.size() == 1 ? hs.front() : ad::concat(hs, 0);
  }

  /// Part of the logits that does not involve z at the output layer:
  /// h W_h + b, time-major ((T*rows) x V).
  ad::Var base_logits(ad::Tape& tape, const ad::ParamVars& th, const TokenBatch& x, ad::Var z) const {
    return ad::add(ad::matmul(hidden_states(tape, th, x, z), th["gen.out.W_h"]), th["gen.out.b"]);
  }

  /// Completes base logits with the z pathway of the output layer.
  ad::Var logits_from_base(const ad::ParamVars& th, ad::Var base, ad::Var z, std::size_t T) const {
    if (cfg_.wiring != Wiring::OutputLayer) return base;
    auto zw = ad::matmul(z, th["gen.out.W_z"]);
    return ad::add(base, T == 1 ? zw : ad::concat(std::vector<ad::Var>(T, zw), 0));
  }

  ad::Var logits(ad::Tape& tape, const ad::ParamVars& th, const TokenBatch& x, ad::Var z) const {
    return logits_from_base(th, base_logits(tape, th, x, z), z, x.length());
  }

  /// -log p(x_t | x_<t, z) per position, time-major ((T*rows) x 1).
  ad::Var token_nll(ad::Tape& tape, const ad::ParamVars& th, const TokenBatch& x, ad::Var z) const {
    return ad::softmax_cross_entropy(logits(tape, th, x, z), x.time_major());
  }

  /// Sum over positions of log p(x_t | x_<t, z), one value per row.
  std::vector<double> log_likelihood(const ModelParams& theta, const TokenBatch& x, const Tensor& z) const {
    ad::Tape tape;
    ad::ParamVars th(tape, theta, false);
    auto nll = ad::per_row_sum(token_nll(tape, th, x, tape.constant(z)), x.rows());
    std::vector<double> out(x.rows());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -nll.value()[i];
    return out;
  }

  /// Ancestral sampling of `length` tokens for each row of z (rows x d).
  /// temperature divides the logits; 1 samples from the model itself.
  std::vector<std::vector<int>> sample(const ModelParams& theta, const Tensor& z, std::size_t length,
                                       NoiseStream& rng, double temperature = 1.0) const {
    if (!(temperature > 0.0)) throw ConfigError("sampling temperature must be > 0");
    const std::size_t B = z.rows(), H = cfg_.hidden, V = cfg_.vocab;
    ad::Tape tape;
    ad::ParamVars th(tape, theta, false);
    auto zv = tape.constant(z);
    ad::LstmState s{tape.constant(Tensor(Shape{B, H})), tape.constant(Tensor(Shape{B, H}))};
    if (cfg_.wiring == Wiring::HiddenInit) s.h = ad::add(ad::matmul(zv, th["gen.init.W"]), th["gen.init.b"]);
    std::vector<std::vector<int>> out(B, std::vector<int>(length));
    std::vector<int> prev(B);
    std::vector<double> p(V);
    for (std::size_t t = 0; t < length; ++t) {
      if (t > 0) {
        auto in = ad::embedding_lookup(th["gen.emb"], prev);
        if (cfg_.wiring == Wiring::HiddenInit) in = ad::concat({in, zv}, 1);
        s = ad::lstm_step(in, s, th["gen.lstm.W"], th["gen.lstm.b"]);
      }
      auto lg = ad::add(ad::matmul(s.h, th["gen.out.W_h"]), th["gen.out.b"]);
      if (cfg_.wiring == Wiring::OutputLayer) lg = ad::add(lg, ad::matmul(zv, th["gen.out.W_z"]));
      const auto& L = lg.value();
      for (std::size_t i = 0; i < B; ++i) {
        double mx = L.at(i, 0);
        for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, L.at(i, v));
        double total = 0.0;
        for (std::size_t v = 0; v < V; ++v) total += p[v] = std::exp((L.at(i, v) - mx) / temperature);
        double u = rng.uniform(0.0, total);
        std::size_t pick = V - 1;
        for (std::size_t v = 0; v < V; ++v) {
          u -= p[v];
          if (u < 0.0) {
            pick = v;
            break;
          }
        }
        out[i][t] = prev[i] = static_cast<int>(pick);
      }
    }
    return out;
  }

 private:
  GenConfig cfg_;
};

/// LSTM inference network: final hidden state -> affine -> [mu | log_var].
class SeqEncoder {
 public:
  explicit SeqEncoder(EncConfig cfg) : cfg_(cfg) {
    if (cfg.vocab == 0 || cfg.embed == 0 || cfg.hidden == 0 || cfg.latent == 0)
      throw ConfigError("encoder dimensions must be positive");
  }
  const EncConfig& config() const { return cfg_; }
  std::string embedding_name() const { return cfg_.share_embedding ? "gen.emb" : "enc.emb"; }

  ModelParams zeros() const {
    const auto V = cfg_.vocab, E = cfg_.embed, H = cfg_.hidden, d = cfg_.latent;
    ModelParams p;
    if (!cfg_.share_embedding) p.add("enc.emb", Tensor(Shape{V, E}));
    p.add("enc.lstm.W", Tensor(Shape{E + H, 4 * H}));
    p.add("enc.lstm.b", Tensor(Shape{4 * H}));
    p.add("enc.head.W", Tensor(Shape{H, 2 * d}));
    p.add("enc.head.b", Tensor(Shape{2 * d}));
    return p;
  }

  /// Every parameter U(-scale, scale).
  ModelParams init(std::uint64_t seed, double scale = 0.1) const {
    NoiseStream rng(seed);
    auto p = zeros();
    for (auto& [name, t] : p) detail::fill_uniform(t, rng, -scale, scale);
    return p;
  }

  /// Embedded inputs per position, (rows x E) each.
  std::vector<ad::Var> embed(const ad::ParamVars& ph, const TokenBatch& x) const {
    std::vector<ad::Var> out;
    for (std::size_t t = 0; t < x.length(); ++t)
      out.push_back(ad::embedding_lookup(ph[embedding_name()], x.at_position(t)));
    return out;
  }

  /// lambda_0 = [mu | log_var] (rows x 2d) from already-embedded inputs.
  ad::Var encode_embedded(ad::Tape& tape, const ad::ParamVars& ph, const std::vector<ad::Var>& inputs) const {
    if (inputs.empty()) throw EmptyInput("encode: empty sequence");
    const std::size_t B = inputs.front().value().rows(), H = cfg_.hidden;
    ad::LstmState s{tape.constant(Tensor(Shape{B, H})), tape.constant(Tensor(Shape{B, H}))};
    for (const auto& in : inputs) s = ad::lstm_step(in, s, ph["enc.lstm.W"], ph["enc.lstm.b"]);
    return ad::add(ad::matmul(s.h, ph["enc.head.W"]), ph["enc.head.b"]);
  }

  ad::Var encode(ad::Tape& tape, const ad::ParamVars& ph, const TokenBatch& x) const {
    if (x.length() == 0) throw EmptyInput("encode: empty sequence");
    return encode_embedded(tape, ph, embed(ph, x));
  }

  /// Untaped convenience: lambda_0 for every row of x.
  VarParams encode(const ModelParams& phi, const TokenBatch& x) const {
    if (x.rows() == 0 || x.length() == 0) throw EmptyInput("encode: empty sequence");
    ad::Tape tape;
    ad::ParamVars ph(tape, phi, false);
    return VarParams::from_joined(encode(tape, ph, x).value());
  }

 private:
  EncConfig cfg_;
};

/// -log p(x | z; theta) for a fixed batch. When theta is held constant on the
/// tape the z-independent part of the logits is served from a cache built
/// once per theta, so repeated lambda-only evaluations skip the LSTM.
class SeqLikelihood {
 public:
  SeqLikelihood(const SeqGenerator& gen, const TokenBatch& x) : gen_(&gen), x_(&x) {}

  /// Precomputes the cached logits for `theta` (OutputLayer wiring only).
  SeqLikelihood& cache(const ModelParams& theta) {
    if (gen_->config().wiring != Wiring::OutputLayer) return *this;
    ad::Tape tape;
    ad::ParamVars th(tape, theta, false);
    base_ = gen_->base_logits(tape, th, *x_, ad::Var{}).value();
    return *this;
  }
  bool cached() const { return base_.has_value(); }

  std::size_t batch_size() const { return x_->rows(); }
  const TokenBatch& batch() const { return *x_; }
  const SeqGenerator& generator() const { return *gen_; }

  ad::Var token_nll(ad::Tape& tape, const ad::ParamVars& th, ad::Var z) const {
    const auto T = x_->length();
    ad::Var lg;
    if (base_ && !th["gen.out.W_h"].requires_grad() && !th["gen.out.b"].requires_grad())
      lg = gen_->logits_from_base(th, tape.constant(*base_), z, T);
    else
      lg = gen_->logits(tape, th, *x_, z);
    return ad::softmax_cross_entropy(lg, x_->time_major());
  }

  ad::Var neg_log_likelihood(ad::Tape& tape, const ad::ParamVars& th, ad::Var z) const {
    return ad::per_row_sum(token_nll(tape, th, z), x_->rows());
  }

 private:
  const SeqGenerator* gen_;
  const TokenBatch* x_;
  std::optional<Tensor> base_;
};

static_assert(LatentLikelihood<SeqLikelihood>);

}  // namespace savae
