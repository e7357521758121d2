#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "savae/data.hpp"
#include "savae/models.hpp"
#include "savae/parallel.hpp"
#include "savae/svi.hpp"
#include "savae/variational.hpp"

namespace savae {

enum class Regime { Vae, Svi, VaeSvi, VaeSviKl, SaVae };

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::Vae: return "vae";
    case Regime::Svi: return "svi";
    case Regime::VaeSvi: return "vae_svi";
    case Regime::VaeSviKl: return "vae_svi_kl";
    case Regime::SaVae: return "sa_vae";
  }
  return "?";
}

inline Regime parse_regime(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  for (auto r : {Regime::Vae, Regime::Svi, Regime::VaeSvi, Regime::VaeSviKl, Regime::SaVae})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown regime '" + s + "' (expected vae, svi, vae_svi, vae_svi_kl or sa_vae)");
}

inline bool uses_encoder(Regime r) { return r != Regime::Svi; }

/// How per-example variational parameters are obtained at evaluation time.
enum class InferenceMode { Encoder, EncoderRefine, RandomRefine };

inline std::string to_string(InferenceMode m) {
  switch (m) {
    case InferenceMode::Encoder: return "encoder";
    case InferenceMode::EncoderRefine: return "encoder-refine";
    case InferenceMode::RandomRefine: return "random-refine";
  }
  return "?";
}

inline InferenceMode parse_mode(std::string s) {
  std::replace(s.begin(), s.end(), '_', '-');
  for (auto m : {InferenceMode::Encoder, InferenceMode::EncoderRefine, InferenceMode::RandomRefine})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown inference mode '" + s + "' (expected encoder, encoder-refine or random-refine)");
}

/// KL multiplier rising linearly per batch from `start` to 1 over `epochs` epochs.
struct KlAnneal {
  bool enabled = false;
  double start = 0.1;
  double epochs = 10.0;

  double multiplier(std::size_t batch, std::size_t batches_per_epoch) const {
    if (!enabled) return 1.0;
    const double span = epochs * static_cast<double>(batches_per_epoch);
    if (span <= 0.0) return 1.0;
    return std::min(1.0, start + (1.0 - start) * static_cast<double>(batch) / span);
  }
};

/// Halves (by default) the learning rate every epoch once validation has
/// failed to improve after the lock period.
struct LrSchedule {
  double initial = 1.0;
  double decay = 2.0;
  std::size_t lock_epochs = 5;
};

class LrState {
 public:
  explicit LrState(const LrSchedule& s) : s_(s), lr_(s.initial) {}
  double lr() const { return lr_; }
  bool decaying() const { return decaying_; }

  /// Records the validation loss of 1-based `epoch`; returns true if the rate
  /// for the next epoch was decayed.
  bool end_epoch(std::size_t epoch, double val_loss) {
    const bool improved = val_loss < best_;
    if (improved) best_ = val_loss;
    if (epoch <= s_.lock_epochs) return false;
    if (!improved) decaying_ = true;
    if (!decaying_) return false;
    lr_ /= s_.decay;
    return true;
  }

 private:
  LrSchedule s_;
  double lr_;
  double best_ = std::numeric_limits<double>::infinity();
  bool decaying_ = false;
};

struct TrainConfig {
  Regime regime = Regime::SaVae;
  bool learn_generator = true;  // false: generator held fixed (oracle)
  std::size_t epochs = 20;
  std::size_t batch_size = 50;
  double grad_clip = 5.0;  // global norm over all updated parameters
  LrSchedule lr;
  KlAnneal kl_anneal;
  svi::Config svi;
  double svi_init_std = 0.1;  // random lambda_0 for the SVI regime and random-refine evaluation
  std::optional<InferenceMode> eval_mode;
  std::optional<std::size_t> eval_steps;
  std::size_t eval_batch_size = 0;  // 0: same as batch_size
  std::uint64_t seed = 1;
  std::size_t threads = 1;

  InferenceMode default_mode() const {
    if (eval_mode) return *eval_mode;
    switch (regime) {
      case Regime::Vae: return InferenceMode::Encoder;
      case Regime::Svi: return InferenceMode::RandomRefine;
      default: return InferenceMode::EncoderRefine;
    }
  }
  std::size_t default_eval_steps() const {
    if (default_mode() == InferenceMode::Encoder) return 0;
    return eval_steps.value_or(svi.steps);
  }

  void validate() const {
    svi.validate();
    if (epochs == 0) throw ConfigError("train: epochs must be positive");
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(lr.initial > 0.0)) throw ConfigError("train: learning rate must be > 0");
    if (!(lr.decay >= 1.0)) throw ConfigError("train: lr decay factor must be >= 1");
    if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be > 0");
    if (!(svi_init_std >= 0.0)) throw ConfigError("train: svi_init_std must be >= 0");
    if (kl_anneal.enabled && !(kl_anneal.start >= 0.0 && kl_anneal.start <= 1.0))
      throw ConfigError("train: kl_anneal.start must lie in [0, 1]");
    if (regime == Regime::Svi && eval_mode && *eval_mode != InferenceMode::RandomRefine)
      throw ConfigError("train: the svi regime has no encoder; evaluation must use random-refine");
  }
};

/// Generator and (optional) encoder architectures plus their parameters.
struct ModelBundle {
  GenConfig gen_config;
  std::optional<EncConfig> enc_config;
  ModelParams theta;
  ModelParams phi;

  SeqGenerator generator() const { return SeqGenerator(gen_config); }
  std::optional<SeqEncoder> encoder() const {
    if (!enc_config) return std::nullopt;
    return SeqEncoder(*enc_config);
  }

  ModelParams merged() const {
    ModelParams all = theta;
    for (const auto& [n, t] : phi) all.add(n, t);
    return all;
  }
  /// Replaces theta and phi from a merged checkpoint; names decide the side.
  void assign(const ModelParams& all) {
    ModelParams th, ph;
    for (const auto& [n, t] : all) (n.starts_with("enc.") ? ph : th).add(n, t);
    if (!th.same_layout(generator().zeros()))
      throw ConfigError("checkpoint generator parameters do not match the configured architecture");
    if (enc_config && !ph.same_layout(encoder()->zeros()))
      throw ConfigError("checkpoint encoder parameters do not match the configured architecture");
    theta = std::move(th);
    phi = std::move(ph);
  }
};

/// Gradients and diagnostics from one minibatch.
struct StepResult {
  ElboEval eval;            // at the final lambda, with the multiplier in force
  double loss = 0.0;        // the scalar objective the theta gradient refers to
  ModelParams grad_theta;   // empty when the generator is fixed
  ModelParams grad_phi;     // empty for the svi regime
  double lambda_shift = 0.0;  // rms over rows of |lambda_K - lambda_0|
};

/// Everything one training step reads.
struct StepContext {
  const SeqGenerator& gen;
  const SeqEncoder* enc;
  const ModelParams& theta;
  const ModelParams& phi;
  const TokenBatch& x;
  const svi::Config& svi;
  double kl_multiplier = 1.0;
  double loss_scale = 1.0;
  std::uint64_t seed = 0;
  bool learn_generator = true;
  double svi_init_std = 0.1;
};

namespace detail {

/// Encoder forward pass kept alive for its reverse pass.
struct EncoderPass {
  std::unique_ptr<ad::Tape> tape;
  ad::ParamVars vars;
  ad::Var joined;
  VarParams lambda0;

  /// Backpropagates dL/dlambda_0 (flat layout) into phi, and into the shared
  /// embedding of theta when the encoder reads it.
  void backward(const Vector& d_lambda0, StepResult& out, bool learn_generator) {
    tape->backward(joined, lambda0.joined(d_lambda0));
    ModelParams g = vars.gradients();
    ModelParams phi_g;
    for (const auto& [n, t] : g) {
      if (!n.starts_with("gen.")) {
        phi_g.add(n, t);
      } else if (learn_generator && !out.grad_theta.empty()) {
        out.grad_theta.at(n).vec() += t.vec();
      }
    }
    out.grad_phi = std::move(phi_g);
  }
};

inline EncoderPass run_encoder(const StepContext& c) {
  if (!c.enc) throw ConfigError("regime needs an encoder");
  EncoderPass p;
  p.tape = std::make_unique<ad::Tape>(0);
  p.vars = ad::ParamVars(*p.tape, c.phi, true);
  if (c.enc->config().share_embedding) p.vars.add("gen.emb", p.tape->leaf(c.theta.at("gen.emb"), true));
  p.joined = c.enc->encode(*p.tape, p.vars, c.x);
  p.lambda0 = VarParams::from_joined(p.joined.value());
  return p;
}

inline VarParams random_lambda(std::size_t rows, std::size_t d, double std_dev, std::uint64_t seed) {
  NoiseStream rng(derive_seed(seed, stream::kRandomInit));
  VarParams lam = VarParams::prior(rows, d);
  for (auto& v : lam.mu.values()) v = std_dev * rng.normal();
  for (auto& v : lam.log_var.values()) v = std_dev * rng.normal();
  return lam;
}

inline double lambda_shift(const svi::Trace& tr) {
  const Vector d = tr.final_lambda().flatten() - tr.lambdas.front().flatten();
  return std::sqrt(d.squaredNorm() / static_cast<double>(tr.lambdas.front().rows()));
}

inline svi::Config with_steps(svi::Config cfg, std::size_t k) {
  if (cfg.steps != k) cfg.step_weights.clear();
  cfg.steps = k;
  return cfg;
}

// Shared by the regimes that refine lambda_0 and differentiate through the
// refinement (sa_vae, and vae as its K = 0 case).
inline StepResult through_refinement(const StepContext& c, std::size_t steps) {
  SeqLikelihood lik(c.gen, c.x);
  lik.cache(c.theta);
  ElboObjective f(lik, c.theta, c.kl_multiplier, c.loss_scale);
  auto enc = run_encoder(c);
  const auto cfg = with_steps(c.svi, steps);
  auto tr = svi::forward(enc.lambda0, f, cfg, c.seed);
  auto g = svi::backward(tr, f, cfg, c.learn_generator);
  StepResult out;
  out.eval = tr.final_eval;
  out.loss = tr.loss;
  out.lambda_shift = lambda_shift(tr);
  if (c.learn_generator) out.grad_theta = std::move(g.d_theta);
  enc.backward(g.d_lambda0, out, c.learn_generator);
  return out;
}

}  // namespace detail

/// Amortized inference: lambda = enc(x), single-sample reparameterized
/// gradients of the (annealed) negative ELBO for phi and theta.
inline StepResult train_step_vae(const StepContext& c) { return detail::through_refinement(c, 0); }

/// K refinement steps, then the total derivative through them.
inline StepResult train_step_sa_vae(const StepContext& c) { return detail::through_refinement(c, c.svi.steps); }

/// Random lambda_0, K refinement steps, theta from the partial gradient at lambda_K.
inline StepResult train_step_svi_only(const StepContext& c) {
  SeqLikelihood lik(c.gen, c.x);
  lik.cache(c.theta);
  ElboObjective f(lik, c.theta, c.kl_multiplier, c.loss_scale);
  const auto lam0 = detail::random_lambda(c.x.rows(), c.gen.config().latent, c.svi_init_std, c.seed);
  auto tr = svi::forward(lam0, f, c.svi, c.seed);
  StepResult out;
  out.eval = tr.final_eval;
  out.lambda_shift = detail::lambda_shift(tr);
  auto fin = f.evaluate(tr.final_lambda(), tr.final_seed, true);
  out.loss = fin.loss;
  out.grad_theta = std::move(fin.d_theta);
  return out;
}

namespace detail {

// vae_svi and vae_svi_kl: identical forward pass; theta from the partial
// gradient at lambda_K; phi from `phi_target`.
template <class PhiTarget>
StepResult refine_then_split(const StepContext& c, PhiTarget phi_target) {
  SeqLikelihood lik(c.gen, c.x);
  lik.cache(c.theta);
  ElboObjective f(lik, c.theta, c.kl_multiplier, c.loss_scale);
  auto enc = run_encoder(c);
  auto tr = svi::forward(enc.lambda0, f, c.svi, c.seed);
  auto fin = f.evaluate(tr.final_lambda(), tr.final_seed, c.learn_generator);
  StepResult out;
  out.eval = tr.final_eval;
  out.loss = fin.loss;
  out.lambda_shift = lambda_shift(tr);
  if (c.learn_generator) out.grad_theta = std::move(fin.d_theta);
  enc.backward(phi_target(f, tr, fin), out, c.learn_generator);
  return out;
}

}  // namespace detail

/// Refine for theta, but train phi on the ELBO at its own lambda_0.
inline StepResult train_step_vae_svi(const StepContext& c) {
  return detail::refine_then_split(c, [](const auto& f, const svi::Trace& tr, const LossGrad& fin) -> Vector {
    if (tr.steps() == 0) return fin.d_lambda;
    return f.evaluate(tr.lambdas.front(), tr.final_seed, false).d_lambda;
  });
}

/// Refine for theta; phi regresses lambda_0 toward the (fixed) refined lambda_K
/// by descending KL[q(lambda_0) || q(lambda_K)].
inline StepResult train_step_vae_svi_kl(const StepContext& c) {
  return detail::refine_then_split(c, [&c](const auto&, const svi::Trace& tr, const LossGrad&) -> Vector {
    return c.loss_scale * gaussian_kl_grad_first(tr.lambdas.front(), tr.final_lambda());
  });
}

inline StepResult train_step(Regime r, const StepContext& c) {
  switch (r) {
    case Regime::Vae: return train_step_vae(c);
    case Regime::Svi: return train_step_svi_only(c);
    case Regime::VaeSvi: return train_step_vae_svi(c);
    case Regime::VaeSviKl: return train_step_vae_svi_kl(c);
    case Regime::SaVae: return train_step_sa_vae(c);
  }
  throw ConfigError("unknown regime");
}

/// SGD on theta and phi with one global gradient-norm clip. Returns the
/// pre-clip norm.
inline double sgd_update(ModelParams& theta, ModelParams& phi, const StepResult& g, double lr, double clip) {
  const double norm = std::sqrt(g.grad_theta.squared_norm() + g.grad_phi.squared_norm());
  const double s = norm > clip ? clip / norm : 1.0;
  if (!g.grad_theta.empty()) theta.axpy(-lr * s, g.grad_theta);
  if (!g.grad_phi.empty()) phi.axpy(-lr * s, g.grad_phi);
  return norm;
}

struct Metrics {
  double neg_elbo = 0.0;  // mean per example
  double recon = 0.0;
  double kl = 0.0;
  double ppl = 0.0;  // exp(sum neg_elbo / tokens)
  std::size_t examples = 0;
  std::size_t tokens = 0;
};

struct EvalOptions {
  InferenceMode mode = InferenceMode::Encoder;
  std::size_t steps = 0;  // K'
  std::size_t batch_size = 50;
  svi::Config svi;
  double svi_init_std = 0.1;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct ExampleEval {
  double neg_elbo = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  VarParams lambda;  // final variational parameters (one row)
};

/// lambda_0 of an evaluation: encoder output, or random draws for
/// random-refine.
inline VarParams initial_lambda(const SeqGenerator& gen, const SeqEncoder* enc, const ModelParams& theta,
                                const ModelParams& phi, const TokenBatch& x, InferenceMode mode, double init_std,
                                std::uint64_t seed) {
  if (mode == InferenceMode::RandomRefine) return detail::random_lambda(x.rows(), gen.config().latent, init_std, seed);
  if (!enc) throw ConfigError("evaluation mode '" + to_string(mode) + "' needs an encoder");
  ad::Tape tape;
  ad::ParamVars ph(tape, phi, false);
  if (enc->config().share_embedding) ph.add("gen.emb", tape.constant(theta.at("gen.emb")));
  return VarParams::from_joined(enc->encode(tape, ph, x).value());
}

/// Per-example bound (kl multiplier 1) under the chosen inference mode.
/// Batches are formed in corpus order; batch b uses seed (opts.seed, b).
inline std::vector<ExampleEval> evaluate_examples(const SeqGenerator& gen, const SeqEncoder* enc,
                                                  const ModelParams& theta, const ModelParams& phi,
                                                  const std::vector<std::vector<int>>& seqs,
                                                  const EvalOptions& opts) {
  if (opts.mode != InferenceMode::RandomRefine && !enc)
    throw ConfigError("evaluation mode '" + to_string(opts.mode) + "' needs an encoder");
  const auto batches = data::make_batches(seqs, opts.batch_size);
  std::vector<ExampleEval> out(seqs.size());
  const auto cfg = detail::with_steps(opts.svi, opts.mode == InferenceMode::Encoder ? 0 : opts.steps);
  const double scale = 1.0 / static_cast<double>(opts.batch_size);
  parallel_for(batches.size(), opts.threads, [&](std::size_t b) {
    const auto x = data::gather(seqs, batches[b]);
    const auto seed = derive_seed(opts.seed, stream::kEval, b);
    SeqLikelihood lik(gen, x);
    lik.cache(theta);
    ElboObjective f(lik, theta, 1.0, scale);
    const auto lam0 = initial_lambda(gen, enc, theta, phi, x, opts.mode, opts.svi_init_std, seed);
    auto tr = svi::forward(lam0, f, cfg, seed);
    // Per-row recon and KL at the final lambda under the final seed.
    ad::Tape tape(tr.final_seed);
    auto mu = tape.constant(tr.final_lambda().mu);
    auto lv = tape.constant(tr.final_lambda().log_var);
    ad::ParamVars th(tape, theta, false);
    auto nll = lik.neg_log_likelihood(tape, th, ad::gaussian_sample(mu, lv));
    auto kl = ad::kl_rows(mu, lv);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto& e = out[batches[b][r]];
      e.recon = nll.value()[r];
      e.kl = kl.value()[r];
      e.neg_elbo = e.recon + e.kl;
      e.lambda = tr.final_lambda().row(r);
    }
  });
  return out;
}

inline Metrics summarize(const std::vector<ExampleEval>& ex, const std::vector<std::vector<int>>& seqs) {
  Metrics m;
  m.examples = ex.size();
  double total = 0.0;
  for (std::size_t i = 0; i < ex.size(); ++i) {
    total += ex[i].neg_elbo;
    m.recon += ex[i].recon;
    m.kl += ex[i].kl;
    m.tokens += seqs[i].size();
  }
  if (m.examples == 0) return m;
  const double n = static_cast<double>(m.examples);
  m.neg_elbo = total / n;
  m.recon /= n;
  m.kl /= n;
  m.ppl = std::exp(total / static_cast<double>(m.tokens));
  return m;
}

inline Metrics evaluate(const SeqGenerator& gen, const SeqEncoder* enc, const ModelParams& theta,
                        const ModelParams& phi, const std::vector<std::vector<int>>& seqs, const EvalOptions& opts) {
  return summarize(evaluate_examples(gen, enc, theta, phi, seqs, opts), seqs);
}

inline EvalOptions eval_options(const TrainConfig& cfg, std::uint64_t seed) {
  EvalOptions o;
  o.mode = cfg.default_mode();
  o.steps = cfg.default_eval_steps();
  o.batch_size = cfg.eval_batch_size ? cfg.eval_batch_size : cfg.batch_size;
  o.svi = cfg.svi;
  o.svi_init_std = cfg.svi_init_std;
  o.seed = seed;
  o.threads = cfg.threads;
  return o;
}

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  Metrics metrics;
  double lr = 0.0;
  double kl_multiplier = 1.0;
};

struct BatchDiagnostic {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double lambda_shift = 0.0;
  double grad_norm = 0.0;
};

struct TrainResult {
  ModelBundle model;
  std::vector<EpochRecord> history;
  std::vector<BatchDiagnostic> diagnostics;
  Metrics test;
};

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "epoch,split,neg_elbo,recon,kl,lr,kl_multiplier\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << r.split << ',' << format_real(r.metrics.neg_elbo) << ','
       << format_real(r.metrics.recon) << ',' << format_real(r.metrics.kl) << ',' << format_real(r.lr) << ','
       << format_real(r.kl_multiplier) << '\n';
}

inline void write_diagnostics_csv(const std::filesystem::path& path, const std::vector<BatchDiagnostic>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "epoch,batch,lambda_shift,grad_norm\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << r.batch << ',' << format_real(r.lambda_shift) << ',' << format_real(r.grad_norm) << '\n';
}

/// Fixed-budget training. When out_dir is set, writes metrics.csv,
/// diagnostics.csv, one checkpoint per epoch and final.ckpt; on a non-finite
/// value it writes abort.ckpt with the last good parameters and rethrows.
inline TrainResult train(ModelBundle model, const Dataset& data, const TrainConfig& cfg,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                         const std::function<void(const EpochRecord&)>& progress = {}) {
  cfg.validate();
  if (uses_encoder(cfg.regime) && !model.enc_config) throw ConfigError("regime needs an encoder");
  if (data.train.empty() || data.valid.empty()) throw EmptyInput("training needs train and valid data");
  const auto gen = model.generator();
  const auto enc_opt = model.encoder();
  const SeqEncoder* enc = enc_opt ? &*enc_opt : nullptr;
  if (out_dir) std::filesystem::create_directories(*out_dir / "checkpoints");

  TrainResult result;
  LrState lr(cfg.lr);
  const double loss_scale = 1.0 / static_cast<double>(cfg.batch_size);
  std::size_t global_batch = 0;
  std::size_t bpe = 0;
  // With a fixed generator the svi regime has no parameters: it is pure
  // per-example inference, so only the evaluations run.
  const std::size_t epochs = cfg.regime == Regime::Svi && !cfg.learn_generator ? 0 : cfg.epochs;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const auto batches = data::make_batches(data.train, cfg.batch_size, derive_seed(cfg.seed, stream::kShuffle, epoch));
    bpe = batches.size();
    double sum_elbo = 0.0, sum_recon = 0.0, sum_kl = 0.0, beta = 1.0;
    std::size_t rows = 0, tokens = 0;
    for (std::size_t b = 0; b < batches.size(); ++b, ++global_batch) {
      const auto x = data::gather(data.train, batches[b]);
      beta = cfg.kl_anneal.multiplier(global_batch, bpe);
      StepContext ctx{gen,  enc,        model.theta, model.phi,           x,
                      cfg.svi, beta, loss_scale, derive_seed(cfg.seed, stream::kBatch, epoch, b),
                      cfg.learn_generator, cfg.svi_init_std};
      StepResult step;
      try {
        step = train_step(cfg.regime, ctx);
      } catch (const NonFiniteValue&) {
        if (out_dir) checkpoint::save(*out_dir / "abort.ckpt", model.merged());
        throw;
      }
      const double norm = sgd_update(model.theta, model.phi, step, lr.lr(), cfg.grad_clip);
      if (!model.theta.flatten().allFinite() || !model.phi.flatten().allFinite()) {
        if (out_dir) checkpoint::save(*out_dir / "abort.ckpt", model.merged());
        throw NonFiniteValue("parameter update", global_batch);
      }
      result.diagnostics.push_back({epoch, b, step.lambda_shift, norm});
      const double n = static_cast<double>(x.rows());
      sum_elbo += step.eval.neg_elbo * n;
      sum_recon += step.eval.recon_nll * n;
      sum_kl += step.eval.kl * n;
      rows += x.rows();
      tokens += x.rows() * x.length();
    }
    EpochRecord tr{epoch, "train", {}, lr.lr(), beta};
    tr.metrics.neg_elbo = sum_elbo / static_cast<double>(rows);
    tr.metrics.recon = sum_recon / static_cast<double>(rows);
    tr.metrics.kl = sum_kl / static_cast<double>(rows);
    tr.metrics.ppl = std::exp(sum_elbo / static_cast<double>(tokens));
    tr.metrics.examples = rows;
    tr.metrics.tokens = tokens;
    result.history.push_back(tr);
    if (progress) progress(tr);

    const auto val = evaluate(gen, enc, model.theta, model.phi, data.valid,
                              eval_options(cfg, derive_seed(cfg.seed, stream::kEval, 1)));
    EpochRecord vr{epoch, "valid", val, lr.lr(), beta};
    result.history.push_back(vr);
    if (progress) progress(vr);
    lr.end_epoch(epoch, val.neg_elbo);

    if (out_dir) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu.ckpt", epoch);
      checkpoint::save(*out_dir / "checkpoints" / name, model.merged());
    }
  }
  if (!data.test.empty()) {
    result.test = evaluate(gen, enc, model.theta, model.phi, data.test,
                           eval_options(cfg, derive_seed(cfg.seed, stream::kEval, 2)));
    EpochRecord te{epochs, "test", result.test, lr.lr(), 1.0};
    result.history.push_back(te);
    if (progress) progress(te);
  }
  if (out_dir) {
    write_metrics_csv(*out_dir / "metrics.csv", result.history);
    write_diagnostics_csv(*out_dir / "diagnostics.csv", result.diagnostics);
    checkpoint::save(*out_dir / "final.ckpt", model.merged());
  }
  result.model = std::move(model);
  return result;
}

}  // namespace savae
