#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "savae/rng.hpp"
#include "savae/variational.hpp"

// Stochastic variational refinement of lambda with momentum and clipping, and
// the reverse pass that carries d(final loss) back to lambda_0 and theta
// through every refinement step using finite-difference Hessian-vector
// products under common random numbers.
namespace savae::svi {

/// Objective f(lambda; theta, x) that the refinement minimizes.
template <class O>
concept Objective = requires(const O& f, const VarParams& lambda, std::uint64_t seed, bool want_theta) {
  { f.evaluate(lambda, seed, want_theta) } -> std::same_as<LossGrad>;
  { f.value(lambda, seed) } -> std::same_as<LossGrad>;
  { f.kl_multiplier() } -> std::convertible_to<double>;
};

inline constexpr double kNoClip = std::numeric_limits<double>::infinity();

struct Config {
  std::size_t steps = 20;        // K
  double learning_rate = 1.0;    // alpha
  double momentum = 0.5;         // gamma
  double clip = 5.0;             // eta; kNoClip disables clipping
  double hvp_epsilon = 1e-5;     // finite-difference step
  std::vector<double> step_weights;  // w_0..w_K of the weighted objective; empty = final step only

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("svi: learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("svi: momentum must lie in [0, 1)");
    if (!(clip > 0.0)) throw ConfigError("svi: clip must be > 0");
    if (!(hvp_epsilon > 0.0)) throw ConfigError("svi: hvp_epsilon must be > 0");
    if (!step_weights.empty()) {
      if (step_weights.size() != steps + 1)
        throw ConfigError("svi: step_weights needs " + std::to_string(steps + 1) + " entries");
      for (double w : step_weights)
        if (!(w >= 0.0)) throw ConfigError("svi: step weights must be nonnegative");
    }
  }

  double weight(std::size_t k) const {
    if (step_weights.empty()) return k == steps ? 1.0 : 0.0;
    return step_weights[k];
  }

  friend bool operator==(const Config&, const Config&) = default;
};

inline std::uint64_t step_seed(std::uint64_t master, std::size_t k) {
  return derive_seed(master, stream::kSviSteps, k);
}
inline std::uint64_t final_seed(std::uint64_t master) { return derive_seed(master, stream::kFinalEval); }

/// Rescales u to norm eta when its norm exceeds eta.
inline Vector clip(const Vector& u, double eta) {
  const double n = u.norm();
  if (n > eta) return (eta / n) * u;
  return u;
}

inline ModelParams clip(const ModelParams& u, double eta) {
  const double n = std::sqrt(u.squared_norm());
  ModelParams out = u;
  if (n > eta) out.scale(eta / n);
  return out;
}

/// Everything the reverse pass needs from a forward refinement.
struct Trace {
  std::vector<VarParams> lambdas;   // lambda_0..lambda_K
  std::vector<Vector> velocities;   // v_0..v_K
  std::vector<Vector> step_grads;   // unclipped grad_lambda f(lambda_k), k < K
  std::vector<ElboEval> step_evals;
  std::vector<std::uint64_t> step_seeds;
  std::uint64_t final_seed = 0;
  ElboEval final_eval;
  std::vector<double> final_per_example;
  double loss = 0.0;  // sum_k w_k f(lambda_k)
  Config config;
  double kl_multiplier = 1.0;

  const VarParams& final_lambda() const { return lambdas.back(); }
  std::size_t steps() const { return lambdas.size() - 1; }
};

struct Gradients {
  Vector d_lambda0;
  ModelParams d_theta;  // empty when theta gradients were not requested
};

/// Runs K momentum steps  v <- gamma v - clip(grad f(lambda), eta),
/// lambda <- lambda + alpha v  and evaluates the loss at lambda_K.
template <Objective O>
Trace forward(const VarParams& lambda0, const O& f, const Config& cfg, std::uint64_t master_seed) {
  cfg.validate();
  Trace tr;
  tr.config = cfg;
  tr.kl_multiplier = f.kl_multiplier();
  tr.lambdas.reserve(cfg.steps + 1);
  tr.lambdas.push_back(lambda0);
  Vector v = Vector::Zero(static_cast<Eigen::Index>(lambda0.flat_size()));
  tr.velocities.push_back(v);
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const auto seed = step_seed(master_seed, k);
    LossGrad g;
    try {
      g = f.evaluate(tr.lambdas.back(), seed, false);
    } catch (const NonFiniteValue& e) {
      throw NonFiniteValue(std::string("svi forward step: ") + e.what(), k);
    }
    v = cfg.momentum * v - clip(g.d_lambda, cfg.clip);
    VarParams next = tr.lambdas.back().with_flat(tr.lambdas.back().flatten() + cfg.learning_rate * v);
    next.clamp_log_var();
    if (!next.mu.all_finite() || !next.log_var.all_finite()) throw NonFiniteValue("svi forward lambda", k);
    tr.loss += cfg.weight(k) * g.loss;
    tr.step_seeds.push_back(seed);
    tr.step_evals.push_back(g.eval);
    tr.step_grads.push_back(std::move(g.d_lambda));
    tr.velocities.push_back(v);
    tr.lambdas.push_back(std::move(next));
  }
  tr.final_seed = final_seed(master_seed);
  LossGrad fin;
  try {
    fin = f.value(tr.lambdas.back(), tr.final_seed);
  } catch (const NonFiniteValue& e) {
    throw NonFiniteValue(std::string("svi final evaluation: ") + e.what(), cfg.steps);
  }
  tr.final_eval = fin.eval;
  tr.final_per_example = std::move(fin.per_example);
  tr.loss += cfg.weight(cfg.steps) * fin.loss;
  return tr;
}

struct HvpResult {
  Vector lambda;      // H_{lambda,lambda} f . v
  ModelParams theta;  // H_{theta,lambda} f . v (empty unless requested)
  std::uint64_t seed_perturbed = 0;
  std::uint64_t seed_base = 0;
};

/// (grad f(lambda + eps v) - grad f(lambda)) / eps with both gradients taken
/// under the same noise seed. `base` may supply an existing evaluation at
/// lambda with that seed.
template <Objective O>
HvpResult hvp(const O& f, const VarParams& lambda, const Vector& v, double eps, std::uint64_t seed,
              bool want_theta, const LossGrad* base = nullptr) {
  LossGrad own;
  if (!base) {
    own = f.evaluate(lambda, seed, want_theta);
    base = &own;
  }
  const auto pert = f.evaluate(lambda.with_flat(lambda.flatten() + eps * v), seed, want_theta);
  HvpResult out;
  out.seed_base = base->eval.noise_seed;
  out.seed_perturbed = pert.eval.noise_seed;
  out.lambda = (pert.d_lambda - base->d_lambda) / eps;
  if (want_theta) {
    out.theta = pert.d_theta;
    out.theta.axpy(-1.0, base->d_theta);
    out.theta.scale(1.0 / eps);
  }
  return out;
}

template <Objective O>
Vector hvp_lambda(const O& f, const VarParams& lambda, const Vector& v, double eps, std::uint64_t seed) {
  return hvp(f, lambda, v, eps, seed, false).lambda;
}

template <Objective O>
ModelParams hvp_theta(const O& f, const VarParams& lambda, const Vector& v, double eps, std::uint64_t seed) {
  return hvp(f, lambda, v, eps, seed, true).theta;
}

/// Reverse pass through a refinement: total derivative of the trace's loss
/// with respect to lambda_0 and (when need_theta) theta.
template <Objective O>
Gradients backward(const Trace& tr, const O& f, const Config& cfg, bool need_theta = true) {
  if (!(tr.config == cfg)) throw TraceMismatch("svi backward: config differs from the forward trace");
  if (tr.kl_multiplier != f.kl_multiplier())
    throw TraceMismatch("svi backward: kl multiplier " + std::to_string(f.kl_multiplier()) +
                        " differs from forward " + std::to_string(tr.kl_multiplier));
  if (tr.lambdas.size() != cfg.steps + 1 || tr.step_seeds.size() != cfg.steps)
    throw TraceMismatch("svi backward: trace holds " + std::to_string(tr.lambdas.size()) + " iterates for K=" +
                        std::to_string(cfg.steps));
  const std::size_t K = cfg.steps;

  const auto fin = f.evaluate(tr.lambdas[K], tr.final_seed, need_theta);
  Gradients out;
  Vector lam_bar = cfg.weight(K) * fin.d_lambda;
  if (need_theta) {
    out.d_theta = fin.d_theta;
    out.d_theta.scale(cfg.weight(K));
  }
  Vector v_bar = Vector::Zero(lam_bar.size());
  for (std::size_t k = K; k-- > 0;) {
    v_bar += cfg.learning_rate * lam_bar;
    const auto& lam = tr.lambdas[k];
    LossGrad base;
    if (need_theta) {
      base = f.evaluate(lam, tr.step_seeds[k], true);
    } else {
      base.d_lambda = tr.step_grads[k];
      base.eval.noise_seed = tr.step_seeds[k];
    }
    const auto h = hvp(f, lam, v_bar, cfg.hvp_epsilon, tr.step_seeds[k], need_theta, &base);
    lam_bar = clip(Vector(lam_bar - h.lambda), cfg.clip);
    if (need_theta) out.d_theta.axpy(-1.0, clip(h.theta, cfg.clip));
    if (const double w = cfg.weight(k); w != 0.0) {
      lam_bar += w * base.d_lambda;
      if (need_theta) out.d_theta.axpy(w, base.d_theta);
    }
    v_bar = cfg.momentum * v_bar;
  }
  out.d_lambda0 = std::move(lam_bar);
  return out;
}

}  // namespace savae::svi
