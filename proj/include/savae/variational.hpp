#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <vector>

#include "savae/autodiff.hpp"
#include "savae/ops.hpp"

namespace savae {

inline constexpr double kLogVarMin = -20.0;
inline constexpr double kLogVarMax = 20.0;

/// Diagonal Gaussian variational parameters lambda = [mu, log sigma^2], one
/// row per example.
struct VarParams {
  Tensor mu;
  Tensor log_var;

  VarParams() = default;
  VarParams(Tensor m, Tensor lv) : mu(std::move(m)), log_var(std::move(lv)) {
    if (mu.shape() != log_var.shape()) throw ShapeError("VarParams", mu.shape(), log_var.shape());
    if (mu.rank() == 1) {
      mu = mu.reshaped({1, mu.size()});
      log_var = log_var.reshaped({1, log_var.size()});
    }
  }

  static VarParams prior(std::size_t rows, std::size_t dim) {
    return {Tensor(Shape{rows, dim}), Tensor(Shape{rows, dim})};
  }
  static VarParams single(std::vector<double> mu, std::vector<double> log_var) {
    return {Tensor::vector(std::move(mu)), Tensor::vector(std::move(log_var))};
  }
  /// Splits a (rows x 2d) block laid out as [mu | log_var].
  static VarParams from_joined(const Tensor& joined) {
    const auto rows = joined.rows(), d2 = joined.cols();
    if (d2 % 2) throw ShapeError("VarParams::from_joined: odd width " + std::to_string(d2));
    const auto d = static_cast<Eigen::Index>(d2 / 2);
    Tensor m(Shape{rows, d2 / 2}), lv(Shape{rows, d2 / 2});
    m.mat() = joined.mat().leftCols(d);
    lv.mat() = joined.mat().rightCols(d);
    return {std::move(m), std::move(lv)};
  }

  std::size_t rows() const { return mu.rows(); }
  std::size_t dim() const { return mu.cols(); }
  std::size_t flat_size() const { return 2 * mu.size(); }

  /// Flat layout: all of mu (row-major), then all of log_var.
  Vector flatten() const {
    Vector out(static_cast<Eigen::Index>(flat_size()));
    out << mu.vec(), log_var.vec();
    return out;
  }
  VarParams with_flat(const Vector& flat) const {
    if (static_cast<std::size_t>(flat.size()) != flat_size())
      throw ShapeError("VarParams::with_flat: size " + std::to_string(flat.size()) + " vs " +
                       std::to_string(flat_size()));
    VarParams out = *this;
    const auto n = static_cast<Eigen::Index>(mu.size());
    out.mu.vec() = flat.head(n);
    out.log_var.vec() = flat.tail(n);
    return out;
  }
  /// (rows x 2d) [mu | log_var] view of a flat vector in this layout.
  Tensor joined(const Vector& flat) const {
    const auto n = static_cast<Eigen::Index>(mu.size());
    const auto r = static_cast<Eigen::Index>(rows()), d = static_cast<Eigen::Index>(dim());
    Tensor out(Shape{rows(), 2 * dim()});
    out.mat().leftCols(d) = Eigen::Map<const RowMatrix>(flat.data(), r, d);
    out.mat().rightCols(d) = Eigen::Map<const RowMatrix>(flat.data() + n, r, d);
    return out;
  }
  Tensor joined() const { return joined(flatten()); }

  VarParams row(std::size_t i) const {
    Tensor m(Shape{1, dim()}), lv(Shape{1, dim()});
    m.mat() = mu.mat().row(static_cast<Eigen::Index>(i));
    lv.mat() = log_var.mat().row(static_cast<Eigen::Index>(i));
    return {std::move(m), std::move(lv)};
  }

  void clamp_log_var(double lo = kLogVarMin, double hi = kLogVarMax) {
    for (auto& v : log_var.values()) v = std::clamp(v, lo, hi);
  }

  friend bool operator==(const VarParams&, const VarParams&) = default;
};

/// Closed-form KL[N(mu, diag sigma^2) || N(0, I)] summed over every row.
inline double kl_to_standard_normal(const VarParams& lambda) {
  double kl = 0.0;
  for (std::size_t i = 0; i < lambda.mu.size(); ++i) {
    const double m = lambda.mu[i], lv = lambda.log_var[i];
    kl += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
  }
  return kl;
}

/// KL[q(.; nu) || q(.; omega)] between diagonal Gaussians, summed over rows.
inline double gaussian_kl(const VarParams& nu, const VarParams& omega) {
  if (nu.mu.shape() != omega.mu.shape()) throw ShapeError("gaussian_kl", nu.mu.shape(), omega.mu.shape());
  double kl = 0.0;
  for (std::size_t i = 0; i < nu.mu.size(); ++i) {
    const double dm = nu.mu[i] - omega.mu[i];
    const double dlv = nu.log_var[i] - omega.log_var[i];
    kl += 0.5 * (std::exp(dlv) - dlv + dm * dm * std::exp(-omega.log_var[i]) - 1.0);
  }
  return kl;
}

/// Gradient of gaussian_kl with respect to its first argument, omega held fixed.
inline Vector gaussian_kl_grad_first(const VarParams& nu, const VarParams& omega) {
  if (nu.mu.shape() != omega.mu.shape()) throw ShapeError("gaussian_kl", nu.mu.shape(), omega.mu.shape());
  const auto n = nu.mu.size();
  Vector g(static_cast<Eigen::Index>(2 * n));
  for (std::size_t i = 0; i < n; ++i) {
    const double inv_var = std::exp(-omega.log_var[i]);
    g[static_cast<Eigen::Index>(i)] = (nu.mu[i] - omega.mu[i]) * inv_var;
    g[static_cast<Eigen::Index>(n + i)] = 0.5 * (std::exp(nu.log_var[i] - omega.log_var[i]) - 1.0);
  }
  return g;
}

namespace ad {

/// Per-row KL to the standard normal, (rows x 1).
inline Var kl_rows(Var mu, Var log_var) {
  auto inner = sub(add(square(mu), exp(log_var)), log_var);
  return scale(row_sum(add_scalar(inner, -1.0)), 0.5);
}

}  // namespace ad

/// Draws z = mu + sigma * eps with eps from the noise stream of `seed`; the same
/// draws a taped ELBO evaluation with that seed makes.
inline Tensor sample_z(const VarParams& lambda, std::uint64_t seed) {
  ad::Tape tape(seed);
  return ad::gaussian_sample(tape.constant(lambda.mu), tape.constant(lambda.log_var)).value();
}

/// One stochastic evaluation of the negative ELBO, averaged over the rows of
/// the minibatch. neg_elbo is defined as recon_nll + kl_multiplier * kl.
struct ElboEval {
  double neg_elbo = 0.0;
  double recon_nll = 0.0;
  double kl = 0.0;
  double kl_multiplier = 1.0;
  std::uint64_t noise_seed = 0;

  friend bool operator==(const ElboEval&, const ElboEval&) = default;
};

/// Anything that scores observations under a latent code: returns the
/// per-example -log p(x | z; theta) as a (rows x 1) Var.
template <class L>
concept LatentLikelihood = requires(const L& lik, ad::Tape& tape, const ad::ParamVars& theta, ad::Var z) {
  { lik.neg_log_likelihood(tape, theta, z) } -> std::same_as<ad::Var>;
  { lik.batch_size() } -> std::convertible_to<std::size_t>;
};

/// Loss value and gradients of one objective evaluation.
struct LossGrad {
  double loss = 0.0;
  ElboEval eval;
  std::vector<double> per_example;  // per-row neg ELBO
  Vector d_lambda;                  // VarParams::flatten layout
  ModelParams d_theta;              // empty unless requested
};

/// f(lambda, theta, x) = -ELBO, with x bound inside the likelihood. The value
/// minimized is loss_scale * sum over rows, so per-row gradients do not depend
/// on how many rows share the batch.
template <LatentLikelihood Lik>
class ElboObjective {
 public:
  ElboObjective(const Lik& lik, const ModelParams& theta, double kl_multiplier, double loss_scale = 1.0)
      : lik_(&lik), theta_(&theta), kl_multiplier_(kl_multiplier), loss_scale_(loss_scale) {
    if (!(kl_multiplier >= 0.0 && kl_multiplier <= 1.0))
      throw ConfigError("kl_multiplier must lie in [0, 1], got " + std::to_string(kl_multiplier));
  }

  double kl_multiplier() const { return kl_multiplier_; }
  double loss_scale() const { return loss_scale_; }
  const ModelParams& theta() const { return *theta_; }
  const Lik& likelihood() const { return *lik_; }

  LossGrad evaluate(const VarParams& lambda, std::uint64_t seed, bool want_theta) const {
    return run(lambda, seed, true, want_theta);
  }

  /// Forward only: loss and ELBO terms, no gradients.
  LossGrad value(const VarParams& lambda, std::uint64_t seed) const { return run(lambda, seed, false, false); }

 private:
  LossGrad run(const VarParams& lambda, std::uint64_t seed, bool want_lambda, bool want_theta) const {
    if (lambda.rows() != lik_->batch_size())
      throw ShapeError("ElboObjective: lambda has " + std::to_string(lambda.rows()) + " rows, batch has " +
                       std::to_string(lik_->batch_size()));
    ad::Tape tape(seed);
    auto mu = tape.leaf(lambda.mu, want_lambda);
    auto lv = tape.leaf(lambda.log_var, want_lambda);
    ad::ParamVars theta(tape, *theta_, want_theta);
    auto z = ad::gaussian_sample(mu, lv);
    auto nll = lik_->neg_log_likelihood(tape, theta, z);
    auto kl = ad::kl_rows(mu, lv);
    auto rows = ad::add(nll, ad::scale(kl, kl_multiplier_));
    auto loss = ad::scale(ad::sum(rows), loss_scale_);

    LossGrad out;
    out.loss = loss.value().item();
    const double n = static_cast<double>(lambda.rows());
    out.eval.recon_nll = nll.value().vec().sum() / n;
    out.eval.kl = kl.value().vec().sum() / n;
    out.eval.kl_multiplier = kl_multiplier_;
    out.eval.neg_elbo = out.eval.recon_nll + kl_multiplier_ * out.eval.kl;
    out.eval.noise_seed = seed;
    out.per_example.assign(rows.value().values().begin(), rows.value().values().end());

    if (!want_lambda) return out;
    tape.backward(loss);
    out.d_lambda.resize(static_cast<Eigen::Index>(lambda.flat_size()));
    out.d_lambda << tape.grad(mu).vec(), tape.grad(lv).vec();
    if (want_theta) out.d_theta = theta.gradients();
    return out;
  }

  const Lik* lik_;
  const ModelParams* theta_;
  double kl_multiplier_;
  double loss_scale_;
};

/// Negative ELBO of `x` (bound in `lik`) at lambda, single reparameterized sample.
template <LatentLikelihood Lik>
ElboEval neg_elbo(const VarParams& lambda, const ModelParams& theta, const Lik& lik, std::uint64_t seed,
                  double kl_multiplier) {
  ElboObjective<Lik> f(lik, theta, kl_multiplier);
  return f.value(lambda, seed).eval;
}

}  // namespace savae
