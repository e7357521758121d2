#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "savae/models.hpp"
#include "savae/parallel.hpp"
#include "savae/svi.hpp"
#include "savae/training.hpp"
#include "savae/variational.hpp"

namespace savae::analysis {

struct GridSpec {
  double lo = -3.0;
  double hi = 3.0;
  std::size_t n = 61;

  double axis(std::size_t i) const {
    return n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  bool contains(double a, double b) const { return a >= lo && a <= hi && b >= lo && b <= hi; }
};

/// Monte Carlo neg-ELBO of one sequence at many 2-d variational parameters,
/// with the same noise draws at every parameter (common random numbers).
class LandscapeEvaluator {
 public:
  LandscapeEvaluator(const SeqGenerator& gen, const ModelParams& theta, const std::vector<int>& x,
                     std::size_t n_seeds, std::uint64_t seed)
      : gen_(&gen), theta_(&theta), x_(x) {
    if (gen.config().latent != 2)
      throw DimensionError("landscape needs a 2-d latent space, model has d = " + std::to_string(gen.config().latent));
    if (n_seeds == 0) throw ConfigError("landscape needs at least one noise seed");
    if (x.empty()) throw EmptyInput("landscape of an empty sequence");
    for (std::size_t s = 0; s < n_seeds; ++s) {
      NoiseStream rng(derive_seed(seed, s));
      eps_.push_back({rng.normal(), rng.normal()});
    }
  }

  std::size_t n_seeds() const { return eps_.size(); }

  /// neg-ELBO at each row of (mu, log_var), both (n x 2).
  std::vector<double> operator()(const Tensor& mu, const Tensor& log_var) const {
    const std::size_t n = mu.rows();
    TokenBatch xs(std::vector<std::vector<int>>(n, x_));
    SeqLikelihood lik(*gen_, xs);
    lik.cache(*theta_);
    std::vector<double> out(n, 0.0);
    Tensor z(Shape{n, 2});
    for (const auto& e : eps_) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < 2; ++j)
          z.at(r, j) = mu.at(r, j) + std::exp(0.5 * log_var.at(r, j)) * e[j];
      ad::Tape tape;
      ad::ParamVars th(tape, *theta_, false);
      const auto nll = lik.neg_log_likelihood(tape, th, tape.constant(z)).value();
      for (std::size_t r = 0; r < n; ++r) out[r] += nll[r];
    }
    for (std::size_t r = 0; r < n; ++r) {
      double kl = 0.0;
      for (std::size_t j = 0; j < 2; ++j) {
        const double m = mu.at(r, j), lv = log_var.at(r, j);
        kl += 0.5 * (m * m + std::exp(lv) - lv - 1.0);
      }
      out[r] = out[r] / static_cast<double>(eps_.size()) + kl;
    }
    return out;
  }

  double at(const VarParams& lam) const { return (*this)(lam.mu, lam.log_var).front(); }

 private:
  const SeqGenerator* gen_;
  const ModelParams* theta_;
  std::vector<int> x_;
  std::vector<std::array<double, 2>> eps_;
};

struct MarkedPoint {
  std::string method;  // vae, svi, sa_vae, optimum, ...
  std::size_t step = 0;
  double mu1 = 0.0, mu2 = 0.0;
  double neg_elbo = 0.0;  // at the point's own full lambda
  bool in_range = true;
};

struct LandscapeGrid {
  GridSpec grid;
  double log_var = 0.0;        // shared fixed log sigma^2 of the slice
  std::vector<double> values;  // values[i * n + j] at (axis(i), axis(j))
  std::size_t argmin = 0;
  std::vector<MarkedPoint> points;

  double value(std::size_t i, std::size_t j) const { return values[i * grid.n + j]; }
  double min_value() const { return values[argmin]; }
  std::pair<double, double> optimum() const { return {grid.axis(argmin / grid.n), grid.axis(argmin % grid.n)}; }
};

inline std::vector<double> grid_values(const LandscapeEvaluator& f, const GridSpec& g, double log_var) {
  if (g.n == 0 || !(g.hi >= g.lo)) throw ConfigError("landscape grid needs n >= 1 and hi >= lo");
  const std::size_t n = g.n * g.n;
  Tensor mu(Shape{n, 2}), lv = Tensor::filled(Shape{n, 2}, log_var);
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = 0; j < g.n; ++j) {
      mu.at(i * g.n + j, 0) = g.axis(i);
      mu.at(i * g.n + j, 1) = g.axis(j);
    }
  return f(mu, lv);
}

/// Grid over the means at a fixed shared log variance. Without an explicit
/// log variance the slice uses the best value of a coarse 1-d search at the
/// optimum of a first grid at log variance 0.
inline LandscapeGrid elbo_landscape(const LandscapeEvaluator& f, const GridSpec& g,
                                    std::optional<double> log_var = std::nullopt) {
  LandscapeGrid out;
  out.grid = g;
  auto argmin = [](const std::vector<double>& v) {
    return static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin());
  };
  if (log_var) {
    out.log_var = *log_var;
  } else {
    const auto first = grid_values(f, g, 0.0);
    const auto a = argmin(first);
    const std::size_t m = 41;
    Tensor mu(Shape{m, 2}), lv(Shape{m, 2});
    for (std::size_t k = 0; k < m; ++k) {
      mu.at(k, 0) = g.axis(a / g.n);
      mu.at(k, 1) = g.axis(a % g.n);
      lv.at(k, 0) = lv.at(k, 1) = -8.0 + 10.0 * static_cast<double>(k) / (m - 1);  // [-8, 2]
    }
    const auto line = f(mu, lv);
    out.log_var = lv.at(argmin(line), 0);
  }
  out.values = grid_values(f, g, out.log_var);
  out.argmin = argmin(out.values);
  const auto [o1, o2] = out.optimum();
  out.points.push_back({"optimum", 0, o1, o2, out.min_value(), true});
  return out;
}

inline MarkedPoint mark(const LandscapeEvaluator& f, const GridSpec& g, const std::string& method,
                        std::size_t step, const VarParams& lam) {
  const double m1 = lam.mu[0], m2 = lam.mu[1];
  return {method, step, m1, m2, f.at(lam), g.contains(m1, m2)};
}

/// Adds every iterate of a refinement trace (row `row` of the batch).
inline void mark_trajectory(LandscapeGrid& grid, const LandscapeEvaluator& f, const std::string& method,
                            const svi::Trace& tr, std::size_t row = 0) {
  for (std::size_t k = 0; k < tr.lambdas.size(); ++k)
    grid.points.push_back(mark(f, grid.grid, method, k, tr.lambdas[k].row(row)));
}

/// Refinement of a single sequence as evaluation would run it: lambda_0 from
/// `init`, then cfg.steps SVI updates (none for Encoder).
inline svi::Trace refine_example(const SeqGenerator& gen, const SeqEncoder* enc, const ModelParams& theta,
                                 const ModelParams& phi, const std::vector<int>& x, InferenceMode init,
                                 svi::Config cfg, double loss_scale, double init_std, std::uint64_t seed) {
  const TokenBatch xb({x});
  if (init == InferenceMode::Encoder) cfg = detail::with_steps(cfg, 0);
  SeqLikelihood lik(gen, xb);
  lik.cache(theta);
  ElboObjective f(lik, theta, 1.0, loss_scale);
  return svi::forward(initial_lambda(gen, enc, theta, phi, xb, init, init_std, seed), f, cfg, seed);
}

inline void write_landscape_csv(const std::filesystem::path& path, const LandscapeGrid& g) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "# fixed_log_var=" << format_real(g.log_var) << "\n";
  os << "mu1,mu2,neg_elbo\n";
  for (std::size_t i = 0; i < g.grid.n; ++i)
    for (std::size_t j = 0; j < g.grid.n; ++j)
      os << format_real(g.grid.axis(i)) << ',' << format_real(g.grid.axis(j)) << ',' << format_real(g.value(i, j))
         << '\n';
}

inline void write_trajectories_csv(const std::filesystem::path& path, const LandscapeGrid& g) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "step,mu1,mu2,method,neg_elbo,in_range\n";
  for (const auto& p : g.points)
    os << p.step << ',' << format_real(p.mu1) << ',' << format_real(p.mu2) << ',' << p.method << ','
       << format_real(p.neg_elbo) << ',' << (p.in_range ? 1 : 0) << '\n';
}

struct CurveRow {
  std::string regime;
  InferenceMode init = InferenceMode::EncoderRefine;
  std::size_t steps = 0;
  double bound = 0.0;  // mean neg-ELBO per example
  double kl = 0.0;
  double ppl = 0.0;
};

/// Mean bound of one model under each (init, K') combination. Random-init
/// rows use the same lambda_0 draws for every K'.
inline std::vector<CurveRow> refinement_curves(const std::string& regime, const SeqGenerator& gen,
                                               const SeqEncoder* enc, const ModelParams& theta,
                                               const ModelParams& phi, const std::vector<std::vector<int>>& data,
                                               const std::vector<std::size_t>& steps,
                                               const std::vector<InferenceMode>& inits, EvalOptions base) {
  std::vector<CurveRow> out;
  for (auto init : inits) {
    if (init == InferenceMode::Encoder) throw ConfigError("refinement curves take encoder-refine or random-refine");
    if (init == InferenceMode::EncoderRefine && !enc) continue;
    for (auto k : steps) {
      base.mode = init;
      base.steps = k;
      const auto m = evaluate(gen, enc, theta, phi, data, base);
      out.push_back({regime, init, k, m.neg_elbo, m.kl, m.ppl});
    }
  }
  return out;
}

inline void write_curves_csv(const std::filesystem::path& path, const std::vector<CurveRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "regime,init,K,bound,kl,ppl\n";
  for (const auto& r : rows)
    os << r.regime << ',' << to_string(r.init) << ',' << r.steps << ',' << format_real(r.bound) << ','
       << format_real(r.kl) << ',' << format_real(r.ppl) << '\n';
}

/// z = mu + sigma * eps for n_samples fixed noise draws, shape (n_samples x d).
inline std::vector<Tensor> posterior_noise(std::size_t n_samples, std::size_t d, std::uint64_t seed) {
  std::vector<Tensor> out;
  for (std::size_t s = 0; s < n_samples; ++s) {
    NoiseStream rng(derive_seed(seed, s));
    Tensor e(Shape{1, d});
    for (auto& v : e.values()) v = rng.normal();
    out.push_back(std::move(e));
  }
  return out;
}

struct TokenSaliency {
  std::vector<double> saliency;  // per position
  std::vector<double> logprob;   // per position, averaged over the same samples
};

/// Per position t: mean over z ~ q(lambda) of || d log p(x_t | x_<t, z) / dz ||.
inline TokenSaliency output_saliency(const SeqGenerator& gen, const ModelParams& theta, const VarParams& lambda,
                                     const std::vector<int>& x, std::size_t n_samples, std::uint64_t seed) {
  if (x.empty()) throw EmptyInput("saliency of an empty sequence");
  if (n_samples == 0) throw ConfigError("saliency needs at least one sample");
  const std::size_t T = x.size(), d = lambda.dim();
  // Row t of the replicated batch carries the gradient of token t only.
  TokenBatch xs(std::vector<std::vector<int>>(T, x));
  Tensor mask(Shape{T * T, 1});
  for (std::size_t t = 0; t < T; ++t) mask[t * T + t] = 1.0;
  TokenSaliency out{std::vector<double>(T, 0.0), std::vector<double>(T, 0.0)};
  for (const auto& e : posterior_noise(n_samples, d, seed)) {
    Tensor z(Shape{T, d});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) z.at(t, j) = lambda.mu[j] + std::exp(0.5 * lambda.log_var[j]) * e[j];
    ad::Tape tape;
    ad::ParamVars th(tape, theta, false);
    auto zv = tape.leaf(z);
    auto nll = gen.token_nll(tape, th, xs, zv);
    tape.backward(ad::sum(ad::mul(nll, tape.constant(mask))));
    const auto g = tape.grad(zv);
    for (std::size_t t = 0; t < T; ++t) {
      out.saliency[t] += g.mat().row(static_cast<Eigen::Index>(t)).norm();
      out.logprob[t] -= nll.value()[t * T + t];
    }
  }
  for (std::size_t t = 0; t < T; ++t) {
    out.saliency[t] /= static_cast<double>(n_samples);
    out.logprob[t] /= static_cast<double>(n_samples);
  }
  return out;
}

/// Per position t: || E_{z ~ q(enc(x))} d||z|| / dw_t || with w_t the encoder
/// embedding consumed at t.
inline std::vector<double> input_saliency(const SeqEncoder& enc, const ModelParams& phi, const ModelParams& theta,
                                          const std::vector<int>& x, std::size_t n_samples, std::uint64_t seed) {
  if (x.empty()) throw EmptyInput("saliency of an empty sequence");
  if (n_samples == 0) throw ConfigError("saliency needs at least one sample");
  const std::size_t T = x.size(), d = enc.config().latent;
  const Tensor& table = enc.config().share_embedding ? theta.at("gen.emb") : phi.at("enc.emb");
  ad::Tape tape;
  ad::ParamVars ph(tape, phi, false);
  std::vector<ad::Var> w;
  for (std::size_t t = 0; t < T; ++t) {
    Tensor row(Shape{1, table.cols()});
    row.mat() = table.mat().row(x[t]);
    w.push_back(tape.leaf(row));
  }
  auto lam = enc.encode_embedded(tape, ph, w);
  auto mu = ad::slice(lam, 1, 0, d), sd = ad::exp(ad::scale(ad::slice(lam, 1, d, 2 * d), 0.5));
  std::vector<ad::Var> norms;
  for (const auto& e : posterior_noise(n_samples, d, seed)) {
    auto z = ad::add(mu, ad::mul(sd, tape.constant(e)));
    norms.push_back(ad::sqrt(ad::sum(ad::square(z))));
  }
  tape.backward(ad::scale(ad::sum(ad::concat(norms, 0)), 1.0 / static_cast<double>(n_samples)));
  std::vector<double> out(T);
  for (std::size_t t = 0; t < T; ++t) out[t] = tape.grad(w[t]).vec().norm();
  return out;
}

struct SaliencyRecord {
  std::size_t example = 0;
  std::size_t position = 0;
  int token = 0;
  double out_sal = 0.0;
  double in_sal = 0.0;
  double logprob = 0.0;
};

struct Bucket {
  double out_mean = 0.0;
  double in_mean = 0.0;
  std::size_t count = 0;
};

struct SaliencyAggregates {
  std::map<long, Bucket> by_position;
  std::map<long, Bucket> by_log2_frequency;  // floor(log2(count))
  std::map<long, Bucket> by_logprob;         // floor(log-likelihood), 1-nat bins
  std::map<std::string, Bucket> by_class;    // empty without a tag map
  double corr_out_logprob = 0.0;             // Pearson
  std::size_t tokens = 0;
  bool class_skipped = false;
};

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const auto n = static_cast<double>(a.size());
  if (a.size() < 2) return 0.0;
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

/// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](auto x, auto y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  return pearson(ranks(a), ranks(b));
}

inline SaliencyAggregates saliency_aggregates(const std::vector<SaliencyRecord>& recs,
                                              const std::vector<std::size_t>& token_counts,
                                              const std::map<int, std::string>* tags = nullptr) {
  SaliencyAggregates out;
  out.tokens = recs.size();
  out.class_skipped = tags == nullptr;
  auto add = [](Bucket& b, const SaliencyRecord& r) {
    b.out_mean += r.out_sal;
    b.in_mean += r.in_sal;
    ++b.count;
  };
  std::vector<double> sal, lp;
  for (const auto& r : recs) {
    add(out.by_position[static_cast<long>(r.position)], r);
    const auto c = static_cast<std::size_t>(r.token) < token_counts.size() ? token_counts[r.token] : 0;
    add(out.by_log2_frequency[c ? static_cast<long>(std::floor(std::log2(static_cast<double>(c)))) : -1], r);
    add(out.by_logprob[static_cast<long>(std::floor(r.logprob))], r);
    if (tags) {
      auto it = tags->find(r.token);
      add(out.by_class[it == tags->end() ? "UNK" : it->second], r);
    }
    sal.push_back(r.out_sal);
    lp.push_back(r.logprob);
  }
  auto finish = [](auto& m) {
    for (auto& [_, b] : m) {
      b.out_mean /= static_cast<double>(b.count);
      b.in_mean /= static_cast<double>(b.count);
    }
  };
  finish(out.by_position);
  finish(out.by_log2_frequency);
  finish(out.by_logprob);
  finish(out.by_class);
  out.corr_out_logprob = pearson(sal, lp);
  return out;
}

inline void write_saliency_csv(const std::filesystem::path& path, const std::vector<SaliencyRecord>& recs) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "example,position,token,out_sal,in_sal,logprob\n";
  for (const auto& r : recs)
    os << r.example << ',' << r.position << ',' << r.token << ',' << format_real(r.out_sal) << ','
       << format_real(r.in_sal) << ',' << format_real(r.logprob) << '\n';
}

inline void write_aggregates_csv(const std::filesystem::path& path, const SaliencyAggregates& a) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "axis,bucket,out_mean,in_mean,count\n";
  auto dump = [&](const char* axis, const auto& m) {
    for (const auto& [k, b] : m)
      os << axis << ',' << k << ',' << format_real(b.out_mean) << ',' << format_real(b.in_mean) << ',' << b.count
         << '\n';
  };
  dump("position", a.by_position);
  dump("log2_frequency", a.by_log2_frequency);
  dump("logprob", a.by_logprob);
  dump("class", a.by_class);
}

}  // namespace savae::analysis
