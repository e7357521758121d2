// Command-line driver: oracle sampling, training, evaluation and analyses.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "savae/analysis.hpp"
#include "savae/config.hpp"
#include "savae/data.hpp"
#include "savae/oracle.hpp"
#include "savae/training.hpp"

#ifndef SAVAE_REVISION
#define SAVAE_REVISION "unknown"
#endif

namespace fs = std::filesystem;
using namespace savae;

namespace {

enum ExitCode { kOk = 0, kNumerical = 1, kConfig = 2, kMissing = 3, kInvalid = 4 };

class MissingArtifact : public IoError {
 public:
  using IoError::IoError;
};

struct Options {
  std::string command;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
  std::optional<std::string> regime;
  std::optional<std::size_t> steps;
  std::optional<std::string> mode;
  std::optional<double> temperature;
  std::string checkpoint;
  std::string split = "test";
  std::string target;
};

fs::path out_root() {
  if (const char* e = std::getenv("SAVAE_OUT_ROOT"); e && *e) return e;
  return fs::current_path();
}

fs::path resolve(const std::string& p, const fs::path& base) {
  fs::path q(p);
  return q.is_absolute() ? q : base / q;
}

void log(const std::string& s) { std::cerr << s << std::endl; }

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

class Session {
 public:
  explicit Session(const Options& o) : o_(o) {
    if (o.config.empty()) throw ConfigError("--config is required");
    const fs::path cfg_path(o.config);
    if (!fs::exists(cfg_path)) throw ConfigError("config file not found: " + o.config);
    cfg_ = load_config(cfg_path);
    const auto base = fs::absolute(cfg_path).parent_path();
    if (cfg_.data_dir) cfg_.data_dir = resolve(cfg_.data_dir->string(), base);
    if (cfg_.analysis.tag_map) cfg_.analysis.tag_map = resolve(cfg_.analysis.tag_map->string(), base);
    if (o.seed) cfg_.apply_seed(*o.seed);
    if (o.threads) cfg_.train.threads = std::max<std::size_t>(1, *o.threads);
    if (o.command == "train" && o.regime) cfg_.train.regime = parse_regime(*o.regime);
    if ((o.command == "train" || o.command == "reproduce") && o.steps) cfg_.train.svi.steps = *o.steps;
    if (o.temperature) cfg_.analysis.temperature = *o.temperature;
    if (o.mode) mode_ = parse_mode(*o.mode);
    cfg_.validate();
    out_ = resolve(o.out.empty() ? "runs/" + o.command : o.out, out_root());
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  const fs::path& out() const { return out_; }

  RunManifest manifest() const { return RunManifest(o_.command, cfg_, SAVAE_REVISION); }

  /// Dataset plus, when available, the oracle generator that produced it.
  std::pair<Dataset, std::optional<ModelParams>> corpus(bool need_oracle) const {
    if (cfg_.data_dir) {
      const auto& dir = *cfg_.data_dir;
      if (!fs::is_directory(dir)) throw MissingArtifact("data directory not found: " + dir.string());
      for (const char* f : {"train.txt", "valid.txt", "test.txt"})
        if (!fs::exists(dir / f)) throw MissingArtifact("missing " + (dir / f).string());
      auto ds = data::read_dataset(dir, cfg_.gen_config().vocab);
      std::optional<ModelParams> oracle;
      if (fs::exists(dir / "oracle.ckpt")) oracle = checkpoint::load(dir / "oracle.ckpt");
      if (need_oracle && !oracle) throw MissingArtifact("fixed-generator run needs " + (dir / "oracle.ckpt").string());
      return {std::move(ds), std::move(oracle)};
    }
    SeqGenerator g(cfg_.oracle.generator_config());
    auto oracle = build_oracle(cfg_.oracle);
    auto ds = sample_dataset(g, oracle, cfg_.oracle, cfg_.train.threads);
    return {std::move(ds), std::move(oracle)};
  }

  /// Trained models from --checkpoint or <out>/final.ckpt.
  ModelBundle trained() const {
    const fs::path p = o_.checkpoint.empty() ? out_ / "final.ckpt" : resolve(o_.checkpoint, out_root());
    if (!fs::exists(p)) throw MissingArtifact("checkpoint not found: " + p.string());
    auto all = checkpoint::load(p);
    ModelBundle b;
    b.gen_config = cfg_.gen_config();
    for (const auto& [n, t] : all)
      if (n.starts_with("enc.")) b.enc_config = cfg_.enc_config();
    b.assign(all);
    return b;
  }

  /// Inference mode for analyses: --mode, else the configured regime's own
  /// mode, falling back to random-refine for encoder-free checkpoints.
  InferenceMode mode(const ModelBundle& b) const {
    auto m = mode_.value_or(cfg_.train.default_mode());
    if (!b.enc_config && m != InferenceMode::RandomRefine) {
      if (mode_) throw ConfigError("mode '" + to_string(m) + "' needs an encoder; the checkpoint has none");
      m = InferenceMode::RandomRefine;
    }
    return m;
  }
  std::size_t steps(InferenceMode m) const {
    if (m == InferenceMode::Encoder) return 0;
    return o_.steps.value_or(cfg_.train.eval_steps.value_or(cfg_.train.svi.steps));
  }

  EvalOptions eval_opts(const ModelBundle& b, std::uint64_t stream_id) const {
    auto e = eval_options(cfg_.train, derive_seed(cfg_.seed, stream::kEval, stream_id));
    e.mode = mode(b);
    e.steps = steps(e.mode);
    return e;
  }

  const std::vector<std::vector<int>>& split(const Dataset& ds) const { return ds.split(o_.split); }

 private:
  Options o_;
  ExperimentConfig cfg_;
  fs::path out_;
  std::optional<InferenceMode> mode_;
};

void progress(const std::string& prefix, const EpochRecord& r) {
  log(prefix + "epoch " + std::to_string(r.epoch) + " " + r.split + " neg_elbo " + fmt(r.metrics.neg_elbo) + " kl " +
      fmt(r.metrics.kl) + " lr " + fmt(r.lr, 6));
}

int cmd_synth(const Options& o) {
  Session s(o);
  auto m = s.manifest();
  const auto& spec = s.cfg().oracle;
  SeqGenerator g(spec.generator_config());
  auto oracle = m.timed("oracle", [&] { return build_oracle(spec); });
  auto ds = m.timed("sample", [&] { return sample_dataset(g, oracle, spec, s.cfg().train.threads); });
  fs::create_directories(s.out());
  data::write_dataset(s.out(), ds);
  checkpoint::save(s.out() / "oracle.ckpt", oracle);
  for (const char* f : {"train.txt", "valid.txt", "test.txt", "oracle.ckpt"}) m.add_file(f);
  m.write(s.out() / "synth.manifest.json");
  std::cout << "train " << ds.train.size() << " valid " << ds.valid.size() << " test " << ds.test.size() << " -> "
            << s.out().string() << "\n";
  return kOk;
}

std::vector<std::string> train_files(const fs::path& dir, const fs::path& rel, std::size_t epochs) {
  std::vector<std::string> f;
  for (const char* n : {"metrics.csv", "diagnostics.csv", "final.ckpt"}) f.push_back((rel / n).generic_string());
  for (std::size_t e = 1; e <= epochs; ++e) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03zu.ckpt", e);
    if (fs::exists(dir / "checkpoints" / name)) f.push_back((rel / "checkpoints" / name).generic_string());
  }
  return f;
}

int cmd_train(const Options& o) {
  Session s(o);
  const auto& c = s.cfg();
  auto m = s.manifest();
  auto [ds, oracle] = m.timed("data", [&] { return s.corpus(!c.train.learn_generator); });
  auto bundle = c.initial_models(c.train.regime, c.train.learn_generator ? std::nullopt : oracle);
  const auto res = m.timed("train", [&] {
    return train(bundle, ds, c.train, s.out(), [](const EpochRecord& r) { progress("", r); });
  });
  for (const auto& f : train_files(s.out(), "", c.train.epochs)) m.add_file(f);
  m.write(s.out() / "train.manifest.json");
  std::cout << to_string(c.train.regime) << " test neg_elbo " << fmt(res.test.neg_elbo) << " recon "
            << fmt(res.test.recon) << " kl " << fmt(res.test.kl) << " ppl " << fmt(res.test.ppl, 2) << "\n";
  return kOk;
}

int cmd_eval(const Options& o) {
  Session s(o);
  auto m = s.manifest();
  const auto b = s.trained();
  auto [ds, oracle] = s.corpus(false);
  const auto& seqs = s.split(ds);
  const auto gen = b.generator();
  const auto enc = b.encoder();
  const auto opts = s.eval_opts(b, 3);
  const auto r = m.timed("eval", [&] { return evaluate(gen, enc ? &*enc : nullptr, b.theta, b.phi, seqs, opts); });
  fs::create_directories(s.out());
  const std::string name = "eval_" + o.split + "_" + to_string(opts.mode) + "_K" + std::to_string(opts.steps) + ".csv";
  std::ofstream os(s.out() / name, std::ios::trunc);
  if (!os) throw IoError("cannot write " + (s.out() / name).string());
  os << "split,mode,K,neg_elbo,recon,kl,ppl,examples\n"
     << o.split << ',' << to_string(opts.mode) << ',' << opts.steps << ',' << format_real(r.neg_elbo) << ','
     << format_real(r.recon) << ',' << format_real(r.kl) << ',' << format_real(r.ppl) << ',' << r.examples << '\n';
  m.add_file(name);
  m.write(s.out() / "eval.manifest.json");
  std::cout << o.split << " " << to_string(opts.mode) << " K=" << opts.steps << " neg_elbo " << fmt(r.neg_elbo)
            << " kl " << fmt(r.kl) << " ppl " << fmt(r.ppl, 2) << "\n";
  return kOk;
}

int cmd_landscape(const Options& o) {
  Session s(o);
  const auto& c = s.cfg();
  auto m = s.manifest();
  const auto b = s.trained();
  const auto gen = b.generator();
  const auto enc = b.encoder();
  auto [ds, oracle] = s.corpus(false);
  const auto& seqs = s.split(ds);
  if (c.analysis.landscape_example >= seqs.size())
    throw ConfigError("analysis.landscape_example is past the end of the " + o.split + " split");
  const auto& x = seqs[c.analysis.landscape_example];
  analysis::LandscapeEvaluator f(gen, b.theta, x, c.analysis.landscape_seeds, derive_seed(c.seed, stream::kEval, 4));
  auto grid = m.timed("grid", [&] { return analysis::elbo_landscape(f, c.analysis.grid); });
  const auto K = s.steps(InferenceMode::EncoderRefine);
  const auto svi_cfg = detail::with_steps(c.train.svi, K);
  const double scale = 1.0 / static_cast<double>(c.train.batch_size);
  const auto seed = derive_seed(c.seed, stream::kEval, 5);
  const SeqEncoder* e = enc ? &*enc : nullptr;
  if (e) {
    auto tr = analysis::refine_example(gen, e, b.theta, b.phi, x, InferenceMode::EncoderRefine, svi_cfg, scale,
                                       c.train.svi_init_std, seed);
    grid.points.push_back(analysis::mark(f, grid.grid, "encoder", 0, tr.lambdas.front()));
    analysis::mark_trajectory(grid, f, "encoder-refine", tr);
  }
  auto tr = analysis::refine_example(gen, e, b.theta, b.phi, x, InferenceMode::RandomRefine, svi_cfg, scale,
                                     c.train.svi_init_std, seed);
  analysis::mark_trajectory(grid, f, "random-refine", tr);
  fs::create_directories(s.out());
  analysis::write_landscape_csv(s.out() / "landscape.csv", grid);
  analysis::write_trajectories_csv(s.out() / "trajectories.csv", grid);
  m.add_file("landscape.csv");
  m.add_file("trajectories.csv");
  m.write(s.out() / "landscape.manifest.json");
  const auto [o1, o2] = grid.optimum();
  std::cout << "grid optimum (" << fmt(o1, 2) << ", " << fmt(o2, 2) << ") neg_elbo " << fmt(grid.min_value())
            << " at log_var " << fmt(grid.log_var, 2) << "\n";
  std::string last;
  for (auto it = grid.points.rbegin(); it != grid.points.rend(); ++it)
    if (it->method != last && it->method != "optimum") {
      last = it->method;
      std::cout << it->method << " endpoint (" << fmt(it->mu1, 2) << ", " << fmt(it->mu2, 2) << ") neg_elbo "
                << fmt(it->neg_elbo) << (it->in_range ? "" : " [outside grid]") << "\n";
    }
  return kOk;
}

std::map<int, std::string> read_tag_map(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw MissingArtifact("tag map not found: " + p.string());
  std::map<int, std::string> tags;
  int tok;
  std::string cls;
  while (is >> tok >> cls) tags[tok] = cls;
  return tags;
}

int cmd_saliency(const Options& o) {
  Session s(o);
  const auto& c = s.cfg();
  auto m = s.manifest();
  const auto b = s.trained();
  const auto gen = b.generator();
  const auto enc = b.encoder();
  auto [ds, oracle] = s.corpus(false);
  const auto& all = s.split(ds);
  std::vector<std::vector<int>> seqs(all.begin(),
                                     all.begin() + static_cast<long>(std::min(c.analysis.saliency_examples, all.size())));
  if (seqs.empty()) throw EmptyInput("no sequences to analyse");
  const auto opts = s.eval_opts(b, 6);
  const auto ex = evaluate_examples(gen, enc ? &*enc : nullptr, b.theta, b.phi, seqs, opts);
  std::vector<analysis::SaliencyRecord> recs;
  m.timed("saliency", [&] {
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const auto out = analysis::output_saliency(gen, b.theta, ex[i].lambda, seqs[i], c.analysis.saliency_samples,
                                                 derive_seed(c.seed, stream::kEval, 7, i));
      std::vector<double> in(seqs[i].size(), 0.0);
      if (enc)
        in = analysis::input_saliency(*enc, b.phi, b.theta, seqs[i], c.analysis.saliency_samples,
                                      derive_seed(c.seed, stream::kEval, 8, i));
      for (std::size_t t = 0; t < seqs[i].size(); ++t)
        recs.push_back({i, t, seqs[i][t], out.saliency[t], in[t], out.logprob[t]});
    }
  });
  if (!enc) log("note: checkpoint has no encoder, input saliency written as 0");
  std::optional<std::map<int, std::string>> tags;
  if (c.analysis.tag_map) tags = read_tag_map(*c.analysis.tag_map);
  const auto agg =
      analysis::saliency_aggregates(recs, data::token_counts(ds.train, gen.config().vocab), tags ? &*tags : nullptr);
  if (agg.class_skipped) log("note: no tag map configured, class aggregation skipped");
  fs::create_directories(s.out());
  analysis::write_saliency_csv(s.out() / "saliency.csv", recs);
  analysis::write_aggregates_csv(s.out() / "saliency_aggregates.csv", agg);
  m.add_file("saliency.csv");
  m.add_file("saliency_aggregates.csv");
  m.write(s.out() / "saliency.manifest.json");
  std::cout << "tokens " << agg.tokens << " corr(out_sal, logprob) " << fmt(agg.corr_out_logprob, 3) << "\n";
  for (const auto& [pos, bk] : agg.by_position)
    std::cout << "position " << pos << " out " << fmt(bk.out_mean) << " in " << fmt(bk.in_mean) << "\n";
  return kOk;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

int cmd_generate(const Options& o) {
  Session s(o);
  const auto& c = s.cfg();
  auto m = s.manifest();
  const auto b = s.trained();
  const auto gen = b.generator();
  const auto enc = b.encoder();
  auto [ds, oracle] = s.corpus(false);
  const auto& all = s.split(ds);
  std::vector<std::vector<int>> seqs(
      all.begin(), all.begin() + static_cast<long>(std::min(c.analysis.generate_examples, all.size())));
  const auto ex = evaluate_examples(gen, enc ? &*enc : nullptr, b.theta, b.phi, seqs, s.eval_opts(b, 9));
  const std::size_t S = c.analysis.generate_samples, d = gen.config().latent;
  const double temp = c.analysis.temperature;
  fs::create_directories(s.out());
  std::ofstream os(s.out() / "generate.csv", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (s.out() / "generate.csv").string());
  os << "source,example,sample,tokens\n";
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    NoiseStream rng(derive_seed(c.seed, stream::kEval, 10, i));
    Tensor z(Shape{S, d});
    for (std::size_t k = 0; k < S; ++k)
      for (std::size_t j = 0; j < d; ++j)
        z.at(k, j) = ex[i].lambda.mu[j] + std::exp(0.5 * ex[i].lambda.log_var[j]) * rng.normal();
    const auto samples = gen.sample(b.theta, z, seqs[i].size(), rng, temp);
    os << "input," << i << ",0," << join(seqs[i]) << '\n';
    std::cout << "x[" << i << "]  " << join(seqs[i]) << "\n";
    for (std::size_t k = 0; k < S; ++k) {
      os << "posterior," << i << ',' << k << ',' << join(samples[k]) << '\n';
      std::cout << "  q sample " << k << ": " << join(samples[k]) << "\n";
    }
  }
  NoiseStream rng(derive_seed(c.seed, stream::kEval, 11));
  Tensor z(Shape{S, d});
  for (auto& v : z.values()) v = rng.normal();
  const std::size_t len = seqs.empty() ? c.oracle.length : seqs.front().size();
  const auto prior = gen.sample(b.theta, z, len, rng, temp);
  for (std::size_t k = 0; k < S; ++k) {
    os << "prior,," << k << ',' << join(prior[k]) << '\n';
    std::cout << "prior sample " << k << ": " << join(prior[k]) << "\n";
  }
  m.add_file("generate.csv");
  m.write(s.out() / "generate.manifest.json");
  return kOk;
}

int cmd_reproduce(const Options& o) {
  if (o.target != "table1") throw ConfigError("reproduce: unknown target '" + o.target + "' (expected table1)");
  Session s(o);
  const auto& c = s.cfg();
  auto m = s.manifest();
  std::vector<Regime> regimes = c.table1.regimes;
  if (o.regime) {
    regimes.clear();
    for (const auto& n : split_list(*o.regime)) regimes.push_back(parse_regime(n));
    if (regimes.empty()) throw ConfigError("--regime lists no regimes");
  }
  bool need_oracle = false;
  for (const auto& col : c.table1.columns) need_oracle |= col == "oracle";
  auto [ds, oracle] = m.timed("data", [&] { return s.corpus(need_oracle); });
  if (need_oracle && !(c.gen_config() == c.oracle.generator_config()) && !c.data_dir)
    throw ConfigError("the oracle column needs the model architecture to match the oracle");
  fs::create_directories(s.out());
  if (!c.data_dir) {
    data::write_dataset(s.out() / "data", ds);
    checkpoint::save(s.out() / "data" / "oracle.ckpt", *oracle);
    for (const char* f : {"train.txt", "valid.txt", "test.txt", "oracle.ckpt"}) m.add_file(fs::path("data") / f);
  }

  std::ofstream table(s.out() / "table1.csv", std::ios::trunc);
  if (!table) throw IoError("cannot write " + (s.out() / "table1.csv").string());
  table << "column,regime,neg_elbo,recon,kl,ppl\n";
  std::cout << "column   regime       neg_elbo   recon      kl\n";
  if (oracle) {
    SeqGenerator og(c.oracle.generator_config());
    const double nll = m.timed("true_nll", [&] {
      return true_nll_estimate(og, *oracle, ds.test, c.table1.true_nll_samples, derive_seed(c.seed, stream::kEval, 12),
                               c.train.threads);
    });
    table << "data,true_nll," << format_real(nll) << ",,,\n";
    std::cout << "data     true_nll     " << fmt(nll, 3) << "\n";
  }
  for (const auto& col : c.table1.columns) {
    const bool learn = col == "learned";
    for (auto r : regimes) {
      auto tc = c.train;
      tc.regime = r;
      tc.learn_generator = learn;
      if (r == Regime::Svi) tc.eval_mode.reset();
      const fs::path rel = fs::path(col) / to_string(r);
      const std::string prefix = col + "/" + to_string(r) + " ";
      auto bundle = c.initial_models(r, learn ? std::nullopt : oracle);
      const auto res = m.timed(rel.generic_string(), [&] {
        return train(bundle, ds, tc, s.out() / rel, [&](const EpochRecord& e) { progress(prefix, e); });
      });
      for (const auto& f : train_files(s.out() / rel, rel, tc.epochs)) m.add_file(f);
      table << col << ',' << to_string(r) << ',' << format_real(res.test.neg_elbo) << ','
            << format_real(res.test.recon) << ',' << format_real(res.test.kl) << ',' << format_real(res.test.ppl)
            << '\n';
      table.flush();
      char line[128];
      std::snprintf(line, sizeof line, "%-8s %-12s %-10.3f %-10.3f %.3f", col.c_str(), to_string(r).c_str(),
                    res.test.neg_elbo, res.test.recon, res.test.kl);
      std::cout << line << std::endl;
    }
  }
  m.add_file("table1.csv");
  m.write(s.out() / "reproduce.manifest.json");
  return kOk;
}

int run(const Options& o) {
  if (o.command == "synth") return cmd_synth(o);
  if (o.command == "train") return cmd_train(o);
  if (o.command == "eval") return cmd_eval(o);
  if (o.command == "landscape") return cmd_landscape(o);
  if (o.command == "saliency") return cmd_saliency(o);
  if (o.command == "generate") return cmd_generate(o);
  if (o.command == "reproduce") return cmd_reproduce(o);
  throw ConfigError("unknown command '" + o.command + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-amortized variational inference experiments"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)")->required();
    sub->add_option("--seed", o.seed, "master seed (overrides the config)");
    sub->add_option("--out", o.out, "output directory, relative to $SAVAE_OUT_ROOT");
    sub->add_option("--threads", o.threads, "worker cap");
  };
  auto analysis_flags = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint (default <out>/final.ckpt)");
    sub->add_option("--split", o.split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));
    sub->add_option("--mode", o.mode, "encoder, encoder-refine or random-refine");
    sub->add_option("--steps", o.steps, "SVI steps K' at evaluation");
  };
  auto* synth = app.add_subcommand("synth", "sample the oracle and write the dataset");
  common(synth);
  auto* tr = app.add_subcommand("train", "train one regime");
  common(tr);
  tr->add_option("--regime", o.regime, "vae, svi, vae_svi, vae_svi_kl or sa_vae");
  tr->add_option("--steps", o.steps, "SVI steps K");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  common(ev);
  analysis_flags(ev);
  auto* land = app.add_subcommand("landscape", "neg-ELBO grid over a 2-d latent with refinement paths");
  common(land);
  analysis_flags(land);
  auto* sal = app.add_subcommand("saliency", "output and input saliency");
  common(sal);
  analysis_flags(sal);
  auto* gen = app.add_subcommand("generate", "sample from the posterior and the prior");
  common(gen);
  analysis_flags(gen);
  gen->add_option("--temperature", o.temperature, "sampling temperature");
  auto* rep = app.add_subcommand("reproduce", "run a whole experiment");
  common(rep);
  rep->add_option("target", o.target, "table1")->required();
  rep->add_option("--regime", o.regime, "comma separated subset of regimes");
  rep->add_option("--steps", o.steps, "SVI steps K");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  for (auto* sub : app.get_subcommands()) o.command = sub->get_name();

  try {
    return run(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const VocabError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kMissing;
  } catch (const DimensionError& e) {
    std::cerr << "invalid request: " << e.what() << "\n";
    return kInvalid;
  } catch (const EmptyInput& e) {
    std::cerr << "invalid request: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  }
}
