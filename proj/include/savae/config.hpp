#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "savae/analysis.hpp"
#include "savae/oracle.hpp"
#include "savae/training.hpp"

namespace savae {

using json = nlohmann::ordered_json;

/// Architecture of the models trained on a corpus. Zero dims fall back to
/// the oracle's.
struct ModelSpec {
  std::size_t vocab = 0;
  std::size_t latent = 0;
  std::size_t embed = 0;
  std::size_t hidden = 0;
  Wiring wiring = Wiring::OutputLayer;
  std::size_t enc_embed = 0;
  std::size_t enc_hidden = 0;
  bool share_embedding = false;
  double init_scale = 0.1;
};

struct AnalysisSpec {
  analysis::GridSpec grid;
  std::size_t landscape_seeds = 8;
  std::size_t landscape_example = 0;  // index into the test split
  std::vector<std::size_t> curve_steps{0, 10, 20, 40};
  std::size_t curve_examples = 0;  // 0: whole test split
  std::size_t saliency_samples = 5;
  std::size_t saliency_examples = 20;
  std::optional<std::filesystem::path> tag_map;
  std::size_t generate_examples = 5;
  std::size_t generate_samples = 3;
  double temperature = 1.0;
};

struct Table1Spec {
  std::vector<Regime> regimes{Regime::Vae, Regime::Svi, Regime::VaeSvi, Regime::VaeSviKl, Regime::SaVae};
  std::vector<std::string> columns{"oracle", "learned"};
  std::size_t true_nll_samples = 1000;
};

/// One experiment: corpus, models, training schedule and analysis settings.
/// Every random stream is derived from `seed`.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  OracleSpec oracle;
  std::optional<std::filesystem::path> data_dir;  // token files instead of sampling the oracle
  ModelSpec model;
  TrainConfig train;
  AnalysisSpec analysis;
  Table1Spec table1;

  GenConfig gen_config() const {
    return {model.vocab ? model.vocab : oracle.vocab, model.embed ? model.embed : oracle.embed,
            model.hidden ? model.hidden : oracle.hidden, model.latent ? model.latent : oracle.latent, model.wiring};
  }
  EncConfig enc_config() const {
    const auto g = gen_config();
    return {g.vocab, model.enc_embed ? model.enc_embed : g.embed, model.enc_hidden ? model.enc_hidden : g.hidden,
            g.latent, model.share_embedding};
  }

  /// Oracle, training and init seeds all follow the master seed.
  void apply_seed(std::uint64_t s) {
    seed = s;
    oracle.seed = s;
    train.seed = s;
  }

  /// Fresh (untrained) models for a regime; `generator` replaces the learned
  /// initialization when the generator is held fixed.
  ModelBundle initial_models(Regime r, const std::optional<ModelParams>& generator = std::nullopt) const {
    ModelBundle b;
    b.gen_config = gen_config();
    SeqGenerator g(b.gen_config);
    if (generator && !generator->same_layout(g.zeros()))
      throw ConfigError("the fixed generator does not match the configured model architecture");
    b.theta = generator ? *generator : g.init_learned(derive_seed(seed, stream::kInit, 1), model.init_scale);
    if (uses_encoder(r)) {
      b.enc_config = enc_config();
      b.phi = SeqEncoder(*b.enc_config).init(derive_seed(seed, stream::kInit, 2), model.init_scale);
    }
    return b;
  }

  void validate() const {
    oracle.validate();
    train.validate();
    const auto g = gen_config();
    SeqGenerator{g};
    SeqEncoder{enc_config()};
    if (model.share_embedding && enc_config().embed != g.embed)
      throw ConfigError("model: a shared embedding needs equal encoder and generator embed sizes");
    if (!(model.init_scale > 0.0)) throw ConfigError("model: init_scale must be > 0");
    if (analysis.landscape_seeds == 0) throw ConfigError("analysis: landscape_seeds must be positive");
    if (analysis.grid.n == 0 || !(analysis.grid.hi > analysis.grid.lo)) throw ConfigError("analysis: bad grid");
    if (analysis.saliency_samples == 0) throw ConfigError("analysis: saliency_samples must be positive");
    if (!(analysis.temperature > 0.0)) throw ConfigError("analysis: temperature must be > 0");
    if (table1.regimes.empty()) throw ConfigError("table1: no regimes");
    for (const auto& c : table1.columns)
      if (c != "oracle" && c != "learned") throw ConfigError("table1: unknown column '" + c + "'");
  }
};

namespace config_detail {

/// Reads one JSON object, remembering which keys were used so that typos
/// surface as errors instead of silently falling back to defaults.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        const auto& v = j_.at(key);
        if (!v.is_number_integer() || (!v.is_number_unsigned() && v.template get<long long>() < 0)) throw ConfigError(where(key) + " must be a nonnegative integer");
      }
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }
  template <class T>
  std::optional<T> optional(const char* key) {
    if (!j_.contains(key)) {
      seen_.insert(key);
      return std::nullopt;
    }
    T v{};
    get(key, v);
    return v;
  }
  template <class F>
  void with(const char* key, F&& f) {
    seen_.insert(key);
    if (j_.contains(key)) f(Reader(j_.at(key), where(key)));
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key " + where(k.c_str()));
  }

 private:
  std::string where(const char* key = nullptr) const {
    if (!key) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline Wiring parse_wiring(const std::string& s) {
  if (s == "output") return Wiring::OutputLayer;
  if (s == "hidden") return Wiring::HiddenInit;
  throw ConfigError("unknown wiring '" + s + "' (expected output or hidden)");
}
inline std::string to_string(Wiring w) { return w == Wiring::OutputLayer ? "output" : "hidden"; }

}  // namespace config_detail

inline ExperimentConfig parse_config(const json& j) {
  using config_detail::Reader;
  ExperimentConfig c;
  Reader r(j, "");
  r.get("seed", c.seed);
  c.apply_seed(c.seed);
  r.with("oracle", [&](Reader o) {
    o.get("vocab", c.oracle.vocab);
    o.get("embed", c.oracle.embed);
    o.get("hidden", c.oracle.hidden);
    o.get("length", c.oracle.length);
    o.get("latent", c.oracle.latent);
    o.get("narrow", c.oracle.narrow);
    o.get("wide", c.oracle.wide);
    o.get("n_train", c.oracle.n_train);
    o.get("n_valid", c.oracle.n_valid);
    o.get("n_test", c.oracle.n_test);
    o.finish();
  });
  if (auto d = r.optional<std::string>("data_dir")) c.data_dir = *d;
  r.with("model", [&](Reader m) {
    m.get("vocab", c.model.vocab);
    m.get("latent", c.model.latent);
    m.get("embed", c.model.embed);
    m.get("hidden", c.model.hidden);
    std::string wiring = config_detail::to_string(c.model.wiring);
    m.get("wiring", wiring);
    c.model.wiring = config_detail::parse_wiring(wiring);
    m.with("encoder", [&](Reader e) {
      e.get("embed", c.model.enc_embed);
      e.get("hidden", c.model.enc_hidden);
      e.get("share_embedding", c.model.share_embedding);
      e.finish();
    });
    m.get("init_scale", c.model.init_scale);
    m.finish();
  });
  r.with("train", [&](Reader t) {
    auto& tc = c.train;
    std::string regime = to_string(tc.regime);
    t.get("regime", regime);
    tc.regime = parse_regime(regime);
    t.get("learn_generator", tc.learn_generator);
    t.get("epochs", tc.epochs);
    t.get("batch_size", tc.batch_size);
    t.get("grad_clip", tc.grad_clip);
    t.with("lr", [&](Reader l) {
      l.get("initial", tc.lr.initial);
      l.get("decay", tc.lr.decay);
      l.get("lock_epochs", tc.lr.lock_epochs);
      l.finish();
    });
    t.with("kl_anneal", [&](Reader k) {
      k.get("enabled", tc.kl_anneal.enabled);
      k.get("start", tc.kl_anneal.start);
      k.get("epochs", tc.kl_anneal.epochs);
      k.finish();
    });
    t.with("svi", [&](Reader s) {
      s.get("steps", tc.svi.steps);
      s.get("learning_rate", tc.svi.learning_rate);
      s.get("momentum", tc.svi.momentum);
      double clip = tc.svi.clip;
      s.get("clip", clip);  // 0 disables clipping
      tc.svi.clip = clip == 0.0 ? svi::kNoClip : clip;
      s.get("hvp_epsilon", tc.svi.hvp_epsilon);
      s.get("step_weights", tc.svi.step_weights);
      s.finish();
    });
    t.get("svi_init_std", tc.svi_init_std);
    if (auto m = t.optional<std::string>("eval_mode")) tc.eval_mode = parse_mode(*m);
    tc.eval_steps = t.optional<std::size_t>("eval_steps");
    t.get("eval_batch_size", tc.eval_batch_size);
    t.get("threads", tc.threads);
    t.finish();
  });
  r.with("analysis", [&](Reader a) {
    auto& an = c.analysis;
    a.with("grid", [&](Reader g) {
      g.get("lo", an.grid.lo);
      g.get("hi", an.grid.hi);
      g.get("n", an.grid.n);
      g.finish();
    });
    a.get("landscape_seeds", an.landscape_seeds);
    a.get("landscape_example", an.landscape_example);
    a.get("curve_steps", an.curve_steps);
    a.get("curve_examples", an.curve_examples);
    a.get("saliency_samples", an.saliency_samples);
    a.get("saliency_examples", an.saliency_examples);
    if (auto p = a.optional<std::string>("tag_map")) an.tag_map = *p;
    a.get("generate_examples", an.generate_examples);
    a.get("generate_samples", an.generate_samples);
    a.get("temperature", an.temperature);
    a.finish();
  });
  r.with("table1", [&](Reader t) {
    if (auto names = t.optional<std::vector<std::string>>("regimes")) {
      c.table1.regimes.clear();
      for (const auto& n : *names) c.table1.regimes.push_back(parse_regime(n));
    }
    t.get("columns", c.table1.columns);
    t.get("true_nll_samples", c.table1.true_nll_samples);
    t.finish();
  });
  r.finish();
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

/// Canonical form of the effective configuration (all defaults filled in).
inline json to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  json j;
  j["seed"] = c.seed;
  j["oracle"] = {{"vocab", c.oracle.vocab},     {"embed", c.oracle.embed},     {"hidden", c.oracle.hidden},
                 {"length", c.oracle.length},   {"latent", c.oracle.latent},   {"narrow", c.oracle.narrow},
                 {"wide", c.oracle.wide},       {"n_train", c.oracle.n_train}, {"n_valid", c.oracle.n_valid},
                 {"n_test", c.oracle.n_test}};
  if (c.data_dir) j["data_dir"] = c.data_dir->string();
  const auto g = c.gen_config();
  const auto e = c.enc_config();
  j["model"] = {{"vocab", g.vocab},
                {"latent", g.latent},
                {"embed", g.embed},
                {"hidden", g.hidden},
                {"wiring", config_detail::to_string(g.wiring)},
                {"encoder", {{"embed", e.embed}, {"hidden", e.hidden}, {"share_embedding", e.share_embedding}}},
                {"init_scale", c.model.init_scale}};
  json tj = {{"regime", to_string(t.regime)},
             {"learn_generator", t.learn_generator},
             {"epochs", t.epochs},
             {"batch_size", t.batch_size},
             {"grad_clip", t.grad_clip},
             {"lr", {{"initial", t.lr.initial}, {"decay", t.lr.decay}, {"lock_epochs", t.lr.lock_epochs}}},
             {"kl_anneal",
              {{"enabled", t.kl_anneal.enabled}, {"start", t.kl_anneal.start}, {"epochs", t.kl_anneal.epochs}}},
             {"svi",
              {{"steps", t.svi.steps},
               {"learning_rate", t.svi.learning_rate},
               {"momentum", t.svi.momentum},
               {"clip", std::isinf(t.svi.clip) ? 0.0 : t.svi.clip},
               {"hvp_epsilon", t.svi.hvp_epsilon},
               {"step_weights", t.svi.step_weights}}},
             {"svi_init_std", t.svi_init_std}};
  if (t.eval_mode) tj["eval_mode"] = to_string(*t.eval_mode);
  if (t.eval_steps) tj["eval_steps"] = *t.eval_steps;
  tj["eval_batch_size"] = t.eval_batch_size;
  tj["threads"] = t.threads;
  j["train"] = tj;
  const auto& a = c.analysis;
  j["analysis"] = {{"grid", {{"lo", a.grid.lo}, {"hi", a.grid.hi}, {"n", a.grid.n}}},
                   {"landscape_seeds", a.landscape_seeds},
                   {"landscape_example", a.landscape_example},
                   {"curve_steps", a.curve_steps},
                   {"curve_examples", a.curve_examples},
                   {"saliency_samples", a.saliency_samples},
                   {"saliency_examples", a.saliency_examples}};
  if (a.tag_map) j["analysis"]["tag_map"] = a.tag_map->string();
  j["analysis"]["generate_examples"] = a.generate_examples;
  j["analysis"]["generate_samples"] = a.generate_samples;
  j["analysis"]["temperature"] = a.temperature;
  std::vector<std::string> regimes;
  for (auto r : c.table1.regimes) regimes.push_back(to_string(r));
  j["table1"] = {{"regimes", regimes}, {"columns", c.table1.columns}, {"true_nll_samples", c.table1.true_nll_samples}};
  return j;
}

/// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Thread count does not change results, so it is left out of the hash.
inline std::string config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  j["train"].erase("threads");
  return fnv1a_hex(j.dump());
}

/// Sidecar written next to the artifacts of one command.
class RunManifest {
 public:
  RunManifest(std::string command, const ExperimentConfig& cfg, std::string revision)
      : command_(std::move(command)), cfg_(cfg), revision_(std::move(revision)),
        start_(std::chrono::steady_clock::now()) {}

  void add_file(const std::filesystem::path& p) { files_.push_back(p.generic_string()); }
  void add_timing(const std::string& phase, double seconds) { timings_.emplace_back(phase, seconds); }

  /// Times `f` under the given phase name.
  template <class F>
  decltype(auto) timed(const std::string& phase, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    struct Stop {
      RunManifest* m;
      std::string phase;
      std::chrono::steady_clock::time_point t0;
      ~Stop() { m->add_timing(phase, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()); }
    } stop{this, phase, t0};
    return f();
  }

  json to_json() const {
    json j;
    j["command"] = command_;
    j["config_hash"] = config_hash(cfg_);
    j["seed"] = cfg_.seed;
    j["revision"] = revision_;
    j["files"] = files_;
    json t = json::object();
    for (const auto& [k, v] : timings_) t[k] = v;
    t["total"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    j["timings_s"] = t;
    j["config"] = savae::to_json(cfg_);
    return j;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << to_json().dump(2) << '\n';
  }

 private:
  std::string command_;
  ExperimentConfig cfg_;
  std::string revision_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::string> files_;
  std::vector<std::pair<std::string, double>> timings_;
};

}  // namespace savae
