#pragma once

// Experiment front end: synthetic micro-languages, the key=value config
// format, single-strategy runs, the five-strategy suite and curve export.
//
// A micro-language has one 40-dim prototype per token. Languages that share
// a family start from the same family prototypes and add an independent
// N(0, perturbation^2) offset per coordinate; an utterance is a token
// sequence without adjacent repeats, each token held for a few frames of
// prototype plus Gaussian noise.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "aanet/checkpoint.hpp"
#include "aanet/dataset.hpp"
#include "aanet/evaluation.hpp"
#include "aanet/features.hpp"
#include "aanet/model.hpp"
#include "aanet/training.hpp"

namespace aanet {

// ---------------------------------------------------------------------------
// Micro-languages

struct Range {
  std::size_t min = 1;
  std::size_t max = 1;
};

struct MicroLanguageSpec {
  std::string name;
  std::size_t vocab_size = 8;  // excluding blank
  std::string family;          // defaults to the language name
  double perturbation = 0.0;   // sigma_p around the family prototypes
  double prototype_scale = 1.0;  // family prototypes are N(0, scale^2)
  Range frames_per_token{2, 3};
  double noise_std = 1.0;
  Range utterance_length{2, 4};

  std::string family_name() const { return family.empty() ? name : family; }
  Language language() const { return Language::with_tokens(name, vocab_size); }

  void validate() const {
    if (name.empty()) throw Error("micro-language needs a name");
    if (vocab_size < 2) throw Error("micro-language '" + name + "' needs at least 2 tokens");
    if (!(noise_std >= 0.0) || !(perturbation >= 0.0)) throw Error("noise and perturbation must be nonnegative");
    if (!(prototype_scale > 0.0)) throw Error("prototype scale must be positive");
    if (frames_per_token.min == 0 || frames_per_token.min > frames_per_token.max)
      throw Error("bad frames_per_token range for '" + name + "'");
    if (utterance_length.min == 0 || utterance_length.min > utterance_length.max)
      throw Error("bad utterance_length range for '" + name + "'");
  }
};

/// Family prototypes: row i-1 belongs to token i. Row i depends only on
/// (seed, family, i), so families are prefix-stable in the vocabulary size.
inline Matrix family_prototypes(const std::string& family, std::size_t vocab, std::uint64_t seed,
                                double scale = 1.0) {
  Matrix p(vocab, kMelBands);
  for (std::size_t i = 0; i < vocab; ++i) {
    Rng rng = make_rng(seed, "family/" + family, i);
    for (double& x : p.row(i)) x = gaussian(rng, 0.0, scale);
  }
  return p;
}

inline Matrix language_prototypes(const MicroLanguageSpec& spec, std::uint64_t seed) {
  Matrix p = family_prototypes(spec.family_name(), spec.vocab_size, seed, spec.prototype_scale);
  if (spec.perturbation > 0.0) {
    for (std::size_t i = 0; i < p.rows(); ++i) {
      Rng rng = make_rng(seed, "perturb/" + spec.name, i);
      for (double& x : p.row(i)) x += gaussian(rng, 0.0, spec.perturbation);
    }
  }
  return p;
}

inline std::size_t sample_range(Rng& rng, Range r) {
  return std::uniform_int_distribution<std::size_t>(r.min, r.max)(rng);
}

inline std::vector<int> sample_tokens(Rng& rng, const MicroLanguageSpec& spec) {
  const std::size_t n = sample_range(rng, spec.utterance_length);
  std::vector<int> tokens;
  std::uniform_int_distribution<int> any(1, static_cast<int>(spec.vocab_size));
  std::uniform_int_distribution<int> other(1, static_cast<int>(spec.vocab_size) - 1);
  for (std::size_t k = 0; k < n; ++k) {
    if (tokens.empty()) {
      tokens.push_back(any(rng));
    } else {
      const int t = other(rng);
      tokens.push_back(t >= tokens.back() ? t + 1 : t);
    }
  }
  return tokens;
}

/// Synthetic audio for one utterance: each token is a tone whose frequency
/// follows the token's first prototype coordinate, one hop per frame.
inline AudioClip synthesize_audio(const std::vector<int>& tokens, const std::vector<std::size_t>& durations,
                                  const Matrix& prototypes, double noise_std, Rng& rng) {
  AudioClip clip;
  const double sr = clip.sample_rate;
  const std::size_t hop = ms_to_samples(kHopMs, sr);
  const std::size_t win = ms_to_samples(kWindowMs, sr);
  double phase = 0.0;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const double f = 1000.0 + 400.0 * std::tanh(prototypes(tokens[k] - 1, 0)) + 150.0 * tokens[k];
    const std::size_t n = durations[k] * hop + (k + 1 == tokens.size() ? win - hop : 0);
    for (std::size_t s = 0; s < n; ++s) {
      phase += 2.0 * std::numbers::pi * f / sr;
      clip.samples.push_back(0.5 * std::sin(phase) + 0.01 * noise_std * gaussian(rng, 0.0, 1.0));
    }
  }
  return clip;
}

/// `count` utterances; deterministic in (spec, count, seed).
inline Dataset generate_micro_language(const MicroLanguageSpec& spec, std::size_t count, std::uint64_t seed,
                                       bool synthetic_audio = false) {
  spec.validate();
  if (count == 0) throw Error("generate_micro_language needs count >= 1");
  const Matrix protos = language_prototypes(spec, seed);
  Dataset d;
  d.language = spec.language();
  d.utterances.reserve(count);
  for (std::size_t u = 0; u < count; ++u) {
    Rng rng = make_rng(seed, "utt/" + spec.name, u);
    Utterance utt;
    utt.labels.language = spec.name;
    utt.labels.tokens = sample_tokens(rng, spec);
    std::vector<std::size_t> durations;
    std::size_t total = 0;
    for (std::size_t k = 0; k < utt.labels.tokens.size(); ++k) {
      durations.push_back(sample_range(rng, spec.frames_per_token));
      total += durations.back();
    }
    if (synthetic_audio) {
      utt.features = log_mel(synthesize_audio(utt.labels.tokens, durations, protos, spec.noise_std, rng), spec.name);
    } else {
      utt.features.language = spec.name;
      utt.features.frames = Matrix(total, kMelBands);
      std::size_t t = 0;
      for (std::size_t k = 0; k < durations.size(); ++k) {
        const auto proto = protos.row(static_cast<std::size_t>(utt.labels.tokens[k]) - 1);
        for (std::size_t r = 0; r < durations[k]; ++r, ++t) {
          auto frame = utt.features.frames.row(t);
          for (std::size_t j = 0; j < kMelBands; ++j) frame[j] = proto[j] + gaussian(rng, 0.0, spec.noise_std);
        }
      }
    }
    d.utterances.push_back(std::move(utt));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Experiment configuration
//
// Plain text, one `key = value` per line, '#' starts a comment:
//
//   preset = small                 small | large
//   placement = 1GRU,1DNN          default: the preset's placement
//   strategy = CLML                FS | BN | CL | ML | CLML
//   output_dir = out/clml
//   utterances = 400               per language, split 3:1 into train/test
//   data_seed = 1
//   synthetic_audio = 0
//   apl_units = 5
//   beam_width = 10
//   seed, alpha, learning_rate, beta1, beta2, adam_eps, clip_lo, clip_hi,
//   epochs, pretrain_epochs, batch_size, reinit_upper, eval_each_epoch
//   sources = src1,src2            comma-separated language names
//   targets = tgt
//   lang.<name>.vocab = 8
//   lang.<name>.family = alpha
//   lang.<name>.perturbation = 0.3
//   lang.<name>.noise = 1.0
//   lang.<name>.scale = 1.0        prototype standard deviation
//   lang.<name>.frames = 2,3       frames per token (min,max)
//   lang.<name>.length = 2,4       tokens per utterance (min,max)

struct ExperimentConfig {
  Preset preset = Preset::Small;
  std::optional<PlacementSpec> placement;
  TrainingConfig training;
  std::vector<MicroLanguageSpec> sources;
  std::vector<MicroLanguageSpec> targets;
  std::string output_dir = "aanet_out";
  std::size_t utterances = 400;
  std::uint64_t data_seed = 1;
  bool synthetic_audio = false;
  std::size_t apl_units = kDefaultAplUnits;
  std::size_t beam_width = kDefaultBeamWidth;

  Strategy strategy() const { return training.strategy; }
  PlacementSpec effective_placement() const { return placement ? *placement : PlacementSpec::defaults(preset); }

  std::vector<MicroLanguageSpec> all_languages() const {
    std::vector<MicroLanguageSpec> all = sources;
    all.insert(all.end(), targets.begin(), targets.end());
    return all;
  }

  void validate() const {
    training.validate();
    std::vector<std::string> names;
    for (const auto& l : all_languages()) {
      l.validate();
      if (std::find(names.begin(), names.end(), l.name) != names.end())
        throw Error("language '" + l.name + "' declared more than once");
      names.push_back(l.name);
    }
    if (utterances < 4) throw Error("need at least 4 utterances per language for a 3:1 split");
    const Strategy s = strategy();
    if (targets.empty() && s != Strategy::ML) throw Error(to_string(s) + " needs at least one target language");
    if (sources.empty() && (s == Strategy::BN || s == Strategy::CL || s == Strategy::CLML))
      throw Error(to_string(s) + " needs at least one source language");
    if (names.empty()) throw Error("no languages configured");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw Error("config key '" + key + "': expected a number, got '" + v + "'");
  return x;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] != '-') x = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw Error("config key '" + key + "': expected a nonnegative integer, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw Error("config key '" + key + "': expected 0/1, got '" + v + "'");
}

inline Range parse_range(const std::string& key, const std::string& v) {
  const auto parts = split_list(v);
  if (parts.size() == 1) {
    const auto x = parse_uint(key, parts[0]);
    return {x, x};
  }
  if (parts.size() != 2) throw Error("config key '" + key + "': expected min,max");
  return {parse_uint(key, parts[0]), parse_uint(key, parts[1])};
}

}  // namespace detail

/// Applies one key=value setting. Language fields may precede the
/// sources/targets lines that mention the language.
inline void apply_setting(ExperimentConfig& cfg, std::map<std::string, MicroLanguageSpec>& langs,
                          const std::string& key, const std::string& value) {
  using namespace detail;
  TrainingConfig& t = cfg.training;
  if (key.rfind("lang.", 0) == 0) {
    const auto dot = key.find('.', 5);
    if (dot == std::string::npos) throw Error("config key '" + key + "': expected lang.<name>.<field>");
    const std::string name = key.substr(5, dot - 5), field = key.substr(dot + 1);
    MicroLanguageSpec& l = langs[name];
    l.name = name;
    if (field == "vocab") l.vocab_size = parse_uint(key, value);
    else if (field == "family") l.family = value;
    else if (field == "perturbation") l.perturbation = parse_double(key, value);
    else if (field == "noise") l.noise_std = parse_double(key, value);
    else if (field == "scale") l.prototype_scale = parse_double(key, value);
    else if (field == "frames") l.frames_per_token = parse_range(key, value);
    else if (field == "length") l.utterance_length = parse_range(key, value);
    else throw Error("unknown language field '" + field + "'");
    return;
  }
  if (key == "preset") cfg.preset = parse_preset(value);
  else if (key == "placement") cfg.placement = PlacementSpec::parse(value);
  else if (key == "strategy") t.strategy = parse_strategy(value);
  else if (key == "output_dir") cfg.output_dir = value;
  else if (key == "utterances") cfg.utterances = parse_uint(key, value);
  else if (key == "data_seed") cfg.data_seed = parse_uint(key, value);
  else if (key == "synthetic_audio") cfg.synthetic_audio = parse_bool(key, value);
  else if (key == "apl_units") cfg.apl_units = parse_uint(key, value);
  else if (key == "beam_width") cfg.beam_width = parse_uint(key, value);
  else if (key == "seed") t.seed = parse_uint(key, value);
  else if (key == "alpha") t.alpha = parse_double(key, value);
  else if (key == "learning_rate") t.learning_rate = parse_double(key, value);
  else if (key == "beta1") t.beta1 = parse_double(key, value);
  else if (key == "beta2") t.beta2 = parse_double(key, value);
  else if (key == "adam_eps") t.adam_eps = parse_double(key, value);
  else if (key == "clip_lo") t.clip_lo = parse_double(key, value);
  else if (key == "clip_hi") t.clip_hi = parse_double(key, value);
  else if (key == "epochs") t.epochs = parse_uint(key, value);
  else if (key == "pretrain_epochs") t.pretrain_epochs = parse_uint(key, value);
  else if (key == "batch_size") t.batch_size = parse_uint(key, value);
  else if (key == "reinit_upper") t.reinit_upper = parse_bool(key, value);
  else if (key == "eval_each_epoch") t.eval_each_epoch = parse_bool(key, value);
  else if (key == "sources" || key == "targets") {
    auto& dst = key == "sources" ? cfg.sources : cfg.targets;
    dst.clear();
    for (const auto& name : split_list(value)) {
      MicroLanguageSpec placeholder;
      placeholder.name = name;
      dst.push_back(placeholder);
    }
  } else {
    throw Error("unknown config key '" + key + "'");
  }
}

/// Parses the config format above on top of `base`.
inline ExperimentConfig parse_config(std::istream& is, ExperimentConfig base = {}) {
  std::map<std::string, MicroLanguageSpec> langs;
  for (const auto& l : base.all_languages()) langs[l.name] = l;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      apply_setting(base, langs, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      throw Error("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  for (auto* list : {&base.sources, &base.targets})
    for (auto& l : *list) {
      auto it = langs.find(l.name);
      if (it == langs.end()) {
        const std::string name = l.name;
        l = MicroLanguageSpec{};
        l.name = name;
      } else {
        l = it->second;
      }
    }
  return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config " + path);
  return parse_config(is, std::move(base));
}

inline void write_config(std::ostream& os, const ExperimentConfig& cfg) {
  const TrainingConfig& t = cfg.training;
  os << std::setprecision(17);
  os << "preset = " << to_string(cfg.preset) << '\n'
     << "placement = " << cfg.effective_placement().str() << '\n'
     << "strategy = " << to_string(t.strategy) << '\n'
     << "output_dir = " << cfg.output_dir << '\n'
     << "utterances = " << cfg.utterances << '\n'
     << "data_seed = " << cfg.data_seed << '\n'
     << "synthetic_audio = " << cfg.synthetic_audio << '\n'
     << "apl_units = " << cfg.apl_units << '\n'
     << "beam_width = " << cfg.beam_width << '\n'
     << "seed = " << t.seed << '\n'
     << "alpha = " << t.alpha << '\n'
     << "learning_rate = " << t.learning_rate << '\n'
     << "beta1 = " << t.beta1 << '\n'
     << "beta2 = " << t.beta2 << '\n'
     << "adam_eps = " << t.adam_eps << '\n'
     << "clip_lo = " << t.clip_lo << '\n'
     << "clip_hi = " << t.clip_hi << '\n'
     << "epochs = " << t.epochs << '\n'
     << "pretrain_epochs = " << t.pretrain_epochs << '\n'
     << "batch_size = " << t.batch_size << '\n'
     << "reinit_upper = " << t.reinit_upper << '\n'
     << "eval_each_epoch = " << t.eval_each_epoch << '\n';
  auto names = [](const std::vector<MicroLanguageSpec>& v) {
    std::string s;
    for (const auto& l : v) s += (s.empty() ? "" : ",") + l.name;
    return s;
  };
  os << "sources = " << names(cfg.sources) << '\n' << "targets = " << names(cfg.targets) << '\n';
  for (const auto& l : cfg.all_languages()) {
    const std::string p = "lang." + l.name + ".";
    os << p << "vocab = " << l.vocab_size << '\n'
       << p << "family = " << l.family_name() << '\n'
       << p << "perturbation = " << l.perturbation << '\n'
       << p << "noise = " << l.noise_std << '\n'
       << p << "scale = " << l.prototype_scale << '\n'
       << p << "frames = " << l.frames_per_token.min << ',' << l.frames_per_token.max << '\n'
       << p << "length = " << l.utterance_length.min << ',' << l.utterance_length.max << '\n';
  }
}

/// Default desk-scale suite: three sources and one target from family
/// "alpha", one target from an independent family.
inline ExperimentConfig default_suite_config(std::uint64_t seed = 1) {
  ExperimentConfig cfg;
  cfg.data_seed = seed;
  cfg.training.seed = seed;
  cfg.training.epochs = 2;
  cfg.training.pretrain_epochs = 6;
  cfg.utterances = 400;
  auto lang = [](std::string name, std::string family, double perturbation, double noise) {
    MicroLanguageSpec l;
    l.name = std::move(name);
    l.family = std::move(family);
    l.perturbation = perturbation;
    l.vocab_size = 8;
    l.noise_std = noise;
    l.frames_per_token = {2, 3};
    l.utterance_length = {2, 4};
    return l;
  };
  cfg.sources = {lang("src1", "alpha", 0.3, 0.5), lang("src2", "alpha", 0.3, 0.5), lang("src3", "alpha", 0.3, 0.5)};
  cfg.targets = {lang("tgt_rel", "alpha", 0.3, 1.0), lang("tgt_unrel", "beta", 0.0, 1.0)};
  return cfg;
}

// ---------------------------------------------------------------------------
// Running experiments

struct LanguageResult {
  std::string language;
  bool target = false;
  double ter = 0.0;
  double ctc_loss = 0.0;
};

struct ExperimentReport {
  Strategy strategy = Strategy::FS;
  std::vector<LanguageResult> results;
  std::vector<MetricsRow> metrics;
  std::vector<double> trace_norm_trajectory;
  std::vector<std::string> frozen_hashes;  // one block per fine-tuning run, concatenated
  bool frozen_invariant = true;
  std::size_t steps = 0;
  double seconds = 0.0;
  bool complete = false;
  std::string error;

  const LanguageResult& result(const std::string& language) const {
    for (const auto& r : results)
      if (r.language == language) return r;
    throw Error("no result for language '" + language + "'");
  }

  double mean_target_ter() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : results)
      if (r.target) sum += r.ter, ++n;
    return n ? sum / static_cast<double>(n) : std::nan("");
  }
};

/// Data and pretrained models shared between runs of one suite.
struct SuiteCache {
  std::map<std::string, DatasetSplit> data;
  std::optional<CRDModel> aanet_pretrained;
  std::optional<TrainingReport> aanet_pretrain_report;
  std::optional<CRDModel> bn_pretrained;
  std::optional<TrainingReport> bn_pretrain_report;
};

inline const DatasetSplit& language_split(const ExperimentConfig& cfg, SuiteCache& cache,
                                          const MicroLanguageSpec& spec) {
  auto it = cache.data.find(spec.name);
  if (it != cache.data.end()) return it->second;
  const Dataset d = generate_micro_language(spec, cfg.utterances, cfg.data_seed, cfg.synthetic_audio);
  return cache.data.emplace(spec.name, split_dataset(d, cfg.data_seed)).first->second;
}

inline std::vector<DatasetSplit> language_splits(const ExperimentConfig& cfg, SuiteCache& cache,
                                                 const std::vector<MicroLanguageSpec>& specs) {
  std::vector<DatasetSplit> out;
  for (const auto& s : specs) out.push_back(language_split(cfg, cache, s));
  return out;
}

inline std::vector<Language> languages_of(const std::vector<MicroLanguageSpec>& specs) {
  std::vector<Language> out;
  for (const auto& s : specs) out.push_back(s.language());
  return out;
}

inline const CRDModel& aanet_pretrained(const ExperimentConfig& cfg, SuiteCache& cache) {
  if (!cache.aanet_pretrained) {
    CRDModel m = build_model(cfg.preset, cfg.effective_placement(), languages_of(cfg.sources), cfg.training.seed,
                             cfg.apl_units);
    cache.aanet_pretrain_report = pretrain_sources(m, language_splits(cfg, cache, cfg.sources), cfg.training);
    cache.aanet_pretrained = std::move(m);
  }
  return *cache.aanet_pretrained;
}

inline const CRDModel& bn_pretrained(const ExperimentConfig& cfg, SuiteCache& cache) {
  if (!cache.bn_pretrained) {
    CRDModel m = insert_bottleneck(
        build_model(cfg.preset, PlacementSpec{}, languages_of(cfg.sources), cfg.training.seed, cfg.apl_units));
    cache.bn_pretrain_report = pretrain_bottleneck(m, language_splits(cfg, cache, cfg.sources), cfg.training);
    cache.bn_pretrained = std::move(m);
  }
  return *cache.bn_pretrained;
}

namespace detail {

inline void absorb(ExperimentReport& rep, const TrainingReport& tr, bool frozen_run) {
  rep.metrics.insert(rep.metrics.end(), tr.metrics.begin(), tr.metrics.end());
  rep.trace_norm_trajectory.insert(rep.trace_norm_trajectory.end(), tr.trace_norm_trajectory.begin(),
                                   tr.trace_norm_trajectory.end());
  rep.steps += tr.steps;
  if (frozen_run) {
    if (tr.frozen_hashes.size() < 2) rep.frozen_invariant = false;
    for (const auto& h : tr.frozen_hashes) {
      if (h != tr.frozen_hashes.front()) rep.frozen_invariant = false;
      rep.frozen_hashes.push_back(h);
    }
  }
}

inline void final_eval(ExperimentReport& rep, const CRDModel& m, const DatasetSplit& split, bool target,
                       std::size_t beam) {
  const EvalResult e = evaluate(m, split.test, split.test.language.name, Decoder::Beam, beam);
  rep.results.push_back({split.test.language.name, target, e.ter, e.mean_ctc_loss});
}

class Stage {
 public:
  explicit Stage(std::string& slot) : slot_(slot) {}
  void operator()(std::string name) { slot_ = std::move(name); }

 private:
  std::string& slot_;
};

}  // namespace detail

inline void write_summary(std::ostream& os, const ExperimentConfig& cfg, const ExperimentReport& rep) {
  os << std::setprecision(10);
  os << "complete=" << (rep.complete ? 1 : 0) << '\n';
  if (!rep.error.empty()) os << "error=" << rep.error << '\n';
  os << "strategy=" << to_string(rep.strategy) << '\n'
     << "preset=" << to_string(cfg.preset) << '\n'
     << "placement=" << cfg.effective_placement().str() << '\n'
     << "seed=" << cfg.training.seed << '\n'
     << "data_seed=" << cfg.data_seed << '\n'
     << "alpha=" << cfg.training.alpha << '\n'
     << "epochs=" << cfg.training.epochs << '\n'
     << "pretrain_epochs=" << cfg.training.pretrain_epochs << '\n';
  std::string targets;
  for (const auto& t : cfg.targets) targets += (targets.empty() ? "" : ",") + t.name;
  os << "targets=" << targets << '\n';
  for (const auto& r : rep.results) os << "ter." << r.language << '=' << r.ter << '\n';
  for (const auto& r : rep.results) os << "loss." << r.language << '=' << r.ctc_loss << '\n';
  if (!cfg.targets.empty() && rep.complete) os << "ter.target_mean=" << rep.mean_target_ter() << '\n';
  os << "trace_norm.final=" << (rep.trace_norm_trajectory.empty() ? 0.0 : rep.trace_norm_trajectory.back()) << '\n';
  os << "trace_norm.trajectory=";
  for (std::size_t i = 0; i < rep.trace_norm_trajectory.size(); ++i)
    os << (i ? "," : "") << rep.trace_norm_trajectory[i];
  os << '\n';
  if (rep.strategy == Strategy::CL || rep.strategy == Strategy::BN)
    os << "frozen_hash_invariant=" << (rep.frozen_invariant ? 1 : 0) << '\n';
  os << "steps=" << rep.steps << '\n' << "seconds=" << rep.seconds << '\n';
}

inline std::map<std::string, std::string> read_summary(std::istream& is) {
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

inline std::map<std::string, std::string> read_summary(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open summary " + path);
  return read_summary(is);
}

/// Trains and evaluates one strategy. Writes config.txt, metrics.tsv,
/// checkpoints and summary.txt under cfg.output_dir. Errors are rethrown as
/// "[stage] message" after a summary with complete=0 has been written.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg, SuiteCache* shared = nullptr) {
  namespace fs = std::filesystem;
  ExperimentReport rep;
  rep.strategy = cfg.strategy();
  std::string stage_name = "config";
  detail::Stage stage(stage_name);
  SuiteCache local;
  SuiteCache& cache = shared ? *shared : local;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<std::string, CRDModel>> checkpoints;
  try {
    cfg.validate();
    stage("output");
    fs::create_directories(cfg.output_dir);
    {
      std::ofstream os(fs::path(cfg.output_dir) / "config.txt");
      write_config(os, cfg);
    }
    stage("data");
    const auto sources = language_splits(cfg, cache, cfg.sources);
    const auto targets = language_splits(cfg, cache, cfg.targets);
    const TrainingConfig& tc = cfg.training;
    const PlacementSpec placement = cfg.effective_placement();

    switch (cfg.strategy()) {
      case Strategy::FS:
        for (std::size_t i = 0; i < targets.size(); ++i) {
          stage("model");
          CRDModel m = build_model(cfg.preset, placement, {cfg.targets[i].language()}, tc.seed, cfg.apl_units);
          stage("train");
          detail::absorb(rep, train_from_scratch(m, targets[i], tc), false);
          stage("eval");
          detail::final_eval(rep, m, targets[i], true, cfg.beam_width);
          checkpoints.emplace_back("model." + cfg.targets[i].name, std::move(m));
        }
        break;
      case Strategy::BN: {
        stage("pretrain");
        const CRDModel& pre = bn_pretrained(cfg, cache);
        detail::absorb(rep, *cache.bn_pretrain_report, false);
        for (std::size_t i = 0; i < targets.size(); ++i) {
          CRDModel m = pre;
          stage("train");
          detail::absorb(rep, finetune_bottleneck(m, cfg.sources.front().name, targets[i], tc), true);
          stage("eval");
          detail::final_eval(rep, m, targets[i], true, cfg.beam_width);
          checkpoints.emplace_back("model." + cfg.targets[i].name, std::move(m));
        }
        break;
      }
      case Strategy::CL: {
        stage("pretrain");
        CRDModel m = aanet_pretrained(cfg, cache);
        detail::absorb(rep, *cache.aanet_pretrain_report, false);
        stage("model");
        for (const auto& t : cfg.targets) m = replace_activation_for_language(std::move(m), cfg.sources.front().name, t.language());
        stage("train");
        for (const auto& t : targets) detail::absorb(rep, finetune_cross_lingual(m, t, tc), true);
        stage("eval");
        for (const auto& s : sources) detail::final_eval(rep, m, s, false, cfg.beam_width);
        for (const auto& t : targets) detail::final_eval(rep, m, t, true, cfg.beam_width);
        checkpoints.emplace_back("model", std::move(m));
        break;
      }
      case Strategy::ML: {
        stage("model");
        CRDModel m = build_model(cfg.preset, placement, languages_of(cfg.all_languages()), tc.seed, cfg.apl_units);
        std::vector<DatasetSplit> all = sources;
        all.insert(all.end(), targets.begin(), targets.end());
        stage("train");
        detail::absorb(rep, train_multilingual(m, all, tc), false);
        stage("eval");
        for (const auto& s : sources) detail::final_eval(rep, m, s, false, cfg.beam_width);
        for (const auto& t : targets) detail::final_eval(rep, m, t, true, cfg.beam_width);
        checkpoints.emplace_back("model", std::move(m));
        break;
      }
      case Strategy::CLML: {
        stage("pretrain");
        CRDModel m = aanet_pretrained(cfg, cache);
        detail::absorb(rep, *cache.aanet_pretrain_report, false);
        stage("train");
        detail::absorb(rep, train_combined_phase2(m, sources, targets, tc), false);
        stage("eval");
        for (const auto& s : sources) detail::final_eval(rep, m, s, false, cfg.beam_width);
        for (const auto& t : targets) detail::final_eval(rep, m, t, true, cfg.beam_width);
        checkpoints.emplace_back("model", std::move(m));
        break;
      }
    }

    stage("write");
    {
      std::ofstream os(fs::path(cfg.output_dir) / "metrics.tsv");
      os << "epoch\tlanguage\tsplit\tctc_loss\ttrace_norm_total\tter\n";
      write_metrics(os, rep.metrics);
    }
    for (const auto& [name, m] : checkpoints) save_checkpoint((fs::path(cfg.output_dir) / (name + ".ckpt")).string(), m);
    rep.complete = true;
  } catch (const std::exception& e) {
    rep.error = "[" + stage_name + "] " + e.what();
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (stage_name != "config" && stage_name != "output") {
    std::ofstream os(std::filesystem::path(cfg.output_dir) / "summary.txt");
    write_summary(os, cfg, rep);
  }
  if (!rep.complete) throw Error(rep.error);
  return rep;
}

/// Runs every strategy on shared data; pretrained models are computed once
/// and reused (CL and CLML share the adaptive pretraining).
inline std::vector<ExperimentReport> run_suite(const ExperimentConfig& base,
                                               const std::vector<Strategy>& strategies = {Strategy::FS, Strategy::BN,
                                                                                          Strategy::CL, Strategy::ML,
                                                                                          Strategy::CLML}) {
  SuiteCache cache;
  std::vector<ExperimentReport> out;
  for (Strategy s : strategies) {
    ExperimentConfig cfg = base;
    cfg.training.strategy = s;
    cfg.output_dir = (std::filesystem::path(base.output_dir) / to_string(s)).string();
    out.push_back(run_experiment(cfg, &cache));
  }
  if (cache.aanet_pretrained)
    save_checkpoint((std::filesystem::path(base.output_dir) / "pretrain.ckpt").string(), *cache.aanet_pretrained);
  return out;
}

/// One run per placement; outputs land in <output_dir>/<placement>.
inline std::vector<ExperimentReport> run_placement_sweep(const ExperimentConfig& base,
                                                         const std::vector<PlacementSpec>& placements) {
  std::vector<ExperimentReport> out;
  SuiteCache data_only;
  for (const auto& p : placements) {
    ExperimentConfig cfg = base;
    cfg.placement = p;
    cfg.output_dir = (std::filesystem::path(base.output_dir) / p.str()).string();
    SuiteCache cache;
    cache.data = data_only.data;
    out.push_back(run_experiment(cfg, &cache));
    data_only.data = std::move(cache.data);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activation curves

/// Evaluates each language's activation at `layer` on `points` evenly spaced
/// inputs in [lo, hi]; with `out_dir` set, writes curve.layer<L>.<lang>.tsv
/// per language plus curve.layer<L>.relu.tsv.
inline std::map<std::string, std::vector<CurvePoint>> export_activation_curves(
    const CRDModel& m, std::size_t layer, const std::vector<std::string>& languages, double lo, double hi,
    std::size_t points, const std::string& out_dir = {}) {
  if (layer >= m.slots.size()) throw Error("layer " + std::to_string(layer) + " does not exist");
  const ActivationSlot& slot = m.slots[layer];
  if (!slot.adaptive()) throw Error("layer " + std::to_string(layer) + " has no adaptive slot");
  if (!(lo < hi)) throw Error("curve range must satisfy lo < hi");
  const auto xs = linspace(lo, hi, points);
  std::map<std::string, std::vector<CurvePoint>> curves;
  for (const auto& lang : languages) curves[lang] = export_curve(slot.for_language(lang), xs);
  const auto relu_curve = export_curve(APLActivation::relu_equivalent(m.apl_units), xs);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const std::string l = std::to_string(layer);
    auto write = [&](const std::string& name, const std::vector<CurvePoint>& c) {
      std::ofstream os(std::filesystem::path(out_dir) / ("curve.layer" + l + "." + name + ".tsv"));
      if (!os) throw Error("cannot write curves to " + out_dir);
      write_curve_tsv(os, c, l, name);
    };
    for (const auto& [name, c] : curves) write(name, c);
    write("relu", relu_curve);
  }
  return curves;
}

inline double max_curve_distance(const std::vector<CurvePoint>& a, const std::vector<CurvePoint>& b) {
  if (a.size() != b.size()) throw Error("curves sampled on different grids");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].x != b[i].x) throw Error("curves sampled on different grids");
    d = std::max(d, std::abs(a[i].y - b[i].y));
  }
  return d;
}

}  // namespace aanet
