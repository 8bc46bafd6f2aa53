#pragma once

// Losses, optimizer and the five training strategies:
//
//   FS     train from scratch on the target
//   BN     pretrain with a bottleneck, then retrain the layers above it
//   CL     pretrain with adaptive activations, then fit only new target
//          activations (and the target head)
//   ML     joint round-robin training of all languages with the trace-norm
//          relatedness term  sum_l CTC_l + alpha * sum_n ||lambda_n||_*
//   CL&ML  ML pretraining on sources, then ML over sources and targets
//
// lambda_n stacks the coefficient rows of every registered language at
// adaptive layer n (languages x units); ||.||_* is the sum of singular values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "aanet/ctc.hpp"
#include "aanet/dataset.hpp"
#include "aanet/evaluation.hpp"
#include "aanet/model.hpp"
#include "aanet/numeric.hpp"
#include "aanet/random.hpp"

namespace aanet {

enum class Strategy { FS, BN, CL, ML, CLML };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::FS: return "FS";
    case Strategy::BN: return "BN";
    case Strategy::CL: return "CL";
    case Strategy::ML: return "ML";
    case Strategy::CLML: return "CLML";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "FS") return Strategy::FS;
  if (s == "BN") return Strategy::BN;
  if (s == "CL") return Strategy::CL;
  if (s == "ML") return Strategy::ML;
  if (s == "CLML" || s == "CL&ML") return Strategy::CLML;
  throw Error("unknown strategy '" + s + "'");
}

struct TrainingConfig {
  Strategy strategy = Strategy::FS;
  double alpha = 0.01;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double clip_lo = -1.0;
  double clip_hi = 1.0;
  std::size_t epochs = 3;           // target-language training epochs
  std::size_t pretrain_epochs = 3;  // source pretraining epochs
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  bool reinit_upper = false;        // BN phase 2: re-initialise layers above the bottleneck
  bool eval_each_epoch = true;

  void validate() const {
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw Error("beta1, beta2 must lie in (0, 1)");
    if (!(clip_lo < clip_hi)) throw Error("clip_lo must be below clip_hi");
    if (!(alpha >= 0.0)) throw Error("alpha must be nonnegative");
    if (!(learning_rate > 0.0)) throw Error("learning rate must be positive");
    if (batch_size == 0) throw Error("batch size must be positive");
  }
};

// ---------------------------------------------------------------------------
// Trace norm

inline constexpr double kSingularThreshold = 1e-8;

/// Nuclear norm: sum of singular values, i.e. trace(sqrt(A Aᵀ)).
inline double trace_norm(const Matrix& a) {
  if (!a.all_finite()) throw Error("trace_norm of a non-finite matrix");
  if (a.empty()) return 0.0;
  try {
    const Svd s = svd_small(a);
    return std::accumulate(s.singular_values.begin(), s.singular_values.end(), 0.0);
  } catch (const ConvergenceError&) {
    const bool wide = a.rows() <= a.cols();
    const SymmetricEigen e = symmetric_eigen(wide ? matmul_a_bt(a, a) : matmul_at_b(a, a));
    double sum = 0.0;
    for (double v : e.values) sum += std::sqrt(std::max(v, 0.0));
    return sum;
  }
}

/// U Vᵀ over singular values above 1e-8; zero at the origin.
inline Matrix trace_norm_subgradient(const Matrix& a) {
  if (!a.all_finite()) throw Error("trace_norm_subgradient of a non-finite matrix");
  Matrix g(a.rows(), a.cols());
  if (a.empty()) return g;
  const Svd s = svd_small(a);
  for (std::size_t k = 0; k < s.singular_values.size(); ++k) {
    if (s.singular_values[k] <= kSingularThreshold) continue;
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < a.cols(); ++j) g(i, j) += s.u(i, k) * s.v(j, k);
  }
  return g;
}

/// Stacked coefficient matrix of an adaptive layer, one row per language
/// (registration order).
inline Matrix stacked_lambda(const CRDModel& m, std::size_t layer) {
  const ActivationSlot& slot = m.slots.at(layer);
  if (!slot.adaptive()) throw Error("layer " + std::to_string(layer) + " is not adaptive");
  Matrix out(m.languages.size(), m.apl_units);
  for (std::size_t i = 0; i < m.languages.size(); ++i) {
    const APLActivation& a = slot.for_language(m.languages[i].name);
    if (a.unit_count() != m.apl_units) throw ShapeError("APL unit count", 1, a.unit_count(), 1, m.apl_units);
    std::copy_n(a.lambda.data(), m.apl_units, out.row(i).begin());
  }
  return out;
}

/// Sum over adaptive layers of the trace norm of the stacked coefficients.
inline double relatedness_loss(const CRDModel& m) {
  double total = 0.0;
  for (std::size_t layer : m.adaptive_layers()) total += trace_norm(stacked_lambda(m, layer));
  return total;
}

/// sum of per-language CTC losses + alpha * relatedness_loss(model).
inline double multilingual_loss(const std::map<std::string, double>& ctc_losses, const CRDModel& m, double alpha) {
  double total = 0.0;
  for (const auto& l : m.languages) {
    auto it = ctc_losses.find(l.name);
    if (it != ctc_losses.end()) total += it->second;
  }
  for (const auto& [name, loss] : ctc_losses)
    if (!m.has_language(name)) throw Error("CTC loss given for unregistered language '" + name + "'");
  if (alpha == 0.0) return total;
  return total + alpha * relatedness_loss(m);
}

/// Adds alpha * d(relatedness)/d(lambda) for every coefficient row accepted
/// by `trainable`.
inline void add_relatedness_gradient(const CRDModel& m, double alpha, const ParamFilter& trainable, Gradients& grads) {
  if (alpha == 0.0) return;
  for (std::size_t layer : m.adaptive_layers()) {
    const Matrix g = trace_norm_subgradient(stacked_lambda(m, layer));
    const std::size_t stage = m.stage_of_layer(layer);
    for (std::size_t i = 0; i < m.languages.size(); ++i) {
      const std::string& lang = m.languages[i].name;
      ParamInfo info{"act" + std::to_string(layer) + "." + lang + ".lambda", ParamGroup::Activation, stage, lang};
      if (!trainable(info)) continue;
      auto [it, inserted] = grads.try_emplace(info.name, 1, m.apl_units);
      for (std::size_t j = 0; j < m.apl_units; ++j) it->second[j] += alpha * g(i, j);
    }
  }
}

// ---------------------------------------------------------------------------
// Adam with elementwise gradient clipping

struct MomentState {
  Matrix m, v;
  std::size_t steps = 0;
};

struct OptimizerState {
  std::map<std::string, MomentState> moments;
  std::size_t steps = 0;  // optimizer steps taken
};

inline void clip_gradient(Matrix& g, double lo, double hi) {
  for (double& x : g.values()) x = std::clamp(x, lo, hi);
}

/// One bias-corrected Adam update of a single tensor. Gradient entries are
/// clipped to [clip_lo, clip_hi] first.
inline void adam_update(Matrix& param, const Matrix& grad, MomentState& st, const TrainingConfig& cfg) {
  require_same_shape("adam parameter/gradient", param, grad);
  if (st.m.empty()) {
    st.m = Matrix(param.rows(), param.cols());
    st.v = Matrix(param.rows(), param.cols());
  }
  require_same_shape("adam moments", param, st.m);
  ++st.steps;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.steps));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.steps));
  double* p = param.data();
  double* m = st.m.data();
  double* v = st.v.data();
  const double* g = grad.data();
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double gi = std::clamp(g[i], cfg.clip_lo, cfg.clip_hi);
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
    p[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
  }
}

/// Updates every model parameter that has an entry in `grads`.
inline void adam_step(CRDModel& model, const Gradients& grads, OptimizerState& state, const TrainingConfig& cfg) {
  std::map<std::string, Matrix*> by_name;
  for (auto& p : parameters(model)) by_name.emplace(p.info.name, p.value);
  for (const auto& [name, g] : grads) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("gradient for unknown parameter '" + name + "'");
    if (!same_shape(*it->second, g))
      throw ShapeError("gradient shape for '" + name + "'", it->second->rows(), it->second->cols(), g.rows(), g.cols());
  }
  for (const auto& [name, g] : grads) adam_update(*by_name.at(name), g, state.moments[name], cfg);
  ++state.steps;
}

// ---------------------------------------------------------------------------
// Loss and gradients for one batch

struct BatchResult {
  double loss = 0.0;        // mean CTC loss over the batch
  double total_loss = 0.0;  // sum of per-utterance CTC losses
  Gradients grads;
};

inline BatchResult batch_gradients(const CRDModel& model, const std::vector<const Utterance*>& batch,
                                   const std::string& language, const ParamFilter& trainable) {
  if (batch.empty()) throw Error("empty batch");
  std::vector<const Matrix*> inputs;
  for (const Utterance* u : batch) inputs.push_back(&u->features.frames);
  const ForwardCache cache = forward_batch(model, inputs, language);
  Matrix dlogits(cache.log_probs.rows(), cache.log_probs.cols());
  const double scale = 1.0 / static_cast<double>(batch.size());
  BatchResult res;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const CTCResult r = ctc_loss(cache.sequence_log_probs(s), batch[s]->labels.tokens);
    res.total_loss += r.loss;
    double* dst = dlogits.data() + cache.spans[s].offset * dlogits.cols();
    for (std::size_t i = 0; i < r.grad_logits.size(); ++i) dst[i] = scale * r.grad_logits[i];
  }
  res.loss = res.total_loss * scale;
  res.grads = backward(model, cache, dlogits, trainable);
  return res;
}

/// CTC loss of one utterance and its gradient for every selected parameter.
inline BatchResult utterance_gradients(const CRDModel& model, const Utterance& u, const std::string& language,
                                       const ParamFilter& trainable) {
  return batch_gradients(model, {&u}, language, trainable);
}

// ---------------------------------------------------------------------------
// Round-robin training loop

struct MetricsRow {
  std::size_t epoch = 0;
  std::string language;
  std::string split;
  double ctc_loss = 0.0;
  double trace_norm_total = 0.0;
  double ter = 0.0;
};

/// Tab-separated: epoch, language, split, ctc_loss, trace_norm_total, ter.
inline void write_metrics(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os.precision(10);
  for (const auto& r : rows)
    os << r.epoch << '\t' << r.language << '\t' << r.split << '\t' << r.ctc_loss << '\t' << r.trace_norm_total
       << '\t' << r.ter << '\n';
}

struct TrainingReport {
  std::vector<MetricsRow> metrics;
  std::vector<double> trace_norm_trajectory;  // relatedness loss after each epoch
  std::vector<std::string> frozen_hashes;     // hash of the frozen block, at start then after each epoch
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
};

struct LanguageData {
  std::string language;
  const Dataset* train = nullptr;
  const Dataset* eval = nullptr;  // optional held-out split for per-epoch metrics
};

struct LoopOptions {
  std::size_t epochs = 1;
  ParamFilter trainable = all_params();
  double alpha = 0.0;
  std::string phase = "train";
  ParamFilter frozen;  // when set, its hash is recorded every epoch
};

inline double safe_relatedness(const CRDModel& m) {
  return m.adaptive_layers().empty() ? 0.0 : relatedness_loss(m);
}

/// Strict round-robin over languages, one mini-batch per language per turn.
/// Each step minimises that language's mean CTC loss plus alpha times the
/// relatedness loss, updating only parameters accepted by `opt.trainable`.
inline void run_round_robin(CRDModel& model, const std::vector<LanguageData>& langs, const TrainingConfig& cfg,
                            const LoopOptions& opt, OptimizerState& state, TrainingReport& report) {
  cfg.validate();
  if (langs.empty()) throw Error("training needs at least one language");
  for (const auto& l : langs) {
    if (!l.train || l.train->empty()) throw Error("language '" + l.language + "' has no training data");
    if (!model.has_language(l.language)) throw Error("language '" + l.language + "' is not registered");
  }
  if (opt.frozen && report.frozen_hashes.empty()) report.frozen_hashes.push_back(parameter_hash(model, opt.frozen));

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const std::size_t global_epoch = report.epochs_run + 1;
    std::vector<std::vector<std::vector<const Utterance*>>> batches(langs.size());
    std::size_t max_batches = 0;
    for (std::size_t li = 0; li < langs.size(); ++li) {
      const auto& data = langs[li].train->utterances;
      std::vector<std::size_t> order(data.size());
      std::iota(order.begin(), order.end(), 0);
      Rng rng = make_rng(cfg.seed, opt.phase + "/order/" + langs[li].language, global_epoch);
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
        std::vector<const Utterance*> b;
        for (std::size_t i = s; i < std::min(order.size(), s + cfg.batch_size); ++i) b.push_back(&data[order[i]]);
        batches[li].push_back(std::move(b));
      }
      max_batches = std::max(max_batches, batches[li].size());
    }

    std::vector<double> loss_sum(langs.size(), 0.0);
    std::vector<std::size_t> seen(langs.size(), 0);
    for (std::size_t b = 0; b < max_batches; ++b) {
      for (std::size_t li = 0; li < langs.size(); ++li) {
        if (b >= batches[li].size()) continue;
        BatchResult r = batch_gradients(model, batches[li][b], langs[li].language, opt.trainable);
        if (!std::isfinite(r.total_loss)) throw Error("non-finite loss during training");
        add_relatedness_gradient(model, opt.alpha, opt.trainable, r.grads);
        adam_step(model, r.grads, state, cfg);
        loss_sum[li] += r.total_loss;
        seen[li] += batches[li][b].size();
        ++report.steps;
      }
    }

    ++report.epochs_run;
    const double tn = safe_relatedness(model);
    report.trace_norm_trajectory.push_back(tn);
    for (std::size_t li = 0; li < langs.size(); ++li) {
      MetricsRow row;
      row.epoch = global_epoch;
      row.language = langs[li].language;
      row.trace_norm_total = tn;
      if (langs[li].eval && !langs[li].eval->empty() && cfg.eval_each_epoch) {
        const EvalResult e = evaluate(model, *langs[li].eval, langs[li].language, Decoder::Greedy);
        row.split = "test";
        row.ctc_loss = e.mean_ctc_loss;
        row.ter = e.ter;
      } else {
        row.split = "train";
        row.ctc_loss = loss_sum[li] / static_cast<double>(std::max<std::size_t>(seen[li], 1));
        row.ter = std::nan("");
      }
      report.metrics.push_back(row);
    }
    if (opt.frozen) report.frozen_hashes.push_back(parameter_hash(model, opt.frozen));
  }
}

// ---------------------------------------------------------------------------
// Strategies

inline std::vector<LanguageData> language_data(const std::vector<DatasetSplit>& splits) {
  std::vector<LanguageData> out;
  for (const auto& s : splits) out.push_back({s.train.language.name, &s.train, &s.test});
  return out;
}

/// FS: all parameters trained on the single registered target.
inline TrainingReport train_from_scratch(CRDModel& model, const DatasetSplit& target, const TrainingConfig& cfg) {
  if (model.languages.size() != 1 || model.languages[0].name != target.train.language.name)
    throw Error("train_from_scratch expects a model with only the target language registered");
  if (target.train.empty()) throw Error("empty training set for '" + target.train.language.name + "'");
  TrainingReport report;
  OptimizerState state;
  LoopOptions opt;
  opt.epochs = cfg.epochs;
  opt.phase = "fs";
  opt.alpha = 0.0;
  run_round_robin(model, language_data({target}), cfg, opt, state, report);
  return report;
}

/// Pretraining on sources. One source reduces to FS on it; several are
/// trained jointly with the relatedness term.
inline TrainingReport pretrain_sources(CRDModel& model, const std::vector<DatasetSplit>& sources,
                                       const TrainingConfig& cfg) {
  if (sources.empty()) throw Error("pretraining needs at least one source language");
  TrainingReport report;
  OptimizerState state;
  LoopOptions opt;
  opt.epochs = cfg.pretrain_epochs;
  opt.phase = "pretrain";
  opt.alpha = sources.size() > 1 ? cfg.alpha : 0.0;
  run_round_robin(model, language_data(sources), cfg, opt, state, report);
  return report;
}

/// CL: fits the target's activations and head; everything else is frozen.
inline TrainingReport finetune_cross_lingual(CRDModel& model, const DatasetSplit& target, const TrainingConfig& cfg) {
  const std::string& name = target.train.language.name;
  if (!model.has_language(name)) throw Error("target language '" + name + "' is not registered");
  TrainingReport report;
  OptimizerState state;
  LoopOptions opt;
  opt.epochs = cfg.epochs;
  opt.phase = "cl/" + name;
  opt.trainable = language_params(name);
  opt.frozen = [keep = language_params(name)](const ParamInfo& p) { return !keep(p); };
  run_round_robin(model, language_data({target}), cfg, opt, state, report);
  return report;
}

/// ML: joint training of every registered language with the relatedness term.
inline TrainingReport train_multilingual(CRDModel& model, const std::vector<DatasetSplit>& all,
                                         const TrainingConfig& cfg, std::size_t epochs, const std::string& phase = "ml") {
  for (const auto& s : all)
    if (s.train.empty()) throw Error("language '" + s.train.language.name + "' has no training data");
  TrainingReport report;
  OptimizerState state;
  LoopOptions opt;
  opt.epochs = epochs;
  opt.phase = phase;
  opt.alpha = cfg.alpha;
  run_round_robin(model, language_data(all), cfg, opt, state, report);
  return report;
}

inline TrainingReport train_multilingual(CRDModel& model, const std::vector<DatasetSplit>& all,
                                         const TrainingConfig& cfg) {
  return train_multilingual(model, all, cfg, cfg.epochs);
}

/// CL&ML phase 2: register targets on a pretrained model, then train all
/// languages jointly with shared weights unfrozen.
inline TrainingReport train_combined_phase2(CRDModel& model, const std::vector<DatasetSplit>& sources,
                                            const std::vector<DatasetSplit>& targets, const TrainingConfig& cfg) {
  if (sources.empty() || targets.empty()) throw Error("CL&ML needs source and target data");
  for (const auto& t : targets)
    if (!model.has_language(t.train.language.name))
      model = replace_activation_for_language(std::move(model), sources.front().train.language.name, t.train.language);
  std::vector<DatasetSplit> all = sources;
  all.insert(all.end(), targets.begin(), targets.end());
  return train_multilingual(model, all, cfg, cfg.epochs, "clml");
}

/// CL&ML: pretrain_sources, then train_combined_phase2. Returns both reports.
inline std::pair<TrainingReport, TrainingReport> train_combined(CRDModel& model, const std::vector<DatasetSplit>& sources,
                                                                const std::vector<DatasetSplit>& targets,
                                                                const TrainingConfig& cfg) {
  TrainingReport pre = pretrain_sources(model, sources, cfg);
  TrainingReport post = train_combined_phase2(model, sources, targets, cfg);
  return {std::move(pre), std::move(post)};
}

/// Parameters frozen during BN phase 2: everything up to and including the bottleneck.
inline ParamFilter bottleneck_frozen_region(const CRDModel& model) {
  const std::size_t bn = model.bottleneck_stage();
  return [bn](const ParamInfo& p) { return p.stage <= bn; };
}

/// BN phase 1: all parameters on the sources (no relatedness term).
inline TrainingReport pretrain_bottleneck(CRDModel& model, const std::vector<DatasetSplit>& sources,
                                          const TrainingConfig& cfg) {
  if (!model.bottleneck) throw Error("bottleneck baseline requires a bottleneck layer");
  TrainingReport report;
  OptimizerState state;
  LoopOptions opt;
  opt.epochs = cfg.pretrain_epochs;
  opt.phase = "bn-pretrain";
  run_round_robin(model, language_data(sources), cfg, opt, state, report);
  return report;
}

/// BN phase 2: registers the target, freezes everything up to and including
/// the bottleneck, and trains the layers above it plus the target head.
inline TrainingReport finetune_bottleneck(CRDModel& model, const std::string& source, const DatasetSplit& target,
                                          const TrainingConfig& cfg) {
  if (!model.bottleneck) throw Error("bottleneck baseline requires a bottleneck layer");
  const std::string& name = target.train.language.name;
  if (!model.has_language(name)) model = replace_activation_for_language(std::move(model), source, target.train.language);
  const std::size_t bn = model.bottleneck_stage();
  if (cfg.reinit_upper) {
    Rng rng = make_rng(model.seed, "bn-reinit/" + name);
    for (std::size_t k = 1; k < model.fc.size(); ++k)
      model.fc[k] = detail::make_fc(model.fc[k].in(), model.fc[k].out(), rng);
  }
  TrainingReport report;
  OptimizerState state;
  LoopOptions opt;
  opt.epochs = cfg.epochs;
  opt.phase = "bn/" + name;
  opt.trainable = [bn, name](const ParamInfo& p) {
    if (p.stage <= bn) return false;
    return p.group == ParamGroup::Shared || p.language == name;
  };
  opt.frozen = bottleneck_frozen_region(model);
  run_round_robin(model, language_data({target}), cfg, opt, state, report);
  return report;
}

inline std::pair<TrainingReport, TrainingReport> train_bottleneck_baseline(CRDModel& model,
                                                                           const std::vector<DatasetSplit>& sources,
                                                                           const DatasetSplit& target,
                                                                           const TrainingConfig& cfg) {
  if (sources.empty()) throw Error("bottleneck baseline needs source data");
  TrainingReport pre = pretrain_bottleneck(model, sources, cfg);
  TrainingReport post = finetune_bottleneck(model, sources.front().train.language.name, target, cfg);
  return {std::move(pre), std::move(post)};
}

}  // namespace aanet
