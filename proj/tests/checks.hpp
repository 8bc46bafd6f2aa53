#pragma once

// Property checks shared by the unit tests and the acceptance binary. Each
// returns the worst observed error so callers can apply their own bound.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "aanet.hpp"
#include "oracles.hpp"

namespace checks {

using namespace aanet;

inline constexpr double kFdEps = 1e-5;

/// Relative error with a floor at the resolution of a central difference on
/// an O(1) loss.
inline double grad_rel(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline Matrix random_features(std::size_t frames, Rng& rng, double scale = 1.0) {
  return oracle::random_matrix(frames, kMelBands, rng, -scale, scale);
}

inline std::vector<int> random_labels(std::size_t count, std::size_t vocab, Rng& rng) {
  std::vector<int> out(count);
  for (int& l : out) l = std::uniform_int_distribution<int>(1, static_cast<int>(vocab) - 1)(rng);
  return out;
}

/// Max |Δ| between a CRD-Small model whose adaptive slots all have λ=0 and a
/// Fixed-ReLU model built from the same seed, over `inputs` random sequences.
inline double apl_relu_reduction(std::size_t inputs, std::uint64_t seed) {
  const std::vector<Language> langs{Language::with_tokens("a", 8)};
  CRDModel adaptive = build_model(Preset::Small, PlacementSpec::defaults(Preset::Small), langs, seed);
  for (auto& slot : adaptive.slots)
    for (auto& [name, act] : slot.per_language) act.lambda.fill(0.0);
  const CRDModel fixed = build_model(Preset::Small, PlacementSpec{}, langs, seed);
  Rng rng = make_rng(seed, "inputs");
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs; ++i) {
    const auto frames = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    const Matrix x = random_features(frames, rng, 3.0);
    worst = std::max(worst, max_abs_diff(model_forward(adaptive, x, "a"), model_forward(fixed, x, "a")));
  }
  return worst;
}

/// Max relative gap between forward-backward CTC and exhaustive path
/// enumeration over random tiny instances (T ≤ 8, V ≤ 4, U ≤ 3).
inline double ctc_vs_bruteforce(std::size_t instances, std::uint64_t seed) {
  Rng rng = make_rng(seed, "ctc");
  double worst = 0.0;
  std::size_t done = 0;
  while (done < instances) {
    const auto V = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
    const auto T = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const auto U = std::uniform_int_distribution<std::size_t>(0, 3)(rng);
    const std::vector<int> labels = random_labels(U, V, rng);
    if (ctc_min_frames(labels) > T) continue;
    const Matrix lp = log_softmax_rows(oracle::random_matrix(T, V, rng, -3.0, 3.0));
    worst = std::max(worst, relative_error(ctc_loss(lp, labels).loss, ctc_loss_bruteforce(lp, labels)));
    ++done;
  }
  return worst;
}

/// APL: worst relative error of dx, dλ, db against central differences at
/// points at least 1e-3 away from every kink.
inline double apl_gradient(std::size_t points, std::uint64_t seed) {
  Rng rng = make_rng(seed, "apl");
  double worst = 0.0;
  std::size_t done = 0;
  while (done < points) {
    std::vector<double> l(kDefaultAplUnits), b(kDefaultAplUnits);
    for (auto& v : l) v = uniform(rng, -1.0, 1.0);
    for (auto& v : b) v = uniform(rng, -2.0, 2.0);
    const APLActivation a(l, b);
    const double x = uniform(rng, -3.0, 3.0);
    bool near = std::abs(x) < 1e-3;
    for (double bi : b) near |= std::abs(x - bi) < 1e-3;
    if (near) continue;
    const double up = uniform(rng, 0.5, 2.0);
    const AplGradient g = apl_backward(x, a, up);
    const double e = kFdEps;
    worst = std::max(worst, grad_rel(g.dx, up * (apl_forward(x + e, a) - apl_forward(x - e, a)) / (2 * e)));
    for (std::size_t i = 0; i < l.size(); ++i) {
      APLActivation p = a, m = a;
      p.lambda[i] += e;
      m.lambda[i] -= e;
      worst = std::max(worst, grad_rel(g.dlambda[i], up * (apl_forward(x, p) - apl_forward(x, m)) / (2 * e)));
      p = a, m = a;
      p.breakpoints[i] += e;
      m.breakpoints[i] -= e;
      worst = std::max(worst, grad_rel(g.dbreak[i], up * (apl_forward(x, p) - apl_forward(x, m)) / (2 * e)));
    }
    ++done;
  }
  return worst;
}

/// CTC composed with log-softmax: analytic d loss / d logits against central
/// differences on every logit.
inline double ctc_gradient(std::size_t instances, std::uint64_t seed) {
  Rng rng = make_rng(seed, "ctc-grad");
  double worst = 0.0;
  for (std::size_t n = 0; n < instances; ++n) {
    const auto V = std::uniform_int_distribution<std::size_t>(2, 6)(rng);
    const auto U = std::uniform_int_distribution<std::size_t>(0, 4)(rng);
    const std::vector<int> labels = random_labels(U, V, rng);
    const std::size_t T = ctc_min_frames(labels) + std::uniform_int_distribution<std::size_t>(0, 6)(rng);
    const Matrix logits = oracle::random_matrix(std::max<std::size_t>(T, 1), V, rng, -2.0, 2.0);
    const Matrix g = ctc_loss(log_softmax_rows(logits), labels).grad_logits;
    const Matrix fd = finite_diff_grad(
        [&](const Matrix& z) { return ctc_loss(log_softmax_rows(z), labels).loss; }, logits, kFdEps);
    for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, grad_rel(g[i], fd[i]));
  }
  return worst;
}

/// Random L x M matrix with singular values pushed apart so the trace norm is
/// differentiable with a well-conditioned derivative.
inline Matrix distinct_sigma_matrix(std::size_t L, std::size_t M, Rng& rng) {
  while (true) {
    const Matrix a = oracle::random_matrix(L, M, rng);
    const Svd s = svd_small(a);
    bool ok = s.singular_values.back() > 0.1;
    for (std::size_t k = 1; k < s.singular_values.size(); ++k)
      ok &= s.singular_values[k - 1] - s.singular_values[k] > 0.05;
    if (ok) return a;
  }
}

inline double trace_norm_subgradient_fd(std::size_t matrices, std::uint64_t seed) {
  Rng rng = make_rng(seed, "trace-grad");
  double worst = 0.0;
  for (std::size_t n = 0; n < matrices; ++n) {
    const auto L = std::uniform_int_distribution<std::size_t>(2, 5)(rng);
    const auto M = std::uniform_int_distribution<std::size_t>(L, 8)(rng);
    const Matrix a = distinct_sigma_matrix(L, M, rng);
    const Matrix g = trace_norm_subgradient(a);
    const Matrix fd = finite_diff_grad([](const Matrix& x) { return trace_norm(x); }, a, kFdEps);
    for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, grad_rel(g[i], fd[i]));
  }
  return worst;
}

/// CRD-Small end to end: CTC loss of a two-sequence batch, analytic
/// gradients against central differences on `samples` parameter entries
/// drawn evenly over tensors (so APL coefficients and heads are covered).
inline double crd_gradient(std::size_t samples, std::uint64_t seed) {
  const Language lang = Language::with_tokens("a", 6);
  CRDModel m = build_model(Preset::Small, PlacementSpec::defaults(Preset::Small), {lang}, seed);
  Rng rng = make_rng(seed, "crd-grad");
  for (auto& slot : m.slots)
    for (auto& [name, act] : slot.per_language)
      for (double& v : act.lambda.values()) v = uniform(rng, -0.5, 0.5);

  std::vector<Utterance> utts(2);
  for (std::size_t i = 0; i < utts.size(); ++i) {
    utts[i].labels.tokens = random_labels(2 + i, lang.vocab_size(), rng);
    utts[i].features.frames = random_features(6 + 2 * i, rng);
  }
  const std::vector<const Utterance*> batch{&utts[0], &utts[1]};
  const Gradients grads = batch_gradients(m, batch, lang.name, all_params()).grads;

  auto params = parameters(m);
  double worst = 0.0;
  for (std::size_t n = 0; n < samples; ++n) {
    const auto& p = params[std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(rng)];
    const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, p.value->size() - 1)(rng);
    double& v = (*p.value)[idx];
    const double keep = v;
    v = keep + kFdEps;
    const double up = batch_gradients(m, batch, lang.name, [](const ParamInfo&) { return false; }).loss;
    v = keep - kFdEps;
    const double down = batch_gradients(m, batch, lang.name, [](const ParamInfo&) { return false; }).loss;
    v = keep;
    // Floor at the resolution of a central difference on an O(10) loss.
    worst = std::max(worst, grad_rel(grads.at(p.info.name)[idx], (up - down) / (2 * kFdEps), 1e-6));
  }
  return worst;
}

/// Worst gap between trace_norm and Σ√eig(A Aᵀ) over random L x M matrices.
inline double trace_norm_vs_gram(std::size_t matrices, std::uint64_t seed) {
  Rng rng = make_rng(seed, "trace");
  double worst = 0.0;
  for (std::size_t n = 0; n < matrices; ++n) {
    const auto L = std::uniform_int_distribution<std::size_t>(1, 5)(rng);
    const auto M = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const Matrix a = oracle::random_matrix(L, M, rng, -2.0, 2.0);
    worst = std::max(worst, std::abs(trace_norm(a) - oracle::trace_norm_gram(a)));
  }
  return worst;
}

inline AudioClip tone(double hz, double seconds, double rate = 8000.0, double amp = 0.5) {
  AudioClip c;
  c.sample_rate = rate;
  const auto n = static_cast<std::size_t>(seconds * rate);
  for (std::size_t i = 0; i < n; ++i) c.samples.push_back(amp * std::sin(2.0 * M_PI * hz * static_cast<double>(i) / rate));
  return c;
}

/// Filter index with the largest mean log energy for a 1 kHz tone, and the
/// index of the filter whose centre is closest to 1 kHz.
inline std::pair<std::size_t, std::size_t> tone_argmax() {
  const FeatureSequence fs = log_mel(tone(1000.0, 0.5));
  std::vector<double> mean(kMelBands, 0.0);
  for (std::size_t t = 0; t < fs.length(); ++t)
    for (std::size_t m = 0; m < kMelBands; ++m) mean[m] += fs.frames(t, m);
  const auto argmax = static_cast<std::size_t>(std::max_element(mean.begin(), mean.end()) - mean.begin());
  return {argmax, oracle::nearest_index(oracle::mel_centers(8000.0, kMelBands), 1000.0)};
}

/// Number of random lengths whose frame count disagrees with
/// 1 + floor((N - 200) / 80) at 8 kHz.
inline std::size_t framing_mismatches(std::size_t lengths, std::uint64_t seed) {
  Rng rng = make_rng(seed, "framing");
  std::size_t bad = 0;
  for (std::size_t i = 0; i < lengths; ++i) {
    AudioClip c;
    const auto len = std::uniform_int_distribution<std::size_t>(200, 40000)(rng);
    c.samples.assign(len, 0.0);
    bad += frame_signal(c, kWindowMs, kHopMs).rows() != 1 + (len - 200) / 80;
  }
  return bad;
}

}  // namespace checks
