#pragma once

// Connectionist temporal classification over per-frame log posteriors.
// Blank is index 0 of every vocabulary. The loss sums over all frame-level
// paths that collapse (merge repeats, drop blanks) to the label sequence;
// all recursions run in log space.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "aanet/error.hpp"
#include "aanet/numeric.hpp"

namespace aanet {

inline constexpr int kBlank = 0;

struct LabelSequence {
  std::vector<int> tokens;  // each in [1, V-1]
  std::string language;
};

struct CTCResult {
  double loss = 0.0;    // -ln P(labels | posteriors)
  Matrix grad_logits;   // d loss / d pre-softmax logits, T x V
};

/// Frames needed to emit `labels`: one per token plus a separating blank
/// between each pair of equal neighbours.
inline std::size_t ctc_min_frames(const std::vector<int>& labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i) n += labels[i] == labels[i - 1];
  return n;
}

namespace detail {

inline void check_labels(const Matrix& log_probs, const std::vector<int>& labels) {
  if (log_probs.rows() == 0 || log_probs.cols() == 0) throw Error("CTC needs a nonempty posterior matrix");
  for (int l : labels)
    if (l <= kBlank || static_cast<std::size_t>(l) >= log_probs.cols())
      throw Error("label " + std::to_string(l) + " outside [1, " + std::to_string(log_probs.cols() - 1) + "]");
  if (log_probs.rows() < ctc_min_frames(labels)) throw AlignmentError();
}

}  // namespace detail

/// Forward-backward CTC. `log_probs` must be row-normalized log posteriors
/// (log-softmax of the logits); the returned gradient is with respect to
/// those logits.
inline CTCResult ctc_loss(const Matrix& log_probs, const std::vector<int>& labels) {
  detail::check_labels(log_probs, labels);
  const std::size_t T = log_probs.rows();
  const std::size_t V = log_probs.cols();
  const std::size_t S = 2 * labels.size() + 1;
  std::vector<int> ext(S, kBlank);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  auto can_skip = [&](std::size_t s) { return s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2]; };

  Matrix alpha(T, S, kNegInf);
  alpha(0, 0) = log_probs(0, ext[0]);
  if (S > 1) alpha(0, 1) = log_probs(0, ext[1]);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (can_skip(s)) a = log_add(a, alpha(t - 1, s - 2));
      alpha(t, s) = a == kNegInf ? kNegInf : a + log_probs(t, ext[s]);
    }
  }
  double log_p = alpha(T - 1, S - 1);
  if (S > 1) log_p = log_add(log_p, alpha(T - 1, S - 2));
  if (!std::isfinite(log_p)) throw Error("CTC path probability is zero (non-finite posteriors)");

  // beta(t, s): log probability of emitting the remainder after frame t
  // given state s at frame t (frame t's emission excluded).
  Matrix beta(T, S, kNegInf);
  beta(T - 1, S - 1) = 0.0;
  if (S > 1) beta(T - 1, S - 2) = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double b = beta(t + 1, s) + log_probs(t + 1, ext[s]);
      if (s + 1 < S) b = log_add(b, beta(t + 1, s + 1) + log_probs(t + 1, ext[s + 1]));
      if (s + 2 < S && can_skip(s + 2)) b = log_add(b, beta(t + 1, s + 2) + log_probs(t + 1, ext[s + 2]));
      beta(t, s) = b;
    }
  }

  CTCResult res;
  res.loss = -log_p;
  res.grad_logits = Matrix(T, V);
  std::vector<double> occupancy(V);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(occupancy.begin(), occupancy.end(), kNegInf);
    for (std::size_t s = 0; s < S; ++s) {
      const double a = alpha(t, s) + beta(t, s);
      occupancy[ext[s]] = log_add(occupancy[ext[s]], a);
    }
    for (std::size_t k = 0; k < V; ++k) {
      const double post = occupancy[k] == kNegInf ? 0.0 : std::exp(occupancy[k] - log_p);
      res.grad_logits(t, k) = std::exp(log_probs(t, k)) - post;
    }
  }
  return res;
}

/// Collapse a frame path: merge repeats, then drop blanks.
inline std::vector<int> ctc_collapse(const std::vector<int>& path) {
  std::vector<int> out;
  int prev = -1;
  for (int c : path) {
    if (c != prev && c != kBlank) out.push_back(c);
    prev = c;
  }
  return out;
}

namespace detail {

/// Calls `visit(path, log_prob)` for every one of the V^T frame paths.
template <typename Visit>
void enumerate_paths(const Matrix& log_probs, Visit&& visit) {
  const std::size_t T = log_probs.rows(), V = log_probs.cols();
  double count = std::pow(static_cast<double>(V), static_cast<double>(T));
  if (count > 1e7) throw Error("brute-force CTC instance too large (V^T > 1e7)");
  std::vector<int> path(T, 0);
  while (true) {
    double lp = 0.0;
    for (std::size_t t = 0; t < T; ++t) lp += log_probs(t, path[t]);
    visit(static_cast<const std::vector<int>&>(path), lp);
    std::size_t t = T;
    while (t-- > 0) {
      if (++path[t] < static_cast<int>(V)) break;
      path[t] = 0;
    }
    if (t == static_cast<std::size_t>(-1)) break;
  }
}

}  // namespace detail

/// Exhaustive-path reference for ctc_loss on tiny instances.
inline double ctc_loss_bruteforce(const Matrix& log_probs, const std::vector<int>& labels) {
  if (labels.size() > log_probs.rows()) throw AlignmentError();
  double total = kNegInf;
  detail::enumerate_paths(log_probs, [&](const std::vector<int>& path, double lp) {
    if (ctc_collapse(path) == labels) total = log_add(total, lp);
  });
  if (total == kNegInf) throw AlignmentError();
  return -total;
}

/// Most probable collapsed sequence by exhaustive enumeration.
inline std::vector<int> ctc_map_bruteforce(const Matrix& log_probs) {
  std::map<std::vector<int>, double> mass;
  detail::enumerate_paths(log_probs, [&](const std::vector<int>& path, double lp) {
    auto [it, inserted] = mass.try_emplace(ctc_collapse(path), lp);
    if (!inserted) it->second = log_add(it->second, lp);
  });
  auto best = std::max_element(mass.begin(), mass.end(),
                               [](const auto& a, const auto& b) { return a.second < b.second; });
  return best->first;
}

/// Log probability of `labels` under the posteriors (empty labels allowed).
inline double ctc_log_prob(const Matrix& log_probs, const std::vector<int>& labels) {
  return -ctc_loss(log_probs, labels).loss;
}

inline std::vector<int> greedy_decode(const Matrix& log_probs) {
  std::vector<int> path(log_probs.rows());
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    const auto r = log_probs.row(t);
    path[t] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return ctc_collapse(path);
}

inline constexpr std::size_t kDefaultBeamWidth = 10;

/// Prefix beam search without a language model. Each prefix tracks the
/// probability of ending in blank and in its last symbol separately.
inline std::vector<int> beam_search_decode(const Matrix& log_probs, std::size_t width = kDefaultBeamWidth) {
  if (width == 0) throw Error("beam width must be at least 1");
  struct Beam {
    std::vector<int> prefix;
    double blank, nonblank;
    double total() const { return log_add(blank, nonblank); }
  };
  std::vector<Beam> beams{{{}, 0.0, kNegInf}};
  const std::size_t V = log_probs.cols();
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    std::map<std::vector<int>, std::pair<double, double>> next;
    auto add = [&](const std::vector<int>& p, double b, double nb) {
      auto [it, inserted] = next.try_emplace(p, b, nb);
      if (!inserted) {
        it->second.first = log_add(it->second.first, b);
        it->second.second = log_add(it->second.second, nb);
      }
    };
    for (const auto& beam : beams) {
      const double total = beam.total();
      add(beam.prefix, total + log_probs(t, kBlank), kNegInf);
      const int last = beam.prefix.empty() ? -1 : beam.prefix.back();
      for (std::size_t c = 1; c < V; ++c) {
        const double p = log_probs(t, c);
        std::vector<int> ext = beam.prefix;
        ext.push_back(static_cast<int>(c));
        if (static_cast<int>(c) == last) {
          add(ext, kNegInf, beam.blank + p);
          add(beam.prefix, kNegInf, beam.nonblank + p);
        } else {
          add(ext, kNegInf, total + p);
        }
      }
    }
    beams.clear();
    for (auto& [prefix, pr] : next) beams.push_back({prefix, pr.first, pr.second});
    std::stable_sort(beams.begin(), beams.end(),
                     [](const Beam& a, const Beam& b) { return a.total() > b.total(); });
    if (beams.size() > width) beams.resize(width);
  }
  return beams.front().prefix;
}

}  // namespace aanet
