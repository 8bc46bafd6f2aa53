#pragma once

// Token error rate and dataset-level decoding.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "aanet/ctc.hpp"
#include "aanet/dataset.hpp"
#include "aanet/model.hpp"

namespace aanet {

inline std::size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Sum of Levenshtein distances over total reference length.
inline double token_error_rate(const std::vector<std::vector<int>>& refs, const std::vector<std::vector<int>>& hyps) {
  if (refs.size() != hyps.size())
    throw Error("token_error_rate: " + std::to_string(refs.size()) + " references vs " +
                std::to_string(hyps.size()) + " hypotheses");
  std::size_t edits = 0, length = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    edits += edit_distance(refs[i], hyps[i]);
    length += refs[i].size();
  }
  if (length == 0) return edits == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return static_cast<double>(edits) / static_cast<double>(length);
}

inline double token_error_rate(const std::vector<LabelSequence>& refs, const std::vector<std::vector<int>>& hyps) {
  std::vector<std::vector<int>> r;
  r.reserve(refs.size());
  for (const auto& l : refs) r.push_back(l.tokens);
  return token_error_rate(r, hyps);
}

enum class Decoder { Greedy, Beam };

struct EvalResult {
  double mean_ctc_loss = 0.0;
  double ter = 0.0;
  std::vector<std::vector<int>> hypotheses;
};

inline constexpr std::size_t kEvalChunk = 16;

inline EvalResult evaluate(const CRDModel& model, const Dataset& data, const std::string& language,
                           Decoder decoder = Decoder::Beam, std::size_t beam_width = kDefaultBeamWidth) {
  if (data.empty()) throw Error("cannot evaluate on an empty dataset");
  EvalResult res;
  std::vector<std::vector<int>> refs;
  double loss = 0.0;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const std::size_t end = std::min(data.size(), start + kEvalChunk);
    std::vector<const Matrix*> inputs;
    for (std::size_t i = start; i < end; ++i) inputs.push_back(&data.utterances[i].features.frames);
    const ForwardCache cache = forward_batch(model, inputs, language);
    for (std::size_t i = start; i < end; ++i) {
      const Matrix lp = cache.sequence_log_probs(i - start);
      const auto& labels = data.utterances[i].labels.tokens;
      loss += ctc_loss(lp, labels).loss;
      res.hypotheses.push_back(decoder == Decoder::Greedy ? greedy_decode(lp) : beam_search_decode(lp, beam_width));
      refs.push_back(labels);
    }
  }
  res.mean_ctc_loss = loss / static_cast<double>(data.size());
  res.ter = token_error_rate(refs, res.hypotheses);
  return res;
}

}  // namespace aanet
