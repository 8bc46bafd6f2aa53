#pragma once

// CNN -> BiGRU -> FC acoustic model with per-language activation slots and
// per-language output heads. Conv, GRU and FC weights are shared by every
// language; only adaptive slots and heads are keyed by language.
//
// Shape law: convolutions use 5x5 kernels, stride 1 / padding 2 in time and
// stride 2 / padding 2 in frequency, so T' = T and each conv layer maps
// F -> floor((F - 1) / 2) + 1 frequency bins (40 -> 20 -> 10 -> 5).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "aanet/activations.hpp"
#include "aanet/error.hpp"
#include "aanet/features.hpp"
#include "aanet/hash.hpp"
#include "aanet/numeric.hpp"
#include "aanet/random.hpp"

namespace aanet {

inline constexpr const char* kBlankToken = "<blank>";
inline constexpr std::size_t kDefaultBottleneckDim = 80;

struct Language {
  std::string name;
  std::vector<std::string> vocab;  // vocab[0] is the blank

  std::size_t vocab_size() const { return vocab.size(); }

  /// A language with `tokens` non-blank symbols named t1..tN.
  static Language with_tokens(std::string name, std::size_t tokens) {
    Language l{std::move(name), {kBlankToken}};
    for (std::size_t i = 1; i <= tokens; ++i) l.vocab.push_back("t" + std::to_string(i));
    return l;
  }

  void validate() const {
    if (name.empty()) throw Error("language name must be nonempty");
    if (vocab.empty() || vocab[0] != kBlankToken) throw Error("language '" + name + "' vocab must start with the blank");
    if (std::count(vocab.begin(), vocab.end(), std::string(kBlankToken)) != 1)
      throw Error("language '" + name + "' has more than one blank");
  }
};

enum class Preset { Small, Large };

inline std::string to_string(Preset p) { return p == Preset::Small ? "small" : "large"; }

inline Preset parse_preset(const std::string& s) {
  if (s == "small" || s == "Small" || s == "crd-small") return Preset::Small;
  if (s == "large" || s == "Large" || s == "crd-large") return Preset::Large;
  throw Error("unknown preset '" + s + "'");
}

struct PresetShape {
  std::size_t conv_layers, conv_channels, gru_layers, gru_units, fc_layers, fc_units;
  std::size_t adaptive_gru, adaptive_fc;
};

inline PresetShape preset_shape(Preset p) {
  if (p == Preset::Small) return {2, 32, 2, 128, 2, 1024, 1, 1};
  return {3, 64, 3, 256, 2, 1024, 2, 1};
}

/// Which layers carry adaptive slots: the last `gru` GRU layers and the
/// first `dnn` FC layers. Written as e.g. "2GRU,1DNN".
struct PlacementSpec {
  std::size_t gru = 0;
  std::size_t dnn = 0;

  static PlacementSpec parse(const std::string& text) {
    PlacementSpec p;
    if (text.empty() || text == "none") return p;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
      std::size_t pos = 0;
      unsigned long n = 0;
      try {
        n = std::stoul(part, &pos);
      } catch (const std::exception&) {
        throw Error("bad placement element '" + part + "'");
      }
      const std::string kind = part.substr(pos);
      if (kind == "GRU") p.gru = n;
      else if (kind == "DNN" || kind == "FC") p.dnn = n;
      else throw Error("bad placement element '" + part + "'");
    }
    return p;
  }

  std::string str() const { return std::to_string(gru) + "GRU," + std::to_string(dnn) + "DNN"; }

  static PlacementSpec defaults(Preset p) {
    const auto s = preset_shape(p);
    return {s.adaptive_gru, s.adaptive_fc};
  }
};

// ---------------------------------------------------------------------------
// Layers

struct ConvLayer {
  static constexpr std::size_t kKernel = 5;
  static constexpr std::size_t kPad = 2;
  static constexpr std::size_t kFreqStride = 2;

  std::size_t in_channels = 0, out_channels = 0, freq_in = 0;
  Matrix weight;  // (kt * 5 + kf) * in_channels + ci  rows, out_channels cols

  std::size_t freq_out() const { return (freq_in + 2 * kPad - kKernel) / kFreqStride + 1; }
  std::size_t patch_size() const { return kKernel * kKernel * in_channels; }

  double& w(std::size_t co, std::size_t ci, std::size_t kt, std::size_t kf) {
    return weight((kt * kKernel + kf) * in_channels + ci, co);
  }
  double w(std::size_t co, std::size_t ci, std::size_t kt, std::size_t kf) const {
    return weight((kt * kKernel + kf) * in_channels + ci, co);
  }
};

/// One direction of a GRU:
///   z = sigmoid(x Wz + h Uz + bz),  r = sigmoid(x Wr + h Ur + br)
///   n = tanh(x Wn + (r * h) Un + bn),  h' = (1 - z) * n + z * h
struct GruDirection {
  Matrix w;     // input x 3H, gate order [z | r | n]
  Matrix u_zr;  // H x 2H
  Matrix u_n;   // H x H
  Matrix b;     // 1 x 3H
};

struct BiGRULayer {
  std::size_t input = 0, hidden = 0;
  GruDirection forward, backward;
};

struct FCLayer {
  Matrix w;  // in x out
  Matrix b;  // 1 x out

  std::size_t in() const { return w.rows(); }
  std::size_t out() const { return w.cols(); }
};

enum class LayerKind { Conv, Gru, Fc };

enum class ParamGroup { Shared, Activation, Head };

struct ParamInfo {
  std::string name;
  ParamGroup group;
  std::size_t stage;      // position in the forward pipeline
  std::string language;   // empty for shared parameters
};

template <typename M>
struct ParamRefT {
  ParamInfo info;
  M* value;
};
using ParamRef = ParamRefT<Matrix>;
using ConstParamRef = ParamRefT<const Matrix>;

using Gradients = std::map<std::string, Matrix>;
using ParamFilter = std::function<bool(const ParamInfo&)>;

// ---------------------------------------------------------------------------

struct CRDModel {
  Preset preset = Preset::Small;
  PlacementSpec placement;
  std::size_t apl_units = kDefaultAplUnits;
  std::uint64_t seed = 0;

  std::vector<ConvLayer> conv;
  std::vector<BiGRULayer> gru;
  std::vector<FCLayer> fc;
  std::optional<FCLayer> bottleneck;  // sits between fc[0] and fc[1], fixed ReLU

  std::vector<ActivationSlot> slots;  // one per conv/gru/fc layer, by layer index
  std::vector<Language> languages;    // registration order
  std::map<std::string, FCLayer> heads;

  std::size_t layer_count() const { return conv.size() + gru.size() + fc.size(); }

  LayerKind layer_kind(std::size_t layer) const {
    if (layer < conv.size()) return LayerKind::Conv;
    if (layer < conv.size() + gru.size()) return LayerKind::Gru;
    if (layer < layer_count()) return LayerKind::Fc;
    throw Error("layer index " + std::to_string(layer) + " out of range");
  }

  std::size_t gru_layer_index(std::size_t j) const { return conv.size() + j; }
  std::size_t fc_layer_index(std::size_t k) const { return conv.size() + gru.size() + k; }

  std::size_t bottleneck_stage() const { return conv.size() + gru.size() + 1; }
  std::size_t head_stage() const { return layer_count() + (bottleneck ? 1 : 0); }

  std::size_t stage_of_layer(std::size_t layer) const {
    const std::size_t first_fc = conv.size() + gru.size();
    if (bottleneck && layer > first_fc) return layer + 1;
    return layer;
  }

  std::vector<std::size_t> adaptive_layers() const {
    std::vector<std::size_t> out;
    for (const auto& s : slots)
      if (s.adaptive()) out.push_back(s.layer_index);
    return out;
  }

  bool has_language(const std::string& name) const {
    return std::any_of(languages.begin(), languages.end(), [&](const Language& l) { return l.name == name; });
  }

  const Language& language(const std::string& name) const {
    for (const auto& l : languages)
      if (l.name == name) return l;
    throw Error("language '" + name + "' is not registered");
  }

  std::size_t language_position(const std::string& name) const {
    for (std::size_t i = 0; i < languages.size(); ++i)
      if (languages[i].name == name) return i;
    throw Error("language '" + name + "' is not registered");
  }

  /// Features entering the first GRU layer per frame.
  std::size_t conv_output_width() const {
    return conv.empty() ? kMelBands : conv.back().freq_out() * conv.back().out_channels;
  }
};

namespace detail {

inline Matrix uniform_matrix(std::size_t rows, std::size_t cols, double k, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = uniform(rng, -k, k);
  return m;
}

inline FCLayer make_fc(std::size_t in, std::size_t out, Rng& rng) {
  const double k = 1.0 / std::sqrt(static_cast<double>(in));
  return {uniform_matrix(in, out, k, rng), uniform_matrix(1, out, k, rng)};
}

inline GruDirection make_gru_direction(std::size_t in, std::size_t h, Rng& rng) {
  const double kw = 1.0 / std::sqrt(static_cast<double>(in));
  const double ku = 1.0 / std::sqrt(static_cast<double>(h));
  GruDirection d;
  d.w = uniform_matrix(in, 3 * h, kw, rng);
  d.u_zr = uniform_matrix(h, 2 * h, ku, rng);
  d.u_n = uniform_matrix(h, h, ku, rng);
  d.b = uniform_matrix(1, 3 * h, kw, rng);
  return d;
}

template <typename Model, typename Visit>
void visit_params(Model& m, Visit&& visit) {
  using M = std::conditional_t<std::is_const_v<Model>, const Matrix, Matrix>;
  auto shared = [&](std::string name, std::size_t stage, M& value) {
    visit(ParamInfo{std::move(name), ParamGroup::Shared, stage, {}}, value);
  };
  for (std::size_t i = 0; i < m.conv.size(); ++i) shared("conv" + std::to_string(i) + ".w", i, m.conv[i].weight);
  for (std::size_t j = 0; j < m.gru.size(); ++j) {
    const std::size_t stage = m.conv.size() + j;
    for (int dir = 0; dir < 2; ++dir) {
      auto& d = dir == 0 ? m.gru[j].forward : m.gru[j].backward;
      const std::string p = "gru" + std::to_string(j) + (dir == 0 ? ".fw." : ".bw.");
      shared(p + "w", stage, d.w);
      shared(p + "u_zr", stage, d.u_zr);
      shared(p + "u_n", stage, d.u_n);
      shared(p + "b", stage, d.b);
    }
  }
  for (std::size_t k = 0; k < m.fc.size(); ++k) {
    const std::size_t stage = m.stage_of_layer(m.fc_layer_index(k));
    shared("fc" + std::to_string(k) + ".w", stage, m.fc[k].w);
    shared("fc" + std::to_string(k) + ".b", stage, m.fc[k].b);
    if (k == 0 && m.bottleneck) {
      shared("bottleneck.w", m.bottleneck_stage(), m.bottleneck->w);
      shared("bottleneck.b", m.bottleneck_stage(), m.bottleneck->b);
    }
  }
  for (auto& slot : m.slots) {
    if (!slot.adaptive()) continue;
    const std::size_t stage = m.stage_of_layer(slot.layer_index);
    for (const auto& lang : m.languages) {
      auto it = slot.per_language.find(lang.name);
      if (it == slot.per_language.end()) continue;
      const std::string p = "act" + std::to_string(slot.layer_index) + "." + lang.name + ".";
      visit(ParamInfo{p + "lambda", ParamGroup::Activation, stage, lang.name}, it->second.lambda);
      visit(ParamInfo{p + "breakpoints", ParamGroup::Activation, stage, lang.name}, it->second.breakpoints);
    }
  }
  for (const auto& lang : m.languages) {
    auto it = m.heads.find(lang.name);
    if (it == m.heads.end()) continue;
    visit(ParamInfo{"head." + lang.name + ".w", ParamGroup::Head, m.head_stage(), lang.name}, it->second.w);
    visit(ParamInfo{"head." + lang.name + ".b", ParamGroup::Head, m.head_stage(), lang.name}, it->second.b);
  }
}

}  // namespace detail

/// Every parameter tensor in canonical order: shared (pipeline order), then
/// activations (layer, then language registration order), then heads.
inline std::vector<ParamRef> parameters(CRDModel& m) {
  std::vector<ParamRef> out;
  detail::visit_params(m, [&](ParamInfo info, Matrix& v) { out.push_back({std::move(info), &v}); });
  return out;
}

inline std::vector<ConstParamRef> parameters(const CRDModel& m) {
  std::vector<ConstParamRef> out;
  detail::visit_params(m, [&](ParamInfo info, const Matrix& v) { out.push_back({std::move(info), &v}); });
  return out;
}

inline std::size_t parameter_count(const CRDModel& m, const ParamFilter& filter = {}) {
  std::size_t n = 0;
  for (const auto& p : parameters(m))
    if (!filter || filter(p.info)) n += p.value->size();
  return n;
}

/// SHA-256 over the selected parameter tensors (names and values).
inline std::string parameter_hash(const CRDModel& m, const ParamFilter& filter = {}) {
  Sha256 h;
  for (const auto& p : parameters(m)) {
    if (filter && !filter(p.info)) continue;
    h.update(p.info.name);
    h.update(*p.value);
  }
  return h.hex();
}

inline ParamFilter shared_params() {
  return [](const ParamInfo& p) { return p.group == ParamGroup::Shared; };
}

inline ParamFilter all_params() {
  return [](const ParamInfo&) { return true; };
}

/// A language's own activations and head.
inline ParamFilter language_params(std::string language) {
  return [language = std::move(language)](const ParamInfo& p) {
    return p.group != ParamGroup::Shared && p.language == language;
  };
}

inline void add_language_parameters(CRDModel& m, const Language& lang) {
  lang.validate();
  if (m.has_language(lang.name)) throw Error("language '" + lang.name + "' is already registered");
  // Every language starts from the same draws; languages diverge only through training.
  for (auto& slot : m.slots) {
    if (!slot.adaptive()) continue;
    Rng rng = make_rng(m.seed, "act", slot.layer_index);
    slot.per_language.emplace(lang.name, APLActivation::initialized(m.apl_units, rng));
  }
  Rng rng = make_rng(m.seed, "head");
  const std::size_t in = m.fc.empty() ? m.gru.back().hidden : m.fc.back().out();
  m.heads.emplace(lang.name, detail::make_fc(in, lang.vocab_size(), rng));
  m.languages.push_back(lang);
}

inline CRDModel build_model(Preset preset, const PlacementSpec& placement, const std::vector<Language>& languages,
                            std::uint64_t seed = 1, std::size_t apl_units = kDefaultAplUnits) {
  if (languages.empty()) throw Error("build_model needs at least one language");
  const PresetShape shape = preset_shape(preset);
  if (placement.gru > shape.gru_layers)
    throw Error("placement names GRU layer " + std::to_string(placement.gru) + " but the preset has " +
                std::to_string(shape.gru_layers));
  if (placement.dnn > shape.fc_layers)
    throw Error("placement names DNN layer " + std::to_string(placement.dnn) + " but the preset has " +
                std::to_string(shape.fc_layers));
  if (apl_units == 0) throw Error("APL unit count must be at least 1");

  CRDModel m;
  m.preset = preset;
  m.placement = placement;
  m.apl_units = apl_units;
  m.seed = seed;
  Rng rng = make_rng(seed, "shared");

  std::size_t channels = 1, freq = kMelBands;
  for (std::size_t i = 0; i < shape.conv_layers; ++i) {
    ConvLayer c;
    c.in_channels = channels;
    c.out_channels = shape.conv_channels;
    c.freq_in = freq;
    c.weight = detail::uniform_matrix(c.patch_size(), c.out_channels,
                                      1.0 / std::sqrt(static_cast<double>(c.patch_size())), rng);
    channels = c.out_channels;
    freq = c.freq_out();
    m.conv.push_back(std::move(c));
  }
  std::size_t width = m.conv_output_width();
  for (std::size_t j = 0; j < shape.gru_layers; ++j) {
    BiGRULayer g;
    g.input = width;
    g.hidden = shape.gru_units;
    g.forward = detail::make_gru_direction(width, g.hidden, rng);
    g.backward = detail::make_gru_direction(width, g.hidden, rng);
    width = g.hidden;
    m.gru.push_back(std::move(g));
  }
  for (std::size_t k = 0; k < shape.fc_layers; ++k) {
    m.fc.push_back(detail::make_fc(width, shape.fc_units, rng));
    width = shape.fc_units;
  }

  m.slots.resize(m.layer_count());
  for (std::size_t i = 0; i < m.slots.size(); ++i) m.slots[i].layer_index = i;
  for (std::size_t j = shape.gru_layers - placement.gru; j < shape.gru_layers; ++j)
    m.slots[m.gru_layer_index(j)].kind = SlotKind::Adaptive;
  for (std::size_t k = 0; k < placement.dnn; ++k) m.slots[m.fc_layer_index(k)].kind = SlotKind::Adaptive;

  for (const auto& lang : languages) add_language_parameters(m, lang);
  return m;
}

/// Adds a fixed-ReLU FC layer of width `dim` between the first and second FC
/// layers. The second FC layer is re-created with the narrower input.
inline CRDModel insert_bottleneck(CRDModel m, std::size_t dim = kDefaultBottleneckDim) {
  if (m.fc.size() < 2) throw Error("bottleneck needs at least two FC layers");
  if (m.bottleneck) throw Error("model already has a bottleneck");
  if (dim == 0) throw Error("bottleneck width must be positive");
  Rng rng = make_rng(m.seed, "bottleneck");
  m.bottleneck = detail::make_fc(m.fc[0].out(), dim, rng);
  m.fc[1] = detail::make_fc(dim, m.fc[1].out(), rng);
  return m;
}

/// Registers `target` with fresh adaptive activations in every adaptive slot
/// and a fresh head. Shared weights and other languages are untouched.
inline CRDModel replace_activation_for_language(CRDModel m, const std::string& source, const Language& target) {
  if (!m.has_language(source)) throw Error("source language '" + source + "' is not registered");
  add_language_parameters(m, target);
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

struct SeqSpan {
  std::size_t offset = 0;  // first frame row in the concatenated batch
  std::size_t length = 0;
};

struct ConvCache {
  Matrix cols;  // im2col patches
  Matrix pre;   // pre-activation, rows (t, f_out), cols channels
};

struct GruDirCache {
  Matrix z, r, n, h;  // rows indexed by frame, not processing order
};

struct GruCache {
  Matrix input;
  GruDirCache fw, bw;
};

struct DenseCache {
  Matrix input;
  Matrix pre;
};

struct ForwardCache {
  std::string language;
  std::vector<SeqSpan> spans;
  std::vector<ConvCache> conv;
  std::vector<GruCache> gru;
  std::vector<DenseCache> fc;
  std::optional<DenseCache> bottleneck;
  DenseCache head;
  Matrix log_probs;  // total_frames x V

  std::size_t total_frames() const { return spans.empty() ? 0 : spans.back().offset + spans.back().length; }

  Matrix sequence_log_probs(std::size_t s) const {
    Matrix out(spans[s].length, log_probs.cols());
    std::copy_n(log_probs.data() + spans[s].offset * log_probs.cols(), out.size(), out.data());
    return out;
  }
};

namespace detail {

inline Matrix im2col(const ConvLayer& c, const Matrix& input, const std::vector<SeqSpan>& spans) {
  const std::size_t fin = c.freq_in, fout = c.freq_out(), cin = c.in_channels;
  const std::size_t total = spans.empty() ? 0 : spans.back().offset + spans.back().length;
  Matrix cols(total * fout, c.patch_size());
  for (const auto& sp : spans) {
    for (std::size_t t = 0; t < sp.length; ++t) {
      for (std::size_t fo = 0; fo < fout; ++fo) {
        double* dst = cols.data() + ((sp.offset + t) * fout + fo) * cols.cols();
        for (std::size_t kt = 0; kt < ConvLayer::kKernel; ++kt) {
          const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t + kt) - static_cast<std::ptrdiff_t>(ConvLayer::kPad);
          if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(sp.length)) continue;
          for (std::size_t kf = 0; kf < ConvLayer::kKernel; ++kf) {
            const std::ptrdiff_t fi = static_cast<std::ptrdiff_t>(fo * ConvLayer::kFreqStride + kf) -
                                      static_cast<std::ptrdiff_t>(ConvLayer::kPad);
            if (fi < 0 || fi >= static_cast<std::ptrdiff_t>(fin)) continue;
            const double* src = input.data() + ((sp.offset + static_cast<std::size_t>(ti)) * fin +
                                                static_cast<std::size_t>(fi)) * cin;
            std::copy_n(src, cin, dst + (kt * ConvLayer::kKernel + kf) * cin);
          }
        }
      }
    }
  }
  return cols;
}

inline void col2im_accumulate(const ConvLayer& c, const Matrix& dcols, const std::vector<SeqSpan>& spans,
                              Matrix& dinput) {
  const std::size_t fin = c.freq_in, fout = c.freq_out(), cin = c.in_channels;
  for (const auto& sp : spans) {
    for (std::size_t t = 0; t < sp.length; ++t) {
      for (std::size_t fo = 0; fo < fout; ++fo) {
        const double* src = dcols.data() + ((sp.offset + t) * fout + fo) * dcols.cols();
        for (std::size_t kt = 0; kt < ConvLayer::kKernel; ++kt) {
          const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t + kt) - static_cast<std::ptrdiff_t>(ConvLayer::kPad);
          if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(sp.length)) continue;
          for (std::size_t kf = 0; kf < ConvLayer::kKernel; ++kf) {
            const std::ptrdiff_t fi = static_cast<std::ptrdiff_t>(fo * ConvLayer::kFreqStride + kf) -
                                      static_cast<std::ptrdiff_t>(ConvLayer::kPad);
            if (fi < 0 || fi >= static_cast<std::ptrdiff_t>(fin)) continue;
            double* dst = dinput.data() + ((sp.offset + static_cast<std::size_t>(ti)) * fin +
                                           static_cast<std::size_t>(fi)) * cin;
            const double* s = src + (kt * ConvLayer::kKernel + kf) * cin;
            for (std::size_t ci = 0; ci < cin; ++ci) dst[ci] += s[ci];
          }
        }
      }
    }
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Rows of the frames processed at step `i` by every sequence still running,
/// together with their sequence indices.
inline void active_rows(const std::vector<SeqSpan>& spans, std::size_t i, bool reverse,
                        std::vector<std::size_t>& seqs, std::vector<std::size_t>& rows) {
  seqs.clear();
  rows.clear();
  for (std::size_t s = 0; s < spans.size(); ++s) {
    if (i >= spans[s].length) continue;
    seqs.push_back(s);
    rows.push_back(spans[s].offset + (reverse ? spans[s].length - 1 - i : i));
  }
}

inline std::size_t max_length(const std::vector<SeqSpan>& spans) {
  std::size_t n = 0;
  for (const auto& sp : spans) n = std::max(n, sp.length);
  return n;
}

/// One direction of a GRU over all sequences at once; step i advances every
/// sequence longer than i.
inline void gru_direction_forward(const GruDirection& d, std::size_t hidden, const Matrix& input,
                                  const std::vector<SeqSpan>& spans, bool reverse, GruDirCache& cache) {
  const std::size_t h = hidden;
  Matrix proj(input.rows(), 3 * h);
  matmul_accumulate(proj, input, d.w);
  add_row_vector(proj, d.b);
  cache.z = Matrix(input.rows(), h);
  cache.r = Matrix(input.rows(), h);
  cache.n = Matrix(input.rows(), h);
  cache.h = Matrix(input.rows(), h);
  Matrix state(spans.size(), h);
  std::vector<std::size_t> seqs, rows;
  for (std::size_t i = 0, steps = max_length(spans); i < steps; ++i) {
    active_rows(spans, i, reverse, seqs, rows);
    const std::size_t na = rows.size();
    Matrix hp(na, h), zr(na, 2 * h), rh(na, h), an(na, h);
    for (std::size_t a = 0; a < na; ++a) {
      std::copy_n(state.data() + seqs[a] * h, h, hp.data() + a * h);
      std::copy_n(proj.data() + rows[a] * 3 * h, 2 * h, zr.data() + a * 2 * h);
      std::copy_n(proj.data() + rows[a] * 3 * h + 2 * h, h, an.data() + a * h);
    }
    matmul_accumulate(zr, hp, d.u_zr);
    for (std::size_t a = 0; a < na; ++a) {
      double* z = cache.z.data() + rows[a] * h;
      double* r = cache.r.data() + rows[a] * h;
      const double* g = zr.data() + a * 2 * h;
      const double* hv = hp.data() + a * h;
      double* rhv = rh.data() + a * h;
      for (std::size_t j = 0; j < h; ++j) {
        z[j] = sigmoid(g[j]);
        r[j] = sigmoid(g[h + j]);
        rhv[j] = r[j] * hv[j];
      }
    }
    matmul_accumulate(an, rh, d.u_n);
    for (std::size_t a = 0; a < na; ++a) {
      const double* z = cache.z.data() + rows[a] * h;
      double* n = cache.n.data() + rows[a] * h;
      double* ho = cache.h.data() + rows[a] * h;
      const double* av = an.data() + a * h;
      double* st = state.data() + seqs[a] * h;
      for (std::size_t j = 0; j < h; ++j) {
        n[j] = std::tanh(av[j]);
        ho[j] = (1.0 - z[j]) * n[j] + z[j] * st[j];
        st[j] = ho[j];
      }
    }
  }
}

inline std::vector<SeqSpan> spans_for(std::span<const Matrix* const> inputs) {
  std::vector<SeqSpan> spans;
  std::size_t offset = 0;
  for (const Matrix* x : inputs) {
    if (x->rows() == 0) throw Error("empty feature sequence");
    spans.push_back({offset, x->rows()});
    offset += x->rows();
  }
  return spans;
}

}  // namespace detail

/// Forward pass over a batch of sequences of one language. Frames of all
/// sequences are stacked so per-frame layers run as a single product.
inline ForwardCache forward_batch(const CRDModel& m, std::span<const Matrix* const> inputs,
                                  const std::string& language) {
  if (!m.has_language(language)) throw Error("language '" + language + "' is not registered");
  ForwardCache cache;
  cache.language = language;
  cache.spans = detail::spans_for(inputs);
  const std::size_t total = cache.total_frames();

  Matrix x(total, kMelBands);
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    if (inputs[s]->cols() != kMelBands)
      throw ShapeError("model input must have 40 columns", inputs[s]->rows(), inputs[s]->cols(), 0, kMelBands);
    std::copy_n(inputs[s]->data(), inputs[s]->size(), x.data() + cache.spans[s].offset * kMelBands);
  }
  // As conv input: rows (t, f), one channel.
  x = std::move(x).reshaped(total * kMelBands, 1);

  for (std::size_t i = 0; i < m.conv.size(); ++i) {
    const ConvLayer& c = m.conv[i];
    if (x.cols() != c.in_channels) throw ShapeError("conv channel mismatch", x.rows(), x.cols(), 0, c.in_channels);
    ConvCache cc;
    cc.cols = detail::im2col(c, x, cache.spans);
    cc.pre = matmul(cc.cols, c.weight);
    x = slot_forward(m.slots[i], language, cc.pre);
    cache.conv.push_back(std::move(cc));
  }
  x = std::move(x).reshaped(total, m.conv_output_width());

  for (std::size_t j = 0; j < m.gru.size(); ++j) {
    const BiGRULayer& g = m.gru[j];
    if (x.cols() != g.input) throw ShapeError("gru input width", x.rows(), x.cols(), 0, g.input);
    GruCache gc;
    gc.input = std::move(x);
    detail::gru_direction_forward(g.forward, g.hidden, gc.input, cache.spans, false, gc.fw);
    detail::gru_direction_forward(g.backward, g.hidden, gc.input, cache.spans, true, gc.bw);
    const ActivationSlot& slot = m.slots[m.gru_layer_index(j)];
    x = slot_forward(slot, language, gc.fw.h);
    add_inplace(x, slot_forward(slot, language, gc.bw.h));
    cache.gru.push_back(std::move(gc));
  }

  auto dense = [&](const FCLayer& layer, Matrix in) {
    if (in.cols() != layer.in()) throw ShapeError("fc input width", in.rows(), in.cols(), 0, layer.in());
    DenseCache dc;
    dc.input = std::move(in);
    dc.pre = matmul(dc.input, layer.w);
    add_row_vector(dc.pre, layer.b);
    return dc;
  };

  for (std::size_t k = 0; k < m.fc.size(); ++k) {
    DenseCache dc = dense(m.fc[k], std::move(x));
    x = slot_forward(m.slots[m.fc_layer_index(k)], language, dc.pre);
    cache.fc.push_back(std::move(dc));
    if (k == 0 && m.bottleneck) {
      DenseCache bc = dense(*m.bottleneck, std::move(x));
      x = slot_forward(ActivationSlot{}, language, bc.pre);
      cache.bottleneck = std::move(bc);
    }
  }

  cache.head = dense(m.heads.at(language), std::move(x));
  cache.log_probs = log_softmax_rows(cache.head.pre);
  return cache;
}

/// T x V per-frame log posteriors for one sequence.
inline Matrix model_forward(const CRDModel& m, const Matrix& features, const std::string& language) {
  const Matrix* in[] = {&features};
  return forward_batch(m, in, language).log_probs;
}

inline Matrix model_forward(const CRDModel& m, const FeatureSequence& feats, const std::string& language) {
  return model_forward(m, feats.frames, language);
}

// ---------------------------------------------------------------------------
// Backward pass

namespace detail {

struct GruDirGrads {
  Matrix* w = nullptr;
  Matrix* u_zr = nullptr;
  Matrix* u_n = nullptr;
  Matrix* b = nullptr;
  bool any() const { return w || u_zr || u_n || b; }
};

/// Backpropagates through one GRU direction given gradients on its hidden
/// outputs. Returns d(input projection) rows ordered like the input.
inline Matrix gru_direction_backward(const GruDirection& d, std::size_t hidden, const Matrix& input,
                                     const std::vector<SeqSpan>& spans, bool reverse, const GruDirCache& cache,
                                     const Matrix& dh_out, GruDirGrads grads, Matrix* dinput) {
  const std::size_t h = hidden;
  const std::size_t total = input.rows();
  Matrix dproj(total, 3 * h);
  Matrix hprev_all(total, h), rh_all(total, h);
  Matrix dnext(spans.size(), h);
  std::vector<std::size_t> seqs, rows;
  for (std::size_t i = max_length(spans); i-- > 0;) {
    active_rows(spans, i, reverse, seqs, rows);
    const std::size_t na = rows.size();
    Matrix dhp(na, h), dan(na, h), dzr(na, 2 * h);
    for (std::size_t a = 0; a < na; ++a) {
      const std::size_t t = rows[a];
      const std::size_t tp = reverse ? t + 1 : t - 1;  // previous step in processing order
      const double* hprev = i == 0 ? nullptr : cache.h.data() + tp * h;
      const double* z = cache.z.data() + t * h;
      const double* r = cache.r.data() + t * h;
      const double* n = cache.n.data() + t * h;
      const double* go = dh_out.data() + t * h;
      const double* dn_in = dnext.data() + seqs[a] * h;
      double* dp = dproj.data() + t * 3 * h;
      double* hp_row = hprev_all.data() + t * h;
      double* rh_row = rh_all.data() + t * h;
      double* dhpv = dhp.data() + a * h;
      double* danv = dan.data() + a * h;
      for (std::size_t j = 0; j < h; ++j) {
        const double hpv = hprev ? hprev[j] : 0.0;
        hp_row[j] = hpv;
        rh_row[j] = r[j] * hpv;
        const double dh = go[j] + dn_in[j];
        const double dn = dh * (1.0 - z[j]);
        const double dz = dh * (hpv - n[j]);
        dhpv[j] = dh * z[j];
        dp[2 * h + j] = danv[j] = dn * (1.0 - n[j] * n[j]);
        dp[j] = dz * z[j] * (1.0 - z[j]);
      }
    }
    const Matrix drh = matmul_a_bt(dan, d.u_n);
    for (std::size_t a = 0; a < na; ++a) {
      const std::size_t t = rows[a];
      const double* r = cache.r.data() + t * h;
      const double* hp_row = hprev_all.data() + t * h;
      const double* drv = drh.data() + a * h;
      double* dp = dproj.data() + t * 3 * h;
      double* dhpv = dhp.data() + a * h;
      for (std::size_t j = 0; j < h; ++j) {
        dhpv[j] += drv[j] * r[j];
        dp[h + j] = drv[j] * hp_row[j] * r[j] * (1.0 - r[j]);
      }
      std::copy_n(dp, 2 * h, dzr.data() + a * 2 * h);
    }
    // dh_prev += [daz, dar] U_zrᵀ
    add_inplace(dhp, matmul_a_bt(dzr, d.u_zr));
    for (std::size_t a = 0; a < na; ++a) std::copy_n(dhp.data() + a * h, h, dnext.data() + seqs[a] * h);
  }
  if (grads.u_zr || grads.u_n) {
    Matrix dzr(total, 2 * h), dn(total, h);
    for (std::size_t t = 0; t < total; ++t) {
      std::copy_n(dproj.data() + t * 3 * h, 2 * h, dzr.data() + t * 2 * h);
      std::copy_n(dproj.data() + t * 3 * h + 2 * h, h, dn.data() + t * h);
    }
    if (grads.u_zr) matmul_at_b_accumulate(*grads.u_zr, hprev_all, dzr);
    if (grads.u_n) matmul_at_b_accumulate(*grads.u_n, rh_all, dn);
  }
  if (grads.w) matmul_at_b_accumulate(*grads.w, input, dproj);
  if (grads.b) accumulate_column_sums(*grads.b, dproj);
  if (dinput) add_inplace(*dinput, matmul_a_bt(dproj, d.w));
  return dproj;
}

}  // namespace detail

/// Gradients of a scalar loss with respect to every parameter accepted by
/// `filter`, given d(loss)/d(logits) for the cached batch. Backpropagation
/// stops at the lowest pipeline stage holding a selected parameter.
inline Gradients backward(const CRDModel& m, const ForwardCache& cache, const Matrix& dlogits,
                          const ParamFilter& filter) {
  require_same_shape("dlogits", dlogits, cache.log_probs);
  const std::string& lang = cache.language;
  Gradients grads;
  std::size_t lowest = m.head_stage() + 1;
  for (const auto& p : parameters(m)) {
    if (!filter(p.info)) continue;
    if (p.info.group != ParamGroup::Shared && p.info.language != lang) continue;
    grads.emplace(p.info.name, Matrix(p.value->rows(), p.value->cols()));
    lowest = std::min(lowest, p.info.stage);
  }
  if (grads.empty()) return grads;

  auto slot_grad = [&](std::size_t layer, const char* which) -> Matrix* {
    auto it = grads.find("act" + std::to_string(layer) + "." + lang + "." + which);
    return it == grads.end() ? nullptr : &it->second;
  };
  auto find = [&](const std::string& name) -> Matrix* {
    auto it = grads.find(name);
    return it == grads.end() ? nullptr : &it->second;
  };
  auto dense_backward = [&](const FCLayer& layer, const DenseCache& dc, const Matrix& dpre, const std::string& name,
                            std::size_t stage) -> Matrix {
    if (Matrix* gw = find(name + ".w")) matmul_at_b_accumulate(*gw, dc.input, dpre);
    if (Matrix* gb = find(name + ".b")) accumulate_column_sums(*gb, dpre);
    if (stage > lowest) return matmul_a_bt(dpre, layer.w);
    return {};
  };

  // Head
  Matrix dx = dense_backward(m.heads.at(lang), cache.head, dlogits, "head." + lang, m.head_stage());
  if (m.head_stage() <= lowest) return grads;

  for (std::size_t k = m.fc.size(); k-- > 0;) {
    if (k == 0 && m.bottleneck) {
      Matrix dpre(dx.rows(), dx.cols());
      slot_backward(ActivationSlot{}, lang, cache.bottleneck->pre, dx, &dpre, nullptr, nullptr);
      dx = dense_backward(*m.bottleneck, *cache.bottleneck, dpre, "bottleneck", m.bottleneck_stage());
      if (m.bottleneck_stage() <= lowest) return grads;
    }
    const std::size_t layer = m.fc_layer_index(k);
    const std::size_t stage = m.stage_of_layer(layer);
    Matrix dpre(dx.rows(), dx.cols());
    slot_backward(m.slots[layer], lang, cache.fc[k].pre, dx, &dpre, slot_grad(layer, "lambda"),
                  slot_grad(layer, "breakpoints"));
    dx = dense_backward(m.fc[k], cache.fc[k], dpre, "fc" + std::to_string(k), stage);
    if (stage <= lowest) return grads;
  }

  for (std::size_t j = m.gru.size(); j-- > 0;) {
    const BiGRULayer& g = m.gru[j];
    const GruCache& gc = cache.gru[j];
    const std::size_t layer = m.gru_layer_index(j);
    const std::size_t stage = m.stage_of_layer(layer);
    Matrix dh_fw(dx.rows(), dx.cols()), dh_bw(dx.rows(), dx.cols());
    Matrix* glam = slot_grad(layer, "lambda");
    Matrix* gbrk = slot_grad(layer, "breakpoints");
    slot_backward(m.slots[layer], lang, gc.fw.h, dx, &dh_fw, glam, gbrk);
    slot_backward(m.slots[layer], lang, gc.bw.h, dx, &dh_bw, glam, gbrk);
    const std::string p = "gru" + std::to_string(j);
    detail::GruDirGrads gf{find(p + ".fw.w"), find(p + ".fw.u_zr"), find(p + ".fw.u_n"), find(p + ".fw.b")};
    detail::GruDirGrads gb{find(p + ".bw.w"), find(p + ".bw.u_zr"), find(p + ".bw.u_n"), find(p + ".bw.b")};
    const bool need_input = stage > lowest;
    if (!need_input && !gf.any() && !gb.any()) return grads;
    Matrix dinput = need_input ? Matrix(gc.input.rows(), gc.input.cols()) : Matrix();
    detail::gru_direction_backward(g.forward, g.hidden, gc.input, cache.spans, false, gc.fw, dh_fw, gf,
                                   need_input ? &dinput : nullptr);
    detail::gru_direction_backward(g.backward, g.hidden, gc.input, cache.spans, true, gc.bw, dh_bw, gb,
                                   need_input ? &dinput : nullptr);
    if (!need_input) return grads;
    dx = std::move(dinput);
  }

  if (!m.conv.empty()) {
    const ConvLayer& last = m.conv.back();
    dx = std::move(dx).reshaped(dx.rows() * last.freq_out(), last.out_channels);
  }
  for (std::size_t i = m.conv.size(); i-- > 0;) {
    const ConvLayer& c = m.conv[i];
    const ConvCache& cc = cache.conv[i];
    Matrix dpre(cc.pre.rows(), cc.pre.cols());
    slot_backward(m.slots[i], lang, cc.pre, dx, &dpre, slot_grad(i, "lambda"), slot_grad(i, "breakpoints"));
    if (Matrix* gw = find("conv" + std::to_string(i) + ".w")) matmul_at_b_accumulate(*gw, cc.cols, dpre);
    if (i <= lowest) return grads;
    Matrix dcols = matmul_a_bt(dpre, c.weight);
    Matrix dinput(cc.cols.rows() / c.freq_out() * c.freq_in, c.in_channels);
    detail::col2im_accumulate(c, dcols, cache.spans, dinput);
    dx = std::move(dinput);
  }
  return grads;
}

}  // namespace aanet
