#pragma once

// CRDM checkpoint format (little-endian):
//
//   "CRDM" u32 version
//   str preset, str placement, u32 apl_units, u64 seed
//   u32 n_languages { str name, u32 n_tokens { str token } }
//   u32 n_layers    { u32 kind (0 conv, 1 gru, 2 fc), u32 slot (0 relu, 1 adaptive), u32 d0, u32 d1, u32 d2 }
//   u32 has_bottleneck [u32 in, u32 out]
//   u32 n_shared    { str name, u32 rows, u32 cols, f64[rows*cols] }
//   u32 n_tables    { str language, u32 layer, u32 M, f64[M] lambda, f64[M] breakpoints }
//   u32 n_heads     { str language, matrix w, matrix b }
//
// Strings are u32 length + bytes. Conv dims are (in_channels, out_channels,
// freq_in); GRU dims (input, hidden, 0); FC dims (in, out, 0).

#include <fstream>
#include <string>

#include "aanet/binary_io.hpp"
#include "aanet/model.hpp"

namespace aanet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(std::ostream& os, const CRDModel& m) {
  using namespace io;
  write_magic(os, "CRDM");
  write_pod<std::uint32_t>(os, kCheckpointVersion);
  write_string(os, to_string(m.preset));
  write_string(os, m.placement.str());
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.apl_units));
  write_pod<std::uint64_t>(os, m.seed);

  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.languages.size()));
  for (const auto& l : m.languages) {
    write_string(os, l.name);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(l.vocab.size()));
    for (const auto& t : l.vocab) write_string(os, t);
  }

  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.layer_count()));
  for (std::size_t i = 0; i < m.layer_count(); ++i) {
    std::uint32_t kind = 0, d0 = 0, d1 = 0, d2 = 0;
    switch (m.layer_kind(i)) {
      case LayerKind::Conv:
        kind = 0;
        d0 = static_cast<std::uint32_t>(m.conv[i].in_channels);
        d1 = static_cast<std::uint32_t>(m.conv[i].out_channels);
        d2 = static_cast<std::uint32_t>(m.conv[i].freq_in);
        break;
      case LayerKind::Gru: {
        const auto& g = m.gru[i - m.conv.size()];
        kind = 1;
        d0 = static_cast<std::uint32_t>(g.input);
        d1 = static_cast<std::uint32_t>(g.hidden);
        break;
      }
      case LayerKind::Fc: {
        const auto& f = m.fc[i - m.conv.size() - m.gru.size()];
        kind = 2;
        d0 = static_cast<std::uint32_t>(f.in());
        d1 = static_cast<std::uint32_t>(f.out());
        break;
      }
    }
    write_pod<std::uint32_t>(os, kind);
    write_pod<std::uint32_t>(os, m.slots[i].adaptive() ? 1u : 0u);
    write_pod<std::uint32_t>(os, d0);
    write_pod<std::uint32_t>(os, d1);
    write_pod<std::uint32_t>(os, d2);
  }
  write_pod<std::uint32_t>(os, m.bottleneck ? 1u : 0u);
  if (m.bottleneck) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.bottleneck->in()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.bottleneck->out()));
  }

  const auto params = parameters(m);
  std::uint32_t n_shared = 0;
  for (const auto& p : params) n_shared += p.info.group == ParamGroup::Shared;
  write_pod<std::uint32_t>(os, n_shared);
  for (const auto& p : params) {
    if (p.info.group != ParamGroup::Shared) continue;
    write_string(os, p.info.name);
    write_matrix(os, *p.value);
  }

  std::uint32_t n_tables = 0;
  for (const auto& s : m.slots) n_tables += static_cast<std::uint32_t>(s.adaptive() ? s.per_language.size() : 0);
  write_pod<std::uint32_t>(os, n_tables);
  for (const auto& s : m.slots) {
    if (!s.adaptive()) continue;
    for (const auto& l : m.languages) {
      auto it = s.per_language.find(l.name);
      if (it == s.per_language.end()) continue;
      write_string(os, l.name);
      write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.layer_index));
      write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(it->second.unit_count()));
      write_matrix_body(os, it->second.lambda);
      write_matrix_body(os, it->second.breakpoints);
    }
  }

  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(m.heads.size()));
  for (const auto& l : m.languages) {
    auto it = m.heads.find(l.name);
    if (it == m.heads.end()) continue;
    write_string(os, l.name);
    write_matrix(os, it->second.w);
    write_matrix(os, it->second.b);
  }
  if (!os) throw Error("checkpoint write failed");
}

inline CRDModel load_checkpoint(std::istream& is) {
  using namespace io;
  expect_magic(is, "CRDM");
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  CRDModel m;
  m.preset = parse_preset(read_string(is));
  m.placement = PlacementSpec::parse(read_string(is));
  m.apl_units = read_pod<std::uint32_t>(is);
  m.seed = read_pod<std::uint64_t>(is);

  const auto n_lang = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_lang; ++i) {
    Language l;
    l.name = read_string(is);
    const auto n_tok = read_pod<std::uint32_t>(is);
    for (std::uint32_t t = 0; t < n_tok; ++t) l.vocab.push_back(read_string(is));
    l.validate();
    m.languages.push_back(std::move(l));
  }

  const auto n_layers = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const auto kind = read_pod<std::uint32_t>(is);
    const auto slot = read_pod<std::uint32_t>(is);
    const auto d0 = read_pod<std::uint32_t>(is);
    const auto d1 = read_pod<std::uint32_t>(is);
    const auto d2 = read_pod<std::uint32_t>(is);
    if (kind == 0) {
      ConvLayer c;
      c.in_channels = d0;
      c.out_channels = d1;
      c.freq_in = d2;
      c.weight = Matrix(c.patch_size(), c.out_channels);
      m.conv.push_back(std::move(c));
    } else if (kind == 1) {
      BiGRULayer g;
      g.input = d0;
      g.hidden = d1;
      for (GruDirection* d : {&g.forward, &g.backward}) {
        d->w = Matrix(d0, 3 * d1);
        d->u_zr = Matrix(d1, 2 * d1);
        d->u_n = Matrix(d1, d1);
        d->b = Matrix(1, 3 * d1);
      }
      m.gru.push_back(std::move(g));
    } else if (kind == 2) {
      m.fc.push_back({Matrix(d0, d1), Matrix(1, d1)});
    } else {
      throw FormatError("unknown layer kind " + std::to_string(kind));
    }
    ActivationSlot s;
    s.layer_index = i;
    s.kind = slot ? SlotKind::Adaptive : SlotKind::FixedRelu;
    m.slots.push_back(std::move(s));
  }
  if (read_pod<std::uint32_t>(is)) {
    const auto in = read_pod<std::uint32_t>(is);
    const auto out = read_pod<std::uint32_t>(is);
    m.bottleneck = FCLayer{Matrix(in, out), Matrix(1, out)};
  }

  const auto n_shared = read_pod<std::uint32_t>(is);
  std::vector<ParamRef> shared;
  for (auto& p : parameters(m))
    if (p.info.group == ParamGroup::Shared) shared.push_back(p);
  if (n_shared != shared.size()) throw FormatError("shared parameter table does not match the layer table");
  for (auto& p : shared) {
    const std::string name = read_string(is);
    if (name != p.info.name) throw FormatError("expected parameter '" + p.info.name + "', found '" + name + "'");
    Matrix v = read_matrix(is);
    if (!same_shape(v, *p.value)) throw FormatError("shape mismatch for parameter '" + name + "'");
    *p.value = std::move(v);
  }

  const auto n_tables = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_tables; ++i) {
    const std::string lang = read_string(is);
    const auto layer = read_pod<std::uint32_t>(is);
    const auto units = read_pod<std::uint32_t>(is);
    if (layer >= m.slots.size() || !m.slots[layer].adaptive())
      throw FormatError("activation table for non-adaptive layer " + std::to_string(layer));
    if (!m.has_language(lang)) throw FormatError("activation table for unknown language '" + lang + "'");
    APLActivation a;
    a.lambda = read_matrix_body(is, 1, units);
    a.breakpoints = read_matrix_body(is, 1, units);
    m.slots[layer].per_language[lang] = std::move(a);
  }

  const auto n_heads = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_heads; ++i) {
    const std::string lang = read_string(is);
    if (!m.has_language(lang)) throw FormatError("head for unknown language '" + lang + "'");
    FCLayer h;
    h.w = read_matrix(is);
    h.b = read_matrix(is);
    m.heads[lang] = std::move(h);
  }
  for (const auto& l : m.languages)
    if (!m.heads.count(l.name)) throw FormatError("language '" + l.name + "' has no head");
  return m;
}

inline void save_checkpoint(const std::string& path, const CRDModel& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  save_checkpoint(os, m);
}

inline CRDModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  return load_checkpoint(is);
}

}  // namespace aanet
