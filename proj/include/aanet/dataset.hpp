#pragma once

// Utterance datasets and their on-disk form:
//
//   "ADST" u32 version, str language, u32 n_tokens { str token }, u32 count,
//   count x { FBNK record, u32 U, i32[U] tokens }

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "aanet/binary_io.hpp"
#include "aanet/ctc.hpp"
#include "aanet/features.hpp"
#include "aanet/model.hpp"
#include "aanet/random.hpp"

namespace aanet {

struct Utterance {
  FeatureSequence features;
  LabelSequence labels;
};

struct Dataset {
  Language language;
  std::vector<Utterance> utterances;

  std::size_t size() const { return utterances.size(); }
  bool empty() const { return utterances.empty(); }
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

/// Deterministic 3:1 train/test split, a function of the data and the seed only.
inline DatasetSplit split_dataset(const Dataset& d, std::uint64_t seed) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, "split/" + d.language.name);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t n_train = d.size() * 3 / 4;
  DatasetSplit s{{d.language, {}}, {d.language, {}}};
  for (std::size_t i = 0; i < idx.size(); ++i)
    (i < n_train ? s.train : s.test).utterances.push_back(d.utterances[idx[i]]);
  return s;
}

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(std::ostream& os, const Dataset& d) {
  using namespace io;
  write_magic(os, "ADST");
  write_pod<std::uint32_t>(os, kDatasetVersion);
  write_string(os, d.language.name);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d.language.vocab.size()));
  for (const auto& t : d.language.vocab) write_string(os, t);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d.size()));
  for (const auto& u : d.utterances) {
    write_fbnk(os, u.features);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(u.labels.tokens.size()));
    for (int t : u.labels.tokens) write_pod<std::int32_t>(os, t);
  }
  if (!os) throw Error("dataset write failed");
}

inline Dataset load_dataset(std::istream& is) {
  using namespace io;
  expect_magic(is, "ADST");
  if (read_pod<std::uint32_t>(is) != kDatasetVersion) throw FormatError("unsupported dataset version");
  Dataset d;
  d.language.name = read_string(is);
  const auto n_tok = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_tok; ++i) d.language.vocab.push_back(read_string(is));
  d.language.validate();
  const auto count = read_pod<std::uint32_t>(is);
  d.utterances.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Utterance u;
    u.features = read_fbnk(is);
    u.features.language = d.language.name;
    const auto n = read_pod<std::uint32_t>(is);
    if (n > u.features.length()) throw FormatError("utterance has more labels than frames");
    u.labels.language = d.language.name;
    for (std::uint32_t k = 0; k < n; ++k) {
      const auto t = read_pod<std::int32_t>(is);
      if (t <= 0 || static_cast<std::size_t>(t) >= d.language.vocab_size())
        throw FormatError("label out of vocabulary range");
      u.labels.tokens.push_back(t);
    }
    d.utterances.push_back(std::move(u));
  }
  return d;
}

inline void save_dataset(const std::string& path, const Dataset& d) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  save_dataset(os, d);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  return load_dataset(is);
}

}  // namespace aanet
