// Deterministic synthetic multi-"language" corpus: per-language orthonormal
// codebooks (rotations of a shared base), utterance sampling, binary corpus
// files with a JSON manifest, and the n^alpha balanced language sampler.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gm/common.hpp"
#include "gm/tensor.hpp"

namespace gm {

struct SynthConfig {
  std::int64_t num_languages = 6;
  std::int64_t vocab_size = 6;
  std::int64_t feature_dim = 8;
  // Default counts preserve the production corpus imbalance ratios at desk
  // scale (hours scaled down to utterance counts).
  std::vector<std::int64_t> counts = {569, 805, 306, 833, 693, 1032};
  double noise_sigma = 0.08;
  std::int64_t u_min = 1;
  std::int64_t u_max = 3;
  std::int64_t repeat_min = 4;
  std::int64_t repeat_max = 8;
  // Conflict mode: all languages share one row set, but language l assigns
  // label v to base row (v + l) mod V. Labels are ambiguous without the
  // language identity by construction.
  bool conflict = false;

  void validate() const {
    if (num_languages < 1) throw InputError("synth: num_languages < 1");
    if (vocab_size < 1 || vocab_size > feature_dim)
      throw InputError("synth: need 1 <= vocab_size <= feature_dim for orthonormal rows");
    if (static_cast<std::int64_t>(counts.size()) != num_languages)
      throw InputError("synth: counts size != num_languages");
    for (auto c : counts)
      if (c < 1) throw InputError("synth: counts must be >= 1");
    if (u_min < 1 || u_max > 12 || u_min > u_max)
      throw InputError("synth: label count range must lie in [1,12]");
    if (repeat_min < 4 || repeat_max < repeat_min)
      throw InputError("synth: repeat range must start at >= 4");
    if (conflict && vocab_size < 2) throw InputError("synth: conflict mode needs vocab >= 2");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"num_languages", c.num_languages}, {"vocab_size", c.vocab_size},
                     {"feature_dim", c.feature_dim},     {"counts", c.counts},
                     {"noise_sigma", c.noise_sigma},     {"u_min", c.u_min},
                     {"u_max", c.u_max},                 {"repeat_min", c.repeat_min},
                     {"repeat_max", c.repeat_max},       {"conflict", c.conflict}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  SynthConfig d;
  c.num_languages = j.value("num_languages", d.num_languages);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.counts = j.value("counts", d.counts);
  c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  c.u_min = j.value("u_min", d.u_min);
  c.u_max = j.value("u_max", d.u_max);
  c.repeat_min = j.value("repeat_min", d.repeat_min);
  c.repeat_max = j.value("repeat_max", d.repeat_max);
  c.conflict = j.value("conflict", d.conflict);
}

struct SynthLanguage {
  std::int64_t lang = 0;
  Tensor<double> codebook;  // vocab_size x feature_dim, orthonormal rows
  double noise_sigma = 0.0;
};

// Storage is float32 regardless of the compute profile so corpus files are
// profile-independent.
struct Utterance {
  Tensor<float> frames;  // T x feature_dim
  std::vector<std::int64_t> labels;
  std::int64_t lang = 0;
  std::string id;
};

struct CorpusManifest {
  std::vector<std::int64_t> counts;
  std::vector<std::int64_t> first_offsets;  // byte offset of each language's first record
  std::uint64_t seed = 0;
  std::int64_t generator_version = 1;
  SynthConfig config;
};

struct Corpus {
  std::vector<Utterance> utterances;
  CorpusManifest manifest;

  std::vector<const Utterance*> language(std::int64_t l) const {
    std::vector<const Utterance*> out;
    for (const auto& u : utterances)
      if (u.lang == l) out.push_back(&u);
    return out;
  }
};

namespace detail {

// Orthonormalize the rows in place (modified Gram-Schmidt). Rows must be
// linearly independent, which holds almost surely for Gaussian draws.
inline void orthonormalize_rows(Tensor<double>& m) {
  for (std::int64_t i = 0; i < m.rows(); ++i) {
    for (std::int64_t k = 0; k < i; ++k) {
      double dot = 0;
      for (std::int64_t j = 0; j < m.cols(); ++j) dot += m.at(i, j) * m.at(k, j);
      for (std::int64_t j = 0; j < m.cols(); ++j) m.at(i, j) -= dot * m.at(k, j);
    }
    double norm = 0;
    for (std::int64_t j = 0; j < m.cols(); ++j) norm += m.at(i, j) * m.at(i, j);
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw NumericError("orthonormalize: degenerate rows");
    for (std::int64_t j = 0; j < m.cols(); ++j) m.at(i, j) /= norm;
  }
}

inline Tensor<double> gaussian(std::int64_t r, std::int64_t c, Rng& rng) {
  Tensor<double> m({r, c});
  for (std::int64_t i = 0; i < m.numel(); ++i) m[i] = rng.normal();
  return m;
}

}  // namespace detail

inline Tensor<double> base_codebook(std::uint64_t base_seed, const SynthConfig& cfg) {
  Rng rng(derive_seed(base_seed, "codebook.base"));
  Tensor<double> base = detail::gaussian(cfg.vocab_size, cfg.feature_dim, rng);
  detail::orthonormalize_rows(base);
  return base;
}

inline SynthLanguage make_language(std::uint64_t base_seed, std::int64_t lang,
                                   const SynthConfig& cfg) {
  cfg.validate();
  if (lang < 0 || lang >= cfg.num_languages)
    throw InputError("make_language: language index out of range");
  Tensor<double> base = base_codebook(base_seed, cfg);
  SynthLanguage out;
  out.lang = lang;
  out.noise_sigma = cfg.noise_sigma;
  if (cfg.conflict) {
    // Shared rows, per-language label permutation.
    out.codebook = Tensor<double>({cfg.vocab_size, cfg.feature_dim});
    for (std::int64_t v = 0; v < cfg.vocab_size; ++v) {
      std::int64_t src = (v + lang) % cfg.vocab_size;
      for (std::int64_t j = 0; j < cfg.feature_dim; ++j)
        out.codebook.at(v, j) = base.at(src, j);
    }
  } else if (lang == 0) {
    out.codebook = base;
  } else {
    Rng rng(derive_seed(base_seed, "codebook.rot", static_cast<std::uint64_t>(lang)));
    Tensor<double> q = detail::gaussian(cfg.feature_dim, cfg.feature_dim, rng);
    detail::orthonormalize_rows(q);  // rows of q form an orthonormal basis
    Tensor<double> rotated({cfg.vocab_size, cfg.feature_dim});
    for (std::int64_t v = 0; v < cfg.vocab_size; ++v)
      for (std::int64_t j = 0; j < cfg.feature_dim; ++j) {
        double s = 0;
        for (std::int64_t k = 0; k < cfg.feature_dim; ++k) s += base.at(v, k) * q.at(j, k);
        rotated.at(v, j) = s;
      }
    out.codebook = rotated;
  }
  return out;
}

// Each label's codebook row repeated r in [repeat_min, repeat_max] times plus
// Gaussian noise. T = sum of repeats >= 4*U always.
inline Utterance sample_utterance(const SynthLanguage& lang, const SynthConfig& cfg, Rng& rng,
                                  std::string id = {}) {
  const std::int64_t u =
      cfg.u_min + static_cast<std::int64_t>(rng.uniform_int(
                      static_cast<std::uint64_t>(cfg.u_max - cfg.u_min + 1)));
  Utterance out;
  out.lang = lang.lang;
  out.id = std::move(id);
  std::vector<std::int64_t> repeats;
  for (std::int64_t i = 0; i < u; ++i) {
    out.labels.push_back(static_cast<std::int64_t>(
        rng.uniform_int(static_cast<std::uint64_t>(cfg.vocab_size))));
    repeats.push_back(cfg.repeat_min +
                      static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(
                          cfg.repeat_max - cfg.repeat_min + 1))));
  }
  std::int64_t t = 0;
  for (auto r : repeats) t += r;
  out.frames = Tensor<float>({t, cfg.feature_dim});
  std::int64_t row = 0;
  for (std::int64_t i = 0; i < u; ++i) {
    for (std::int64_t r = 0; r < repeats[i]; ++r, ++row) {
      for (std::int64_t j = 0; j < cfg.feature_dim; ++j) {
        double v = lang.codebook.at(out.labels[i], j) + lang.noise_sigma * rng.normal();
        out.frames.at(row, j) = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline constexpr char kCorpusMagic[4] = {'G', 'M', 'D', 'S'};
inline constexpr std::uint32_t kCorpusVersion = 1;

namespace detail {

template <typename I>
void put(std::ostream& os, I v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename I>
I get(std::istream& is) {
  I v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("corpus: truncated file");
  return v;
}

}  // namespace detail

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir / "corpus.bin", std::ios::binary);
  if (!f) throw IoError("corpus: cannot write " + (dir / "corpus.bin").string());
  f.write(kCorpusMagic, 4);
  detail::put<std::uint32_t>(f, kCorpusVersion);
  detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(corpus.manifest.config.feature_dim));
  detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(corpus.utterances.size()));
  for (const auto& u : corpus.utterances) {
    detail::put<std::uint16_t>(f, static_cast<std::uint16_t>(u.lang));
    detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(u.frames.rows()));
    detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(u.labels.size()));
    for (auto y : u.labels) detail::put<std::uint16_t>(f, static_cast<std::uint16_t>(y));
    f.write(reinterpret_cast<const char*>(u.frames.data()),
            static_cast<std::streamsize>(sizeof(float) * u.frames.numel()));
  }
  if (!f) throw IoError("corpus: write failed");

  nlohmann::json j;
  j["counts"] = corpus.manifest.counts;
  j["first_offsets"] = corpus.manifest.first_offsets;
  j["seed"] = corpus.manifest.seed;
  j["generator_version"] = corpus.manifest.generator_version;
  j["config"] = corpus.manifest.config;
  std::ofstream mf(dir / "manifest.json");
  mf << j.dump(2) << "\n";
  if (!mf) throw IoError("corpus: cannot write manifest");
}

inline Corpus gen_corpus(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Corpus corpus;
  corpus.manifest.config = cfg;
  corpus.manifest.seed = seed;
  corpus.manifest.counts = cfg.counts;
  std::int64_t offset = 16;  // header bytes
  for (std::int64_t l = 0; l < cfg.num_languages; ++l) {
    SynthLanguage lang = make_language(seed, l, cfg);
    Rng rng(derive_seed(seed, "utterances", static_cast<std::uint64_t>(l)));
    corpus.manifest.first_offsets.push_back(offset);
    for (std::int64_t n = 0; n < cfg.counts[static_cast<std::size_t>(l)]; ++n) {
      std::string id = "lang" + std::to_string(l) + "-" + std::to_string(n);
      Utterance u = sample_utterance(lang, cfg, rng, id);
      offset += 2 + 4 + 4 + 2 * static_cast<std::int64_t>(u.labels.size()) +
                4 * u.frames.numel();
      corpus.utterances.push_back(std::move(u));
    }
  }
  return corpus;
}

inline Corpus gen_corpus(const SynthConfig& cfg, std::uint64_t seed,
                         const std::filesystem::path& dir) {
  Corpus corpus = gen_corpus(cfg, seed);
  write_corpus(corpus, dir);
  return corpus;
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IoError("corpus: cannot open " + (dir / "manifest.json").string());
  nlohmann::json j = nlohmann::json::parse(mf);
  Corpus corpus;
  corpus.manifest.counts = j.at("counts").get<std::vector<std::int64_t>>();
  corpus.manifest.first_offsets = j.at("first_offsets").get<std::vector<std::int64_t>>();
  corpus.manifest.seed = j.at("seed").get<std::uint64_t>();
  corpus.manifest.generator_version = j.at("generator_version").get<std::int64_t>();
  corpus.manifest.config = j.at("config").get<SynthConfig>();

  std::ifstream f(dir / "corpus.bin", std::ios::binary);
  if (!f) throw IoError("corpus: cannot open " + (dir / "corpus.bin").string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kCorpusMagic, 4) != 0)
    throw IoError("corpus: bad magic bytes");
  if (detail::get<std::uint32_t>(f) != kCorpusVersion) throw IoError("corpus: bad version");
  const auto d = detail::get<std::uint32_t>(f);
  const auto count = detail::get<std::uint32_t>(f);
  std::vector<std::int64_t> lang_counter(corpus.manifest.counts.size(), 0);
  for (std::uint32_t i = 0; i < count; ++i) {
    Utterance u;
    u.lang = detail::get<std::uint16_t>(f);
    const auto t = detail::get<std::uint32_t>(f);
    const auto nu = detail::get<std::uint32_t>(f);
    for (std::uint32_t k = 0; k < nu; ++k) u.labels.push_back(detail::get<std::uint16_t>(f));
    u.frames = Tensor<float>({static_cast<std::int64_t>(t), static_cast<std::int64_t>(d)});
    f.read(reinterpret_cast<char*>(u.frames.data()),
           static_cast<std::streamsize>(sizeof(float) * u.frames.numel()));
    if (!f) throw IoError("corpus: truncated record");
    if (u.frames.rows() < 4 * static_cast<std::int64_t>(u.labels.size()))
      throw IoError("corpus: record violates T >= 4U");
    auto l = static_cast<std::size_t>(u.lang);
    u.id = "lang" + std::to_string(u.lang) + "-" + std::to_string(lang_counter[l]++);
    corpus.utterances.push_back(std::move(u));
  }
  for (std::size_t l = 0; l < lang_counter.size(); ++l)
    if (lang_counter[l] != corpus.manifest.counts[l])
      throw IoError("corpus: stored records disagree with manifest counts");
  return corpus;
}

// Train/validation split: ~10% of utterances go to validation, selected by id
// hash so the split is stable under regeneration.
inline bool is_validation(const Utterance& u) { return fnv1a64(u.id) % 10 == 0; }

// Infinite language-index stream with P(l) proportional to counts[l]^alpha.
class BalancedSampler {
 public:
  BalancedSampler(std::vector<std::int64_t> counts, double alpha, std::uint64_t seed)
      : rng_(seed) {
    if (counts.empty()) throw InputError("sampler: empty counts");
    if (alpha < 0.0 || alpha > 1.0) throw InputError("sampler: alpha must be in [0,1]");
    for (auto n : counts) {
      if (n < 1) throw InputError("sampler: counts must be >= 1");
      double w = std::pow(double(n), alpha);
      total_ += w;
      cumulative_.push_back(total_);
    }
  }

  std::int64_t next() {
    double u = rng_.uniform() * total_;
    for (std::size_t i = 0; i < cumulative_.size(); ++i)
      if (u < cumulative_[i]) return static_cast<std::int64_t>(i);
    return static_cast<std::int64_t>(cumulative_.size() - 1);
  }

  std::vector<double> probabilities() const {
    std::vector<double> p;
    double prev = 0;
    for (double c : cumulative_) {
      p.push_back((c - prev) / total_);
      prev = c;
    }
    return p;
  }

 private:
  Rng rng_;
  std::vector<double> cumulative_;
  double total_ = 0;
};

// In-memory frames for the compute profile.
template <typename R>
Tensor<R> frames_as(const Utterance& u) {
  Tensor<R> out({u.frames.rows(), u.frames.cols()});
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<R>(u.frames[i]);
  return out;
}

}  // namespace gm
