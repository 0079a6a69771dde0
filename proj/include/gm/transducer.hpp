// Exact log-space transducer loss with a brute-force enumeration oracle,
// greedy decoding, and WER arithmetic (edit distance, word-weighted overall
// WER, relative reduction).

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gm/common.hpp"
#include "gm/model.hpp"
#include "gm/tape.hpp"
#include "gm/tensor.hpp"

namespace gm {

// A log-probability lattice is a (T' * (U+1)) x (V+1) matrix, row-major over
// (t, u) with u fastest, log-softmax-normalized over the last axis; the blank
// symbol is the last column.
template <typename R>
void check_log_lattice(const Tensor<R>& lattice) {
  const double tol = sizeof(R) >= 8 ? 1e-9 : 1e-3;
  for (std::int64_t i = 0; i < lattice.rows(); ++i) {
    double m = double(lattice.at(i, 0));
    for (std::int64_t j = 1; j < lattice.cols(); ++j)
      m = std::max(m, double(lattice.at(i, j)));
    double s = 0;
    for (std::int64_t j = 0; j < lattice.cols(); ++j)
      s += std::exp(double(lattice.at(i, j)) - m);
    if (std::abs(m + std::log(s)) > tol)
      throw InputError("lattice: row " + std::to_string(i) +
                       " is not log-softmax normalized");
  }
}

// Negative log-likelihood of the label sequence by the forward recursion
//   alpha(0,0) = 0
//   alpha(t,u) = logsumexp(alpha(t-1,u) + logP_blank(t-1,u),
//                          alpha(t,u-1) + logP_{y_u}(t,u-1))
//   loss = -(alpha(T'-1,U) + logP_blank(T'-1,U))
// Differentiable through the tape.
template <typename R>
typename Tape<R>::Var rnnt_loss(Tape<R>& tape, typename Tape<R>::Var log_lattice,
                                const std::vector<std::int64_t>& labels) {
  using Var = typename Tape<R>::Var;
  const Tensor<R>& lat = tape.value(log_lattice);
  const std::int64_t u_len = static_cast<std::int64_t>(labels.size());
  const std::int64_t cols = lat.cols();
  const std::int64_t blank = cols - 1;
  if (lat.rows() % (u_len + 1) != 0)
    throw InputError("rnnt_loss: lattice rows " + std::to_string(lat.rows()) +
                     " not divisible by U+1=" + std::to_string(u_len + 1));
  const std::int64_t tprime = lat.rows() / (u_len + 1);
  if (tprime < 1) throw InputError("rnnt_loss: empty lattice");
  for (auto y : labels)
    if (y < 0 || y >= blank)
      throw InputError("rnnt_loss: label " + std::to_string(y) + " out of range");

  auto cell = [&](std::int64_t t, std::int64_t u, std::int64_t sym) {
    return tape.pick(log_lattice, t * (u_len + 1) + u, sym);
  };

  std::vector<std::vector<Var>> alpha(static_cast<std::size_t>(tprime),
                                      std::vector<Var>(static_cast<std::size_t>(u_len + 1)));
  alpha[0][0] = tape.constant(Tensor<R>::scalar(R(0)));
  for (std::int64_t t = 1; t < tprime; ++t)
    alpha[t][0] = tape.add(alpha[t - 1][0], cell(t - 1, 0, blank));
  for (std::int64_t u = 1; u <= u_len; ++u)
    alpha[0][u] = tape.add(alpha[0][u - 1], cell(0, u - 1, labels[u - 1]));
  for (std::int64_t t = 1; t < tprime; ++t)
    for (std::int64_t u = 1; u <= u_len; ++u) {
      Var horiz = tape.add(alpha[t - 1][u], cell(t - 1, u, blank));
      Var vert = tape.add(alpha[t][u - 1], cell(t, u - 1, labels[u - 1]));
      alpha[t][u] = tape.logsumexp({horiz, vert});
    }
  return tape.neg(tape.add(alpha[tprime - 1][u_len], cell(tprime - 1, u_len, blank)));
}

// Brute force: enumerate every monotone alignment (U label emissions
// interleaved with T' blanks, final transition a blank), sum path
// probabilities. Only usable at enumeration scale.
template <typename R>
double rnnt_loss_oracle(const Tensor<R>& lattice, const std::vector<std::int64_t>& labels) {
  const std::int64_t u_len = static_cast<std::int64_t>(labels.size());
  if (lattice.rows() % (u_len + 1) != 0)
    throw InputError("rnnt_loss_oracle: lattice rows not divisible by U+1");
  const std::int64_t tprime = lattice.rows() / (u_len + 1);
  if (tprime > 6 || u_len > 4)
    throw InputError("rnnt_loss_oracle: size beyond enumeration bound (T'<=6, U<=4)");
  const std::int64_t blank = lattice.cols() - 1;

  double total = 0;
  auto cell = [&](std::int64_t t, std::int64_t u, std::int64_t sym) {
    return double(lattice.at(t * (u_len + 1) + u, sym));
  };
  std::function<void(std::int64_t, std::int64_t, double)> walk =
      [&](std::int64_t t, std::int64_t u, double logp) {
        if (t == tprime - 1 && u == u_len) {
          total += std::exp(logp + cell(t, u, blank));
          return;
        }
        if (t + 1 < tprime) walk(t + 1, u, logp + cell(t, u, blank));
        if (u < u_len) walk(t, u + 1, logp + cell(t, u, labels[u]));
      };
  walk(0, 0, 0.0);
  return -std::log(total);
}

// Random log-softmax-normalized lattice, for oracle sweeps.
template <typename R>
Tensor<R> random_log_lattice(std::int64_t tprime, std::int64_t u_len, std::int64_t vocab,
                             Rng& rng) {
  Tensor<R> lat({tprime * (u_len + 1), vocab + 1});
  for (std::int64_t i = 0; i < lat.rows(); ++i) {
    double m = -1e300;
    for (std::int64_t j = 0; j < lat.cols(); ++j) {
      lat.at(i, j) = R(rng.normal() * 2.0);
      m = std::max(m, double(lat.at(i, j)));
    }
    double s = 0;
    for (std::int64_t j = 0; j < lat.cols(); ++j) s += std::exp(double(lat.at(i, j)) - m);
    double lse = m + std::log(s);
    for (std::int64_t j = 0; j < lat.cols(); ++j) lat.at(i, j) = R(double(lat.at(i, j)) - lse);
  }
  return lat;
}

// Greedy transducer decode: at each frame emit the argmax; a non-blank
// advances the predictor and stays on the frame (at most max_symbols_per_frame
// emissions per frame), a blank advances the frame. Ties break to the lowest
// index.
template <typename R>
std::vector<std::int64_t> greedy_decode(const Tensor<R>& enc, const ParamVector<R>& params,
                                        std::int64_t max_symbols_per_frame = 4) {
  const std::int64_t blank = params.config().blank();
  PlainPredictor<R> pred(params);
  std::vector<std::int64_t> out;
  for (std::int64_t t = 0; t < enc.rows(); ++t) {
    Tensor<R> enc_row({1, enc.cols()});
    for (std::int64_t j = 0; j < enc.cols(); ++j) enc_row[j] = enc.at(t, j);
    for (std::int64_t k = 0; k < max_symbols_per_frame; ++k) {
      Tensor<R> logits = pred.joint_logits(enc_row);
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < logits.numel(); ++j)
        if (logits[j] > logits[best]) best = j;
      if (best == blank) break;
      out.push_back(best);
      pred.consume(best);
    }
  }
  return out;
}

// Full differentiable utterance loss: featurize -> subsample -> encode ->
// joint -> log-softmax -> transducer loss.
template <typename R>
typename Tape<R>::Var utterance_loss(Tape<R>& tape, const ParamVars<R>& pv,
                                     const Tensor<R>& frames, std::int64_t lang,
                                     const std::vector<std::int64_t>& labels) {
  Tensor<R> aug = featurize(frames, lang, pv.params->config());
  ModelGraph<R> g(tape, pv);
  auto enc = g.encode(g.subsample(tape.constant(aug)), nullptr);
  auto logp = tape.log_softmax_rows(g.transducer_logits(enc, labels));
  return rnnt_loss(tape, logp, labels);
}

// Encoder context vectors as plain values (for decoding).
template <typename R>
Tensor<R> encoder_output(const ParamVector<R>& params, const Tensor<R>& frames,
                         std::int64_t lang) {
  Tape<R> tape;
  auto pv = ParamVars<R>::constants(tape, params);
  ModelGraph<R> g(tape, pv);
  Tensor<R> aug = featurize(frames, lang, params.config());
  auto enc = g.encode(g.subsample(tape.constant(aug)), nullptr);
  return tape.value(enc);
}

struct EditCounts {
  std::int64_t substitutions = 0;
  std::int64_t deletions = 0;
  std::int64_t insertions = 0;
  std::int64_t total() const { return substitutions + deletions + insertions; }
};

// Minimal-cost alignment with unit costs; ties prefer substitution over
// deletion over insertion. Among minimal-cost alignments the substitution
// count is maximized, which pins down D and I as well: D - I equals
// len(ref) - len(hyp) and S + D + I equals the cost, so the decomposition is
// unique and swapping the arguments swaps D with I while S is unchanged.
inline EditCounts edit_distance(const std::vector<std::int64_t>& ref,
                                const std::vector<std::int64_t>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::vector<std::int64_t>> d(n + 1, std::vector<std::int64_t>(m + 1));
  std::vector<std::vector<std::int64_t>> s(n + 1, std::vector<std::int64_t>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<std::int64_t>(i);
  for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<std::int64_t>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      const bool mismatch = ref[i - 1] != hyp[j - 1];
      const std::int64_t sub = d[i - 1][j - 1] + (mismatch ? 1 : 0);
      const std::int64_t del = d[i - 1][j] + 1;
      const std::int64_t ins = d[i][j - 1] + 1;
      d[i][j] = std::min({sub, del, ins});
      std::int64_t best = -1;
      if (sub == d[i][j]) best = s[i - 1][j - 1] + (mismatch ? 1 : 0);
      if (del == d[i][j]) best = std::max(best, s[i - 1][j]);
      if (ins == d[i][j]) best = std::max(best, s[i][j - 1]);
      s[i][j] = best;
    }
  EditCounts out;
  const std::int64_t cost = d[n][m];
  out.substitutions = s[n][m];
  const std::int64_t len_diff = static_cast<std::int64_t>(n) - static_cast<std::int64_t>(m);
  out.deletions = (cost - out.substitutions + len_diff) / 2;
  out.insertions = (cost - out.substitutions - len_diff) / 2;
  return out;
}

struct LocaleWer {
  std::string locale;
  std::int64_t substitutions = 0;
  std::int64_t deletions = 0;
  std::int64_t insertions = 0;
  std::int64_t ref_words = 0;

  double wer() const {
    if (ref_words <= 0) throw InputError("wer: ref_words must be positive");
    return 100.0 * double(substitutions + deletions + insertions) / double(ref_words);
  }
};

struct WerReport {
  std::vector<LocaleWer> locales;

  double overall() const;
};

// Overall WER weighted by the number of reference words in each locale.
inline double weighted_overall_wer(const std::vector<std::pair<double, std::int64_t>>& rows) {
  if (rows.empty()) throw InputError("weighted_overall_wer: empty list");
  double num = 0, den = 0;
  for (const auto& [wer, words] : rows) {
    if (words <= 0) throw InputError("weighted_overall_wer: ref_words must be positive");
    num += wer * double(words);
    den += double(words);
  }
  return num / den;
}

inline double WerReport::overall() const {
  std::vector<std::pair<double, std::int64_t>> rows;
  for (const auto& l : locales) rows.emplace_back(l.wer(), l.ref_words);
  return weighted_overall_wer(rows);
}

inline double relative_reduction(double baseline_wer, double new_wer) {
  if (baseline_wer <= 0) throw InputError("relative_reduction: baseline must be positive");
  return 100.0 * (baseline_wer - new_wer) / baseline_wer;
}

inline void to_json(nlohmann::json& j, const LocaleWer& l) {
  j = nlohmann::json{{"locale", l.locale},
                     {"substitutions", l.substitutions},
                     {"deletions", l.deletions},
                     {"insertions", l.insertions},
                     {"ref_words", l.ref_words},
                     {"wer", l.wer()}};
}

inline void to_json(nlohmann::json& j, const WerReport& r) {
  j = nlohmann::json{{"locales", r.locales}, {"overall_wer", r.overall()}};
}

inline std::string wer_report_csv(const WerReport& r) {
  std::ostringstream os;
  os << "locale,S,D,I,ref_words,wer\n";
  for (const auto& l : r.locales) {
    os << l.locale << "," << l.substitutions << "," << l.deletions << "," << l.insertions
       << "," << l.ref_words << "," << l.wer() << "\n";
  }
  return os.str();
}

}  // namespace gm
