// Shared training plumbing: flattened gradients over parameter sections,
// section freezing, the warmup-then-linear-decay schedule, and uniform
// utterance batching with the balanced language sampler.

#pragma once

#include <string>
#include <vector>

#include "gm/data.hpp"
#include "gm/model.hpp"
#include "gm/tape.hpp"

namespace gm {

// Gradient of the last backward pass, flattened in section order. Sections
// the loss never touched contribute zeros.
template <typename R>
std::vector<R> flat_grad(const Tape<R>& tape, const ParamVars<R>& pv) {
  const ParamVector<R>& p = *pv.params;
  std::vector<R> g;
  g.reserve(static_cast<std::size_t>(p.total_size()));
  for (std::size_t s = 0; s < p.num_sections(); ++s) {
    const std::int64_t n = p.section_at(s).t.numel();
    if (tape.has_grad(pv.vars[s])) {
      const auto& t = tape.grad(pv.vars[s]);
      g.insert(g.end(), t.vec().begin(), t.vec().end());
    } else {
      g.insert(g.end(), static_cast<std::size_t>(n), R(0));
    }
  }
  return g;
}

template <typename R>
void axpy_into(std::vector<R>& acc, const std::vector<R>& g, R a) {
  if (acc.size() != g.size()) throw UsageError("axpy_into: size mismatch");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += a * g[i];
}

// Per-element mask over the flattened vector: 1 where the section name
// passes the predicate, 0 elsewhere.
template <typename R, typename Pred>
std::vector<R> section_mask(const ParamVector<R>& p, Pred keep) {
  std::vector<R> m;
  m.reserve(static_cast<std::size_t>(p.total_size()));
  for (std::size_t s = 0; s < p.num_sections(); ++s)
    m.insert(m.end(), static_cast<std::size_t>(p.section_at(s).t.numel()),
             keep(p.section_at(s).name) ? R(1) : R(0));
  return m;
}

// Linear warmup over the first warmup_frac of steps, then linear decay that
// would reach zero one step past the end (so the last step still moves).
inline double lr_schedule(double peak, std::int64_t step, std::int64_t total_steps,
                          double warmup_frac = 0.05) {
  if (total_steps < 1) throw InputError("lr_schedule: total_steps < 1");
  if (step < 0 || step >= total_steps) throw InputError("lr_schedule: step out of range");
  const std::int64_t warm =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(warmup_frac * double(total_steps)));
  if (step < warm) return peak * double(step + 1) / double(warm);
  return peak * double(total_steps - step) / double(total_steps - warm + 1);
}

// Training-split utterances grouped by language.
template <typename C>
std::vector<std::vector<const Utterance*>> train_pool(const C& corpus) {
  std::vector<std::vector<const Utterance*>> pool(
      static_cast<std::size_t>(corpus.manifest.config.num_languages));
  for (const auto& u : corpus.utterances)
    if (!is_validation(u)) pool[static_cast<std::size_t>(u.lang)].push_back(&u);
  for (const auto& p : pool)
    if (p.empty()) throw InputError("train_pool: a language has no training utterances");
  return pool;
}

template <typename C>
std::vector<const Utterance*> validation_pool(const C& corpus) {
  std::vector<const Utterance*> pool;
  for (const auto& u : corpus.utterances)
    if (is_validation(u)) pool.push_back(&u);
  if (pool.empty()) throw InputError("validation_pool: empty validation split");
  return pool;
}

// Draw one utterance: balanced language choice, uniform within the language.
inline const Utterance* draw_utterance(const std::vector<std::vector<const Utterance*>>& pool,
                                       BalancedSampler& langs, Rng& rng) {
  const auto l = static_cast<std::size_t>(langs.next());
  const auto& bucket = pool[l];
  return bucket[rng.uniform_int(bucket.size())];
}

}  // namespace gm
