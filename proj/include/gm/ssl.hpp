// Masked-contrastive pretraining: span masking over subsampled latents,
// linear targets from the pre-mask latents, and an InfoNCE loss with
// same-utterance negatives.

#pragma once

#include <chrono>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "gm/checkpoint.hpp"
#include "gm/common.hpp"
#include "gm/data.hpp"
#include "gm/metrics.hpp"
#include "gm/model.hpp"
#include "gm/optim.hpp"
#include "gm/tape.hpp"
#include "gm/train.hpp"

namespace gm {

struct MaskSpec {
  double mask_prob = 0.065;
  std::int64_t span_len = 10;
  bool force_min_one = true;

  void validate() const {
    if (mask_prob < 0.0 || mask_prob > 1.0) throw InputError("mask: prob must be in [0,1]");
    if (span_len < 1) throw InputError("mask: span_len must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const MaskSpec& m) {
  j = nlohmann::json{{"mask_prob", m.mask_prob},
                     {"span_len", m.span_len},
                     {"force_min_one", m.force_min_one}};
}

inline void from_json(const nlohmann::json& j, MaskSpec& m) {
  MaskSpec d;
  m.mask_prob = j.value("mask_prob", d.mask_prob);
  m.span_len = j.value("span_len", d.span_len);
  m.force_min_one = j.value("force_min_one", d.force_min_one);
}

struct ContrastiveConfig {
  std::int64_t num_negatives = 10;
  double temperature = 0.1;

  void validate() const {
    if (num_negatives < 1) throw InputError("contrastive: num_negatives must be >= 1");
    if (temperature <= 0.0) throw InputError("contrastive: temperature must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const ContrastiveConfig& c) {
  j = nlohmann::json{{"num_negatives", c.num_negatives}, {"temperature", c.temperature}};
}

inline void from_json(const nlohmann::json& j, ContrastiveConfig& c) {
  ContrastiveConfig d;
  c.num_negatives = j.value("num_negatives", d.num_negatives);
  c.temperature = j.value("temperature", d.temperature);
}

// Every position is an independent span start with probability mask_prob;
// a start masks span_len positions (clipped at the end). Overlaps merge.
// One uniform draw per position regardless of outcome keeps the stream
// aligned across configurations.
inline std::vector<std::int64_t> sample_mask(std::int64_t t, const MaskSpec& spec, Rng& rng) {
  spec.validate();
  if (t < 1) throw InputError("sample_mask: length must be >= 1");
  std::vector<char> masked(static_cast<std::size_t>(t), 0);
  for (std::int64_t i = 0; i < t; ++i) {
    const bool start = rng.uniform() < spec.mask_prob;
    if (!start) continue;
    for (std::int64_t k = i; k < std::min(t, i + spec.span_len); ++k)
      masked[static_cast<std::size_t>(k)] = 1;
  }
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < t; ++i)
    if (masked[static_cast<std::size_t>(i)]) out.push_back(i);
  if (out.empty() && spec.force_min_one) {
    const std::int64_t s =
        static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(t)));
    for (std::int64_t k = s; k < std::min(t, s + spec.span_len); ++k) out.push_back(k);
  }
  return out;
}

namespace detail {

// Cosine similarity between two row vectors. Norms are floored at epsilon
// (a floor, not an additive term, so the ratio stays exactly invariant to
// rescaling any vector of non-negligible norm). The floor is applied to the
// squared norm before the square root: sqrt is then never evaluated at 0,
// whose backward pass would inject NaN when a vector (e.g. an all-negative
// pre-relu latent row) is exactly zero.
template <typename R>
typename Tape<R>::Var cosine(Tape<R>& tape, typename Tape<R>::Var a,
                             typename Tape<R>::Var b) {
  auto dot = tape.sum(tape.mul(a, b));
  auto sa = tape.sum(tape.square(a));
  auto sb = tape.sum(tape.square(b));
  if (tape.value(sa).scalar_value() == R(0) && tape.value(sb).scalar_value() == R(0))
    throw NumericError("cosine: both vectors have zero norm");
  const R eps = R(1e-8);
  auto floored_norm = [&](typename Tape<R>::Var s) {
    // relu(s - eps^2) + eps^2 == max(s, eps^2), so the norm is max(|x|, eps)
    // and the gradient vanishes (instead of exploding) below the floor.
    return tape.sqrt(tape.add_const(tape.relu(tape.add_const(s, -eps * eps)), eps * eps));
  };
  return tape.div(dot, tape.mul(floored_norm(sa), floored_norm(sb)));
}

// K indices drawn from pool; without replacement when the pool is large
// enough, uniform with replacement otherwise.
inline std::vector<std::int64_t> draw_negatives(std::vector<std::int64_t> pool,
                                                std::int64_t k, Rng& rng) {
  std::vector<std::int64_t> out;
  if (static_cast<std::int64_t>(pool.size()) >= k) {
    for (std::int64_t i = 0; i < k; ++i) {
      const auto j = i + static_cast<std::int64_t>(
                             rng.uniform_int(static_cast<std::uint64_t>(pool.size()) -
                                             static_cast<std::uint64_t>(i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
      out.push_back(pool[static_cast<std::size_t>(i)]);
    }
  } else {
    for (std::int64_t i = 0; i < k; ++i)
      out.push_back(pool[rng.uniform_int(static_cast<std::uint64_t>(pool.size()))]);
  }
  return out;
}

}  // namespace detail

// InfoNCE over masked positions: per position the positive is the target at
// the same index; negatives come from targets at other masked positions,
// falling back to any other position when fewer than K exist.
template <typename R>
typename Tape<R>::Var contrastive_loss(Tape<R>& tape, typename Tape<R>::Var context,
                                       typename Tape<R>::Var targets,
                                       const std::vector<std::int64_t>& mask,
                                       const ContrastiveConfig& cfg, Rng& rng) {
  cfg.validate();
  if (mask.empty()) throw InputError("contrastive: empty mask set");
  const std::int64_t t = tape.value(targets).rows();
  if (tape.value(context).rows() != t)
    throw InputError("contrastive: context/target row mismatch");
  for (auto i : mask)
    if (i < 0 || i >= t) throw InputError("contrastive: mask index out of range");
  if (t < 2) throw InputError("contrastive: need at least 2 positions");

  using Var = typename Tape<R>::Var;
  const R inv_kappa = R(1.0 / cfg.temperature);
  Var acc = tape.constant(Tensor<R>::scalar(R(0)));
  for (auto pos : mask) {
    std::vector<std::int64_t> pool;
    for (auto m : mask)
      if (m != pos) pool.push_back(m);
    if (static_cast<std::int64_t>(pool.size()) < cfg.num_negatives) {
      pool.clear();
      for (std::int64_t i = 0; i < t; ++i)
        if (i != pos) pool.push_back(i);
    }
    const auto negs = detail::draw_negatives(std::move(pool), cfg.num_negatives, rng);

    Var c = tape.select_row(context, pos);
    Var pos_logit =
        tape.scale(detail::cosine(tape, c, tape.select_row(targets, pos)), inv_kappa);
    std::vector<Var> logits = {pos_logit};
    for (auto n : negs)
      logits.push_back(
          tape.scale(detail::cosine(tape, c, tape.select_row(targets, n)), inv_kappa));
    acc = tape.add(acc, tape.sub(tape.logsumexp(logits), pos_logit));
  }
  return tape.scale(acc, R(1) / R(mask.size()));
}

struct SslTrainConfig {
  std::int64_t steps = 500;
  std::int64_t batch_size = 8;
  double lr = 2e-3;
  double warmup_frac = 0.05;
  double sampler_alpha = 0.5;
  std::int64_t log_every = 10;

  void validate() const {
    if (steps < 0) throw InputError("ssl: steps must be >= 0");
    if (batch_size < 1) throw InputError("ssl: batch_size must be >= 1");
    if (lr <= 0.0) throw InputError("ssl: lr must be > 0");
    if (log_every < 1) throw InputError("ssl: log_every must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const SslTrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"warmup_frac", c.warmup_frac},
                     {"sampler_alpha", c.sampler_alpha},
                     {"log_every", c.log_every}};
}

inline void from_json(const nlohmann::json& j, SslTrainConfig& c) {
  SslTrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.warmup_frac = j.value("warmup_frac", d.warmup_frac);
  c.sampler_alpha = j.value("sampler_alpha", d.sampler_alpha);
  c.log_every = j.value("log_every", d.log_every);
}

// Adam on the encoder-side parameters only (subsampler, transformer blocks,
// mask vector, target map); predictor and joint stay frozen at init.
template <typename R>
Checkpoint<R> run_ssl_pretrain(const Corpus& corpus, const ModelConfig& mcfg,
                               const MaskSpec& mask_spec, const ContrastiveConfig& ccfg,
                               const SslTrainConfig& tcfg, std::uint64_t seed,
                               const std::filesystem::path& metrics_path = {},
                               const ParamVector<R>* start = nullptr,
                               std::uint64_t parent_hash = 0) {
  mask_spec.validate();
  ccfg.validate();
  tcfg.validate();
  if (corpus.utterances.empty()) throw InputError("ssl: empty corpus");

  ParamVector<R> params = start ? *start : ParamVector<R>(mcfg);
  if (!start) {
    Rng init_rng(derive_seed(seed, "init"));
    params.init(init_rng);
  }

  const auto trainable = section_mask<R>(params, [](const std::string& name) {
    return name.rfind("pred.", 0) != 0 && name.rfind("joint.", 0) != 0;
  });

  auto pool = train_pool(corpus);
  std::vector<std::int64_t> pool_counts;
  for (const auto& b : pool) pool_counts.push_back(static_cast<std::int64_t>(b.size()));
  BalancedSampler langs(pool_counts, tcfg.sampler_alpha, derive_seed(seed, "ssl.sampler"));
  Rng pick_rng(derive_seed(seed, "ssl.pick"));

  JsonlWriter metrics;
  if (!metrics_path.empty()) metrics.open(metrics_path);

  Adam<R> opt(R(tcfg.lr));
  std::vector<R> flat = params.flatten();
  auto t0 = std::chrono::steady_clock::now();
  for (std::int64_t step = 0; step < tcfg.steps; ++step) {
    params.unflatten(flat);
    std::vector<R> grad(flat.size(), R(0));
    double loss_sum = 0;
    double masked_frac_sum = 0;
    for (std::int64_t b = 0; b < tcfg.batch_size; ++b) {
      const Utterance* u = draw_utterance(pool, langs, pick_rng);
      Rng urng(derive_seed(seed, "ssl.utt",
                           static_cast<std::uint64_t>(step * tcfg.batch_size + b)));
      Tape<R> tape;
      auto pv = ParamVars<R>::inputs(tape, params);
      ModelGraph<R> graph(tape, pv);
      auto aug = featurize(frames_as<R>(*u), u->lang, mcfg);
      auto latent = graph.subsample(tape.constant(aug));
      const std::int64_t tp = tape.value(latent).rows();
      if (tp < 2) continue;  // nothing to contrast against
      const auto mask = sample_mask(tp, mask_spec, urng);
      if (mask.empty()) continue;
      auto targets = graph.ssl_targets(latent);
      auto context = graph.encode(latent, &mask);
      auto loss = contrastive_loss(tape, context, targets, mask, ccfg, urng);
      tape.backward(loss);
      axpy_into(grad, flat_grad(tape, pv), R(1.0 / double(tcfg.batch_size)));
      loss_sum += double(tape.value(loss).scalar_value()) / double(tcfg.batch_size);
      masked_frac_sum += double(mask.size()) / double(tp) / double(tcfg.batch_size);
    }
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= trainable[i];
    const double lr_now = lr_schedule(tcfg.lr, step, tcfg.steps, tcfg.warmup_frac);
    opt.step_with_lr(flat, grad, R(lr_now));

    if ((step + 1) % tcfg.log_every == 0 || step + 1 == tcfg.steps) {
      const auto now = std::chrono::steady_clock::now();
      metrics.write(
          {{"step", step + 1},
           {"loss", loss_sum},
           {"lr", lr_now},
           {"masked_frac", masked_frac_sum},
           {"wall_ms",
            std::chrono::duration_cast<std::chrono::milliseconds>(now - t0).count()}});
      t0 = now;
    }
  }
  params.unflatten(flat);

  Checkpoint<R> out;
  out.params = std::move(params);
  out.meta.seed = seed;
  out.meta.step = tcfg.steps;
  out.meta.stage = "ssl";
  out.meta.parent_hash = parent_hash;
  out.meta.config_hash = fnv1a64(nlohmann::json(mcfg).dump());
  return out;
}

}  // namespace gm
