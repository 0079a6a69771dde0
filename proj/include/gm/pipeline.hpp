// Three-step recipe orchestration: seeded corpus generation, SSL pretraining,
// LEAP meta-initialization, transducer fine-tuning with early stopping,
// greedy-decode evaluation, and the language-ID ablation grid.

#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "gm/checkpoint.hpp"
#include "gm/common.hpp"
#include "gm/data.hpp"
#include "gm/leap.hpp"
#include "gm/metrics.hpp"
#include "gm/model.hpp"
#include "gm/optim.hpp"
#include "gm/ssl.hpp"
#include "gm/train.hpp"
#include "gm/transducer.hpp"

namespace gm {

struct FinetuneConfig {
  std::int64_t max_steps = 400;
  std::int64_t batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::int64_t patience = 5;
  std::int64_t val_every = 50;
  double sampler_alpha = 0.5;
  std::int64_t log_every = 10;

  void validate() const {
    if (max_steps < 0) throw InputError("finetune: max_steps must be >= 0");
    if (batch_size < 1) throw InputError("finetune: batch_size must be >= 1");
    if (lr <= 0) throw InputError("finetune: lr must be > 0");
    if (weight_decay < 0) throw InputError("finetune: weight_decay must be >= 0");
    if (patience < 1) throw InputError("finetune: patience must be >= 1");
    if (val_every < 1) throw InputError("finetune: val_every must be >= 1");
    if (log_every < 1) throw InputError("finetune: log_every must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = nlohmann::json{{"max_steps", c.max_steps},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"patience", c.patience},
                     {"val_every", c.val_every},
                     {"sampler_alpha", c.sampler_alpha},
                     {"log_every", c.log_every}};
}

inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  FinetuneConfig d;
  c.max_steps = j.value("max_steps", d.max_steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.patience = j.value("patience", d.patience);
  c.val_every = j.value("val_every", d.val_every);
  c.sampler_alpha = j.value("sampler_alpha", d.sampler_alpha);
  c.log_every = j.value("log_every", d.log_every);
}

struct StageToggles {
  bool ssl = true;
  bool leap = true;
  bool finetune = true;
};

inline void to_json(nlohmann::json& j, const StageToggles& s) {
  j = nlohmann::json{{"ssl", s.ssl}, {"leap", s.leap}, {"finetune", s.finetune}};
}

inline void from_json(const nlohmann::json& j, StageToggles& s) {
  StageToggles d;
  s.ssl = j.value("ssl", d.ssl);
  s.leap = j.value("leap", d.leap);
  s.finetune = j.value("finetune", d.finetune);
}

struct RunConfig {
  std::uint64_t seed = 0;
  std::string profile = "test";  // test = double precision, fast = float
  SynthConfig corpus;
  ModelConfig model;
  MaskSpec mask;
  ContrastiveConfig contrastive;
  SslTrainConfig ssl;
  LeapConfig leap;
  FinetuneConfig finetune;
  StageToggles stages;
  // One batch size for LEAP inner loops and fine-tuning.
  std::int64_t batch_size = 8;
  double corpus_fraction = 1.0;

  void validate() const {
    if (profile != "test" && profile != "fast")
      throw InputError("config: profile must be 'test' or 'fast'");
    corpus.validate();
    model.validate();
    mask.validate();
    contrastive.validate();
    ssl.validate();
    leap.validate();
    finetune.validate();
    if (batch_size < 1) throw InputError("config: batch_size must be >= 1");
    if (corpus_fraction <= 0 || corpus_fraction > 1)
      throw InputError("config: corpus_fraction must be in (0,1]");
    if (model.feature_dim != corpus.feature_dim)
      throw InputError("config: model/corpus feature_dim mismatch");
    if (model.num_languages != corpus.num_languages)
      throw InputError("config: model/corpus num_languages mismatch");
    if (model.vocab_size != corpus.vocab_size)
      throw InputError("config: model/corpus vocab_size mismatch");
  }

  // The shared batch size and corpus fraction applied.
  RunConfig resolved() const {
    RunConfig out = *this;
    out.leap.inner_batch = batch_size;
    out.finetune.batch_size = batch_size;
    for (auto& n : out.corpus.counts)
      n = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(
                                        double(n) * corpus_fraction)));
    out.corpus_fraction = 1.0;
    out.validate();
    return out;
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"profile", c.profile},
                     {"corpus", c.corpus},
                     {"model", c.model},
                     {"mask", c.mask},
                     {"contrastive", c.contrastive},
                     {"ssl", c.ssl},
                     {"leap", c.leap},
                     {"finetune", c.finetune},
                     {"stages", c.stages},
                     {"batch_size", c.batch_size},
                     {"corpus_fraction", c.corpus_fraction}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  RunConfig d;
  c.seed = j.value("seed", d.seed);
  c.profile = j.value("profile", d.profile);
  c.corpus = j.value("corpus", d.corpus);
  c.model = j.value("model", d.model);
  c.mask = j.value("mask", d.mask);
  c.contrastive = j.value("contrastive", d.contrastive);
  c.ssl = j.value("ssl", d.ssl);
  c.leap = j.value("leap", d.leap);
  c.finetune = j.value("finetune", d.finetune);
  c.stages = j.value("stages", d.stages);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.corpus_fraction = j.value("corpus_fraction", d.corpus_fraction);
}

// Early-stopping counter: stop after `patience` consecutive evaluations
// without strict improvement.
struct EarlyStopper {
  std::int64_t patience = 5;
  double best = std::numeric_limits<double>::infinity();
  std::int64_t bad = 0;

  // Returns true when training should stop.
  bool update(double val) {
    if (val < best) {
      best = val;
      bad = 0;
    } else {
      ++bad;
    }
    return bad >= patience;
  }
};

// Mean transducer loss over the validation split, parameters held constant.
template <typename R>
double validation_loss(const ParamVector<R>& params,
                       const std::vector<const Utterance*>& val) {
  if (val.empty()) throw InputError("validation_loss: empty validation set");
  double total = 0;
  for (const Utterance* u : val) {
    Tape<R> tape;
    auto pv = ParamVars<R>::constants(tape, params);
    auto loss = utterance_loss(tape, pv, frames_as<R>(*u), u->lang, u->labels);
    total += double(tape.value(loss).scalar_value());
  }
  return total / double(val.size());
}

// AdamW fine-tuning of the whole model on the transducer loss, with
// periodic validation and best-checkpoint early stopping.
template <typename R>
Checkpoint<R> finetune(const Corpus& corpus, const ModelConfig& mcfg,
                       const FinetuneConfig& fcfg, std::uint64_t seed,
                       const std::filesystem::path& metrics_path = {},
                       const ParamVector<R>* start = nullptr, std::uint64_t parent_hash = 0) {
  fcfg.validate();
  if (corpus.utterances.empty()) throw InputError("finetune: empty corpus");

  ParamVector<R> params = start ? *start : ParamVector<R>(mcfg);
  if (!start) {
    Rng init_rng(derive_seed(seed, "init"));
    params.init(init_rng);
  }

  auto pool = train_pool(corpus);
  auto val = validation_pool(corpus);
  std::vector<std::int64_t> pool_counts;
  for (const auto& b : pool) pool_counts.push_back(static_cast<std::int64_t>(b.size()));
  BalancedSampler langs(pool_counts, fcfg.sampler_alpha, derive_seed(seed, "ft.sampler"));
  Rng pick_rng(derive_seed(seed, "ft.pick"));

  JsonlWriter metrics;
  if (!metrics_path.empty()) metrics.open(metrics_path);

  Adam<R> opt = make_adamw<R>(R(fcfg.lr), R(fcfg.weight_decay));
  std::vector<R> flat = params.flatten();

  double best_val = validation_loss(params, val);
  std::vector<R> best_flat = flat;
  std::int64_t best_step = 0;
  EarlyStopper stopper{fcfg.patience};
  stopper.update(best_val);

  auto t0 = std::chrono::steady_clock::now();
  std::int64_t step = 0;
  for (; step < fcfg.max_steps; ++step) {
    std::vector<R> grad(flat.size(), R(0));
    double loss_sum = 0;
    params.unflatten(flat);
    for (std::int64_t b = 0; b < fcfg.batch_size; ++b) {
      const Utterance* u = draw_utterance(pool, langs, pick_rng);
      Tape<R> tape;
      auto pv = ParamVars<R>::inputs(tape, params);
      auto loss = utterance_loss(tape, pv, frames_as<R>(*u), u->lang, u->labels);
      tape.backward(loss);
      axpy_into(grad, flat_grad(tape, pv), R(1.0 / double(fcfg.batch_size)));
      loss_sum += double(tape.value(loss).scalar_value()) / double(fcfg.batch_size);
    }
    if (!std::isfinite(loss_sum) || loss_sum > 1e6)
      throw NumericError("finetune: diverged at step " + std::to_string(step));
    opt.step(flat, grad);

    const bool at_val = (step + 1) % fcfg.val_every == 0 || step + 1 == fcfg.max_steps;
    double val_loss = std::numeric_limits<double>::quiet_NaN();
    bool stop = false;
    if (at_val) {
      params.unflatten(flat);
      val_loss = validation_loss(params, val);
      if (val_loss < best_val) {
        best_val = val_loss;
        best_flat = flat;
        best_step = step + 1;
      }
      stop = stopper.update(val_loss);
    }
    if ((step + 1) % fcfg.log_every == 0 || at_val || stop) {
      const auto now = std::chrono::steady_clock::now();
      nlohmann::json row = {
          {"step", step + 1},
          {"loss", loss_sum},
          {"wall_ms",
           std::chrono::duration_cast<std::chrono::milliseconds>(now - t0).count()}};
      if (at_val) row["val_loss"] = val_loss;
      metrics.write(row);
      t0 = now;
    }
    if (stop) break;
  }

  params.unflatten(best_flat);
  Checkpoint<R> out;
  out.params = std::move(params);
  out.meta.seed = seed;
  out.meta.step = best_step;
  out.meta.stage = "finetune";
  out.meta.parent_hash = parent_hash;
  out.meta.config_hash = fnv1a64(nlohmann::json(mcfg).dump());
  return out;
}

// Greedy-decode WER over a corpus (validation split by default), one report
// row per language that has reference words.
template <typename R>
WerReport evaluate(const ParamVector<R>& params, const Corpus& corpus,
                   bool validation_only = true) {
  const auto& mcfg = params.config();
  const auto& ccfg = corpus.manifest.config;
  if (mcfg.feature_dim != ccfg.feature_dim)
    throw InputError("evaluate: model/corpus feature_dim mismatch");
  if (mcfg.num_languages != ccfg.num_languages)
    throw InputError("evaluate: model/corpus num_languages mismatch");
  if (mcfg.vocab_size != ccfg.vocab_size)
    throw InputError("evaluate: model/corpus vocab_size mismatch");

  std::vector<LocaleWer> rows(static_cast<std::size_t>(ccfg.num_languages));
  for (std::size_t l = 0; l < rows.size(); ++l)
    rows[l].locale = "lang" + std::to_string(l);
  for (const auto& u : corpus.utterances) {
    if (validation_only && !is_validation(u)) continue;
    auto enc = encoder_output(params, frames_as<R>(u), u.lang);
    auto hyp = greedy_decode(enc, params);
    auto counts = edit_distance(u.labels, hyp);
    auto& row = rows[static_cast<std::size_t>(u.lang)];
    row.substitutions += counts.substitutions;
    row.deletions += counts.deletions;
    row.insertions += counts.insertions;
    row.ref_words += static_cast<std::int64_t>(u.labels.size());
  }
  WerReport report;
  for (auto& row : rows)
    if (row.ref_words > 0) report.locales.push_back(row);
  if (report.locales.empty()) throw InputError("evaluate: no reference words in split");
  return report;
}

template <typename R>
struct RecipeResult {
  Checkpoint<R> final;
  WerReport report;
  bool evaluated = false;
};

enum class Stage { Ssl, Leap, Finetune, Full };

namespace detail {

template <typename F>
void stage_guard(const std::string& stage, F&& f) {
  try {
    f();
  } catch (const InputError& e) {
    throw InputError("stage " + stage + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError("stage " + stage + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError("stage " + stage + ": " + e.what());
  }
}

}  // namespace detail

// Runs the enabled stages in order SSL -> LEAP -> fine-tune, each consuming
// the previous stage's checkpoint, then evaluates. `until` cuts the pipeline
// short for the single-stage CLI commands.
template <typename R>
RecipeResult<R> run_recipe(const RunConfig& raw, const std::filesystem::path& out,
                           Stage until = Stage::Full) {
  const RunConfig cfg = raw.resolved();
  std::filesystem::create_directories(out);
  {
    std::ofstream f(out / "resolved_config.json");
    f << nlohmann::json(cfg).dump(2) << "\n";
    if (!f) throw IoError("recipe: cannot write resolved_config.json");
  }
  Corpus corpus;
  detail::stage_guard("gen-data", [&] {
    corpus = gen_corpus(cfg.corpus, derive_seed(cfg.seed, "corpus"), out / "data");
  });

  RecipeResult<R> result;
  Checkpoint<R> cur;
  cur.params = ParamVector<R>(cfg.model);
  {
    Rng init_rng(derive_seed(cfg.seed, "init"));
    cur.params.init(init_rng);
  }
  cur.meta = {cfg.seed, 0, "init", 0, fnv1a64(nlohmann::json(cfg.model).dump())};
  std::uint64_t hash = save_checkpoint(cur, out / "init.ckpt");

  if (cfg.stages.ssl) {
    detail::stage_guard("ssl", [&] {
      cur = run_ssl_pretrain<R>(corpus, cfg.model, cfg.mask, cfg.contrastive, cfg.ssl,
                                cfg.seed, out / "ssl_metrics.jsonl", &cur.params, hash);
      hash = save_checkpoint(cur, out / "ssl.ckpt");
    });
  }
  if (until == Stage::Ssl) {
    result.final = std::move(cur);
    return result;
  }

  if (cfg.stages.leap) {
    detail::stage_guard("leap", [&] {
      cur = run_leap<R>(corpus, cfg.model, cfg.leap, cfg.seed, out / "leap_metrics.jsonl",
                        &cur.params, hash);
      hash = save_checkpoint(cur, out / "leap.ckpt");
    });
  }
  if (until == Stage::Leap) {
    result.final = std::move(cur);
    return result;
  }

  if (cfg.stages.finetune) {
    detail::stage_guard("finetune", [&] {
      cur = finetune<R>(corpus, cfg.model, cfg.finetune, cfg.seed,
                        out / "finetune_metrics.jsonl", &cur.params, hash);
    });
  }
  hash = save_checkpoint(cur, out / "final.ckpt");
  result.final = std::move(cur);
  if (until == Stage::Finetune) return result;

  detail::stage_guard("evaluate", [&] {
    result.report = evaluate(result.final.params, corpus);
    result.evaluated = true;
    std::ofstream jf(out / "report.json");
    jf << nlohmann::json(result.report).dump(2) << "\n";
    std::ofstream cf(out / "report.csv");
    cf << wer_report_csv(result.report);
    if (!jf || !cf) throw IoError("cannot write report");
  });
  return result;
}

// The 2x3 language-ID ablation grid: {lang-ID off/on} x {no pretraining,
// SSL only, SSL+LEAP}, all stages sharing the same seed.
inline const std::vector<std::pair<std::string, StageToggles>>& ablation_methods() {
  static const std::vector<std::pair<std::string, StageToggles>> methods = {
      {"no-pretrain", {false, false, true}},
      {"ssl", {true, false, true}},
      {"leap-ssl", {true, true, true}},
  };
  return methods;
}

template <typename R>
nlohmann::json ablate(const RunConfig& base, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  nlohmann::json rows = nlohmann::json::array();
  // overall WER per (lang_id, method) for the reduction columns
  std::map<std::string, std::map<bool, double>> overall;
  for (bool lang_id : {false, true}) {
    for (const auto& [method, toggles] : ablation_methods()) {
      RunConfig cfg = base;
      cfg.model.use_lang_id = lang_id;
      cfg.stages = toggles;
      const std::string cell =
          method + (lang_id ? "+langid" : "-nolangid");
      auto result = run_recipe<R>(cfg, out / cell);
      nlohmann::json row = nlohmann::json(result.report);
      row["method"] = method;
      row["use_lang_id"] = lang_id;
      rows.push_back(row);
      overall[method][lang_id] = result.report.overall();
    }
  }
  nlohmann::json reductions = nlohmann::json::array();
  for (const auto& [method, by_lang] : overall) {
    reductions.push_back({{"method", method},
                          {"overall_no_lang_id", by_lang.at(false)},
                          {"overall_lang_id", by_lang.at(true)},
                          {"relative_reduction",
                           relative_reduction(by_lang.at(false), by_lang.at(true))}});
  }
  nlohmann::json report = {{"rows", rows}, {"lang_id_reductions", reductions}};
  std::ofstream f(out / "ablation.json");
  f << report.dump(2) << "\n";
  if (!f) throw IoError("ablate: cannot write ablation.json");
  return report;
}

}  // namespace gm
