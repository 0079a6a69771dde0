// LEAP meta-initialization: per-task inner SGD rollouts, the pull-forward
// distance between gradient-path points (parameters plus a loss coordinate),
// the identity-Jacobian meta-gradient, and the Adam meta-loop over language
// tasks.

#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "gm/checkpoint.hpp"
#include "gm/common.hpp"
#include "gm/data.hpp"
#include "gm/metrics.hpp"
#include "gm/model.hpp"
#include "gm/optim.hpp"
#include "gm/train.hpp"
#include "gm/transducer.hpp"

namespace gm {

// One task: a replayable mini-batch objective over flat parameters plus the
// inner update rule (SGD with rate eta for `steps` steps). The objective
// must be a pure function of (params, step); all randomness comes from the
// seed baked into the closure.
template <typename R>
struct InnerTask {
  std::int64_t lang = 0;
  double eta = 0.05;
  std::int64_t steps = 8;
  std::function<double(const std::vector<R>&, std::int64_t step, std::vector<R>& grad)>
      objective;

  void validate() const {
    if (steps < 1) throw InputError("task: inner steps must be >= 1");
    if (eta < 0) throw InputError("task: eta must be >= 0");
    if (!objective) throw UsageError("task: objective not set");
  }
};

template <typename R>
struct Trajectory {
  std::vector<std::vector<R>> points;  // K+1 flat parameter vectors
  std::vector<double> losses;          // K+1 per-point mini-batch losses
  std::vector<std::vector<R>> grads;   // replay data: gradient at each point

  std::int64_t steps() const { return static_cast<std::int64_t>(points.size()) - 1; }

  void check() const {
    if (points.empty() || points.size() != losses.size())
      throw InputError("trajectory: points/losses length mismatch");
  }
};

template <typename R>
Trajectory<R> inner_rollout(const std::vector<R>& init, const InnerTask<R>& task) {
  task.validate();
  Trajectory<R> traj;
  std::vector<R> theta = init;
  for (std::int64_t i = 0; i <= task.steps; ++i) {
    std::vector<R> g(theta.size(), R(0));
    const double loss = task.objective(theta, i, g);
    if (!std::isfinite(loss))
      throw NumericError("inner_rollout: non-finite loss at step " + std::to_string(i));
    traj.points.push_back(theta);
    traj.losses.push_back(loss);
    traj.grads.push_back(std::move(g));
    if (i < task.steps)
      for (std::size_t k = 0; k < theta.size(); ++k)
        theta[k] -= R(task.eta) * traj.grads.back()[k];
  }
  return traj;
}

namespace detail {

// Squared distance between candidate point i and frozen point j, including
// the loss coordinate.
template <typename R>
double gamma_dist2(const Trajectory<R>& cand, std::size_t i, const Trajectory<R>& frozen,
                   std::size_t j) {
  double d2 = 0;
  const auto& a = cand.points[i];
  const auto& b = frozen.points[j];
  if (a.size() != b.size()) throw InputError("pull_forward: parameter size mismatch");
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = double(a[k]) - double(b[k]);
    d2 += d * d;
  }
  const double dl = cand.losses[i] - frozen.losses[j];
  return d2 + dl * dl;
}

}  // namespace detail

// Eq-style pull-forward distance: sum over i of ||frozen^{i+1} - cand^i||^p
// with p in {1,2}. With the trajectory as its own baseline and p=1 this is
// the gradient-path length.
template <typename R>
double pull_forward_distance(const Trajectory<R>& cand, const Trajectory<R>& frozen, int p) {
  cand.check();
  frozen.check();
  if (cand.points.size() != frozen.points.size())
    throw InputError("pull_forward: trajectory length mismatch");
  if (p != 1 && p != 2) throw InputError("pull_forward: p must be 1 or 2");
  double total = 0;
  for (std::size_t i = 0; i + 1 < cand.points.size(); ++i) {
    const double d2 = detail::gamma_dist2(cand, i, frozen, i + 1);
    total += p == 2 ? d2 : std::sqrt(d2);
  }
  return total;
}

// p=2 distance split into the parameter-space and loss-coordinate terms.
template <typename R>
std::pair<double, double> pull_forward_terms(const Trajectory<R>& cand,
                                             const Trajectory<R>& frozen) {
  cand.check();
  frozen.check();
  if (cand.points.size() != frozen.points.size())
    throw InputError("pull_forward: trajectory length mismatch");
  double param_term = 0, loss_term = 0;
  for (std::size_t i = 0; i + 1 < cand.points.size(); ++i) {
    const auto& a = cand.points[i];
    const auto& b = frozen.points[i + 1];
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double d = double(a[k]) - double(b[k]);
      param_term += d * d;
    }
    const double dl = cand.losses[i] - frozen.losses[i + 1];
    loss_term += dl * dl;
  }
  return {param_term, loss_term};
}

// Identity-Jacobian gradient of the self-baselined p=2 pull-forward sum with
// frozen forward points: sum over i of
//   2[(theta^i - theta^{i+1}) + (f^i - f^{i+1}) * grad f(theta^i)].
template <typename R>
std::vector<R> meta_gradient(const Trajectory<R>& traj) {
  traj.check();
  if (traj.steps() < 1) throw InputError("meta_gradient: need at least one step");
  if (traj.grads.size() != traj.points.size())
    throw UsageError("meta_gradient: missing replay gradients");
  std::vector<R> g(traj.points[0].size(), R(0));
  for (std::size_t i = 0; i + 1 < traj.points.size(); ++i) {
    const double df = traj.losses[i] - traj.losses[i + 1];
    const auto& cur = traj.points[i];
    const auto& nxt = traj.points[i + 1];
    const auto& gi = traj.grads[i];
    for (std::size_t k = 0; k < g.size(); ++k)
      g[k] += R(2) * (cur[k] - nxt[k] + R(df) * gi[k]);
  }
  return g;
}

template <typename R>
struct MetaState {
  std::vector<R> theta;
  Adam<R> opt{R(1e-3)};
  bool plain_sgd = false;  // hand-check variant: theta -= lr * grad
  std::int64_t step = 0;
};

struct MetaStepReport {
  std::vector<double> per_task_distance;
  double expected_distance = 0;
  double grad_norm = 0;
};

// One meta-update: roll out every task from the shared theta, accumulate
// identity-Jacobian meta-gradients in task order, average, apply the meta
// optimizer. Distances reported are self-baselined.
template <typename R>
MetaStepReport leap_meta_step(MetaState<R>& state, const std::vector<InnerTask<R>>& batch,
                              int distance_p = 2) {
  if (batch.empty()) throw InputError("leap: empty task batch");
  MetaStepReport report;
  std::vector<R> acc(state.theta.size(), R(0));
  for (const auto& task : batch) {
    Trajectory<R> traj;
    try {
      traj = inner_rollout(state.theta, task);
    } catch (const NumericError& e) {
      throw NumericError("task " + std::to_string(task.lang) + ": " + e.what());
    }
    report.per_task_distance.push_back(pull_forward_distance(traj, traj, distance_p));
    axpy_into(acc, meta_gradient(traj), R(1));
  }
  const R scale = R(1) / R(batch.size());
  for (auto& g : acc) g *= scale;
  for (double d : report.per_task_distance)
    report.expected_distance += d / double(batch.size());
  double n2 = 0;
  for (auto g : acc) n2 += double(g) * double(g);
  report.grad_norm = std::sqrt(n2);

  if (state.plain_sgd) {
    for (std::size_t k = 0; k < state.theta.size(); ++k)
      state.theta[k] -= state.opt.lr * acc[k];
  } else {
    state.opt.step(state.theta, acc);
  }
  ++state.step;
  return report;
}

struct LeapConfig {
  std::int64_t meta_steps = 50;
  double meta_lr = 1e-3;
  double inner_eta = 0.05;
  std::int64_t inner_steps = 8;
  std::int64_t inner_batch = 8;
  int distance_p = 2;
  std::int64_t log_every = 1;

  void validate() const {
    if (meta_steps < 0) throw InputError("leap: meta_steps must be >= 0");
    if (meta_lr <= 0) throw InputError("leap: meta_lr must be > 0");
    if (inner_steps < 1) throw InputError("leap: inner_steps must be >= 1");
    if (inner_batch < 1) throw InputError("leap: inner_batch must be >= 1");
    if (distance_p != 1 && distance_p != 2) throw InputError("leap: distance_p must be 1 or 2");
    if (log_every < 1) throw InputError("leap: log_every must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const LeapConfig& c) {
  j = nlohmann::json{{"meta_steps", c.meta_steps},   {"meta_lr", c.meta_lr},
                     {"inner_eta", c.inner_eta},     {"inner_steps", c.inner_steps},
                     {"inner_batch", c.inner_batch}, {"distance_p", c.distance_p},
                     {"log_every", c.log_every}};
}

inline void from_json(const nlohmann::json& j, LeapConfig& c) {
  LeapConfig d;
  c.meta_steps = j.value("meta_steps", d.meta_steps);
  c.meta_lr = j.value("meta_lr", d.meta_lr);
  c.inner_eta = j.value("inner_eta", d.inner_eta);
  c.inner_steps = j.value("inner_steps", d.inner_steps);
  c.inner_batch = j.value("inner_batch", d.inner_batch);
  c.distance_p = j.value("distance_p", d.distance_p);
  c.log_every = j.value("log_every", d.log_every);
}

// Mini-batch transducer loss over one language's training utterances as an
// InnerTask objective. Batches are re-drawn per step from the task seed, so
// rollouts replay bit-exactly.
template <typename R>
InnerTask<R> make_language_task(const std::vector<const Utterance*>& bucket,
                                const ModelConfig& mcfg, std::int64_t lang, double eta,
                                std::int64_t steps, std::int64_t batch_size,
                                std::uint64_t task_seed) {
  if (bucket.empty()) throw InputError("leap: language has no training utterances");
  InnerTask<R> task;
  task.lang = lang;
  task.eta = eta;
  task.steps = steps;
  auto scratch = std::make_shared<ParamVector<R>>(mcfg);
  task.objective = [bucket, mcfg, lang, batch_size, task_seed, scratch](
                       const std::vector<R>& flat, std::int64_t step,
                       std::vector<R>& grad) {
    scratch->unflatten(flat);
    Rng rng(derive_seed(task_seed, "batch", static_cast<std::uint64_t>(step)));
    Tape<R> tape;
    auto pv = ParamVars<R>::inputs(tape, *scratch);
    typename Tape<R>::Var total = tape.constant(Tensor<R>::scalar(R(0)));
    for (std::int64_t b = 0; b < batch_size; ++b) {
      const Utterance* u = bucket[rng.uniform_int(bucket.size())];
      total = tape.add(total, utterance_loss(tape, pv, frames_as<R>(*u), lang, u->labels));
    }
    auto loss = tape.scale(total, R(1) / R(batch_size));
    tape.backward(loss);
    grad = flat_grad(tape, pv);
    return double(tape.value(loss).scalar_value());
  };
  return task;
}

template <typename R>
Checkpoint<R> run_leap(const Corpus& corpus, const ModelConfig& mcfg, const LeapConfig& cfg,
                       std::uint64_t seed, const std::filesystem::path& metrics_path = {},
                       const ParamVector<R>* start = nullptr, std::uint64_t parent_hash = 0) {
  cfg.validate();
  if (corpus.utterances.empty()) throw InputError("leap: empty corpus");

  ParamVector<R> params = start ? *start : ParamVector<R>(mcfg);
  if (!start) {
    Rng init_rng(derive_seed(seed, "init"));
    params.init(init_rng);
  }
  auto pool = train_pool(corpus);
  const auto num_langs = static_cast<std::int64_t>(pool.size());

  MetaState<R> state;
  state.theta = params.flatten();
  state.opt = Adam<R>(R(cfg.meta_lr));

  JsonlWriter metrics;
  if (!metrics_path.empty()) metrics.open(metrics_path);

  auto t0 = std::chrono::steady_clock::now();
  for (std::int64_t ms = 0; ms < cfg.meta_steps; ++ms) {
    std::vector<InnerTask<R>> batch;
    for (std::int64_t l = 0; l < num_langs; ++l)
      batch.push_back(make_language_task<R>(
          pool[static_cast<std::size_t>(l)], mcfg, l, cfg.inner_eta, cfg.inner_steps,
          cfg.inner_batch,
          derive_seed(seed, "leap.task",
                      static_cast<std::uint64_t>(ms) * static_cast<std::uint64_t>(num_langs) +
                          static_cast<std::uint64_t>(l))));
    auto report = leap_meta_step(state, batch, cfg.distance_p);
    if ((ms + 1) % cfg.log_every == 0 || ms + 1 == cfg.meta_steps) {
      const auto now = std::chrono::steady_clock::now();
      metrics.write(
          {{"meta_step", ms + 1},
           {"expected_distance", report.expected_distance},
           {"per_task_distance", report.per_task_distance},
           {"grad_norm", report.grad_norm},
           {"wall_ms",
            std::chrono::duration_cast<std::chrono::milliseconds>(now - t0).count()}});
      t0 = now;
    }
  }
  params.unflatten(state.theta);

  Checkpoint<R> out;
  out.params = std::move(params);
  out.meta.seed = seed;
  out.meta.step = cfg.meta_steps;
  out.meta.stage = "leap";
  out.meta.parent_hash = parent_hash;
  out.meta.config_hash = fnv1a64(nlohmann::json(mcfg).dump());
  return out;
}

// Mean self-baselined p=1 path length of fresh K-step rollouts, one per
// language, from the given parameters. Used to compare initializations.
template <typename R>
double expected_path_length(const Corpus& corpus, const ModelConfig& mcfg,
                            const ParamVector<R>& params, const LeapConfig& cfg,
                            std::uint64_t seed) {
  auto pool = train_pool(corpus);
  const auto flat = params.flatten();
  double total = 0;
  for (std::size_t l = 0; l < pool.size(); ++l) {
    auto task = make_language_task<R>(pool[l], mcfg, static_cast<std::int64_t>(l),
                                      cfg.inner_eta, cfg.inner_steps, cfg.inner_batch,
                                      derive_seed(seed, "pathlen", l));
    auto traj = inner_rollout(flat, task);
    total += pull_forward_distance(traj, traj, 1) / double(pool.size());
  }
  return total;
}

}  // namespace gm
