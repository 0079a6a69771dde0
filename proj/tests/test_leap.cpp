#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gm/leap.hpp"

using gm::InnerTask;
using gm::MetaState;
using gm::Trajectory;

namespace {

// f(theta) = theta^2 / 2 in one dimension; gradient is theta itself.
InnerTask<double> quadratic_1d(double eta, std::int64_t steps) {
  InnerTask<double> task;
  task.eta = eta;
  task.steps = steps;
  task.objective = [](const std::vector<double>& th, std::int64_t, std::vector<double>& g) {
    g[0] = th[0];
    return 0.5 * th[0] * th[0];
  };
  return task;
}

// f(theta) = (theta - c)^T A (theta - c) / 2 with diagonal A.
InnerTask<double> quadratic_2d(double ax, double ay, double cx, double cy, double eta,
                               std::int64_t steps) {
  InnerTask<double> task;
  task.eta = eta;
  task.steps = steps;
  task.objective = [=](const std::vector<double>& th, std::int64_t, std::vector<double>& g) {
    const double dx = th[0] - cx, dy = th[1] - cy;
    g[0] = ax * dx;
    g[1] = ay * dy;
    return 0.5 * (ax * dx * dx + ay * dy * dy);
  };
  return task;
}

}  // namespace

TEST_CASE("inner_rollout: hand-iterated 1-D quadratic") {
  auto traj = gm::inner_rollout<double>({1.0}, quadratic_1d(0.5, 2));
  REQUIRE(traj.points.size() == 3);
  CHECK(traj.points[0][0] == 1.0);
  CHECK(traj.points[1][0] == 0.5);
  CHECK(traj.points[2][0] == 0.25);
  CHECK(traj.losses[0] == 0.5);
  CHECK(traj.losses[1] == 0.125);
  CHECK(traj.losses[2] == 0.03125);
}

TEST_CASE("inner_rollout: eta=0 keeps every point identical") {
  auto traj = gm::inner_rollout<double>({0.7}, quadratic_1d(0.0, 4));
  for (const auto& p : traj.points) CHECK(p[0] == 0.7);
  for (double l : traj.losses) CHECK(l == 0.5 * 0.7 * 0.7);
}

TEST_CASE("inner_rollout: non-finite loss reports the step index") {
  InnerTask<double> task;
  task.eta = 0.1;
  task.steps = 3;
  task.objective = [](const std::vector<double>&, std::int64_t step, std::vector<double>& g) {
    g[0] = 1;
    return step == 1 ? std::numeric_limits<double>::infinity() : 1.0;
  };
  CHECK_THROWS_WITH_AS(gm::inner_rollout<double>({1.0}, task),
                       "inner_rollout: non-finite loss at step 1", gm::NumericError);
}

TEST_CASE("pull_forward_distance: degenerate and hand cases") {
  Trajectory<double> single;
  single.points = {{1.0, 2.0}};
  single.losses = {3.0};
  CHECK(gm::pull_forward_distance(single, single, 2) == 0.0);

  auto flat = gm::inner_rollout<double>({1.0}, quadratic_1d(0.0, 3));
  CHECK(gm::pull_forward_distance(flat, flat, 2) == 0.0);

  auto traj = gm::inner_rollout<double>({1.0}, quadratic_1d(0.5, 2));
  CHECK(gm::pull_forward_distance(traj, traj, 2) ==
        doctest::Approx(0.4619140625).epsilon(1e-12));
  double p1 = std::sqrt(0.5 * 0.5 + 0.375 * 0.375) +
              std::sqrt(0.25 * 0.25 + 0.09375 * 0.09375);
  CHECK(gm::pull_forward_distance(traj, traj, 1) == doctest::Approx(p1).epsilon(1e-12));

  CHECK_THROWS_AS(gm::pull_forward_distance(traj, single, 2), gm::InputError);
  CHECK_THROWS_AS(gm::pull_forward_distance(traj, traj, 3), gm::InputError);
}

TEST_CASE("pull_forward_terms: nonnegative split that sums to the p=2 distance") {
  auto traj = gm::inner_rollout<double>({1.0}, quadratic_1d(0.5, 2));
  auto [param_term, loss_term] = gm::pull_forward_terms(traj, traj);
  CHECK(param_term >= 0.0);
  CHECK(loss_term >= 0.0);
  CHECK(param_term + loss_term ==
        doctest::Approx(gm::pull_forward_distance(traj, traj, 2)).epsilon(1e-12));
  CHECK(param_term == doctest::Approx(0.25 + 0.0625).epsilon(1e-12));
}

TEST_CASE("meta_gradient: hand value, zero case, missing replay data") {
  auto traj = gm::inner_rollout<double>({1.0}, quadratic_1d(0.5, 2));
  auto g = gm::meta_gradient(traj);
  REQUIRE(g.size() == 1);
  CHECK(g[0] == doctest::Approx(2.34375).epsilon(1e-12));

  auto flat = gm::inner_rollout<double>({0.7}, quadratic_1d(0.0, 4));
  for (double v : gm::meta_gradient(flat)) CHECK(v == 0.0);

  Trajectory<double> no_replay;
  no_replay.points = {{1.0}, {0.5}};
  no_replay.losses = {0.5, 0.125};
  CHECK_THROWS_AS(gm::meta_gradient(no_replay), gm::UsageError);
}

TEST_CASE("leap_meta_step: plain-SGD hand update") {
  MetaState<double> state;
  state.theta = {1.0};
  state.opt = gm::Adam<double>(0.1);
  state.plain_sgd = true;
  auto report = gm::leap_meta_step(state, {quadratic_1d(0.5, 2)});
  CHECK(state.theta[0] == doctest::Approx(0.765625).epsilon(1e-12));
  CHECK(report.expected_distance == doctest::Approx(0.4619140625).epsilon(1e-12));
  CHECK(report.per_task_distance.size() == 1);
  CHECK(report.grad_norm == doctest::Approx(2.34375).epsilon(1e-12));
  CHECK(state.step == 1);
}

TEST_CASE("leap_meta_step: duplicated tasks average to the single-task update") {
  MetaState<double> a, b;
  a.theta = b.theta = {1.0};
  a.opt = b.opt = gm::Adam<double>(0.1);
  a.plain_sgd = b.plain_sgd = true;
  gm::leap_meta_step(a, {quadratic_1d(0.5, 2)});
  gm::leap_meta_step(b, {quadratic_1d(0.5, 2), quadratic_1d(0.5, 2)});
  CHECK(a.theta[0] == doctest::Approx(b.theta[0]).epsilon(1e-15));
}

TEST_CASE("leap_meta_step: zero gradient moves nothing, tiny lr moves almost nothing") {
  InnerTask<double> constant;
  constant.eta = 0.3;
  constant.steps = 2;
  constant.objective = [](const std::vector<double>&, std::int64_t, std::vector<double>&) {
    return 1.5;  // gradient stays zero
  };
  {
    MetaState<double> state;
    state.theta = {0.4, -0.9};
    state.opt = gm::Adam<double>(0.1);
    gm::leap_meta_step(state, {constant});
    CHECK(state.theta[0] == 0.4);
    CHECK(state.theta[1] == -0.9);
    CHECK(state.step == 1);
  }
  {
    MetaState<double> state;
    state.theta = {1.0, 1.0};
    state.opt = gm::Adam<double>(1e-8);
    gm::leap_meta_step(state, {quadratic_2d(1, 2, 0, 0, 0.1, 3)});
    CHECK(std::abs(state.theta[0] - 1.0) <= 1e-6);
    CHECK(std::abs(state.theta[1] - 1.0) <= 1e-6);
  }
  CHECK_THROWS_AS(
      [] {
        MetaState<double> s;
        s.theta = {0.0};
        gm::leap_meta_step(s, {});
      }(),
      gm::InputError);
}

TEST_CASE("meta_gradient agrees in direction with a numeric pull-forward gradient") {
  auto task = quadratic_2d(1.0, 3.0, 0.5, -0.25, 0.1, 4);
  const std::vector<double> theta0 = {1.2, 0.8};
  auto base = gm::inner_rollout(theta0, task);
  auto mg = gm::meta_gradient(base);

  // Numeric gradient of D(theta) = sum_i ||frozen^{i+1} - rollout_i(theta)||^2
  // with the baseline frozen at theta0.
  auto objective = [&](const std::vector<double>& th) {
    auto cand = gm::inner_rollout(th, task);
    return gm::pull_forward_distance(cand, base, 2);
  };
  const double eps = 1e-6;
  std::vector<double> num(2);
  for (std::size_t k = 0; k < 2; ++k) {
    auto up = theta0, dn = theta0;
    up[k] += eps;
    dn[k] -= eps;
    num[k] = (objective(up) - objective(dn)) / (2 * eps);
  }
  const double dot = mg[0] * num[0] + mg[1] * num[1];
  const double nm = std::hypot(mg[0], mg[1]) * std::hypot(num[0], num[1]);
  REQUIRE(nm > 0);
  CHECK(dot / nm > 0.5);
}

TEST_CASE("meta loop shrinks the expected distance on a 2-D quadratic family") {
  std::vector<InnerTask<double>> tasks;
  const double pi = 3.14159265358979323846;
  for (int k = 0; k < 6; ++k) {
    const double ang = 2 * pi * k / 6;
    tasks.push_back(
        quadratic_2d(1.0 + 0.2 * k, 2.0, std::cos(ang), std::sin(ang), 0.1, 5));
  }
  MetaState<double> state;
  state.theta = {3.0, -2.5};
  state.opt = gm::Adam<double>(0.05);
  double first = 0, last = 0;
  for (int ms = 0; ms < 60; ++ms) {
    auto report = gm::leap_meta_step(state, tasks);
    if (ms == 0) first = report.expected_distance;
    if (ms == 59) last = report.expected_distance;
    for (double d : report.per_task_distance) CHECK(d >= 0.0);
  }
  CHECK(last < first);
}

namespace {

gm::SynthConfig leap_corpus_config() {
  gm::SynthConfig cfg;
  cfg.num_languages = 2;
  cfg.vocab_size = 4;
  cfg.counts = {30, 30};
  return cfg;
}

gm::ModelConfig leap_model_config() {
  gm::ModelConfig cfg;
  cfg.feature_dim = 8;
  cfg.num_languages = 2;
  cfg.conv_channels = 6;
  cfg.num_blocks = 1;
  cfg.model_dim = 8;
  cfg.num_heads = 2;
  cfg.ff_dim = 12;
  cfg.rel_clip = 4;
  cfg.predictor_dim = 6;
  cfg.vocab_size = 4;
  return cfg;
}

}  // namespace

TEST_CASE("language task rollouts replay bit-exactly") {
  auto corpus = gm::gen_corpus(leap_corpus_config(), 60);
  auto mcfg = leap_model_config();
  auto pool = gm::train_pool(corpus);
  gm::ParamVector<double> params(mcfg);
  gm::Rng rng(1);
  params.init(rng);
  auto flat = params.flatten();

  auto task = gm::make_language_task<double>(pool[0], mcfg, 0, 0.05, 2, 2, 777);
  auto a = gm::inner_rollout(flat, task);
  auto b = gm::inner_rollout(flat, task);
  REQUIRE(a.points.size() == b.points.size());
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    CHECK(a.points[i] == b.points[i]);
    CHECK(a.losses[i] == b.losses[i]);
  }
  CHECK(a.losses[0] > 0.0);
}

TEST_CASE("run_leap: meta_steps=0 identity, deterministic metrics") {
  auto corpus = gm::gen_corpus(leap_corpus_config(), 61);
  auto mcfg = leap_model_config();
  gm::LeapConfig cfg;
  cfg.meta_steps = 0;
  auto ckpt = gm::run_leap<double>(corpus, mcfg, cfg, 5);
  gm::ParamVector<double> expect(mcfg);
  gm::Rng init_rng(gm::derive_seed(5, "init"));
  expect.init(init_rng);
  CHECK(ckpt.params.flatten() == expect.flatten());
  CHECK(ckpt.meta.stage == "leap");

  cfg.meta_steps = 2;
  cfg.inner_steps = 2;
  cfg.inner_batch = 2;
  auto dir = std::filesystem::temp_directory_path() / "gm_leap_test";
  std::filesystem::remove_all(dir);
  auto a = gm::run_leap<double>(corpus, mcfg, cfg, 5, dir / "a.jsonl");
  auto b = gm::run_leap<double>(corpus, mcfg, cfg, 5, dir / "b.jsonl");
  CHECK(a.params.flatten() == b.params.flatten());
  auto ra = gm::read_jsonl(dir / "a.jsonl");
  auto rb = gm::read_jsonl(dir / "b.jsonl");
  REQUIRE(ra.size() == 2);
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ra[i].erase("wall_ms");
    rb[i].erase("wall_ms");
    CHECK(ra[i] == rb[i]);
  }
  CHECK(ra[0]["per_task_distance"].size() == 2);
  CHECK(ra[0]["expected_distance"].get<double>() > 0.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("expected_path_length is positive and deterministic") {
  auto corpus = gm::gen_corpus(leap_corpus_config(), 62);
  auto mcfg = leap_model_config();
  gm::ParamVector<double> params(mcfg);
  gm::Rng rng(3);
  params.init(rng);
  gm::LeapConfig cfg;
  cfg.inner_steps = 2;
  cfg.inner_batch = 2;
  double a = gm::expected_path_length(corpus, mcfg, params, cfg, 9);
  double b = gm::expected_path_length(corpus, mcfg, params, cfg, 9);
  CHECK(a > 0.0);
  CHECK(a == b);
}
