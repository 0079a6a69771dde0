#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gm/checkpoint.hpp"
#include "gm/model.hpp"
#include "gm/transducer.hpp"

using gm::ModelConfig;
using gm::ParamVars;
using gm::ParamVector;
using gm::Tape;
using gm::Tensor;
using T = Tensor<double>;
using DTape = Tape<double>;
using Params = ParamVector<double>;
using PVars = ParamVars<double>;

static ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.feature_dim = 3;
  cfg.num_languages = 2;
  cfg.conv_channels = 4;
  cfg.num_blocks = 1;
  cfg.model_dim = 4;
  cfg.num_heads = 2;
  cfg.ff_dim = 6;
  cfg.rel_clip = 2;
  cfg.predictor_dim = 4;
  cfg.vocab_size = 3;
  return cfg;
}

static Params init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Params p(cfg);
  gm::Rng rng(seed);
  p.init(rng);
  return p;
}

TEST_CASE("featurize appends the one-hot and copies features unchanged") {
  ModelConfig cfg;
  cfg.feature_dim = 3;
  cfg.num_languages = 4;
  T frames({2, 3}, {1, 2, 3, 4, 5, 6});
  T out = gm::featurize(frames, 2, cfg);
  CHECK(out.cols() == 7);
  for (std::int64_t i = 0; i < 2; ++i) {
    for (std::int64_t j = 0; j < 3; ++j) CHECK(out.at(i, j) == frames.at(i, j));
    CHECK(out.at(i, 3) == 0);
    CHECK(out.at(i, 4) == 0);
    CHECK(out.at(i, 5) == 1);
    CHECK(out.at(i, 6) == 0);
  }
  // Input untouched.
  CHECK(frames.at(0, 0) == 1);
}

TEST_CASE("featurize degenerate one-hot L=1 and identity without lang id") {
  ModelConfig cfg;
  cfg.feature_dim = 2;
  cfg.num_languages = 1;
  T frames({3, 2}, {1, 2, 3, 4, 5, 6});
  T out = gm::featurize(frames, 0, cfg);
  CHECK(out.cols() == 3);
  for (std::int64_t i = 0; i < 3; ++i) CHECK(out.at(i, 2) == 1);

  cfg.use_lang_id = false;
  T same = gm::featurize(frames, 0, cfg);
  CHECK(same.vec() == frames.vec());

  cfg.use_lang_id = true;
  CHECK_THROWS_AS(gm::featurize(frames, 1, cfg), gm::InputError);
  CHECK_THROWS_AS(gm::featurize(frames, -1, cfg), gm::InputError);
}

TEST_CASE("subsample output length is ceil(T/4) for all T in [1,1000]") {
  ModelConfig cfg = tiny_config();
  Params p = init_params(cfg, 1);
  for (std::int64_t t = 1; t <= 1000; ++t) {
    DTape tape;
    PVars pv = PVars::constants(tape, p);
    gm::ModelGraph<double> g(tape, pv);
    T frames({t, cfg.input_dim()});
    auto lat = g.subsample(tape.constant(frames));
    CHECK(tape.value(lat).rows() == (t + 3) / 4);
    CHECK(tape.value(lat).cols() == cfg.model_dim);
  }
}

TEST_CASE("encode with num_blocks=0 is the identity") {
  ModelConfig cfg = tiny_config();
  cfg.num_blocks = 0;
  Params p = init_params(cfg, 2);
  gm::Rng rng(3);
  for (std::int64_t t : {1, 3, 7}) {
    T latent({t, cfg.model_dim});
    for (std::int64_t i = 0; i < latent.numel(); ++i) latent[i] = rng.normal();
    DTape tape;
    PVars pv = PVars::constants(tape, p);
    gm::ModelGraph<double> g(tape, pv);
    auto out = g.encode(tape.constant(latent), nullptr);
    CHECK(tape.value(out).vec() == latent.vec());
  }
}

TEST_CASE("encode: constant-in-time input stays constant-in-time") {
  ModelConfig cfg = tiny_config();
  Params p = init_params(cfg, 4);
  T latent({5, cfg.model_dim});
  gm::Rng rng(5);
  for (std::int64_t j = 0; j < cfg.model_dim; ++j) {
    double v = rng.normal();
    for (std::int64_t i = 0; i < 5; ++i) latent.at(i, j) = v;
  }
  DTape tape;
  PVars pv = PVars::constants(tape, p);
  gm::ModelGraph<double> g(tape, pv);
  const T& out = tape.value(g.encode(tape.constant(latent), nullptr));
  for (std::int64_t i = 1; i < 5; ++i)
    for (std::int64_t j = 0; j < cfg.model_dim; ++j)
      CHECK(out.at(i, j) == doctest::Approx(out.at(0, j)).epsilon(1e-12));
}

TEST_CASE("encode: mask position out of range is an input error") {
  ModelConfig cfg = tiny_config();
  Params p = init_params(cfg, 6);
  DTape tape;
  PVars pv = PVars::constants(tape, p);
  gm::ModelGraph<double> g(tape, pv);
  T latent({4, cfg.model_dim});
  std::vector<std::int64_t> bad = {4};
  CHECK_THROWS_AS(g.encode(tape.constant(latent), &bad), gm::InputError);
}

TEST_CASE("encode: translation equivariance away from edges") {
  // A length-16 latent pattern shifted by 4 into a length-24 input; interior
  // positions whose attention receptive field stays inside the shifted copy
  // must match the unshifted run.
  ModelConfig cfg = tiny_config();
  cfg.num_blocks = 2;
  cfg.rel_clip = 2;
  Params p = init_params(cfg, 7);
  gm::Rng rng(8);
  T pattern({16, cfg.model_dim});
  for (std::int64_t i = 0; i < pattern.numel(); ++i) pattern[i] = rng.normal();
  T shifted({24, cfg.model_dim});
  for (std::int64_t i = 0; i < shifted.numel(); ++i) shifted[i] = rng.normal();
  for (std::int64_t i = 0; i < 16; ++i)
    for (std::int64_t j = 0; j < cfg.model_dim; ++j)
      shifted.at(i + 4, j) = pattern.at(i, j);

  auto run = [&](const T& latent) {
    DTape tape;
    PVars pv = PVars::constants(tape, p);
    gm::ModelGraph<double> g(tape, pv);
    return tape.value(g.encode(tape.constant(latent), nullptr));
  };
  T a = run(pattern);
  T b = run(shifted);
  const std::int64_t radius = cfg.num_blocks * cfg.rel_clip;
  for (std::int64_t i = 4 + radius; i <= 19 - radius; ++i)
    for (std::int64_t j = 0; j < cfg.model_dim; ++j)
      CHECK(std::abs(b.at(i, j) - a.at(i - 4, j)) <= 1e-10);
}

TEST_CASE("transducer lattice shape is T' x (U+1) x (V+1)") {
  ModelConfig cfg = tiny_config();
  cfg.vocab_size = 6;
  Params p = init_params(cfg, 9);
  DTape tape;
  PVars pv = PVars::constants(tape, p);
  gm::ModelGraph<double> g(tape, pv);
  T latent({3, cfg.model_dim});
  auto enc = g.encode(tape.constant(latent), nullptr);
  auto logits = g.transducer_logits(enc, {1, 2});
  CHECK(tape.value(logits).rows() == 3 * 3);
  CHECK(tape.value(logits).cols() == 7);

  CHECK_THROWS_AS(g.transducer_logits(enc, {6}), gm::InputError);
}

TEST_CASE("all-zero joint output weights give uniform softmax cells") {
  ModelConfig cfg = tiny_config();
  Params p = init_params(cfg, 10);
  auto& w = p.section("joint.out.w");
  auto& b = p.section("joint.out.b");
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = 0;
  for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = 0;

  DTape tape;
  PVars pv = PVars::constants(tape, p);
  gm::ModelGraph<double> g(tape, pv);
  T latent({2, cfg.model_dim}, std::vector<double>(2 * cfg.model_dim, 0.3));
  auto enc = g.encode(tape.constant(latent), nullptr);
  auto probs = tape.softmax_rows(g.transducer_logits(enc, {0}));
  const T& v = tape.value(probs);
  for (std::int64_t i = 0; i < v.numel(); ++i)
    CHECK(v[i] == doctest::Approx(1.0 / double(cfg.vocab_size + 1)).epsilon(1e-12));
}

TEST_CASE("label permutation with matching embedding/output permutation") {
  ModelConfig cfg = tiny_config();
  Params a = init_params(cfg, 11);
  Params b = a;
  const std::int64_t v = cfg.vocab_size;
  // pi(x) = (x+1) mod V over real labels; blank row stays put.
  auto pi = [&](std::int64_t x) { return (x + 1) % v; };
  auto& ea = a.section("pred.emb");
  auto& eb = b.section("pred.emb");
  for (std::int64_t x = 0; x < v; ++x)
    for (std::int64_t j = 0; j < ea.cols(); ++j) eb.at(x, j) = ea.at(pi(x), j);
  auto& wa = a.section("joint.out.w");
  auto& wb = b.section("joint.out.w");
  auto& ba = a.section("joint.out.b");
  auto& bb = b.section("joint.out.b");
  for (std::int64_t x = 0; x < v; ++x) {
    for (std::int64_t r = 0; r < wa.rows(); ++r) wb.at(r, x) = wa.at(r, pi(x));
    bb[x] = ba[pi(x)];
  }

  gm::Rng rng(12);
  T latent({3, cfg.model_dim});
  for (std::int64_t i = 0; i < latent.numel(); ++i) latent[i] = rng.normal();

  std::vector<std::int64_t> labels_a = {1, 2};
  std::vector<std::int64_t> labels_b = {0, 1};  // pi(labels_b) == labels_a

  auto lattice = [&](Params& p, const std::vector<std::int64_t>& labels) {
    DTape tape;
    PVars pv = PVars::constants(tape, p);
    gm::ModelGraph<double> g(tape, pv);
    auto enc = g.encode(tape.constant(latent), nullptr);
    return tape.value(g.transducer_logits(enc, labels));
  };
  T la = lattice(a, labels_a);
  T lb = lattice(b, labels_b);
  for (std::int64_t r = 0; r < la.rows(); ++r) {
    for (std::int64_t x = 0; x < v; ++x)
      CHECK(lb.at(r, x) == doctest::Approx(la.at(r, pi(x))).epsilon(1e-12));
    CHECK(lb.at(r, v) == doctest::Approx(la.at(r, v)).epsilon(1e-12));
  }
}

TEST_CASE("flatten -> unflatten round trip is the identity") {
  ModelConfig cfg = tiny_config();
  Params p = init_params(cfg, 13);
  auto flat = p.flatten();
  Params q(cfg);
  q.unflatten(flat);
  CHECK(q.flatten() == flat);
  CHECK(p.total_size() == static_cast<std::int64_t>(flat.size()));
}

TEST_CASE("end-to-end gradient check through the full utterance loss") {
  ModelConfig cfg = tiny_config();
  cfg.num_blocks = 1;
  Params p = init_params(cfg, 14);
  gm::Rng rng(15);
  T frames({3, cfg.feature_dim});
  for (std::int64_t i = 0; i < frames.numel(); ++i) frames[i] = rng.normal();
  std::vector<std::int64_t> labels = {1};

  // Check a representative subset of sections end to end (the full parameter
  // sweep lives in the acceptance suite).
  for (const char* name : {"conv1.w", "blk0.attn.wq", "blk0.attn.rel", "blk0.ln1.g",
                           "pred.whz", "joint.out.w", "mask.vec"}) {
    CAPTURE(name);
    std::size_t idx = p.index(name);
    auto builder = [&](DTape& tape, std::vector<DTape::Var>& vars) {
      PVars pv;
      pv.params = &p;
      for (std::size_t s = 0; s < p.num_sections(); ++s) {
        if (s == idx)
          pv.vars.push_back(vars[0]);
        else
          pv.vars.push_back(tape.constant(p.section_at(s).t));
      }
      return gm::utterance_loss(tape, pv, frames, 1, labels);
    };
    double err = gm::grad_check<double>(builder, {p.section(name)}, 1e-5);
    CHECK_MESSAGE(err <= 1e-6, name << " grad error " << err);
  }
}

TEST_CASE("checkpoint round trip and tamper detection") {
  ModelConfig cfg = tiny_config();
  gm::Checkpoint<double> ckpt;
  ckpt.params = init_params(cfg, 16);
  ckpt.meta.seed = 16;
  ckpt.meta.step = 42;
  ckpt.meta.stage = "finetune";
  ckpt.meta.parent_hash = 1234;

  auto dir = std::filesystem::temp_directory_path() / "gm_ckpt_test";
  std::filesystem::create_directories(dir);
  auto path = dir / "model.ckpt";
  std::uint64_t hash = gm::save_checkpoint(ckpt, path);

  auto loaded = gm::load_checkpoint<double>(path);
  CHECK(loaded.params.flatten() == ckpt.params.flatten());
  CHECK(loaded.meta.step == 42);
  CHECK(loaded.meta.stage == "finetune");
  CHECK(loaded.meta.parent_hash == 1234);
  CHECK(loaded.payload_hash == hash);

  // Flip one payload byte: load must fail.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    char c;
    f.seekg(-1, std::ios::end);
    f.get(c);
    f.seekp(-1, std::ios::end);
    f.put(static_cast<char>(c ^ 0x1));
  }
  CHECK_THROWS_AS(gm::load_checkpoint<double>(path), gm::IoError);
  std::filesystem::remove_all(dir);
}
