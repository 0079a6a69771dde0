// Toy Transformer-transducer: language-ID featurizer, convolutional
// subsampler, relative-position transformer encoder, gated recurrent label
// predictor and joint network.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "gm/common.hpp"
#include "gm/tape.hpp"
#include "gm/tensor.hpp"

namespace gm {

struct ModelConfig {
  std::int64_t feature_dim = 8;
  std::int64_t num_languages = 6;
  bool use_lang_id = true;
  std::int64_t conv_channels = 16;
  std::int64_t num_blocks = 2;
  std::int64_t model_dim = 16;
  std::int64_t num_heads = 2;
  std::int64_t ff_dim = 32;
  std::int64_t rel_clip = 8;
  std::int64_t predictor_dim = 16;
  std::int64_t vocab_size = 6;  // excluding blank; blank symbol index == vocab_size

  std::int64_t input_dim() const {
    return feature_dim + (use_lang_id ? num_languages : 0);
  }
  std::int64_t blank() const { return vocab_size; }

  void validate() const {
    if (model_dim % num_heads != 0) throw InputError("config: model_dim % num_heads != 0");
    if (rel_clip < 1) throw InputError("config: rel_clip < 1");
    if (vocab_size < 1) throw InputError("config: vocab_size < 1");
    if (num_languages < 1) throw InputError("config: num_languages < 1");
    if (feature_dim < 1 || conv_channels < 1 || predictor_dim < 1 || ff_dim < 1)
      throw InputError("config: non-positive dimension");
    if (num_blocks < 0) throw InputError("config: num_blocks < 0");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"feature_dim", c.feature_dim},
                     {"num_languages", c.num_languages},
                     {"use_lang_id", c.use_lang_id},
                     {"conv_channels", c.conv_channels},
                     {"num_blocks", c.num_blocks},
                     {"model_dim", c.model_dim},
                     {"num_heads", c.num_heads},
                     {"ff_dim", c.ff_dim},
                     {"rel_clip", c.rel_clip},
                     {"predictor_dim", c.predictor_dim},
                     {"vocab_size", c.vocab_size}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.num_languages = j.value("num_languages", d.num_languages);
  c.use_lang_id = j.value("use_lang_id", d.use_lang_id);
  c.conv_channels = j.value("conv_channels", d.conv_channels);
  c.num_blocks = j.value("num_blocks", d.num_blocks);
  c.model_dim = j.value("model_dim", d.model_dim);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.ff_dim = j.value("ff_dim", d.ff_dim);
  c.rel_clip = j.value("rel_clip", d.rel_clip);
  c.predictor_dim = j.value("predictor_dim", d.predictor_dim);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
}

// Flat, named view of all model parameters. Section order and shapes are a
// pure function of ModelConfig; flatten -> unflatten is the identity.
template <typename R>
class ParamVector {
 public:
  struct Section {
    std::string name;
    Tensor<R> t;
  };

  ParamVector() = default;

  explicit ParamVector(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const std::int64_t in = cfg.input_dim();
    const std::int64_t cc = cfg.conv_channels;
    const std::int64_t md = cfg.model_dim;
    const std::int64_t pd = cfg.predictor_dim;
    const std::int64_t vb = cfg.vocab_size + 1;
    add("conv1.w", {3 * in, cc});
    add("conv1.b", {1, cc});
    add("conv2.w", {3 * cc, cc});
    add("conv2.b", {1, cc});
    add("proj.w", {cc, md});
    add("proj.b", {1, md});
    add("mask.vec", {1, md});
    for (std::int64_t b = 0; b < cfg.num_blocks; ++b) {
      std::string p = "blk" + std::to_string(b) + ".";
      for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) add(p + w, {md, md});
      for (const char* w : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) add(p + w, {1, md});
      add(p + "attn.rel", {cfg.num_heads, 2 * cfg.rel_clip + 1});
      add(p + "ln1.g", {1, md});
      add(p + "ln1.b", {1, md});
      add(p + "ff.w1", {md, cfg.ff_dim});
      add(p + "ff.b1", {1, cfg.ff_dim});
      add(p + "ff.w2", {cfg.ff_dim, md});
      add(p + "ff.b2", {1, md});
      add(p + "ln2.g", {1, md});
      add(p + "ln2.b", {1, md});
    }
    add("ssl_target.w", {md, md});
    add("ssl_target.b", {1, md});
    add("pred.emb", {vb, pd});
    for (const char* w : {"pred.wxz", "pred.whz"}) add(w, {pd, pd});
    add("pred.bz", {1, pd});
    for (const char* w : {"pred.wxr", "pred.whr"}) add(w, {pd, pd});
    add("pred.br", {1, pd});
    for (const char* w : {"pred.wxh", "pred.whh"}) add(w, {pd, pd});
    add("pred.bh", {1, pd});
    add("joint.enc.w", {md, md});
    add("joint.pred.w", {pd, md});
    add("joint.b", {1, md});
    add("joint.out.w", {md, vb});
    add("joint.out.b", {1, vb});
  }

  // Weight matrices: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and
  // relative-position biases start at zero, layer-norm gains at one.
  void init(Rng& rng) {
    for (auto& s : sections_) {
      if (s.name.find("ln1.g") != std::string::npos ||
          s.name.find("ln2.g") != std::string::npos) {
        for (std::int64_t i = 0; i < s.t.numel(); ++i) s.t[i] = R(1);
      } else if (s.t.rows() == 1 || s.name.find("attn.rel") != std::string::npos) {
        for (std::int64_t i = 0; i < s.t.numel(); ++i) s.t[i] = R(0);
      } else {
        R bound = R(1) / R(std::sqrt(double(s.t.rows())));
        for (std::int64_t i = 0; i < s.t.numel(); ++i)
          s.t[i] = R(rng.uniform(-double(bound), double(bound)));
      }
    }
    // A zero mask vector would make masked and padded content identical.
    auto& mv = section("mask.vec");
    R bound = R(1) / R(std::sqrt(double(cfg_.model_dim)));
    for (std::int64_t i = 0; i < mv.numel(); ++i)
      mv[i] = R(rng.uniform(-double(bound), double(bound)));
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t num_sections() const { return sections_.size(); }
  const Section& section_at(std::size_t i) const { return sections_[i]; }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("params: unknown section '" + name + "'");
    return it->second;
  }

  Tensor<R>& section(const std::string& name) { return sections_[index(name)].t; }
  const Tensor<R>& section(const std::string& name) const { return sections_[index(name)].t; }
  Tensor<R>& section(std::size_t i) { return sections_[i].t; }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& s : sections_) n += s.t.numel();
    return n;
  }

  std::vector<R> flatten() const {
    std::vector<R> out;
    out.reserve(static_cast<std::size_t>(total_size()));
    for (const auto& s : sections_)
      out.insert(out.end(), s.t.vec().begin(), s.t.vec().end());
    return out;
  }

  void unflatten(const std::vector<R>& flat) {
    if (static_cast<std::int64_t>(flat.size()) != total_size())
      throw InputError("params: flat size " + std::to_string(flat.size()) + " != " +
                       std::to_string(total_size()));
    std::size_t at = 0;
    for (auto& s : sections_) {
      std::copy(flat.begin() + at, flat.begin() + at + s.t.numel(), s.t.vec().begin());
      at += static_cast<std::size_t>(s.t.numel());
    }
  }

 private:
  void add(const std::string& name, std::vector<std::int64_t> shape) {
    index_[name] = sections_.size();
    sections_.push_back({name, Tensor<R>::zeros(std::move(shape))});
  }

  ModelConfig cfg_;
  std::vector<Section> sections_;
  std::map<std::string, std::size_t> index_;
};

// Tape handles for every parameter section, for building differentiable
// forward passes.
template <typename R>
struct ParamVars {
  using Var = typename Tape<R>::Var;
  const ParamVector<R>* params = nullptr;
  std::vector<Var> vars;

  static ParamVars inputs(Tape<R>& tape, const ParamVector<R>& p) {
    ParamVars pv;
    pv.params = &p;
    for (std::size_t i = 0; i < p.num_sections(); ++i)
      pv.vars.push_back(tape.input(p.section_at(i).t));
    return pv;
  }

  static ParamVars constants(Tape<R>& tape, const ParamVector<R>& p) {
    ParamVars pv;
    pv.params = &p;
    for (std::size_t i = 0; i < p.num_sections(); ++i)
      pv.vars.push_back(tape.constant(p.section_at(i).t));
    return pv;
  }

  Var operator()(const std::string& name) const { return vars[params->index(name)]; }
};

// Appends the one-hot language indicator to every frame. Pure function of the
// input; the original feature values are copied unchanged.
template <typename R>
Tensor<R> featurize(const Tensor<R>& frames, std::int64_t lang, const ModelConfig& cfg) {
  if (lang < 0 || lang >= cfg.num_languages)
    throw InputError("featurize: language " + std::to_string(lang) + " out of [0," +
                     std::to_string(cfg.num_languages) + ")");
  if (!cfg.use_lang_id) return frames;
  const std::int64_t t = frames.rows();
  const std::int64_t d = frames.cols();
  Tensor<R> out({t, d + cfg.num_languages});
  for (std::int64_t i = 0; i < t; ++i) {
    for (std::int64_t j = 0; j < d; ++j) out.at(i, j) = frames.at(i, j);
    out.at(i, d + lang) = R(1);
  }
  return out;
}

template <typename R>
class ModelGraph {
 public:
  using Var = typename Tape<R>::Var;

  ModelGraph(Tape<R>& tape, const ParamVars<R>& pv)
      : tape_(tape), p_(pv), cfg_(pv.params->config()) {}

  // Two stride-2 kernel-3 convolutions with ReLU, then a linear map to
  // model_dim. Output length is ceil(T/4).
  Var subsample(Var aug_frames) {
    Var x = conv_layer(aug_frames, "conv1");
    x = conv_layer(x, "conv2");
    return tape_.add_row(tape_.matmul(x, p_("proj.w")), p_("proj.b"));
  }

  // Transformer encoder; masked positions (if any) are replaced by the
  // learned mask vector before the first block.
  Var encode(Var latent, const std::vector<std::int64_t>* mask_positions) {
    Var x = latent;
    if (mask_positions && !mask_positions->empty())
      x = tape_.replace_rows(x, p_("mask.vec"), *mask_positions);
    const std::int64_t t = tape_.value(x).rows();
    for (std::int64_t b = 0; b < cfg_.num_blocks; ++b) {
      std::string pre = "blk" + std::to_string(b) + ".";
      Var attn = self_attention(x, pre, t);
      x = norm(tape_.add(x, attn), pre + "ln1");
      Var ff = feed_forward(x, pre);
      x = norm(tape_.add(x, ff), pre + "ln2");
    }
    return x;
  }

  // Predictor states for blank-start + labels: U+1 rows of predictor_dim.
  Var predictor(const std::vector<std::int64_t>& labels) {
    std::vector<std::int64_t> tokens;
    tokens.push_back(cfg_.blank());
    for (std::int64_t y : labels) {
      if (y < 0 || y >= cfg_.vocab_size)
        throw InputError("predictor: label " + std::to_string(y) + " out of vocabulary [0," +
                         std::to_string(cfg_.vocab_size) + ")");
      tokens.push_back(y);
    }
    Var h = tape_.constant(Tensor<R>::zeros({1, cfg_.predictor_dim}));
    std::vector<Var> states;
    for (std::int64_t tok : tokens) {
      Var x = tape_.select_row(p_("pred.emb"), tok);
      h = gru_step(x, h);
      states.push_back(h);
    }
    return tape_.concat_rows(states);
  }

  // Joint network over all (t, u) pairs; returns logits with row index
  // t*(U+1)+u and one column per output symbol (blank last).
  Var joint(Var enc, Var pred) {
    Var a = tape_.matmul(enc, p_("joint.enc.w"));
    Var b = tape_.matmul(pred, p_("joint.pred.w"));
    const std::int64_t tprime = tape_.value(a).rows();
    const std::int64_t nu = tape_.value(b).rows();
    std::vector<Var> rows;
    rows.reserve(static_cast<std::size_t>(tprime * nu));
    for (std::int64_t t = 0; t < tprime; ++t) {
      Var at = tape_.select_row(a, t);
      for (std::int64_t u = 0; u < nu; ++u)
        rows.push_back(tape_.add(at, tape_.select_row(b, u)));
    }
    Var h = tape_.tanh(tape_.add_row(tape_.concat_rows(rows), p_("joint.b")));
    return tape_.add_row(tape_.matmul(h, p_("joint.out.w")), p_("joint.out.b"));
  }

  Var transducer_logits(Var enc, const std::vector<std::int64_t>& labels) {
    return joint(enc, predictor(labels));
  }

  // SSL target vectors: linear map of the (pre-mask) latents.
  Var ssl_targets(Var latent) {
    return tape_.add_row(tape_.matmul(latent, p_("ssl_target.w")), p_("ssl_target.b"));
  }

 private:
  Var gru_step(Var x, Var h) {
    auto lin = [&](const char* wx, const char* wh, const char* b, Var hin) {
      return tape_.add(tape_.add(tape_.matmul(x, p_(wx)), tape_.matmul(hin, p_(wh))), p_(b));
    };
    Var z = tape_.sigmoid(lin("pred.wxz", "pred.whz", "pred.bz", h));
    Var r = tape_.sigmoid(lin("pred.wxr", "pred.whr", "pred.br", h));
    Var hc = tape_.tanh(lin("pred.wxh", "pred.whh", "pred.bh", tape_.mul(r, h)));
    Var one_minus_z = tape_.add_const(tape_.neg(z), R(1));
    return tape_.add(tape_.mul(z, h), tape_.mul(one_minus_z, hc));
  }

  Var conv_layer(Var x, const std::string& name) {
    Var u = tape_.unfold_time(x, 3, 2);
    return tape_.relu(tape_.add_row(tape_.matmul(u, p_(name + ".w")), p_(name + ".b")));
  }

  Var norm(Var x, const std::string& name) {
    return tape_.add_row(tape_.mul_row(tape_.layer_norm_rows(x), p_(name + ".g")),
                         p_(name + ".b"));
  }

  Var self_attention(Var x, const std::string& pre, std::int64_t t) {
    Var q = tape_.add_row(tape_.matmul(x, p_(pre + "attn.wq")), p_(pre + "attn.bq"));
    Var k = tape_.add_row(tape_.matmul(x, p_(pre + "attn.wk")), p_(pre + "attn.bk"));
    Var v = tape_.add_row(tape_.matmul(x, p_(pre + "attn.wv")), p_(pre + "attn.bv"));
    const std::int64_t dh = cfg_.model_dim / cfg_.num_heads;
    std::vector<Var> heads;
    for (std::int64_t h = 0; h < cfg_.num_heads; ++h) {
      Var qh = tape_.slice_cols(q, h * dh, (h + 1) * dh);
      Var kh = tape_.slice_cols(k, h * dh, (h + 1) * dh);
      Var vh = tape_.slice_cols(v, h * dh, (h + 1) * dh);
      Var scores = tape_.scale(tape_.matmul(qh, tape_.transpose(kh)),
                               R(1) / R(std::sqrt(double(dh))));
      Var bias = tape_.rel_bias(tape_.select_row(p_(pre + "attn.rel"), h), t, cfg_.rel_clip);
      Var probs = tape_.windowed_softmax_rows(tape_.add(scores, bias), cfg_.rel_clip);
      heads.push_back(tape_.matmul(probs, vh));
    }
    Var cat = cfg_.num_heads == 1 ? heads[0] : tape_.concat_cols(heads);
    return tape_.add_row(tape_.matmul(cat, p_(pre + "attn.wo")), p_(pre + "attn.bo"));
  }

  Var feed_forward(Var x, const std::string& pre) {
    Var h = tape_.relu(tape_.add_row(tape_.matmul(x, p_(pre + "ff.w1")), p_(pre + "ff.b1")));
    return tape_.add_row(tape_.matmul(h, p_(pre + "ff.w2")), p_(pre + "ff.b2"));
  }

  Tape<R>& tape_;
  const ParamVars<R>& p_;
  const ModelConfig& cfg_;
};

// Plain (non-tape) predictor step and joint evaluation for greedy decoding.
template <typename R>
struct PlainPredictor {
  const ParamVector<R>& p;
  Tensor<R> h;

  explicit PlainPredictor(const ParamVector<R>& params)
      : p(params), h(Tensor<R>::zeros({1, params.config().predictor_dim})) {
    consume(params.config().blank());
  }

  void consume(std::int64_t token) {
    const Tensor<R>& emb = p.section("pred.emb");
    Tensor<R> x({1, emb.cols()});
    for (std::int64_t j = 0; j < emb.cols(); ++j) x[j] = emb.at(token, j);
    auto gate = [&](const char* wx, const char* wh, const char* b, const Tensor<R>& hin) {
      Tensor<R> g = matmul(x, p.section(wx));
      Tensor<R> g2 = matmul(hin, p.section(wh));
      const Tensor<R>& bias = p.section(b);
      for (std::int64_t j = 0; j < g.numel(); ++j) g[j] += g2[j] + bias[j];
      return g;
    };
    Tensor<R> z = gate("pred.wxz", "pred.whz", "pred.bz", h);
    Tensor<R> r = gate("pred.wxr", "pred.whr", "pred.br", h);
    for (std::int64_t j = 0; j < z.numel(); ++j) {
      z[j] = R(1) / (R(1) + std::exp(-z[j]));
      r[j] = R(1) / (R(1) + std::exp(-r[j]));
    }
    Tensor<R> rh = h;
    for (std::int64_t j = 0; j < rh.numel(); ++j) rh[j] *= r[j];
    Tensor<R> hc = gate("pred.wxh", "pred.whh", "pred.bh", rh);
    for (std::int64_t j = 0; j < hc.numel(); ++j) hc[j] = std::tanh(hc[j]);
    for (std::int64_t j = 0; j < h.numel(); ++j) h[j] = z[j] * h[j] + (R(1) - z[j]) * hc[j];
  }

  // Logits for one encoder frame against the current predictor state.
  Tensor<R> joint_logits(const Tensor<R>& enc_row) const {
    Tensor<R> a = matmul(enc_row, p.section("joint.enc.w"));
    Tensor<R> b = matmul(h, p.section("joint.pred.w"));
    const Tensor<R>& bias = p.section("joint.b");
    for (std::int64_t j = 0; j < a.numel(); ++j) a[j] = std::tanh(a[j] + b[j] + bias[j]);
    Tensor<R> logits = matmul(a, p.section("joint.out.w"));
    const Tensor<R>& ob = p.section("joint.out.b");
    for (std::int64_t j = 0; j < logits.numel(); ++j) logits[j] += ob[j];
    return logits;
  }
};

}  // namespace gm
