// Reverse-mode autodiff on an append-only tape of dense tensor ops.
//
// A tape is single-threaded; distinct tapes over distinct parameter copies may
// run concurrently. Node ids strictly increase during the forward pass and
// backward visits them in strictly decreasing order, so gradient accumulation
// order is fixed and runs are bit-reproducible.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gm/common.hpp"
#include "gm/kernels.hpp"
#include "gm/tensor.hpp"

namespace gm {

// Log-zero sentinel. Only the transducer lattice is allowed to feed it into
// logsumexp; generic ops never produce it.
inline constexpr double kLogZero = -1e30;

template <typename R>
class Tape {
 public:
  using T = Tensor<R>;

  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Var input(T v) {
    Var x = push(Op::Input, {}, std::move(v));
    node(x).requires_grad = true;
    return x;
  }

  Var constant(T v) { return push(Op::Input, {}, std::move(v)); }

  Var add(Var a, Var b) {
    require_same_shape("add", a, b);
    T out = val(a);
    const T& vb = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    return push(Op::Add, {a.id, b.id}, std::move(out));
  }

  Var sub(Var a, Var b) {
    require_same_shape("sub", a, b);
    T out = val(a);
    const T& vb = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    return push(Op::Sub, {a.id, b.id}, std::move(out));
  }

  Var mul(Var a, Var b) {
    require_same_shape("mul", a, b);
    T out = val(a);
    const T& vb = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    return push(Op::Mul, {a.id, b.id}, std::move(out));
  }

  Var div(Var a, Var b) {
    require_same_shape("div", a, b);
    T out = val(a);
    const T& vb = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= vb[i];
    return push(Op::Div, {a.id, b.id}, std::move(out));
  }

  // matrix (m x n) + row vector (1 x n), broadcast over rows
  Var add_row(Var a, Var r) {
    const T& va = val(a);
    const T& vr = val(r);
    if (vr.rows() != 1 || vr.cols() != va.cols()) {
      throw InputError("add_row: " + va.shape_str() + " + " + vr.shape_str());
    }
    T out = va;
    for (std::int64_t i = 0; i < va.rows(); ++i)
      for (std::int64_t j = 0; j < va.cols(); ++j) out.at(i, j) += vr[j];
    return push(Op::AddRow, {a.id, r.id}, std::move(out));
  }

  Var mul_row(Var a, Var r) {
    const T& va = val(a);
    const T& vr = val(r);
    if (vr.rows() != 1 || vr.cols() != va.cols()) {
      throw InputError("mul_row: " + va.shape_str() + " * " + vr.shape_str());
    }
    T out = va;
    for (std::int64_t i = 0; i < va.rows(); ++i)
      for (std::int64_t j = 0; j < va.cols(); ++j) out.at(i, j) *= vr[j];
    return push(Op::MulRow, {a.id, r.id}, std::move(out));
  }

  Var neg(Var a) {
    T out = val(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = -out[i];
    return push(Op::Neg, {a.id}, std::move(out));
  }

  Var scale(Var a, R c) {
    T out = val(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
    return push(Op::Scale, {a.id}, std::move(out), true, c);
  }

  Var add_const(Var a, R c) {
    T out = val(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += c;
    return push(Op::AddConst, {a.id}, std::move(out), true, c);
  }

  Var matmul(Var a, Var b) {
    return push(Op::MatMul, {a.id, b.id}, gm::matmul(val(a), val(b)));
  }

  Var transpose(Var a) {
    const T& va = val(a);
    T out({va.cols(), va.rows()});
    for (std::int64_t i = 0; i < va.rows(); ++i)
      for (std::int64_t j = 0; j < va.cols(); ++j) out.at(j, i) = va.at(i, j);
    return push(Op::Transpose, {a.id}, std::move(out));
  }

  Var tanh(Var a) { return unary(Op::Tanh, a, [](R x) { return std::tanh(x); }); }
  Var sigmoid(Var a) {
    return unary(Op::Sigmoid, a, [](R x) { return R(1) / (R(1) + std::exp(-x)); });
  }
  Var relu(Var a) { return unary(Op::Relu, a, [](R x) { return x > R(0) ? x : R(0); }); }
  Var exp(Var a) { return unary(Op::Exp, a, [](R x) { return std::exp(x); }); }
  Var log(Var a) { return unary(Op::Log, a, [](R x) { return std::log(x); }); }
  Var sqrt(Var a) { return unary(Op::Sqrt, a, [](R x) { return std::sqrt(x); }); }
  Var square(Var a) { return unary(Op::Square, a, [](R x) { return x * x; }); }

  Var sum(Var a) {
    R s = 0;
    const T& va = val(a);
    for (std::int64_t i = 0; i < va.numel(); ++i) s += va[i];
    return push(Op::SumAll, {a.id}, T::scalar(s));
  }

  Var mean(Var a) {
    R s = 0;
    const T& va = val(a);
    for (std::int64_t i = 0; i < va.numel(); ++i) s += va[i];
    return push(Op::MeanAll, {a.id}, T::scalar(s / R(va.numel())));
  }

  Var select_row(Var a, std::int64_t r) {
    const T& va = val(a);
    if (r < 0 || r >= va.rows()) {
      throw InputError("select_row: row " + std::to_string(r) + " of " + va.shape_str());
    }
    T out({1, va.cols()});
    for (std::int64_t j = 0; j < va.cols(); ++j) out[j] = va.at(r, j);
    Var v = push(Op::SelectRow, {a.id}, std::move(out));
    node(v).i0 = r;
    return v;
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw InputError("concat_rows: empty list");
    std::int64_t c = val(parts[0]).cols();
    std::int64_t r = 0;
    for (Var p : parts) {
      if (val(p).cols() != c) throw InputError("concat_rows: column mismatch");
      r += val(p).rows();
    }
    T out({r, c});
    std::int64_t at = 0;
    for (Var p : parts) {
      const T& vp = val(p);
      std::copy(vp.data(), vp.data() + vp.numel(), out.data() + at * c);
      at += vp.rows();
    }
    std::vector<int> ins;
    for (Var p : parts) ins.push_back(p.id);
    return push(Op::ConcatRows, std::move(ins), std::move(out));
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw InputError("concat_cols: empty list");
    std::int64_t r = val(parts[0]).rows();
    std::int64_t c = 0;
    for (Var p : parts) {
      if (val(p).rows() != r) throw InputError("concat_cols: row mismatch");
      c += val(p).cols();
    }
    T out({r, c});
    std::int64_t at = 0;
    for (Var p : parts) {
      const T& vp = val(p);
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < vp.cols(); ++j) out.at(i, at + j) = vp.at(i, j);
      at += vp.cols();
    }
    std::vector<int> ins;
    for (Var p : parts) ins.push_back(p.id);
    return push(Op::ConcatCols, std::move(ins), std::move(out));
  }

  Var slice_cols(Var a, std::int64_t c0, std::int64_t c1) {
    const T& va = val(a);
    if (c0 < 0 || c1 <= c0 || c1 > va.cols()) {
      throw InputError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                       ") of " + va.shape_str());
    }
    T out({va.rows(), c1 - c0});
    for (std::int64_t i = 0; i < va.rows(); ++i)
      for (std::int64_t j = c0; j < c1; ++j) out.at(i, j - c0) = va.at(i, j);
    Var v = push(Op::SliceCols, {a.id}, std::move(out));
    node(v).i0 = c0;
    node(v).i1 = c1;
    return v;
  }

  Var softmax_rows(Var a) { return softmax_impl(a, -1, Op::SoftmaxRows); }

  // Softmax over the band |j - i| <= clip; entries outside the band are zero.
  Var windowed_softmax_rows(Var a, std::int64_t clip) {
    const T& va = val(a);
    if (va.rows() != va.cols()) {
      throw InputError("windowed_softmax_rows: non-square " + va.shape_str());
    }
    return softmax_impl(a, clip, Op::WindowedSoftmaxRows);
  }

  Var log_softmax_rows(Var a) {
    const T& va = val(a);
    T out = va;
    for (std::int64_t i = 0; i < va.rows(); ++i) {
      R m = va.at(i, 0);
      for (std::int64_t j = 1; j < va.cols(); ++j) m = std::max(m, va.at(i, j));
      R s = 0;
      for (std::int64_t j = 0; j < va.cols(); ++j) s += std::exp(va.at(i, j) - m);
      R lse = m + std::log(s);
      for (std::int64_t j = 0; j < va.cols(); ++j) out.at(i, j) = va.at(i, j) - lse;
    }
    return push(Op::LogSoftmaxRows, {a.id}, std::move(out));
  }

  Var layer_norm_rows(Var a) {
    const T& va = val(a);
    T out = va;
    for (std::int64_t i = 0; i < va.rows(); ++i) {
      R mu = 0, var = 0;
      for (std::int64_t j = 0; j < va.cols(); ++j) mu += va.at(i, j);
      mu /= R(va.cols());
      for (std::int64_t j = 0; j < va.cols(); ++j) {
        R d = va.at(i, j) - mu;
        var += d * d;
      }
      var /= R(va.cols());
      R inv = R(1) / std::sqrt(var + R(kLayerNormEps));
      for (std::int64_t j = 0; j < va.cols(); ++j) out.at(i, j) = (va.at(i, j) - mu) * inv;
    }
    return push(Op::LayerNormRows, {a.id}, std::move(out));
  }

  Var pick(Var a, std::int64_t flat) {
    const T& va = val(a);
    if (flat < 0 || flat >= va.numel()) {
      throw InputError("pick: index " + std::to_string(flat) + " of " + va.shape_str());
    }
    Var v = push(Op::Pick, {a.id}, T::scalar(va[flat]));
    node(v).i0 = flat;
    return v;
  }

  Var pick(Var a, std::int64_t r, std::int64_t c) { return pick(a, r * val(a).cols() + c); }

  // logsumexp over scalar inputs; kLogZero inputs contribute exactly zero mass.
  Var logsumexp(const std::vector<Var>& xs) {
    if (xs.empty()) throw InputError("logsumexp: empty list");
    R m = R(kLogZero);
    for (Var x : xs) {
      if (!val(x).is_scalar()) throw InputError("logsumexp: non-scalar input");
      m = std::max(m, val(x).scalar_value());
    }
    R out;
    if (double(m) <= kLogZero * 0.5) {
      out = R(kLogZero);
    } else {
      R s = 0;
      for (Var x : xs) {
        R v = val(x).scalar_value();
        if (double(v) > kLogZero * 0.5) s += std::exp(v - m);
      }
      out = m + std::log(s);
    }
    std::vector<int> ins;
    for (Var x : xs) ins.push_back(x.id);
    return push(Op::LogSumExp, std::move(ins), T::scalar(out), /*check_finite=*/false);
  }

  // 1-D temporal unfold for stride-s kernel-k convolution with zero padding
  // of (k-1)/2 on each side: out rows = ceil(T/s), out cols = k * C.
  Var unfold_time(Var a, std::int64_t kernel, std::int64_t stride) {
    const T& va = val(a);
    const std::int64_t pad = (kernel - 1) / 2;
    const std::int64_t rows = (va.rows() + stride - 1) / stride;
    T out({rows, kernel * va.cols()});
    for (std::int64_t t = 0; t < rows; ++t) {
      for (std::int64_t j = 0; j < kernel; ++j) {
        std::int64_t src = t * stride - pad + j;
        if (src < 0 || src >= va.rows()) continue;
        for (std::int64_t c = 0; c < va.cols(); ++c)
          out.at(t, j * va.cols() + c) = va.at(src, c);
      }
    }
    Var v = push(Op::UnfoldTime, {a.id}, std::move(out));
    node(v).i0 = kernel;
    node(v).i1 = stride;
    return v;
  }

  // Replace the given rows of x by the (learned) row vector v.
  Var replace_rows(Var x, Var v, const std::vector<std::int64_t>& rows) {
    const T& vx = val(x);
    const T& vv = val(v);
    if (vv.rows() != 1 || vv.cols() != vx.cols()) {
      throw InputError("replace_rows: mask vector " + vv.shape_str() + " vs " + vx.shape_str());
    }
    T out = vx;
    for (std::int64_t r : rows) {
      if (r < 0 || r >= vx.rows()) {
        throw InputError("replace_rows: row " + std::to_string(r) + " of " + vx.shape_str());
      }
      for (std::int64_t j = 0; j < vx.cols(); ++j) out.at(r, j) = vv[j];
    }
    Var nv = push(Op::ReplaceRows, {x.id, v.id}, std::move(out));
    node(nv).idx = rows;
    return nv;
  }

  // Expand a 1 x (2*clip+1) offset-bias vector to a T x T additive bias:
  // out[i][j] = b[clip + (j - i)] inside the band, 0 outside (the windowed
  // softmax never looks outside the band).
  Var rel_bias(Var b, std::int64_t t, std::int64_t clip) {
    const T& vb = val(b);
    if (vb.rows() != 1 || vb.cols() != 2 * clip + 1) {
      throw InputError("rel_bias: expected 1x" + std::to_string(2 * clip + 1) + ", got " +
                       vb.shape_str());
    }
    T out({t, t});
    for (std::int64_t i = 0; i < t; ++i)
      for (std::int64_t j = std::max<std::int64_t>(0, i - clip);
           j <= std::min<std::int64_t>(t - 1, i + clip); ++j)
        out.at(i, j) = vb[clip + (j - i)];
    Var v = push(Op::RelBias, {b.id}, std::move(out));
    node(v).i0 = clip;
    return v;
  }

  const T& value(Var v) const { return nodes_[check_id(v)].val; }

  int size() const { return static_cast<int>(nodes_.size()); }

  // Reverse pass from a scalar root. May be called once per tape.
  void backward(Var root) {
    if (consumed_) throw UsageError("backward: tape already consumed");
    consumed_ = true;
    if (!value(root).is_scalar()) throw UsageError("backward: root is not scalar");
    grads_.assign(nodes_.size(), T());
    seeded_.assign(nodes_.size(), false);
    acc(root.id, T::scalar(R(1)));
    for (int id = root.id; id >= 0; --id) {
      if (!seeded_[id] || !nodes_[id].requires_grad) continue;
      step_backward(id);
    }
  }

  bool has_grad(Var v) const {
    return consumed_ && seeded_[check_id(v)] && nodes_[v.id].requires_grad;
  }

  // Gradient of the backward root w.r.t. this node; zeros if it never
  // received a contribution.
  T grad(Var v) const {
    if (!consumed_) throw UsageError("grad: backward not yet run");
    int id = check_id(v);
    if (!seeded_[id]) return T::zeros(nodes_[id].val.shape());
    return grads_[id];
  }

 private:
  static constexpr double kLayerNormEps = 1e-5;

  enum class Op {
    Input, Add, Sub, Mul, Div, AddRow, MulRow, Neg, Scale, AddConst,
    MatMul, Transpose, Tanh, Sigmoid, Relu, Exp, Log, Sqrt, Square,
    SumAll, MeanAll, SelectRow, ConcatRows, ConcatCols, SliceCols,
    SoftmaxRows, WindowedSoftmaxRows, LogSoftmaxRows, LayerNormRows,
    Pick, LogSumExp, UnfoldTime, ReplaceRows, RelBias
  };

  static const char* op_name(Op op) {
    switch (op) {
      case Op::Input: return "input";
      case Op::Add: return "add";
      case Op::Sub: return "sub";
      case Op::Mul: return "mul";
      case Op::Div: return "div";
      case Op::AddRow: return "add_row";
      case Op::MulRow: return "mul_row";
      case Op::Neg: return "neg";
      case Op::Scale: return "scale";
      case Op::AddConst: return "add_const";
      case Op::MatMul: return "matmul";
      case Op::Transpose: return "transpose";
      case Op::Tanh: return "tanh";
      case Op::Sigmoid: return "sigmoid";
      case Op::Relu: return "relu";
      case Op::Exp: return "exp";
      case Op::Log: return "log";
      case Op::Sqrt: return "sqrt";
      case Op::Square: return "square";
      case Op::SumAll: return "sum";
      case Op::MeanAll: return "mean";
      case Op::SelectRow: return "select_row";
      case Op::ConcatRows: return "concat_rows";
      case Op::ConcatCols: return "concat_cols";
      case Op::SliceCols: return "slice_cols";
      case Op::SoftmaxRows: return "softmax_rows";
      case Op::WindowedSoftmaxRows: return "windowed_softmax_rows";
      case Op::LogSoftmaxRows: return "log_softmax_rows";
      case Op::LayerNormRows: return "layer_norm_rows";
      case Op::Pick: return "pick";
      case Op::LogSumExp: return "logsumexp";
      case Op::UnfoldTime: return "unfold_time";
      case Op::ReplaceRows: return "replace_rows";
      case Op::RelBias: return "rel_bias";
    }
    return "?";
  }

  struct Node {
    Op op;
    std::vector<int> ins;
    T val;
    bool requires_grad = false;
    std::int64_t i0 = 0, i1 = 0;
    R c = 0;
    std::vector<std::int64_t> idx;
  };

  int check_id(Var v) const {
    if (v.id < 0 || v.id >= size()) throw UsageError("tape: invalid var id");
    return v.id;
  }

  const T& val(Var v) const { return nodes_[check_id(v)].val; }
  Node& node(Var v) { return nodes_[check_id(v)]; }

  void require_same_shape(const char* what, Var a, Var b) const {
    if (!val(a).same_shape(val(b))) {
      throw InputError(std::string(what) + ": shape mismatch " + val(a).shape_str() +
                       " vs " + val(b).shape_str());
    }
  }

  Var push(Op op, std::vector<int> ins, T out, bool check_finite = true, R c = 0) {
    if (consumed_) throw UsageError("tape: append after backward");
    bool rg = false;
    for (int i : ins) rg = rg || nodes_[i].requires_grad;
    Node n;
    n.op = op;
    n.ins = std::move(ins);
    n.val = std::move(out);
    n.requires_grad = rg;
    n.c = c;
    int id = size();
    if (check_finite && !n.val.all_finite()) {
      throw NumericError(std::string("non-finite value from op '") + op_name(op) +
                         "' at node " + std::to_string(id));
    }
    nodes_.push_back(std::move(n));
    return Var{id};
  }

  template <typename F>
  Var unary(Op op, Var a, F f) {
    T out = val(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = f(out[i]);
    return push(op, {a.id}, std::move(out));
  }

  Var softmax_impl(Var a, std::int64_t clip, Op op) {
    const T& va = val(a);
    T out({va.rows(), va.cols()});
    for (std::int64_t i = 0; i < va.rows(); ++i) {
      auto [lo, hi] = band(i, va.cols(), clip);
      R m = va.at(i, lo);
      for (std::int64_t j = lo; j <= hi; ++j) m = std::max(m, va.at(i, j));
      R s = 0;
      for (std::int64_t j = lo; j <= hi; ++j) s += std::exp(va.at(i, j) - m);
      for (std::int64_t j = lo; j <= hi; ++j) out.at(i, j) = std::exp(va.at(i, j) - m) / s;
    }
    Var v = push(op, {a.id}, std::move(out));
    node(v).i0 = clip;
    return v;
  }

  static std::pair<std::int64_t, std::int64_t> band(std::int64_t i, std::int64_t n,
                                                    std::int64_t clip) {
    if (clip < 0) return {0, n - 1};
    return {std::max<std::int64_t>(0, i - clip), std::min<std::int64_t>(n - 1, i + clip)};
  }

  void acc(int id, const T& g) {
    if (!nodes_[id].requires_grad) return;
    if (!seeded_[id]) {
      grads_[id] = g;
      seeded_[id] = true;
    } else {
      T& dst = grads_[id];
      for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] += g[i];
    }
  }

  // Accumulate into a sub-view without materializing a temporary.
  template <typename F>
  void acc_with(int id, const std::vector<std::int64_t>& shape, F fill) {
    if (!nodes_[id].requires_grad) return;
    if (!seeded_[id]) {
      grads_[id] = T::zeros(shape);
      seeded_[id] = true;
    }
    fill(grads_[id]);
  }

  void step_backward(int id) {
    Node& n = nodes_[id];
    const T& g = grads_[id];
    auto in = [&](int k) -> const T& { return nodes_[n.ins[k]].val; };
    auto shape_of = [&](int k) { return nodes_[n.ins[k]].val.shape(); };
    switch (n.op) {
      case Op::Input:
        break;
      case Op::Add:
        acc(n.ins[0], g);
        acc(n.ins[1], g);
        break;
      case Op::Sub: {
        acc(n.ins[0], g);
        acc_with(n.ins[1], shape_of(1), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i) d[i] -= g[i];
        });
        break;
      }
      case Op::Mul: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] * in(1)[i];
        });
        acc_with(n.ins[1], shape_of(1), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] * in(0)[i];
        });
        break;
      }
      case Op::Div: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] / in(1)[i];
        });
        acc_with(n.ins[1], shape_of(1), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i)
            d[i] -= g[i] * in(0)[i] / (in(1)[i] * in(1)[i]);
        });
        break;
      }
      case Op::AddRow: {
        acc(n.ins[0], g);
        acc_with(n.ins[1], shape_of(1), [&](T& d) {
          for (std::int64_t i = 0; i < g.rows(); ++i)
            for (std::int64_t j = 0; j < g.cols(); ++j) d[j] += g.at(i, j);
        });
        break;
      }
      case Op::MulRow: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < g.rows(); ++i)
            for (std::int64_t j = 0; j < g.cols(); ++j) d.at(i, j) += g.at(i, j) * in(1)[j];
        });
        acc_with(n.ins[1], shape_of(1), [&](T& d) {
          for (std::int64_t i = 0; i < g.rows(); ++i)
            for (std::int64_t j = 0; j < g.cols(); ++j) d[j] += g.at(i, j) * in(0).at(i, j);
        });
        break;
      }
      case Op::Neg: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i) d[i] -= g[i];
        });
        break;
      }
      case Op::Scale: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i) d[i] += n.c * g[i];
        });
        break;
      }
      case Op::AddConst:
        acc(n.ins[0], g);
        break;
      case Op::MatMul: {
        const T& a = in(0);
        const T& b = in(1);
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          // dA += g * B^T
          for (std::int64_t i = 0; i < a.rows(); ++i)
            for (std::int64_t p = 0; p < a.cols(); ++p) {
              R s = 0;
              for (std::int64_t j = 0; j < b.cols(); ++j) s += g.at(i, j) * b.at(p, j);
              d.at(i, p) += s;
            }
        });
        acc_with(n.ins[1], shape_of(1), [&](T& d) {
          // dB += A^T * g
          for (std::int64_t p = 0; p < b.rows(); ++p)
            for (std::int64_t j = 0; j < b.cols(); ++j) {
              R s = 0;
              for (std::int64_t i = 0; i < a.rows(); ++i) s += a.at(i, p) * g.at(i, j);
              d.at(p, j) += s;
            }
        });
        break;
      }
      case Op::Transpose: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.rows(); ++i)
            for (std::int64_t j = 0; j < d.cols(); ++j) d.at(i, j) += g.at(j, i);
        });
        break;
      }
      case Op::Tanh: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i)
            d[i] += g[i] * (R(1) - n.val[i] * n.val[i]);
        });
        break;
      }
      case Op::Sigmoid: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i)
            d[i] += g[i] * n.val[i] * (R(1) - n.val[i]);
        });
        break;
      }
      case Op::Relu: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i)
            d[i] += in(0)[i] > R(0) ? g[i] : R(0);
        });
        break;
      }
      case Op::Exp: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] * n.val[i];
        });
        break;
      }
      case Op::Log: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] / in(0)[i];
        });
        break;
      }
      case Op::Sqrt: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i) d[i] += g[i] / (R(2) * n.val[i]);
        });
        break;
      }
      case Op::Square: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i) d[i] += R(2) * in(0)[i] * g[i];
        });
        break;
      }
      case Op::SumAll: {
        R gs = g.scalar_value();
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i) d[i] += gs;
        });
        break;
      }
      case Op::MeanAll: {
        R gs = g.scalar_value() / R(in(0).numel());
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < d.numel(); ++i) d[i] += gs;
        });
        break;
      }
      case Op::SelectRow: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t j = 0; j < g.cols(); ++j) d.at(n.i0, j) += g[j];
        });
        break;
      }
      case Op::ConcatRows: {
        std::int64_t at = 0;
        for (std::size_t k = 0; k < n.ins.size(); ++k) {
          std::int64_t r = nodes_[n.ins[k]].val.rows();
          std::int64_t start = at;
          acc_with(n.ins[k], shape_of(static_cast<int>(k)), [&](T& d) {
            for (std::int64_t i = 0; i < r; ++i)
              for (std::int64_t j = 0; j < g.cols(); ++j) d.at(i, j) += g.at(start + i, j);
          });
          at += r;
        }
        break;
      }
      case Op::ConcatCols: {
        std::int64_t at = 0;
        for (std::size_t k = 0; k < n.ins.size(); ++k) {
          std::int64_t c = nodes_[n.ins[k]].val.cols();
          std::int64_t start = at;
          acc_with(n.ins[k], shape_of(static_cast<int>(k)), [&](T& d) {
            for (std::int64_t i = 0; i < g.rows(); ++i)
              for (std::int64_t j = 0; j < c; ++j) d.at(i, j) += g.at(i, start + j);
          });
          at += c;
        }
        break;
      }
      case Op::SliceCols: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < g.rows(); ++i)
            for (std::int64_t j = 0; j < g.cols(); ++j) d.at(i, n.i0 + j) += g.at(i, j);
        });
        break;
      }
      case Op::SoftmaxRows:
      case Op::WindowedSoftmaxRows: {
        std::int64_t clip = n.op == Op::SoftmaxRows ? -1 : n.i0;
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < g.rows(); ++i) {
            auto [lo, hi] = band(i, g.cols(), clip);
            R dot = 0;
            for (std::int64_t j = lo; j <= hi; ++j) dot += g.at(i, j) * n.val.at(i, j);
            for (std::int64_t j = lo; j <= hi; ++j)
              d.at(i, j) += n.val.at(i, j) * (g.at(i, j) - dot);
          }
        });
        break;
      }
      case Op::LogSoftmaxRows: {
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < g.rows(); ++i) {
            R gsum = 0;
            for (std::int64_t j = 0; j < g.cols(); ++j) gsum += g.at(i, j);
            for (std::int64_t j = 0; j < g.cols(); ++j)
              d.at(i, j) += g.at(i, j) - std::exp(n.val.at(i, j)) * gsum;
          }
        });
        break;
      }
      case Op::LayerNormRows: {
        const T& x = in(0);
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          const std::int64_t c = x.cols();
          for (std::int64_t i = 0; i < x.rows(); ++i) {
            R mu = 0, var = 0;
            for (std::int64_t j = 0; j < c; ++j) mu += x.at(i, j);
            mu /= R(c);
            for (std::int64_t j = 0; j < c; ++j) {
              R dv = x.at(i, j) - mu;
              var += dv * dv;
            }
            var /= R(c);
            R inv = R(1) / std::sqrt(var + R(kLayerNormEps));
            R gmean = 0, gymean = 0;
            for (std::int64_t j = 0; j < c; ++j) {
              gmean += g.at(i, j);
              gymean += g.at(i, j) * n.val.at(i, j);
            }
            gmean /= R(c);
            gymean /= R(c);
            for (std::int64_t j = 0; j < c; ++j)
              d.at(i, j) += inv * (g.at(i, j) - gmean - n.val.at(i, j) * gymean);
          }
        });
        break;
      }
      case Op::Pick: {
        R gs = g.scalar_value();
        acc_with(n.ins[0], shape_of(0), [&](T& d) { d[n.i0] += gs; });
        break;
      }
      case Op::LogSumExp: {
        R y = n.val.scalar_value();
        R gs = g.scalar_value();
        if (double(y) <= kLogZero * 0.5) break;
        for (std::size_t k = 0; k < n.ins.size(); ++k) {
          R x = nodes_[n.ins[k]].val.scalar_value();
          if (double(x) <= kLogZero * 0.5) continue;
          R w = std::exp(x - y);
          acc_with(n.ins[k], shape_of(static_cast<int>(k)), [&](T& d) { d[0] += gs * w; });
        }
        break;
      }
      case Op::UnfoldTime: {
        const std::int64_t kernel = n.i0, stride = n.i1, pad = (kernel - 1) / 2;
        const T& x = in(0);
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t t = 0; t < g.rows(); ++t)
            for (std::int64_t j = 0; j < kernel; ++j) {
              std::int64_t src = t * stride - pad + j;
              if (src < 0 || src >= x.rows()) continue;
              for (std::int64_t c = 0; c < x.cols(); ++c)
                d.at(src, c) += g.at(t, j * x.cols() + c);
            }
        });
        break;
      }
      case Op::ReplaceRows: {
        std::vector<char> masked(static_cast<std::size_t>(in(0).rows()), 0);
        for (std::int64_t r : n.idx) masked[static_cast<std::size_t>(r)] = 1;
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < g.rows(); ++i) {
            if (masked[static_cast<std::size_t>(i)]) continue;
            for (std::int64_t j = 0; j < g.cols(); ++j) d.at(i, j) += g.at(i, j);
          }
        });
        acc_with(n.ins[1], shape_of(1), [&](T& d) {
          for (std::int64_t i = 0; i < g.rows(); ++i) {
            if (!masked[static_cast<std::size_t>(i)]) continue;
            for (std::int64_t j = 0; j < g.cols(); ++j) d[j] += g.at(i, j);
          }
        });
        break;
      }
      case Op::RelBias: {
        const std::int64_t clip = n.i0;
        acc_with(n.ins[0], shape_of(0), [&](T& d) {
          for (std::int64_t i = 0; i < g.rows(); ++i) {
            auto [lo, hi] = band(i, g.cols(), clip);
            for (std::int64_t j = lo; j <= hi; ++j) d[clip + (j - i)] += g.at(i, j);
          }
        });
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<T> grads_;
  std::vector<char> seeded_;
  bool consumed_ = false;
};

// Max over coordinates of |analytic - central difference| / max(1, |cd|).
// The builder must register every tensor in `params` (in order, via
// tape.input) and return the scalar loss.
template <typename R>
double grad_check(
    const std::function<typename Tape<R>::Var(Tape<R>&,
                                              std::vector<typename Tape<R>::Var>&)>& builder,
    const std::vector<Tensor<R>>& params, double eps) {
  if (eps <= 0) throw InputError("grad_check: eps must be positive");

  auto eval = [&](const std::vector<Tensor<R>>& p, std::vector<Tensor<R>>* grads) {
    Tape<R> tape;
    std::vector<typename Tape<R>::Var> vars;
    vars.reserve(p.size());
    for (const auto& t : p) vars.push_back(tape.input(t));
    auto root = builder(tape, vars);
    double out = double(tape.value(root).scalar_value());
    if (!std::isfinite(out)) throw NumericError("grad_check: non-finite loss");
    if (grads) {
      tape.backward(root);
      grads->clear();
      for (auto v : vars) grads->push_back(tape.grad(v));
    }
    return out;
  };

  std::vector<Tensor<R>> analytic;
  eval(params, &analytic);

  double max_err = 0;
  std::vector<Tensor<R>> work = params;
  for (std::size_t s = 0; s < params.size(); ++s) {
    for (std::int64_t i = 0; i < params[s].numel(); ++i) {
      R orig = work[s][i];
      work[s][i] = orig + R(eps);
      double fp = eval(work, nullptr);
      work[s][i] = orig - R(eps);
      double fm = eval(work, nullptr);
      work[s][i] = orig;
      double cd = (fp - fm) / (2.0 * eps);
      double err = std::abs(double(analytic[s][i]) - cd) / std::max(1.0, std::abs(cd));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace gm
