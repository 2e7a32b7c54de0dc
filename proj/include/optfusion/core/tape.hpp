#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "optfusion/core/gemm.hpp"
#include "optfusion/core/tensor.hpp"
#include "optfusion/errors.hpp"

namespace optfusion {

class Tape;

// Handle into a Tape. Cheap to copy; dies with the tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

// Trainable value with a persistent gradient accumulator. Lives outside any
// tape and is re-leafed into a fresh tape each step; backward() adds into
// `grad`, the optimizer consumes it, zero_grad() resets it.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape(), 0.0) {}

  std::size_t size() const { return value.size(); }
  void zero_grad() { grad.fill(0.0); }
};

// Eager reverse-mode tape. Every op appends one node holding the forward
// value and a backward closure; insertion order is already topological, so
// backward() is a single reverse sweep. A tape is single-use: build the step,
// call backward() once, throw the tape away.
class Tape {
 public:
  explicit Tape(bool check_finite = false) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void set_check_finite(bool on) { check_finite_ = on; }
  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  const Tensor& value(Var v) const {
    check(v);
    return nodes_[v.id].value;
  }
  const Tensor& grad(Var v) {
    check(v);
    return ensure_grad(v.id);
  }
  bool needs_grad(Var v) const {
    check(v);
    return nodes_[v.id].needs_grad;
  }

  // ---- leaves ----

  Var constant(Tensor v) { return push(std::move(v), false, "constant"); }
  Var scalar_const(double v) { return constant(Tensor::scalar(v)); }

  Var leaf(Parameter& p) {
    Var out = push(p.value, true, "leaf");
    Parameter* pp = &p;
    bw(out, [this, oi = out.id, pp] {
      const Tensor& g = nodes_[oi].grad;
      for (std::size_t i = 0; i < g.size(); ++i) pp->grad[i] += g[i];
    });
    return out;
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    check2(a, b, "add");
    same_shape(a, b, "add");
    Tensor out = nodes_[a.id].value;
    const Tensor& bv = nodes_[b.id].value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    Var o = push(std::move(out), needs(a) || needs(b), "add");
    bw(o, [this, ai = a.id, bi = b.id, oi = o.id] {
      const Tensor& g = nodes_[oi].grad;
      if (nodes_[ai].needs_grad) {
        Tensor& ga = ensure_grad(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nodes_[bi].needs_grad) {
        Tensor& gb = ensure_grad(bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
    return o;
  }

  Var sub(Var a, Var b) {
    check2(a, b, "sub");
    same_shape(a, b, "sub");
    Tensor out = nodes_[a.id].value;
    const Tensor& bv = nodes_[b.id].value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    Var o = push(std::move(out), needs(a) || needs(b), "sub");
    bw(o, [this, ai = a.id, bi = b.id, oi = o.id] {
      const Tensor& g = nodes_[oi].grad;
      if (nodes_[ai].needs_grad) {
        Tensor& ga = ensure_grad(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (nodes_[bi].needs_grad) {
        Tensor& gb = ensure_grad(bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
    return o;
  }

  Var mul(Var a, Var b) {
    check2(a, b, "mul");
    same_shape(a, b, "mul");
    Tensor out = nodes_[a.id].value;
    const Tensor& bv = nodes_[b.id].value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    Var o = push(std::move(out), needs(a) || needs(b), "mul");
    bw(o, [this, ai = a.id, bi = b.id, oi = o.id] {
      const Tensor& g = nodes_[oi].grad;
      const Tensor& av = nodes_[ai].value;
      const Tensor& bv2 = nodes_[bi].value;
      if (nodes_[ai].needs_grad) {
        Tensor& ga = ensure_grad(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
      }
      if (nodes_[bi].needs_grad) {
        Tensor& gb = ensure_grad(bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
    return o;
  }

  Var scale(Var x, double c) {
    check(x);
    Tensor out = nodes_[x.id].value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
    Var o = push(std::move(out), needs(x), "scale");
    bw(o, [this, xi = x.id, oi = o.id, c] {
      const Tensor& g = nodes_[oi].grad;
      Tensor& gx = ensure_grad(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
    });
    return o;
  }

  // out = s * x with s a scalar var.
  Var scale_var(Var x, Var s) {
    check2(x, s, "scale_var");
    scalar_only(s, "scale_var");
    double sv = nodes_[s.id].value[0];
    Tensor out = nodes_[x.id].value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= sv;
    Var o = push(std::move(out), needs(x) || needs(s), "scale_var");
    bw(o, [this, xi = x.id, si = s.id, oi = o.id, sv] {
      const Tensor& g = nodes_[oi].grad;
      const Tensor& xv = nodes_[xi].value;
      if (nodes_[xi].needs_grad) {
        Tensor& gx = ensure_grad(xi);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += sv * g[i];
      }
      if (nodes_[si].needs_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
        ensure_grad(si)[0] += acc;
      }
    });
    return o;
  }

  Var add_scalar(Var x, Var s) {
    check2(x, s, "add_scalar");
    scalar_only(s, "add_scalar");
    double sv = nodes_[s.id].value[0];
    Tensor out = nodes_[x.id].value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sv;
    Var o = push(std::move(out), needs(x) || needs(s), "add_scalar");
    bw(o, [this, xi = x.id, si = s.id, oi = o.id] {
      const Tensor& g = nodes_[oi].grad;
      if (nodes_[xi].needs_grad) {
        Tensor& gx = ensure_grad(xi);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (nodes_[si].needs_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i];
        ensure_grad(si)[0] += acc;
      }
    });
    return o;
  }

  // X [r x c] + row vector b [c], broadcast over rows.
  Var add_rowvec(Var x, Var b) {
    check2(x, b, "add_rowvec");
    const Tensor& xv = nodes_[x.id].value;
    const Tensor& bb = nodes_[b.id].value;
    if (xv.rank() != 2 || bb.rank() != 1 || bb.size() != xv.cols())
      throw DimensionError("add_rowvec: " + shape_str(xv.shape()) + " vs " +
                           shape_str(bb.shape()));
    Tensor out = xv;
    std::size_t r = xv.rows(), c = xv.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bb[j];
    Var o = push(std::move(out), needs(x) || needs(b), "add_rowvec");
    bw(o, [this, xi = x.id, bi = b.id, oi = o.id, r, c] {
      const Tensor& g = nodes_[oi].grad;
      if (nodes_[xi].needs_grad) {
        Tensor& gx = ensure_grad(xi);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (nodes_[bi].needs_grad) {
        Tensor& gb = ensure_grad(bi);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
    });
    return o;
  }

  // ---- dense linear algebra ----

  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    check2(a, b, "matmul");
    const Tensor& av = nodes_[a.id].value;
    const Tensor& bv = nodes_[b.id].value;
    if (av.rank() != 2 || bv.rank() != 2)
      throw DimensionError("matmul needs rank-2 operands");
    std::size_t m = trans_a ? av.cols() : av.rows();
    std::size_t ka = trans_a ? av.rows() : av.cols();
    std::size_t kb = trans_b ? bv.cols() : bv.rows();
    std::size_t n = trans_b ? bv.rows() : bv.cols();
    if (ka != kb)
      throw DimensionError("matmul: inner dims " + shape_str(av.shape()) +
                           " vs " + shape_str(bv.shape()));
    Tensor out({m, n});
    gemm(trans_a, trans_b, m, n, ka, 1.0, av.data(), av.cols(), bv.data(),
         bv.cols(), 0.0, out.data(), n);
    Var o = push(std::move(out), needs(a) || needs(b), "matmul");
    bw(o, [this, ai = a.id, bi = b.id, oi = o.id, m, n, k = ka, trans_a,
           trans_b] {
      const Tensor& g = nodes_[oi].grad;
      const Tensor& av2 = nodes_[ai].value;
      const Tensor& bv2 = nodes_[bi].value;
      if (nodes_[ai].needs_grad) {
        Tensor& ga = ensure_grad(ai);
        if (!trans_a && !trans_b)  // dA = G B^T
          gemm(false, true, m, k, n, 1.0, g.data(), n, bv2.data(), bv2.cols(),
               1.0, ga.data(), ga.cols());
        else if (trans_a && !trans_b)  // dA = B G^T
          gemm(false, true, k, m, n, 1.0, bv2.data(), bv2.cols(), g.data(), n,
               1.0, ga.data(), ga.cols());
        else if (!trans_a && trans_b)  // dA = G B
          gemm(false, false, m, k, n, 1.0, g.data(), n, bv2.data(), bv2.cols(),
               1.0, ga.data(), ga.cols());
        else  // dA = B^T G^T
          gemm(true, true, k, m, n, 1.0, bv2.data(), bv2.cols(), g.data(), n,
               1.0, ga.data(), ga.cols());
      }
      if (nodes_[bi].needs_grad) {
        Tensor& gb = ensure_grad(bi);
        if (!trans_a && !trans_b)  // dB = A^T G
          gemm(true, false, k, n, m, 1.0, av2.data(), av2.cols(), g.data(), n,
               1.0, gb.data(), gb.cols());
        else if (trans_a && !trans_b)  // dB = A G
          gemm(false, false, k, n, m, 1.0, av2.data(), av2.cols(), g.data(), n,
               1.0, gb.data(), gb.cols());
        else if (!trans_a && trans_b)  // dB = G^T A
          gemm(true, false, n, k, m, 1.0, g.data(), n, av2.data(), av2.cols(),
               1.0, gb.data(), gb.cols());
        else  // dB = G^T A^T
          gemm(true, true, n, k, m, 1.0, g.data(), n, av2.data(), av2.cols(),
               1.0, gb.data(), gb.cols());
      }
    });
    return o;
  }

  // X [B x n] . w [n] -> [B]
  Var matvec(Var x, Var w) {
    check2(x, w, "matvec");
    const Tensor& xv = nodes_[x.id].value;
    const Tensor& wv = nodes_[w.id].value;
    if (xv.rank() != 2 || wv.rank() != 1 || wv.size() != xv.cols())
      throw DimensionError("matvec: " + shape_str(xv.shape()) + " vs " +
                           shape_str(wv.shape()));
    std::size_t r = xv.rows(), c = xv.cols();
    Tensor out({r});
    gemm(false, false, r, 1, c, 1.0, xv.data(), c, wv.data(), 1, 0.0,
         out.data(), 1);
    Var o = push(std::move(out), needs(x) || needs(w), "matvec");
    bw(o, [this, xi = x.id, wi = w.id, oi = o.id, r, c] {
      const Tensor& g = nodes_[oi].grad;
      const Tensor& xv2 = nodes_[xi].value;
      const Tensor& wv2 = nodes_[wi].value;
      if (nodes_[xi].needs_grad) {
        Tensor& gx = ensure_grad(xi);
        gemm(false, false, r, c, 1, 1.0, g.data(), 1, wv2.data(), c, 1.0,
             gx.data(), c);
      }
      if (nodes_[wi].needs_grad) {
        Tensor& gw = ensure_grad(wi);
        gemm(true, false, c, 1, r, 1.0, xv2.data(), c, g.data(), 1, 1.0,
             gw.data(), 1);
      }
    });
    return o;
  }

  // ---- activations ----

  Var relu(Var x) {
    check(x);
    Tensor out = nodes_[x.id].value;
    for (std::size_t i = 0; i < out.size(); ++i)
      if (out[i] < 0.0) out[i] = 0.0;
    Var o = push(std::move(out), needs(x), "relu");
    bw(o, [this, xi = x.id, oi = o.id] {
      const Tensor& g = nodes_[oi].grad;
      const Tensor& xv = nodes_[xi].value;
      Tensor& gx = ensure_grad(xi);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > 0.0) gx[i] += g[i];
    });
    return o;
  }

  Var sigmoid(Var x) {
    check(x);
    const Tensor& xv = nodes_[x.id].value;
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
      double z = xv[i];
      if (z >= 0.0) {
        out[i] = 1.0 / (1.0 + std::exp(-z));
      } else {
        double e = std::exp(z);
        out[i] = e / (1.0 + e);
      }
    }
    Var o = push(std::move(out), needs(x), "sigmoid");
    bw(o, [this, xi = x.id, oi = o.id] {
      const Tensor& g = nodes_[oi].grad;
      const Tensor& s = nodes_[oi].value;
      Tensor& gx = ensure_grad(xi);
      for (std::size_t i = 0; i < g.size(); ++i)
        gx[i] += g[i] * s[i] * (1.0 - s[i]);
    });
    return o;
  }

  // Row-wise softmax; a rank-1 input is one row.
  Var softmax_rows(Var x) { return softmax_impl(x, nullptr); }

  // Masked columns get probability zero and receive zero gradient; a row
  // with every column masked comes out all-zero rather than erroring, which
  // is exactly the convention attention fusion needs.
  Var masked_softmax_rows(Var x, const std::vector<bool>& masked) {
    return softmax_impl(x, &masked);
  }

  // Straight-through estimator: unit step forward (0 stays 0), identity
  // backward. The pass-through is a plain add, so upstream gradient bits
  // survive untouched.
  Var ste(Var x) {
    check(x);
    const Tensor& xv = nodes_[x.id].value;
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = xv[i] > 0.0 ? 1.0 : 0.0;
    Var o = push(std::move(out), needs(x), "ste");
    bw(o, [this, xi = x.id, oi = o.id] {
      const Tensor& g = nodes_[oi].grad;
      Tensor& gx = ensure_grad(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    return o;
  }

  // ---- shape ops ----

  Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw ArgumentError("concat_cols: no inputs");
    std::size_t r = 0, total = 0;
    bool ng = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      check(xs[i]);
      const Tensor& v = nodes_[xs[i].id].value;
      if (v.rank() != 2) throw DimensionError("concat_cols needs rank-2 inputs");
      if (i == 0)
        r = v.rows();
      else if (v.rows() != r)
        throw DimensionError("concat_cols: row mismatch");
      total += v.cols();
      ng = ng || needs(xs[i]);
    }
    Tensor out({r, total});
    std::size_t off = 0;
    for (const Var& v : xs) {
      const Tensor& t = nodes_[v.id].value;
      std::size_t c = t.cols();
      for (std::size_t i = 0; i < r; ++i)
        std::copy(t.data() + i * c, t.data() + (i + 1) * c,
                  out.data() + i * total + off);
      off += c;
    }
    std::vector<int> ids(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) ids[i] = xs[i].id;
    Var o = push(std::move(out), ng, "concat_cols");
    bw(o, [this, ids = std::move(ids), oi = o.id, r, total] {
      const Tensor& g = nodes_[oi].grad;
      std::size_t off2 = 0;
      for (int id : ids) {
        std::size_t c = nodes_[id].value.cols();
        if (nodes_[id].needs_grad) {
          Tensor& gx = ensure_grad(id);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
              gx[i * c + j] += g[i * total + off2 + j];
        }
        off2 += c;
      }
    });
    return o;
  }

  // Rank-1 columns [B] each -> [B x P].
  Var stack_cols(const std::vector<Var>& zs) {
    if (zs.empty()) throw ArgumentError("stack_cols: no inputs");
    std::size_t r = 0;
    bool ng = false;
    for (std::size_t i = 0; i < zs.size(); ++i) {
      check(zs[i]);
      const Tensor& v = nodes_[zs[i].id].value;
      if (v.rank() != 1) throw DimensionError("stack_cols needs rank-1 inputs");
      if (i == 0)
        r = v.size();
      else if (v.size() != r)
        throw DimensionError("stack_cols: length mismatch");
      ng = ng || needs(zs[i]);
    }
    std::size_t p = zs.size();
    Tensor out({r, p});
    for (std::size_t i = 0; i < p; ++i) {
      const Tensor& z = nodes_[zs[i].id].value;
      for (std::size_t b = 0; b < r; ++b) out[b * p + i] = z[b];
    }
    std::vector<int> ids(p);
    for (std::size_t i = 0; i < p; ++i) ids[i] = zs[i].id;
    Var o = push(std::move(out), ng, "stack_cols");
    bw(o, [this, ids = std::move(ids), oi = o.id, r, p] {
      const Tensor& g = nodes_[oi].grad;
      for (std::size_t i = 0; i < p; ++i) {
        if (!nodes_[ids[i]].needs_grad) continue;
        Tensor& gz = ensure_grad(ids[i]);
        for (std::size_t b = 0; b < r; ++b) gz[b] += g[b * p + i];
      }
    });
    return o;
  }

  // Embedding lookup: table [V x e], idx rows -> [|idx| x e].
  Var gather_rows(Var table, std::vector<std::size_t> idx) {
    check(table);
    const Tensor& tv = nodes_[table.id].value;
    if (tv.rank() != 2) throw DimensionError("gather_rows needs rank-2 table");
    std::size_t v = tv.rows(), e = tv.cols();
    for (std::size_t r : idx)
      if (r >= v)
        throw IndexError("gather_rows: index " + std::to_string(r) +
                         " out of range for " + std::to_string(v) + " rows");
    Tensor out({idx.size(), e});
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(tv.data() + idx[i] * e, tv.data() + (idx[i] + 1) * e,
                out.data() + i * e);
    Var o = push(std::move(out), needs(table), "gather_rows");
    bw(o, [this, ti = table.id, oi = o.id, idx = std::move(idx), e] {
      const Tensor& g = nodes_[oi].grad;
      Tensor& gt = ensure_grad(ti);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < e; ++j)
          gt[idx[i] * e + j] += g[i * e + j];
    });
    return o;
  }

  Var slice_scalar(Var x, std::size_t i) {
    check(x);
    const Tensor& xv = nodes_[x.id].value;
    if (i >= xv.size())
      throw IndexError("slice_scalar: index " + std::to_string(i) +
                       " out of range");
    Var o = push(Tensor::scalar(xv[i]), needs(x), "slice_scalar");
    bw(o, [this, xi = x.id, oi = o.id, i] {
      ensure_grad(xi)[i] += nodes_[oi].grad[0];
    });
    return o;
  }

  Var slice_col(Var x, std::size_t j) {
    check(x);
    const Tensor& xv = nodes_[x.id].value;
    if (xv.rank() != 2) throw DimensionError("slice_col needs rank-2 input");
    std::size_t r = xv.rows(), c = xv.cols();
    if (j >= c)
      throw IndexError("slice_col: column " + std::to_string(j) +
                       " out of range");
    Tensor out({r});
    for (std::size_t i = 0; i < r; ++i) out[i] = xv[i * c + j];
    Var o = push(std::move(out), needs(x), "slice_col");
    bw(o, [this, xi = x.id, oi = o.id, j, r, c] {
      const Tensor& g = nodes_[oi].grad;
      Tensor& gx = ensure_grad(xi);
      for (std::size_t i = 0; i < r; ++i) gx[i * c + j] += g[i];
    });
    return o;
  }

  // ---- reductions ----

  Var sum(Var x) {
    check(x);
    const Tensor& xv = nodes_[x.id].value;
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
    Var o = push(Tensor::scalar(acc), needs(x), "sum");
    bw(o, [this, xi = x.id, oi = o.id] {
      double g = nodes_[oi].grad[0];
      Tensor& gx = ensure_grad(xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
    return o;
  }

  Var sum_sq(Var x) {
    check(x);
    const Tensor& xv = nodes_[x.id].value;
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i] * xv[i];
    Var o = push(Tensor::scalar(acc), needs(x), "sum_sq");
    bw(o, [this, xi = x.id, oi = o.id] {
      double g = nodes_[oi].grad[0];
      const Tensor& xv2 = nodes_[xi].value;
      Tensor& gx = ensure_grad(xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * xv2[i] * g;
    });
    return o;
  }

  // Mean binary cross-entropy against fixed labels, probabilities clipped to
  // [1e-7, 1 - 1e-7]. Clipped entries get zero gradient (the exact derivative
  // of the clamped forward).
  static constexpr double kProbClip = 1e-7;

  Var bce_mean(Var p, const std::vector<double>& y) {
    check(p);
    const Tensor& pv = nodes_[p.id].value;
    if (pv.rank() != 1 || pv.size() != y.size())
      throw DimensionError("bce_mean: " + std::to_string(pv.size()) +
                           " probs vs " + std::to_string(y.size()) + " labels");
    if (y.empty()) throw ArgumentError("bce_mean: empty batch");
    const double lo = kProbClip, hi = 1.0 - kProbClip;
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      double pc = std::clamp(pv[i], lo, hi);
      acc -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
    }
    double n = static_cast<double>(y.size());
    Var o = push(Tensor::scalar(acc / n), needs(p), "bce_mean");
    bw(o, [this, pi = p.id, oi = o.id, y, lo, hi, n] {
      double g = nodes_[oi].grad[0];
      const Tensor& pv2 = nodes_[pi].value;
      Tensor& gp = ensure_grad(pi);
      for (std::size_t i = 0; i < y.size(); ++i) {
        double pc = pv2[i];
        if (pc < lo || pc > hi) continue;
        gp[i] += g * (pc - y[i]) / (pc * (1.0 - pc)) / n;
      }
    });
    return o;
  }

  // ---- fused fusion kernels ----
  // Gates are scalar vars. Zero-gate terms are skipped in the forward pass
  // (their contribution is exactly zero) but gate gradients are still
  // produced whenever the gate is trainable -- that is where dL/d(alpha)
  // comes from for inactive connections.

  // out = sum_i g_i * x_i. Doubles as the convex mixture over operations.
  Var gated_sum(const std::vector<Var>& xs, const std::vector<Var>& gates) {
    gate_check(xs, gates, "gated_sum");
    bool ng = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      same_shape(xs[0], xs[i], "gated_sum");
      ng = ng || needs(xs[i]) || needs(gates[i]);
    }
    const Tensor& x0 = nodes_[xs[0].id].value;
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      double g = nodes_[gates[i].id].value[0];
      if (g == 0.0) continue;
      const Tensor& xv = nodes_[xs[i].id].value;
      for (std::size_t k = 0; k < out.size(); ++k) out[k] += g * xv[k];
    }
    auto [xid, gid] = pack_ids(xs, gates);
    Var o = push(std::move(out), ng, "gated_sum");
    bw(o, [this, xid = std::move(xid), gid = std::move(gid), oi = o.id] {
      const Tensor& g = nodes_[oi].grad;
      for (std::size_t i = 0; i < xid.size(); ++i) {
        double gv = nodes_[gid[i]].value[0];
        if (nodes_[gid[i]].needs_grad) {
          const Tensor& xv = nodes_[xid[i]].value;
          double acc = 0.0;
          for (std::size_t k = 0; k < g.size(); ++k) acc += g[k] * xv[k];
          ensure_grad(gid[i])[0] += acc;
        }
        if (gv != 0.0 && nodes_[xid[i]].needs_grad) {
          Tensor& gx = ensure_grad(xid[i]);
          for (std::size_t k = 0; k < g.size(); ++k) gx[k] += gv * g[k];
        }
      }
    });
    return o;
  }

  // out = 1 + g * (x - 1): the identity-blend factor behind PROD fusion.
  // Chain these with mul() to get prod_i (1 + g_i (x_i - 1)).
  Var gate_blend(Var x, Var g) {
    check2(x, g, "gate_blend");
    scalar_only(g, "gate_blend");
    double gv = nodes_[g.id].value[0];
    const Tensor& xv = nodes_[x.id].value;
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = 1.0 + gv * (xv[i] - 1.0);
    Var o = push(std::move(out), needs(x) || needs(g), "gate_blend");
    bw(o, [this, xi = x.id, gi = g.id, oi = o.id, gv] {
      const Tensor& gr = nodes_[oi].grad;
      const Tensor& xv2 = nodes_[xi].value;
      if (nodes_[xi].needs_grad && gv != 0.0) {
        Tensor& gx = ensure_grad(xi);
        for (std::size_t i = 0; i < gr.size(); ++i) gx[i] += gv * gr[i];
      }
      if (nodes_[gi].needs_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < gr.size(); ++i)
          acc += gr[i] * (xv2[i] - 1.0);
        ensure_grad(gi)[0] += acc;
      }
    });
    return o;
  }

  // out[b,:] = sum_i A[b,i] * g_i * x_i[b,:] -- attention recombination.
  Var weighted_sum_cols(Var a, const std::vector<Var>& xs,
                        const std::vector<Var>& gates) {
    check(a);
    gate_check(xs, gates, "weighted_sum_cols");
    const Tensor& av = nodes_[a.id].value;
    const Tensor& x0 = nodes_[xs[0].id].value;
    if (av.rank() != 2 || x0.rank() != 2 || av.rows() != x0.rows() ||
        av.cols() != xs.size())
      throw DimensionError("weighted_sum_cols: weights " +
                           shape_str(av.shape()) + " vs " +
                           std::to_string(xs.size()) + " slots of " +
                           shape_str(x0.shape()));
    bool ng = needs(a);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      same_shape(xs[0], xs[i], "weighted_sum_cols");
      ng = ng || needs(xs[i]) || needs(gates[i]);
    }
    std::size_t b = x0.rows(), d = x0.cols(), p = xs.size();
    Tensor out({b, d});
    for (std::size_t i = 0; i < p; ++i) {
      double g = nodes_[gates[i].id].value[0];
      if (g == 0.0) continue;
      const Tensor& xv = nodes_[xs[i].id].value;
      for (std::size_t r = 0; r < b; ++r) {
        double w = g * av[r * p + i];
        if (w == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c)
          out[r * d + c] += w * xv[r * d + c];
      }
    }
    auto [xid, gid] = pack_ids(xs, gates);
    Var o = push(std::move(out), ng, "weighted_sum_cols");
    bw(o, [this, ai = a.id, xid = std::move(xid), gid = std::move(gid),
           oi = o.id, b, d, p] {
      const Tensor& gr = nodes_[oi].grad;
      const Tensor& av2 = nodes_[ai].value;
      bool need_a = nodes_[ai].needs_grad;
      for (std::size_t i = 0; i < p; ++i) {
        double gv = nodes_[gid[i]].value[0];
        bool need_g = nodes_[gid[i]].needs_grad;
        bool need_x = nodes_[xid[i]].needs_grad && gv != 0.0;
        bool need_dot = need_g || (need_a && gv != 0.0);
        if (!need_g && !need_x && !need_dot) continue;
        const Tensor& xv = nodes_[xid[i]].value;
        double gacc = 0.0;
        for (std::size_t r = 0; r < b; ++r) {
          double s = 0.0;
          if (need_dot) {
            for (std::size_t c = 0; c < d; ++c)
              s += gr[r * d + c] * xv[r * d + c];
            gacc += av2[r * p + i] * s;
            if (need_a && gv != 0.0) ensure_grad(ai)[r * p + i] += gv * s;
          }
          if (need_x) {
            double w = gv * av2[r * p + i];
            if (w != 0.0) {
              Tensor& gx = ensure_grad(xid[i]);
              for (std::size_t c = 0; c < d; ++c)
                gx[r * d + c] += w * gr[r * d + c];
            }
          }
        }
        if (need_g) ensure_grad(gid[i])[0] += gacc;
      }
    });
    return o;
  }

  // out = sum_i g_i * x_i W_i^T where W = [W_0 | W_1 | ... | W_{P-1}] is one
  // [d_out x P*d_in] matrix. The concatenation is never materialized: each
  // block is addressed in place with a row stride of P*d_in.
  Var concat_linear(Var w, const std::vector<Var>& xs,
                    const std::vector<Var>& gates) {
    check(w);
    gate_check(xs, gates, "concat_linear");
    const Tensor& wv = nodes_[w.id].value;
    const Tensor& x0 = nodes_[xs[0].id].value;
    if (wv.rank() != 2 || x0.rank() != 2)
      throw DimensionError("concat_linear needs rank-2 operands");
    std::size_t p = xs.size(), din = x0.cols(), dout = wv.rows();
    std::size_t b = x0.rows(), ldw = wv.cols();
    if (ldw != p * din)
      throw DimensionError("concat_linear: weight " + shape_str(wv.shape()) +
                           " vs " + std::to_string(p) + " slots of width " +
                           std::to_string(din));
    bool ng = needs(w);
    for (std::size_t i = 0; i < p; ++i) {
      same_shape(xs[0], xs[i], "concat_linear");
      ng = ng || needs(xs[i]) || needs(gates[i]);
    }
    Tensor out({b, dout});
    for (std::size_t i = 0; i < p; ++i) {
      double g = nodes_[gates[i].id].value[0];
      if (g == 0.0) continue;
      gemm(false, true, b, dout, din, g, nodes_[xs[i].id].value.data(), din,
           wv.data() + i * din, ldw, 1.0, out.data(), dout);
    }
    auto [xid, gid] = pack_ids(xs, gates);
    Var o = push(std::move(out), ng, "concat_linear");
    bw(o, [this, wi = w.id, xid = std::move(xid), gid = std::move(gid),
           oi = o.id, b, din, dout, ldw, p] {
      const Tensor& gr = nodes_[oi].grad;
      const Tensor& wv2 = nodes_[wi].value;
      std::vector<double> gblock(b * din);
      for (std::size_t i = 0; i < p; ++i) {
        double gv = nodes_[gid[i]].value[0];
        bool need_g = nodes_[gid[i]].needs_grad;
        bool need_x = nodes_[xid[i]].needs_grad && gv != 0.0;
        bool need_w = nodes_[wi].needs_grad && gv != 0.0;
        if (!need_g && !need_x && !need_w) continue;
        const Tensor& xv = nodes_[xid[i]].value;
        if (need_g || need_x) {
          // gblock = dOut W_i, shared by the gate dot and the input grad
          gemm(false, false, b, din, dout, 1.0, gr.data(), dout,
               wv2.data() + i * din, ldw, 0.0, gblock.data(), din);
          if (need_g) {
            double acc = 0.0;
            for (std::size_t k = 0; k < gblock.size(); ++k)
              acc += gblock[k] * xv[k];
            ensure_grad(gid[i])[0] += acc;
          }
          if (need_x) {
            Tensor& gx = ensure_grad(xid[i]);
            for (std::size_t k = 0; k < gblock.size(); ++k)
              gx[k] += gv * gblock[k];
          }
        }
        if (need_w) {
          Tensor& gw = ensure_grad(wi);
          gemm(true, false, dout, din, b, gv, gr.data(), dout, xv.data(), din,
               1.0, gw.data() + i * din, ldw);
        }
      }
    });
    return o;
  }

  // Cross layer: out = x0 * (xl . w) + b + xl (rows of x0 scaled by the
  // per-row projection of xl).
  Var cross_combine(Var x0, Var xl, Var w, Var b) {
    check2(x0, xl, "cross_combine");
    check2(w, b, "cross_combine");
    same_shape(x0, xl, "cross_combine");
    const Tensor& v0 = nodes_[x0.id].value;
    const Tensor& vl = nodes_[xl.id].value;
    const Tensor& vw = nodes_[w.id].value;
    const Tensor& vb = nodes_[b.id].value;
    if (v0.rank() != 2 || vw.rank() != 1 || vb.rank() != 1 ||
        vw.size() != v0.cols() || vb.size() != v0.cols())
      throw DimensionError("cross_combine: " + shape_str(v0.shape()) +
                           " with w " + shape_str(vw.shape()) + ", b " +
                           shape_str(vb.shape()));
    std::size_t r = v0.rows(), d = v0.cols();
    std::vector<double> s(r, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < d; ++j) s[i] += vl[i * d + j] * vw[j];
    Tensor out({r, d});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < d; ++j)
        out[i * d + j] = v0[i * d + j] * s[i] + vb[j] + vl[i * d + j];
    bool ng = needs(x0) || needs(xl) || needs(w) || needs(b);
    Var o = push(std::move(out), ng, "cross_combine");
    bw(o, [this, i0 = x0.id, il = xl.id, iw = w.id, ib = b.id, oi = o.id,
           s = std::move(s), r, d] {
      const Tensor& g = nodes_[oi].grad;
      const Tensor& v02 = nodes_[i0].value;
      const Tensor& vl2 = nodes_[il].value;
      const Tensor& vw2 = nodes_[iw].value;
      bool n0 = nodes_[i0].needs_grad, nl = nodes_[il].needs_grad;
      bool nw = nodes_[iw].needs_grad, nb = nodes_[ib].needs_grad;
      for (std::size_t i = 0; i < r; ++i) {
        double ds = 0.0;
        if (nl || nw)
          for (std::size_t j = 0; j < d; ++j)
            ds += g[i * d + j] * v02[i * d + j];
        if (n0) {
          Tensor& g0 = ensure_grad(i0);
          for (std::size_t j = 0; j < d; ++j) g0[i * d + j] += g[i * d + j] * s[i];
        }
        if (nl) {
          Tensor& gl = ensure_grad(il);
          for (std::size_t j = 0; j < d; ++j)
            gl[i * d + j] += g[i * d + j] + vw2[j] * ds;
        }
        if (nw) {
          Tensor& gw = ensure_grad(iw);
          for (std::size_t j = 0; j < d; ++j) gw[j] += vl2[i * d + j] * ds;
        }
        if (nb) {
          Tensor& gb = ensure_grad(ib);
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
        }
      }
    });
    return o;
  }

  // ---- backward ----

  // Single reverse sweep from a scalar root. One shot per tape.
  void backward(Var root) {
    check(root);
    if (backward_done_)
      throw ContractError("backward() already ran on this tape");
    if (nodes_[root.id].value.size() != 1)
      throw ContractError("backward root must be scalar, got " +
                          shape_str(nodes_[root.id].value.shape()));
    backward_done_ = true;
    ensure_grad(root.id)[0] = 1.0;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward();
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated on first touch during backward
    const char* op;
    bool needs_grad;
    std::function<void()> backward;
  };

  Var push(Tensor v, bool needs_grad, const char* op) {
    if (check_finite_ && !v.all_finite())
      throw NumericError(std::string(op) + " produced non-finite values");
    nodes_.push_back(Node{std::move(v), Tensor{}, op, needs_grad, {}});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  void bw(Var v, std::function<void()> f) {
    if (nodes_[v.id].needs_grad) nodes_[v.id].backward = std::move(f);
  }

  Tensor& ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  void check(Var v) const {
    if (v.tape != this || v.id < 0 ||
        v.id >= static_cast<int>(nodes_.size()))
      throw ContractError("var does not belong to this tape");
  }
  void check2(Var a, Var b, const char* op) const {
    check(a);
    check(b);
    (void)op;
  }
  void same_shape(Var a, Var b, const char* op) const {
    const Tensor& av = nodes_[a.id].value;
    const Tensor& bv = nodes_[b.id].value;
    if (!av.same_shape(bv))
      throw DimensionError(std::string(op) + ": shape mismatch " +
                           shape_str(av.shape()) + " vs " +
                           shape_str(bv.shape()));
  }
  void scalar_only(Var v, const char* op) const {
    if (nodes_[v.id].value.size() != 1)
      throw DimensionError(std::string(op) + ": expected scalar, got " +
                           shape_str(nodes_[v.id].value.shape()));
  }
  void gate_check(const std::vector<Var>& xs, const std::vector<Var>& gates,
                  const char* op) const {
    if (xs.empty())
      throw ArgumentError(std::string(op) + ": no inputs");
    if (gates.size() != xs.size())
      throw ArgumentError(std::string(op) + ": " + std::to_string(xs.size()) +
                          " inputs vs " + std::to_string(gates.size()) +
                          " gates");
    for (const Var& x : xs) check(x);
    for (const Var& g : gates) {
      check(g);
      scalar_only(g, op);
    }
  }
  std::pair<std::vector<int>, std::vector<int>> pack_ids(
      const std::vector<Var>& xs, const std::vector<Var>& gates) const {
    std::vector<int> xid(xs.size()), gid(gates.size());
    for (std::size_t i = 0; i < xs.size(); ++i) xid[i] = xs[i].id;
    for (std::size_t i = 0; i < gates.size(); ++i) gid[i] = gates[i].id;
    return {std::move(xid), std::move(gid)};
  }

  Var softmax_impl(Var x, const std::vector<bool>* masked) {
    check(x);
    const Tensor& xv = nodes_[x.id].value;
    if (xv.rank() == 0 || xv.rank() > 2)
      throw DimensionError("softmax: rank must be 1 or 2");
    std::size_t r = xv.rows(), c = xv.cols();
    if (masked && masked->size() != c)
      throw ArgumentError("masked_softmax: mask length " +
                          std::to_string(masked->size()) + " vs " +
                          std::to_string(c) + " columns");
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < r; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j)
        if (!(masked && (*masked)[j])) m = std::max(m, xv[i * c + j]);
      if (m == -std::numeric_limits<double>::infinity()) continue;  // all masked
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        if (masked && (*masked)[j]) continue;
        double e = std::exp(xv[i * c + j] - m);
        out[i * c + j] = e;
        z += e;
      }
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
    }
    const char* name = masked ? "masked_softmax_rows" : "softmax_rows";
    Var o = push(std::move(out), needs(x), name);
    bw(o, [this, xi = x.id, oi = o.id, r, c] {
      const Tensor& g = nodes_[oi].grad;
      const Tensor& a = nodes_[oi].value;
      Tensor& gx = ensure_grad(xi);
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * a[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          gx[i * c + j] += a[i * c + j] * (g[i * c + j] - dot);
      }
    });
    return o;
  }

  std::vector<Node> nodes_;
  bool check_finite_;
  bool backward_done_ = false;
};

}  // namespace optfusion
