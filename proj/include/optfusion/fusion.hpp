#pragma once

#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "optfusion/components.hpp"
#include "optfusion/core/random.hpp"
#include "optfusion/core/tape.hpp"
#include "optfusion/errors.hpp"

namespace optfusion {

// Fixed order; hard-selection ties break toward the lowest index.
enum class FusionOpKind { ADD = 0, PROD = 1, CONCAT = 2, ATT = 3 };

inline const char* op_str(FusionOpKind o) {
  switch (o) {
    case FusionOpKind::ADD: return "ADD";
    case FusionOpKind::PROD: return "PROD";
    case FusionOpKind::CONCAT: return "CONCAT";
    case FusionOpKind::ATT: return "ATT";
  }
  return "?";
}

inline FusionOpKind op_from_str(const std::string& s) {
  if (s == "ADD") return FusionOpKind::ADD;
  if (s == "PROD") return FusionOpKind::PROD;
  if (s == "CONCAT") return FusionOpKind::CONCAT;
  if (s == "ATT") return FusionOpKind::ATT;
  throw ArgumentError("unknown fusion op '" + s + "'");
}

struct Component {
  std::size_t id;
  ComponentKind kind;
  std::size_t level;
  std::string name;
};

// The candidate wiring diagram: E at level 0, optional auxiliary cross
// block S0 at level 1, then S_i and D_i sharing level i (+1 with S0),
// output strictly on top. Connections may only point from a lower level to a
// strictly higher one, which is what keeps every architecture a DAG.
struct ComponentGraph {
  std::size_t n = 0;
  bool with_s0 = false;
  std::vector<Component> components;  // id order: E, [S0], S1, D1, ..., Sn, Dn, H

  static ComponentGraph make(std::size_t n, bool with_s0) {
    if (n < 1) throw ArgumentError("component graph: n must be >= 1");
    ComponentGraph g;
    g.n = n;
    g.with_s0 = with_s0;
    std::size_t off = with_s0 ? 1 : 0;
    g.components.push_back({0, ComponentKind::Embedding, 0, "E"});
    if (with_s0)
      g.components.push_back({1, ComponentKind::Cross, 1, "S0"});
    for (std::size_t i = 1; i <= n; ++i) {
      g.components.push_back(
          {g.components.size(), ComponentKind::Cross, i + off, "S" + std::to_string(i)});
      g.components.push_back(
          {g.components.size(), ComponentKind::Deep, i + off, "D" + std::to_string(i)});
    }
    g.components.push_back(
        {g.components.size(), ComponentKind::Output, n + off + 1, "H"});
    return g;
  }

  std::size_t count() const { return components.size(); }

  std::size_t level(std::size_t id) const { return components.at(id).level; }

  bool edge_allowed(std::size_t src, std::size_t dst) const {
    return src < count() && dst < count() && level(src) < level(dst);
  }

  // All possible sources for dst, in id order. Slot order for CONCAT.
  std::vector<std::size_t> predecessors(std::size_t dst) const {
    std::vector<std::size_t> out;
    for (const Component& c : components)
      if (c.level < level(dst)) out.push_back(c.id);
    return out;
  }

  bool fusion_capable(std::size_t id) const {
    return components.at(id).kind != ComponentKind::Embedding;
  }

  // Fusion-capable ids in id order; position = beta column.
  std::vector<std::size_t> fusion_ids() const {
    std::vector<std::size_t> out;
    for (const Component& c : components)
      if (c.kind != ComponentKind::Embedding) out.push_back(c.id);
    return out;
  }

  std::size_t fusion_col(std::size_t id) const {
    if (!fusion_capable(id))
      throw ArgumentError(components.at(id).name + " is not fusion-capable");
    std::size_t col = 0;
    for (const Component& c : components) {
      if (c.id == id) return col;
      if (c.kind != ComponentKind::Embedding) ++col;
    }
    throw IndexError("component id out of range");
  }

  std::size_t resolve(const std::string& name) const {
    for (const Component& c : components)
      if (c.name == name) return c.id;
    throw ArgumentError("unknown component '" + name + "'");
  }
};

// Closed-form candidate edge count: 2n^2 + 2n + 1, plus S0's 2n+2 when the
// auxiliary block is present.
inline std::uint64_t count_valid_connections(std::size_t n,
                                             bool with_s0 = false) {
  if (n < 1) throw ArgumentError("count_valid_connections: n must be >= 1");
  std::uint64_t base = 2 * n * n + 2 * n + 1;
  return with_s0 ? base + 2 * n + 2 : base;
}

// |search space| = 2^(2n^2+2n+1) * k^(2n+1); exact arbitrary precision.
inline boost::multiprecision::cpp_int search_space_size(std::size_t n,
                                                        std::size_t k) {
  if (n < 1 || k < 1)
    throw ArgumentError("search_space_size: n and k must be >= 1");
  namespace mp = boost::multiprecision;
  mp::cpp_int conn = mp::pow(mp::cpp_int(2), 2 * n * n + 2 * n + 1);
  mp::cpp_int ops = mp::pow(mp::cpp_int(k), 2 * n + 1);
  return conn * ops;
}

// alpha is a dense [C x C] matrix with a level mask; masked-false entries are
// initialized to zero and never read or updated (their gradient is
// identically zero, so the optimizer leaves them alone).
struct ConnectionParams {
  Parameter alpha;
  std::vector<bool> mask;
  std::size_t c = 0;

  void init(const ComponentGraph& g, double init_value = 0.5) {
    c = g.count();
    mask.assign(c * c, false);
    Tensor a({c, c});
    for (std::size_t s = 0; s < c; ++s)
      for (std::size_t d = 0; d < c; ++d)
        if (g.edge_allowed(s, d)) {
          mask[s * c + d] = true;
          a[s * c + d] = init_value;
        }
    alpha = Parameter("alpha", std::move(a));
  }

  bool masked_true(std::size_t s, std::size_t d) const {
    return mask.at(s * c + d);
  }

  double entry(std::size_t s, std::size_t d) const {
    if (!masked_true(s, d))
      throw ContractError("alpha[" + std::to_string(s) + "," +
                          std::to_string(d) + "] is masked out");
    return alpha.value[s * c + d];
  }
};

// STE gate over one masked-true alpha entry: forward 1_{alpha > 0}, backward
// pass-through.
inline Var gate(Tape& t, Var alpha_leaf, const ConnectionParams& conn,
                std::size_t src, std::size_t dst) {
  if (!conn.masked_true(src, dst))
    throw ContractError("gate on masked-false alpha[" + std::to_string(src) +
                        "," + std::to_string(dst) + "]");
  return t.ste(t.slice_scalar(alpha_leaf, src * conn.c + dst));
}

// beta: one k-row column per fusion-capable component, k = |op_set|.
struct OperationParams {
  Parameter beta;
  std::vector<FusionOpKind> op_set;
  std::size_t num_columns = 0;

  void init(const ComponentGraph& g, std::vector<FusionOpKind> ops) {
    if (ops.empty()) throw ArgumentError("op set must not be empty");
    op_set = std::move(ops);
    num_columns = g.fusion_ids().size();
    beta = Parameter("beta", Tensor({op_set.size(), num_columns}));
  }
};

// Learned weights owned by one component's fusion site. CONCAT's W covers
// every possible predecessor slot so its shape never changes as gates flip;
// ATT's little MLP scores each input.
struct FusionParams {
  Parameter concat_w;             // [d x P*d]
  Parameter att_w1, att_b1, att_w2;  // [d x d], [d], [d]
  bool has_concat = false;
  bool has_att = false;

  void init(const std::string& prefix, std::size_t d, std::size_t max_preds,
            const std::vector<FusionOpKind>& op_set, Rng& rng) {
    for (FusionOpKind o : op_set) {
      if (o == FusionOpKind::CONCAT) has_concat = true;
      if (o == FusionOpKind::ATT) has_att = true;
    }
    if (has_concat) {
      std::size_t pd = max_preds * d;
      Tensor w({d, pd});
      double s = std::sqrt(2.0 / static_cast<double>(pd + d));
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, s);
      concat_w = Parameter(prefix + ".concat_w", std::move(w));
    }
    if (has_att) {
      Tensor w1({d, d});
      double s1 = std::sqrt(1.0 / static_cast<double>(d));
      for (std::size_t i = 0; i < w1.size(); ++i) w1[i] = rng.normal(0.0, s1);
      att_w1 = Parameter(prefix + ".att_w1", std::move(w1));
      att_b1 = Parameter(prefix + ".att_b1", Tensor({d}));
      Tensor w2({d});
      for (std::size_t i = 0; i < d; ++i) w2[i] = rng.normal(0.0, s1);
      att_w2 = Parameter(prefix + ".att_w2", std::move(w2));
    }
  }

  void collect(std::vector<Parameter*>& out) {
    if (has_concat) out.push_back(&concat_w);
    if (has_att) {
      out.push_back(&att_w1);
      out.push_back(&att_b1);
      out.push_back(&att_w2);
    }
  }
};

namespace detail {
inline void check_slots(const std::vector<Var>& slots,
                        const std::vector<Var>& gates) {
  if (slots.empty()) throw EmptyFusionError("fuse: empty predecessor slot list");
  if (gates.size() != slots.size())
    throw ArgumentError("fuse: slot/gate count mismatch");
}
}  // namespace detail

inline Var fuse_add(Tape& t, const std::vector<Var>& slots,
                    const std::vector<Var>& gates) {
  detail::check_slots(slots, gates);
  return t.gated_sum(slots, gates);
}

inline Var fuse_prod(Tape& t, const std::vector<Var>& slots,
                     const std::vector<Var>& gates) {
  detail::check_slots(slots, gates);
  Var acc = t.gate_blend(slots[0], gates[0]);
  for (std::size_t i = 1; i < slots.size(); ++i)
    acc = t.mul(acc, t.gate_blend(slots[i], gates[i]));
  return acc;
}

inline Var fuse_concat(Tape& t, FusionParams& fp, const std::vector<Var>& slots,
                       const std::vector<Var>& gates) {
  detail::check_slots(slots, gates);
  if (!fp.has_concat) throw ContractError("CONCAT weights not allocated");
  return t.concat_linear(t.leaf(fp.concat_w), slots, gates);
}

// Attention fusion: logits z_i = w2 . relu(W1 e_i + b1), masked to -inf
// where the gate is 0, output sum_i a_i e_i. With every input gated out the
// masked softmax row is all zeros, so the output is the zero vector.
inline Var fuse_att(Tape& t, FusionParams& fp, const std::vector<Var>& slots,
                    const std::vector<Var>& gates) {
  detail::check_slots(slots, gates);
  if (!fp.has_att) throw ContractError("ATT weights not allocated");
  std::size_t b = t.value(slots[0]).rows();
  std::vector<bool> masked(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i)
    masked[i] = t.value(gates[i]).item() == 0.0;

  Var w1 = t.leaf(fp.att_w1);
  Var b1 = t.leaf(fp.att_b1);
  Var w2 = t.leaf(fp.att_w2);
  std::vector<Var> logits;
  logits.reserve(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (masked[i]) {
      logits.push_back(t.constant(Tensor({b})));  // value irrelevant, masked
      continue;
    }
    Var h = t.relu(t.add_rowvec(t.matmul(slots[i], w1, false, true), b1));
    logits.push_back(t.matvec(h, w2));
  }
  Var a = t.masked_softmax_rows(t.stack_cols(logits), masked);
  std::vector<Var> unit(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i)
    unit[i] = t.scalar_const(masked[i] ? 0.0 : 1.0);
  return t.weighted_sum_cols(a, slots, unit);
}

inline Var fuse(Tape& t, FusionOpKind kind, FusionParams& fp,
                const std::vector<Var>& slots, const std::vector<Var>& gates) {
  switch (kind) {
    case FusionOpKind::ADD: return fuse_add(t, slots, gates);
    case FusionOpKind::PROD: return fuse_prod(t, slots, gates);
    case FusionOpKind::CONCAT: return fuse_concat(t, fp, slots, gates);
    case FusionOpKind::ATT: return fuse_att(t, fp, slots, gates);
  }
  throw ArgumentError("unknown fusion op kind");
}

// Convex mixture of every candidate op's output. `op_weights` must align
// with op_set (softmaxed beta column in search, fixed probabilities in soft
// retrain).
inline Var mix_operations(Tape& t, const std::vector<FusionOpKind>& op_set,
                          const std::vector<Var>& op_weights, FusionParams& fp,
                          const std::vector<Var>& slots,
                          const std::vector<Var>& gates) {
  if (op_set.empty()) throw ArgumentError("mix_operations: empty op set");
  if (op_weights.size() != op_set.size())
    throw ArgumentError("mix_operations: weight/op count mismatch");
  std::vector<Var> outs;
  outs.reserve(op_set.size());
  for (FusionOpKind o : op_set) outs.push_back(fuse(t, o, fp, slots, gates));
  return t.gated_sum(outs, op_weights);
}

// Reference (non-tape) attention coefficients for one sample; the oracle form
// of fuse_att's softmax. Throws when every input is gated out so the caller
// can substitute the zero vector.
inline std::vector<double> attention_coefficients(
    const Tensor& w1, const Tensor& b1, const Tensor& w2,
    const std::vector<Tensor>& inputs, const std::vector<int>& gates) {
  if (inputs.empty())
    throw EmptyFusionError("attention_coefficients: no inputs");
  if (gates.size() != inputs.size())
    throw ArgumentError("attention_coefficients: input/gate count mismatch");
  std::size_t d = w1.rows();
  bool any = false;
  for (int g : gates) any = any || g != 0;
  if (!any)
    throw DegenerateMaskError("attention_coefficients: all inputs gated out");

  std::vector<double> z(inputs.size(), 0.0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!gates[i]) continue;
    const Tensor& e = inputs[i];
    if (e.size() != d)
      throw DimensionError("attention_coefficients: input length " +
                           std::to_string(e.size()) + " vs d=" +
                           std::to_string(d));
    for (std::size_t r = 0; r < d; ++r) {
      double h = b1[r];
      for (std::size_t cidx = 0; cidx < d; ++cidx)
        h += w1.at(r, cidx) * e[cidx];
      if (h > 0.0) z[i] += w2[r] * h;
    }
  }
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (gates[i]) m = std::max(m, z[i]);
  double sum = 0.0;
  std::vector<double> a(inputs.size(), 0.0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!gates[i]) continue;
    a[i] = std::exp(z[i] - m);
    sum += a[i];
  }
  for (double& v : a) v /= sum;
  return a;
}

}  // namespace optfusion
