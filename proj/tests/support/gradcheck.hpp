#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "optfusion/core/random.hpp"
#include "optfusion/core/tape.hpp"

// Central finite-difference oracle for gradient tests. The builder
// constructs one scalar loss on a fresh tape from live Parameter values, so
// perturbing a parameter and rebuilding re-evaluates the whole graph.
namespace optfusion::gradcheck {

using LossBuilder = std::function<Var(Tape&)>;

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-3);
}

struct Result {
  double max_rel_err = 0.0;
  std::size_t checks = 0;
};

inline Result check(const std::vector<Parameter*>& params,
                    const LossBuilder& build, double h = 1e-5) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape t;
    t.backward(build(t));
  }
  Result res;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->size(); ++i) {
      double orig = p->value[i];
      double fp, fm;
      p->value[i] = orig + h;
      {
        Tape t;
        fp = t.value(build(t)).item();
      }
      p->value[i] = orig - h;
      {
        Tape t;
        fm = t.value(build(t)).item();
      }
      p->value[i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double e = rel_err(fd, p->grad[i]);
      if (e > res.max_rel_err) res.max_rel_err = e;
      ++res.checks;
    }
  }
  return res;
}

inline Tensor rand_tensor(Rng& rng, Shape s, double lo = -1.0,
                          double hi = 1.0) {
  Tensor t(std::move(s));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline Parameter rand_param(Rng& rng, const std::string& name, Shape s,
                            double lo = -1.0, double hi = 1.0) {
  return Parameter(name, rand_tensor(rng, std::move(s), lo, hi));
}

// Dots the var against a fixed probe tensor so upstream gradients are
// non-uniform; plain sum() would hide transposition bugs. The probe must be
// created once outside the loss builder, or finite differencing sees a
// different function on every rebuild.
inline Var probe_loss(Tape& t, Var v, const Tensor& probe) {
  return t.sum(t.mul(v, t.constant(probe)));
}

}  // namespace optfusion::gradcheck
