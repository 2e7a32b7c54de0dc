#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "optfusion/data.hpp"
#include "optfusion/supernet.hpp"

namespace optfusion {

struct TrainConfig {
  double learning_rate = 1e-3;
  double arch_learning_rate = -1.0;  // < 0: same as learning_rate
  double l2 = 0.0;
  std::size_t batch_size = 4096;
  std::size_t selection_epochs = 1;  // T in the one-shot algorithm
  std::size_t retrain_epochs = 10;
  std::size_t early_stop_patience = 2;
  std::uint64_t seed = 0;

  double arch_lr() const {
    return arch_learning_rate < 0.0 ? learning_rate : arch_learning_rate;
  }

  void validate() const {
    if (learning_rate <= 0.0)
      throw ArgumentError("train config: learning_rate must be > 0");
    if (l2 < 0.0) throw ArgumentError("train config: l2 must be >= 0");
    if (batch_size < 1)
      throw ArgumentError("train config: batch_size must be >= 1");
  }
};

// Bias-corrected Adam over one or more parameter groups, each with its own
// learning rate but a shared step counter.
class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  void add_group(const std::vector<Parameter*>& params, double lr) {
    for (Parameter* p : params)
      slots_.push_back({p, lr, Tensor(p->value.shape(), 0.0),
                        Tensor(p->value.shape(), 0.0)});
  }

  std::size_t steps() const { return t_; }

  void zero_grads() {
    for (Slot& s : slots_) s.p->zero_grad();
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (Slot& s : slots_) {
      if (!s.p->grad.same_shape(s.p->value) || !s.m.same_shape(s.p->value))
        throw ContractError("adam: gradient/moment shape mismatch for " +
                            s.p->name);
      for (std::size_t i = 0; i < s.p->size(); ++i) {
        double g = s.p->grad[i];
        s.m[i] = kBeta1 * s.m[i] + (1.0 - kBeta1) * g;
        s.v[i] = kBeta2 * s.v[i] + (1.0 - kBeta2) * g * g;
        double mh = s.m[i] / bc1;
        double vh = s.v[i] / bc2;
        s.p->value[i] -= s.lr * mh / (std::sqrt(vh) + kEps);
      }
    }
  }

 private:
  struct Slot {
    Parameter* p;
    double lr;
    Tensor m, v;
  };
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

// Negative log-likelihood plus l2 on the model weights Theta only
// (architecture parameters are never regularized).
inline Var training_loss(Tape& t, Var probs, const std::vector<double>& labels,
                         const std::vector<Parameter*>& theta, double l2) {
  Var loss = t.bce_mean(probs, labels);
  if (l2 > 0.0) {
    Var pen = t.scalar_const(0.0);
    for (Parameter* p : theta) pen = t.add(pen, t.sum_sq(t.leaf(*p)));
    loss = t.add(loss, t.scale(pen, l2));
  }
  return loss;
}

// Average-rank AUC; ties get rank credit 0.5, exactly the all-pairs
// statistic.
inline double rank_auc(const std::vector<double>& scores,
                       const std::vector<double>& labels) {
  if (scores.size() != labels.size())
    throw ArgumentError("rank_auc: score/label count mismatch");
  std::size_t n = scores.size();
  std::size_t pos = 0;
  for (double y : labels) pos += y == 1.0 ? 1 : 0;
  std::size_t neg = n - pos;
  if (pos == 0 || neg == 0)
    throw ArgumentError("rank_auc: AUC undefined for a single-class label set");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1.0) pos_rank_sum += avg_rank;
    i = j;
  }
  double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

inline double mean_logloss(const std::vector<double>& scores,
                           const std::vector<double>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw ArgumentError("mean_logloss: bad inputs");
  double acc = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    double p = std::min(std::max(scores[i], Tape::kProbClip),
                        1.0 - Tape::kProbClip);
    acc += labels[i] == 1.0 ? -std::log(p) : -std::log(1.0 - p);
  }
  return acc / static_cast<double>(scores.size());
}

struct EvalMetrics {
  double auc = 0.0;
  double logloss = 0.0;
};

inline std::vector<double> predict(Supernet& net, const EncodedDataset& data,
                                   std::size_t batch_size) {
  std::vector<double> scores;
  scores.reserve(data.size());
  for (std::size_t at = 0; at < data.size(); at += batch_size) {
    std::size_t take = std::min(batch_size, data.size() - at);
    std::vector<std::size_t> ids(take);
    std::iota(ids.begin(), ids.end(), at);
    Batch b = gather_batch(data, ids);
    Tape t;
    const Tensor& p = t.value(net.forward(t, b.field_idx));
    for (std::size_t i = 0; i < take; ++i) scores.push_back(p[i]);
  }
  return scores;
}

inline EvalMetrics evaluate(Supernet& net, const EncodedDataset& data,
                            std::size_t batch_size = 4096) {
  std::vector<double> scores = predict(net, data, batch_size);
  return {rank_auc(scores, data.labels),
          mean_logloss(scores, data.labels)};
}

struct EpochLog {
  std::string stage;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_auc = 0.0;
  double val_logloss = 0.0;
  double wall_time_s = 0.0;
};

namespace detail {

// One pass over the training split; returns the mean per-batch loss.
inline double run_epoch(Supernet& net, Adam& opt, const TrainConfig& cfg,
                        const EncodedDataset& train, std::uint64_t shuffle_seed,
                        const std::string& stage, std::size_t epoch) {
  std::vector<Parameter*> theta = net.theta_params();
  double loss_sum = 0.0;
  std::size_t batches = 0;
  for (const auto& ids :
       batch_indices(train.size(), cfg.batch_size, shuffle_seed)) {
    Batch b = gather_batch(train, ids);
    Tape t;
    Var p = net.forward(t, b.field_idx);
    Var loss = training_loss(t, p, b.labels, theta, cfg.l2);
    double lv = t.value(loss).item();
    if (!std::isfinite(lv))
      throw DivergenceError(stage + " diverged: loss=" + std::to_string(lv) +
                            " at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches) + " (seed " +
                            std::to_string(cfg.seed) + ")");
    opt.zero_grads();
    t.backward(loss);
    opt.step();
    loss_sum += lv;
    ++batches;
  }
  return batches == 0 ? 0.0 : loss_sum / static_cast<double>(batches);
}

inline double seconds_since(
    const std::chrono::steady_clock::time_point& start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                       start)
      .count();
}

}  // namespace detail

// Selection stage of the one-shot algorithm: alpha starts at 0.5 (every
// connection on), beta at 0 (uniform mixture), and every mini-batch step
// updates Theta, alpha, beta together through one backward pass.
inline std::vector<EpochLog> selection_stage(Supernet& net,
                                             const TrainConfig& cfg,
                                             const EncodedDataset& train,
                                             const EncodedDataset& val) {
  cfg.validate();
  net.set_mode(SupernetMode::search);
  net.reset_arch();
  Adam opt;
  opt.add_group(net.theta_params(), cfg.learning_rate);
  opt.add_group(net.arch_params(), cfg.arch_lr());

  std::vector<EpochLog> logs;
  Rng shuffles = Rng(cfg.seed).fork(0x5e1ec7);
  for (std::size_t epoch = 1; epoch <= cfg.selection_epochs; ++epoch) {
    auto start = std::chrono::steady_clock::now();
    double train_loss = detail::run_epoch(net, opt, cfg, train,
                                          shuffles.fork(epoch).bits(),
                                          "selection", epoch);
    EvalMetrics m = evaluate(net, val, cfg.batch_size);
    logs.push_back({"selection", epoch, train_loss, m.auc, m.logloss,
                    detail::seconds_since(start)});
  }
  return logs;
}

struct RetrainResult {
  EvalMetrics test;
  std::vector<EpochLog> logs;
  std::size_t best_epoch = 0;
};

// Retrain stage: fresh Theta under a frozen descriptor, early stopping on
// validation AUC, best-epoch weights restored before the test evaluation.
inline RetrainResult retrain_stage(Supernet& net, const TrainConfig& cfg,
                                   const ArchitectureDescriptor& desc,
                                   const EncodedDataset& train,
                                   const EncodedDataset& val,
                                   const EncodedDataset& test) {
  cfg.validate();
  bool soft = !desc.operations.empty() && desc.operations.front().soft;
  net.set_mode(soft ? SupernetMode::retrain_soft : SupernetMode::retrain_hard);
  net.set_descriptor(desc);
  net.reinit_theta(Rng(cfg.seed).fork(0x7e7a).bits());

  Adam opt;
  opt.add_group(net.theta_params(), cfg.learning_rate);

  RetrainResult res;
  double best_auc = -1.0;
  std::size_t since_best = 0;
  std::vector<Tensor> best_values;
  std::vector<Parameter*> theta = net.theta_params();
  const std::string stage = soft ? "retrain_soft" : "retrain_hard";

  Rng shuffles = Rng(cfg.seed).fork(0x2e7a41);
  for (std::size_t epoch = 1; epoch <= cfg.retrain_epochs; ++epoch) {
    auto start = std::chrono::steady_clock::now();
    double train_loss = detail::run_epoch(net, opt, cfg, train,
                                          shuffles.fork(epoch).bits(), stage,
                                          epoch);
    EvalMetrics m = evaluate(net, val, cfg.batch_size);
    res.logs.push_back({stage, epoch, train_loss, m.auc, m.logloss,
                        detail::seconds_since(start)});
    if (m.auc > best_auc) {
      best_auc = m.auc;
      res.best_epoch = epoch;
      since_best = 0;
      best_values.clear();
      for (Parameter* p : theta) best_values.push_back(p->value);
    } else if (++since_best >= cfg.early_stop_patience) {
      break;
    }
  }
  if (!best_values.empty())
    for (std::size_t i = 0; i < theta.size(); ++i)
      theta[i]->value = best_values[i];
  res.test = evaluate(net, test, cfg.batch_size);
  return res;
}

// Two-phase ablation baseline: learn connections under a uniform operation
// mixture, freeze their discretization, then learn operations alone.
inline std::vector<EpochLog> sequential_selection(Supernet& net,
                                                  const TrainConfig& cfg,
                                                  const EncodedDataset& train,
                                                  const EncodedDataset& val) {
  cfg.validate();
  net.set_mode(SupernetMode::search);
  net.reset_arch();
  std::size_t phase1 = (cfg.selection_epochs + 1) / 2;
  std::vector<EpochLog> logs;
  Rng shuffles = Rng(cfg.seed).fork(0x5e9431);

  // phase 1: beta stays at its uniform initialization by staying out of the
  // optimizer; alpha and Theta move
  Adam opt1;
  opt1.add_group(net.theta_params(), cfg.learning_rate);
  opt1.add_group({&net.conn().alpha}, cfg.arch_lr());
  for (std::size_t epoch = 1; epoch <= phase1; ++epoch) {
    auto start = std::chrono::steady_clock::now();
    double train_loss = detail::run_epoch(net, opt1, cfg, train,
                                          shuffles.fork(epoch).bits(),
                                          "sequential_alpha", epoch);
    EvalMetrics m = evaluate(net, val, cfg.batch_size);
    logs.push_back({"sequential_alpha", epoch, train_loss, m.auc, m.logloss,
                    detail::seconds_since(start)});
  }

  // freeze the discretized connections into alpha: +1 keeps the gate open,
  // -1 keeps it shut, and alpha never enters the phase-2 optimizer
  ArchitectureDescriptor d = net.discretize(DiscretizeVariant::hard);
  std::size_t c = net.graph().count();
  for (std::size_t s = 0; s < c; ++s)
    for (std::size_t t = 0; t < c; ++t)
      if (net.conn().masked_true(s, t))
        net.conn().alpha.value[s * c + t] = d.connections[s][t] ? 1.0 : -1.0;

  Adam opt2;
  opt2.add_group(net.theta_params(), cfg.learning_rate);
  opt2.add_group({&net.ops().beta}, cfg.arch_lr());
  for (std::size_t epoch = 1; epoch <= cfg.selection_epochs - phase1;
       ++epoch) {
    auto start = std::chrono::steady_clock::now();
    double train_loss = detail::run_epoch(net, opt2, cfg, train,
                                          shuffles.fork(0x10000 + epoch).bits(),
                                          "sequential_beta", epoch);
    EvalMetrics m = evaluate(net, val, cfg.batch_size);
    logs.push_back({"sequential_beta", epoch, train_loss, m.auc, m.logloss,
                    detail::seconds_since(start)});
  }
  return logs;
}

}  // namespace optfusion
