#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "optfusion/search.hpp"
#include "support/gradcheck.hpp"

using namespace optfusion;
using Catch::Approx;

namespace {

// Planted-teacher train/val/test triple shared by the trainer tests.
struct Task {
  SyntheticSpec spec;
  EncodedDataset train, val, test;
};

Task make_task(std::uint64_t seed, std::size_t samples = 6000,
               double logit_scale = 8.0) {
  Task task;
  task.spec.num_fields = 4;
  task.spec.vocab_size = 20;
  task.spec.emb_dim = 4;
  task.spec.samples = samples;
  task.spec.teacher = preset(PresetKind::parallel, 1);
  task.spec.teacher_seed = 1234;
  task.spec.data_seed = seed;
  task.spec.logit_scale = logit_scale;
  EncodedDataset all = generate_synthetic(task.spec);
  auto parts = split(all, {0.8, 0.1, 0.1}, seed ^ 0xabcd);
  task.train = std::move(parts[0]);
  task.val = std::move(parts[1]);
  task.test = std::move(parts[2]);
  return task;
}

double pairwise_auc(const std::vector<double>& scores,
                    const std::vector<double>& labels) {
  double num = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[i] != 1.0 || labels[j] != 0.0) continue;
      ++pairs;
      if (scores[i] > scores[j])
        num += 1.0;
      else if (scores[i] == scores[j])
        num += 0.5;
    }
  return num / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("adam update rule", "[search][adam]") {
  SECTION("single step from zero state") {
    Parameter p("p", Tensor::row({1.0, -2.0, 0.5}));
    p.grad = Tensor::row({0.3, -0.1, 0.0});
    Adam opt;
    opt.add_group({&p}, 0.01);
    opt.step();
    CHECK(p.value[0] ==
          Approx(1.0 - 0.01 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
    CHECK(p.value[1] ==
          Approx(-2.0 + 0.01 * 0.1 / (0.1 + 1e-8)).epsilon(1e-12));
    CHECK(p.value[2] == 0.5);  // zero gradient -> unchanged exactly
  }

  SECTION("constant gradient converges to -lr * sign") {
    Parameter p("p", Tensor::row({0.0}));
    Adam opt;
    opt.add_group({&p}, 0.01);
    double prev = 0.0;
    for (int i = 0; i < 50; ++i) {
      p.grad = Tensor::row({0.37});
      prev = p.value[0];
      opt.step();
    }
    CHECK(prev - p.value[0] == Approx(0.01).epsilon(1e-6));
  }

  SECTION("shape mismatch is a contract error") {
    Parameter p("p", Tensor::row({1.0, 2.0}));
    Adam opt;
    opt.add_group({&p}, 0.01);
    p.value = Tensor::row({1.0, 2.0, 3.0});
    p.grad = Tensor::row({1.0, 2.0, 3.0});
    CHECK_THROWS_AS(opt.step(), ContractError);
  }
}

TEST_CASE("auc and logloss", "[search][metrics]") {
  CHECK(rank_auc({0.9, 0.1}, {1.0, 0.0}) == 1.0);
  CHECK(rank_auc({0.1, 0.9}, {1.0, 0.0}) == 0.0);
  CHECK(rank_auc({0.5, 0.5}, {1.0, 0.0}) == 0.5);
  CHECK_THROWS_AS(rank_auc({0.5, 0.6}, {1.0, 1.0}), ArgumentError);
  CHECK_THROWS_AS(rank_auc({0.5, 0.6}, {0.0, 0.0}), ArgumentError);

  SECTION("rank statistic equals the all-pairs definition exactly") {
    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
      std::size_t n = 5 + rng.uniform_int(40);
      std::vector<double> scores, labels;
      bool pos = false, neg = false;
      for (std::size_t i = 0; i < n; ++i) {
        // quantized scores force plenty of ties
        scores.push_back(static_cast<double>(rng.uniform_int(7)) / 6.0);
        labels.push_back(rng.bernoulli(0.4) ? 1.0 : 0.0);
        pos = pos || labels.back() == 1.0;
        neg = neg || labels.back() == 0.0;
      }
      if (!pos) labels[0] = 1.0;
      if (!neg) labels[1] = 0.0;
      REQUIRE(rank_auc(scores, labels) == pairwise_auc(scores, labels));
    }
  }

  SECTION("logloss closed forms") {
    CHECK(mean_logloss({0.5}, {1.0}) == Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(mean_logloss({0.5}, {0.0}) == Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(mean_logloss({0.0}, {1.0}) ==
          Approx(-std::log(1e-7)).epsilon(1e-9));
    CHECK(std::isfinite(mean_logloss({1.0}, {0.0})));
  }
}

TEST_CASE("training loss closed-form gradient", "[search][loss]") {
  std::vector<double> labels = {1.0, 0.0, 1.0, 0.0};
  Parameter probs("p", Tensor::row({0.3, 0.8, 0.6, 0.2}));
  Parameter wextra("w", Tensor::row({0.5, -1.5}));
  double l2 = 0.01;

  probs.zero_grad();
  wextra.zero_grad();
  {
    Tape t;
    Var loss = training_loss(t, t.leaf(probs), labels, {&wextra}, l2);
    double want = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      double p = probs.value[i];
      want += labels[i] == 1.0 ? -std::log(p) : -std::log(1.0 - p);
    }
    want = want / 4.0 + l2 * (0.25 + 2.25);
    CHECK(t.value(loss)[0] == Approx(want).epsilon(1e-12));
    t.backward(loss);
  }
  for (std::size_t i = 0; i < 4; ++i) {
    double p = probs.value[i];
    double want = (p - labels[i]) / (p * (1.0 - p)) / 4.0;
    CHECK(probs.grad[i] == Approx(want).epsilon(1e-9));
  }
  CHECK(wextra.grad[0] == Approx(2.0 * l2 * 0.5).epsilon(1e-12));
  CHECK(wextra.grad[1] == Approx(2.0 * l2 * -1.5).epsilon(1e-12));

  SECTION("matches finite differences") {
    auto res = gradcheck::check({&probs, &wextra}, [&](Tape& t) {
      return training_loss(t, t.leaf(probs), labels, {&wextra}, l2);
    });
    CHECK(res.max_rel_err < 1e-5);
  }
}

TEST_CASE("selection stage trains the supernet", "[search][selection]") {
  SECTION("loss decreases with frozen architecture over 3 seeds") {
    for (std::uint64_t seed : {11ull, 22ull, 33ull}) {
      Task task = make_task(seed, 3000);
      Supernet net(task.spec.schema(),
                   {1, false, SupernetMode::search, default_op_set()}, seed);
      TrainConfig cfg;
      cfg.learning_rate = 3e-3;
      cfg.arch_learning_rate = 0.0;  // Theta only
      cfg.batch_size = 256;
      cfg.selection_epochs = 3;
      cfg.seed = seed;
      auto logs = selection_stage(net, cfg, task.train, task.val);
      REQUIRE(logs.size() == 3);
      CHECK(logs.back().train_loss < logs.front().train_loss);
      // frozen architecture: alpha and beta still at initialization
      std::size_t c = net.graph().count();
      for (std::size_t s = 0; s < c; ++s)
        for (std::size_t d = 0; d < c; ++d)
          CHECK(net.conn().alpha.value[s * c + d] ==
                (net.conn().masked_true(s, d) ? 0.5 : 0.0));
      for (std::size_t i = 0; i < net.ops().beta.size(); ++i)
        CHECK(net.ops().beta.value[i] == 0.0);
    }
  }

  SECTION("joint update moves theta, alpha and beta together") {
    Task task = make_task(44, 2000);
    Supernet net(task.spec.schema(),
                 {1, true, SupernetMode::search, default_op_set()}, 7);
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 256;
    cfg.selection_epochs = 1;
    cfg.seed = 7;
    Tensor emb0 = net.theta_params().front()->value;
    auto logs = selection_stage(net, cfg, task.train, task.val);
    REQUIRE(logs.size() == 1);
    CHECK(logs[0].stage == "selection");
    CHECK(logs[0].epoch == 1);
    CHECK(logs[0].val_auc > 0.0);
    CHECK(std::isfinite(logs[0].wall_time_s));

    bool alpha_moved = false, beta_moved = false, theta_moved = false;
    std::size_t c = net.graph().count();
    for (std::size_t s = 0; s < c; ++s)
      for (std::size_t d = 0; d < c; ++d) {
        if (net.conn().masked_true(s, d))
          alpha_moved =
              alpha_moved || net.conn().alpha.value[s * c + d] != 0.5;
        else  // masked entries never move
          CHECK(net.conn().alpha.value[s * c + d] == 0.0);
      }
    for (std::size_t i = 0; i < net.ops().beta.size(); ++i)
      beta_moved = beta_moved || net.ops().beta.value[i] != 0.0;
    const Tensor& emb1 = net.theta_params().front()->value;
    for (std::size_t i = 0; i < emb1.size(); ++i)
      theta_moved = theta_moved || emb1[i] != emb0[i];
    CHECK(alpha_moved);
    CHECK(beta_moved);
    CHECK(theta_moved);
  }

  SECTION("same seed reproduces logs and architecture bit-for-bit") {
    Task task = make_task(55, 1500);
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 512;
    cfg.selection_epochs = 2;
    cfg.seed = 99;
    Supernet a(task.spec.schema(),
               {1, false, SupernetMode::search, default_op_set()}, 5);
    Supernet b(task.spec.schema(),
               {1, false, SupernetMode::search, default_op_set()}, 5);
    auto la = selection_stage(a, cfg, task.train, task.val);
    auto lb = selection_stage(b, cfg, task.train, task.val);
    REQUIRE(la.size() == lb.size());
    for (std::size_t i = 0; i < la.size(); ++i) {
      CHECK(la[i].train_loss == lb[i].train_loss);
      CHECK(la[i].val_auc == lb[i].val_auc);
      CHECK(la[i].val_logloss == lb[i].val_logloss);
    }
    CHECK(a.conn().alpha.value.bit_equal(b.conn().alpha.value));
    CHECK(a.ops().beta.value.bit_equal(b.ops().beta.value));
  }

  SECTION("divergence aborts with a diagnostic") {
    Task task = make_task(66, 600);
    Supernet net(task.spec.schema(),
                 {1, false, SupernetMode::search, default_op_set()}, 3);
    net.theta_params().front()->value[0] =
        std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 128;
    cfg.selection_epochs = 1;
    cfg.seed = 3;
    CHECK_THROWS_AS(selection_stage(net, cfg, task.train, task.val),
                    DivergenceError);
    try {
      net.reinit_theta(3);
      net.theta_params().front()->value[0] =
          std::numeric_limits<double>::quiet_NaN();
      selection_stage(net, cfg, task.train, task.val);
    } catch (const DivergenceError& e) {
      CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
  }
}

TEST_CASE("retrain stage contracts", "[search][retrain]") {
  Task task = make_task(101, 6000);

  SECTION("parallel preset beats 0.95 AUC on the separable task") {
    // sharpened labels are near-deterministic in the teacher's scores, so a
    // matched student has the headroom to cross 0.95
    Task sep = make_task(101, 6000, 128.0);
    Supernet net(sep.spec.schema(),
                 {1, false, SupernetMode::fixed, default_op_set()}, 17);
    TrainConfig cfg;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 256;
    cfg.retrain_epochs = 12;
    cfg.early_stop_patience = 4;
    cfg.seed = 17;
    RetrainResult r = retrain_stage(net, cfg, preset(PresetKind::parallel, 1),
                                    sep.train, sep.val, sep.test);
    CHECK(r.test.auc > 0.95);
    CHECK(r.test.logloss < 0.5);
    CHECK(r.best_epoch >= 1);
  }

  SECTION("architecture parameters are bit-identical through retraining") {
    Supernet net(task.spec.schema(),
                 {1, false, SupernetMode::search, default_op_set()}, 17);
    Rng rng(40);
    std::size_t c = net.graph().count();
    for (std::size_t s = 0; s < c; ++s)
      for (std::size_t d = 0; d < c; ++d)
        if (net.conn().masked_true(s, d))
          net.conn().alpha.value[s * c + d] = rng.uniform(-1.0, 1.0);
    for (std::size_t i = 0; i < net.ops().beta.size(); ++i)
      net.ops().beta.value[i] = rng.uniform(-1.0, 1.0);
    Tensor alpha_before = net.conn().alpha.value;
    Tensor beta_before = net.ops().beta.value;
    ArchitectureDescriptor d = net.discretize(DiscretizeVariant::soft);

    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 512;
    cfg.retrain_epochs = 2;
    cfg.seed = 18;
    RetrainResult r =
        retrain_stage(net, cfg, d, task.train, task.val, task.test);
    CHECK(net.conn().alpha.value.bit_equal(alpha_before));
    CHECK(net.ops().beta.value.bit_equal(beta_before));
    CHECK(r.logs.front().stage == "retrain_soft");
    CHECK(std::isfinite(r.test.auc));
  }

  SECTION("early stopping halts after patience exhausts") {
    Supernet net(task.spec.schema(),
                 {1, false, SupernetMode::fixed, default_op_set()}, 2);
    TrainConfig cfg;
    cfg.learning_rate = 1e-12;  // effectively frozen: val AUC cannot improve
    cfg.batch_size = 2048;
    cfg.retrain_epochs = 30;
    cfg.early_stop_patience = 2;
    cfg.seed = 2;
    RetrainResult r = retrain_stage(net, cfg, preset(PresetKind::parallel, 1),
                                    task.train, task.val, task.test);
    CHECK(r.logs.size() == 3);  // epoch 1 sets best, 2 strikes, stop
    CHECK(r.best_epoch == 1);
  }
}

TEST_CASE("sequential selection ablation", "[search][sequential]") {
  Task task = make_task(202, 3000);
  Supernet net(task.spec.schema(),
               {1, true, SupernetMode::search, default_op_set()}, 21);
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 256;
  cfg.selection_epochs = 4;
  cfg.seed = 21;
  auto logs = sequential_selection(net, cfg, task.train, task.val);
  REQUIRE(logs.size() == 4);
  CHECK(logs[0].stage == "sequential_alpha");
  CHECK(logs[1].stage == "sequential_alpha");
  CHECK(logs[2].stage == "sequential_beta");
  CHECK(logs[3].stage == "sequential_beta");

  // phase 2 left alpha exactly at its frozen discretized encoding
  std::size_t c = net.graph().count();
  for (std::size_t s = 0; s < c; ++s)
    for (std::size_t d = 0; d < c; ++d)
      if (net.conn().masked_true(s, d)) {
        double a = net.conn().alpha.value[s * c + d];
        CHECK((a == 1.0 || a == -1.0));
      }
  bool beta_moved = false;
  for (std::size_t i = 0; i < net.ops().beta.size(); ++i)
    beta_moved = beta_moved || net.ops().beta.value[i] != 0.0;
  CHECK(beta_moved);

  ArchitectureDescriptor d = net.discretize(DiscretizeVariant::hard);
  CHECK_NOTHROW(d.validate());
  d = net.discretize(DiscretizeVariant::soft);
  CHECK_NOTHROW(d.validate());
}
