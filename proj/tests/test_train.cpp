#include <doctest.h>

#include <cmath>

#include "cni/sweep.hpp"
#include "cni/train.hpp"

using namespace cni;

namespace {

RunConfig tiny_config(Defense defense, int rank, std::uint64_t seed) {
  RunConfig cfg;
  cfg.model.arch = "mlp";
  cfg.model.input_shape = {8};
  cfg.model.hidden = {8};
  cfg.model.classes = 3;
  cfg.model.defense = defense;
  cfg.model.rank = rank;
  cfg.train.epochs = 3;
  cfg.train.batch_size = 16;
  cfg.train.lr = 0.05;
  cfg.train.lr_milestones = {2};
  cfg.train.weight_decay = 1e-4;
  cfg.train.v_weight_decay = 1e-3;
  cfg.train.loss_mix = 0.5;
  cfg.train.seed = seed;
  cfg.train.attack.epsilon = 0.03;
  cfg.train.attack.k = 2;
  cfg.data.classes = 3;
  cfg.data.dim = 8;
  cfg.data.per_class = 12;
  cfg.data.val_per_class = 6;
  cfg.data.test_per_class = 6;
  cfg.data.separation = 0.6;
  cfg.eval.noise_draws = 2;
  return cfg;
}

}  // namespace

TEST_CASE("sgd_update: plain gradient descent when momentum and decay are zero") {
  RngStream rng = RngStream::from_seed(200);
  Model m = Model::mlp({3}, {}, 2, rng);
  auto reg = m.registry();
  std::vector<double> w_before = reg[0].tensor->values();
  std::vector<std::vector<double>> grads(reg.size());
  for (std::size_t i = 0; i < reg.size(); ++i) grads[i].assign(reg[i].tensor->size(), 0.5);
  SgdState st;
  sgd_update(reg, grads, st, 0.1, 0.0, 0.0, 0.0);
  for (std::size_t j = 0; j < w_before.size(); ++j) {
    CHECK(reg[0].tensor->values()[j] == doctest::Approx(w_before[j] - 0.1 * 0.5).epsilon(1e-15));
  }
}

TEST_CASE("sgd_update: decay-only analytic shrink factors") {
  RngStream rng = RngStream::from_seed(201);
  Model m = Model::mlp({4}, {}, 2, rng);
  RngStream nrng = RngStream::from_seed(202);
  m.attach_noise(Defense::CniW, 2, nrng);
  auto reg = m.registry();

  const double lr = 0.1, wd = 0.01, vwd = 0.002;
  std::vector<std::vector<double>> zero_grads(reg.size());
  for (std::size_t i = 0; i < reg.size(); ++i) zero_grads[i].assign(reg[i].tensor->size(), 0.0);

  std::vector<std::vector<double>> before;
  for (const auto& p : reg) before.push_back(p.tensor->values());

  SgdState st;
  sgd_update(reg, zero_grads, st, lr, 0.0, wd, vwd);

  for (std::size_t i = 0; i < reg.size(); ++i) {
    double factor = 1.0;
    switch (reg[i].kind) {
      case ParamKind::Weight: factor = 1.0 - lr * wd; break;
      case ParamKind::NoiseV: factor = 1.0 - lr * (wd + vwd); break;
      case ParamKind::Bias:
      case ParamKind::NoiseS: factor = 1.0; break;
    }
    for (std::size_t j = 0; j < before[i].size(); ++j) {
      CHECK(reg[i].tensor->values()[j] == doctest::Approx(before[i][j] * factor).epsilon(1e-14));
    }
  }

  // Decay bookkeeping: V got exactly wd + vwd, s and biases exactly 0.
  for (std::size_t i = 0; i < reg.size(); ++i) {
    double want = reg[i].kind == ParamKind::Weight ? wd
                  : reg[i].kind == ParamKind::NoiseV ? wd + vwd
                                                     : 0.0;
    CHECK(st.applied_decay[i] == want);
  }
}

TEST_CASE("sgd_update: freeze_noise leaves noise parameters untouched") {
  RngStream rng = RngStream::from_seed(203);
  Model m = Model::mlp({4}, {}, 2, rng);
  RngStream nrng = RngStream::from_seed(204);
  m.attach_noise(Defense::CniW, 2, nrng);
  auto reg = m.registry();
  std::vector<std::vector<double>> grads(reg.size());
  for (std::size_t i = 0; i < reg.size(); ++i) grads[i].assign(reg[i].tensor->size(), 1.0);
  std::vector<std::vector<double>> before;
  for (const auto& p : reg) before.push_back(p.tensor->values());

  SgdState st;
  sgd_update(reg, grads, st, 0.1, 0.9, 1e-3, 1e-3, /*freeze_noise=*/true);
  for (std::size_t i = 0; i < reg.size(); ++i) {
    bool is_noise = reg[i].kind == ParamKind::NoiseS || reg[i].kind == ParamKind::NoiseV;
    if (is_noise) {
      CHECK(reg[i].tensor->values() == before[i]);
    } else if (!before[i].empty()) {
      CHECK(reg[i].tensor->values() != before[i]);
    }
  }
}

TEST_CASE("lr_schedule milestones") {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.lr_milestones = {30, 40};
  cfg.lr_decay_factor = 10.0;
  CHECK(lr_schedule(0, cfg) == doctest::Approx(0.1));
  CHECK(lr_schedule(29, cfg) == doctest::Approx(0.1));
  CHECK(lr_schedule(35, cfg) == doctest::Approx(0.01));
  CHECK(lr_schedule(45, cfg) == doctest::Approx(0.001));
  CHECK_THROWS_AS(lr_schedule(-1, cfg), ContractError);
}

TEST_CASE("train step with loss_mix 0 never invokes the attack") {
  RunConfig cfg = tiny_config(Defense::CniW, 2, 42);
  cfg.train.loss_mix = 0.0;
  RngStream root = RngStream::from_seed(cfg.train.seed);
  Trainer tr(build_model(cfg.model, root), cfg);
  Dataset ds = gen_synthetic(3, 8, 10, 0.6, 7, "train");
  StepMetrics m = tr.step(ds.batch_inputs(0, 16), ds.batch_labels(0, 16), 0.05);
  CHECK_FALSE(m.attack_ran);
  CHECK(std::isnan(m.adv_loss));
  CHECK(m.clean_loss == m.loss);
}

TEST_CASE("loss_mix 1 with zero radius matches clean training bitwise") {
  Dataset ds = gen_synthetic(3, 8, 10, 0.6, 8, "train");
  Tensor x = ds.batch_inputs(0, 20);
  std::vector<int> y = ds.batch_labels(0, 20);

  auto run_step = [&](double mix, double eps) {
    RunConfig cfg = tiny_config(Defense::CniW, 2, 99);
    cfg.train.loss_mix = mix;
    cfg.train.attack.epsilon = eps;
    RngStream root = RngStream::from_seed(cfg.train.seed);
    Trainer tr(build_model(cfg.model, root), cfg);
    tr.step(x, y, 0.05);
    std::vector<std::vector<double>> out;
    for (const auto& [name, t] : tr.model().named_parameters()) out.push_back(t->values());
    return out;
  };
  auto adv_path = run_step(1.0, 0.0);
  auto clean_path = run_step(0.0, 0.03);
  REQUIRE(adv_path.size() == clean_path.size());
  for (std::size_t i = 0; i < adv_path.size(); ++i) CHECK(adv_path[i] == clean_path[i]);
}

TEST_CASE("fifty steps reduce the loss on separable blobs") {
  RunConfig cfg = tiny_config(Defense::CniW, 2, 11);
  cfg.train.loss_mix = 0.5;
  cfg.train.attack.epsilon = 0.02;
  RngStream root = RngStream::from_seed(cfg.train.seed);
  Trainer tr(build_model(cfg.model, root), cfg);
  Dataset ds = gen_synthetic(3, 8, 20, 0.7, 12, "train");
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 50; ++i) {
    StepMetrics m = tr.step(ds.inputs, ds.labels, 0.05);
    if (i == 0) first = m.loss;
    last = m.loss;
  }
  CHECK(last < first);
}

TEST_CASE("non-finite loss raises a training error with diagnostics") {
  RunConfig cfg = tiny_config(Defense::None, 0, 13);
  RngStream root = RngStream::from_seed(cfg.train.seed);
  Model m = build_model(cfg.model, root);
  for (auto& p : m.registry()) {
    if (p.kind == ParamKind::Weight) {
      for (double& v : p.tensor->values()) v = 1e308;
    }
  }
  Trainer tr(std::move(m), cfg);
  Dataset ds = gen_synthetic(3, 8, 10, 0.6, 14, "train");
  CHECK_THROWS_AS(tr.step(ds.batch_inputs(0, 8), ds.batch_labels(0, 8), 0.05), TrainingError);
}

TEST_CASE("select_checkpoint rules") {
  TrainHistory h;
  CHECK_THROWS_AS(select_checkpoint(h), ContractError);

  Checkpoint a;
  a.epoch = 0;
  a.val_accuracy = 0.5;
  h.push_back(a);
  CHECK(select_checkpoint(h).epoch == 0);

  Checkpoint b = a;
  b.epoch = 1;
  b.val_accuracy = 0.9;
  Checkpoint c = a;
  c.epoch = 2;
  c.val_accuracy = 0.9;
  h.push_back(b);
  h.push_back(c);
  CHECK(select_checkpoint(h).epoch == 1);  // tie -> earliest

  h[2].val_accuracy = 0.95;
  CHECK(select_checkpoint(h).epoch == 2);  // strictly increasing -> last
}

TEST_CASE("checkpoint serialization round-trips bit-exactly") {
  RunConfig cfg = tiny_config(Defense::CniW, 2, 21);
  RngStream root = RngStream::from_seed(cfg.train.seed);
  Trainer tr(build_model(cfg.model, root), cfg);
  Dataset ds = gen_synthetic(3, 8, 10, 0.6, 22, "train");
  tr.step(ds.batch_inputs(0, 12), ds.batch_labels(0, 12), 0.05);

  Checkpoint ck = tr.snapshot(0, 0.75);
  auto bytes = serialize_checkpoint(ck);
  Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(back.epoch == ck.epoch);
  CHECK(back.val_accuracy == ck.val_accuracy);
  CHECK(back.rng == ck.rng);
  CHECK(back.config == ck.config);

  auto path = std::filesystem::temp_directory_path() / "cni_test_ckpt.bin";
  save_checkpoint(ck, path);
  Checkpoint from_disk = load_checkpoint(path);
  CHECK(serialize_checkpoint(from_disk) == bytes);
  std::filesystem::remove(path);

  // The restored model evaluates identically on a fixed batch.
  Model restored = model_from_checkpoint(back);
  auto s1 = tr.model().make_site_streams(RngStream::from_seed(23));
  auto s2 = restored.make_site_streams(RngStream::from_seed(23));
  Tensor y1 = tr.model().predict(ds.batch_inputs(0, 8), s1);
  Tensor y2 = restored.predict(ds.batch_inputs(0, 8), s2);
  CHECK(y1.values() == y2.values());
}

TEST_CASE("corrupt checkpoints are rejected with format errors") {
  RunConfig cfg = tiny_config(Defense::None, 0, 24);
  RngStream root = RngStream::from_seed(cfg.train.seed);
  Trainer tr(build_model(cfg.model, root), cfg);
  Checkpoint ck = tr.snapshot(0, 0.5);
  auto bytes = serialize_checkpoint(ck);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), FormatError);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(deserialize_checkpoint(truncated), FormatError);

  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize_checkpoint(trailing), FormatError);
}

TEST_CASE("identical config and seed give bit-identical checkpoints") {
  auto run = [&]() {
    RunConfig cfg = tiny_config(Defense::CniW, 2, 31);
    SweepDatasets data = build_datasets(cfg.data, cfg.train.seed);
    TrainedRun tr = train_run(cfg, data.train, data.val);
    return serialize_checkpoint(tr.best);
  };
  CHECK(run() == run());
}

TEST_CASE("frozen zero noise with loss_mix 0 reproduces a plain SGD trajectory") {
  const int D = 6, H = 4, C = 3, B = 12;
  RunConfig cfg = tiny_config(Defense::CniW, 2, 51);
  cfg.model.input_shape = {D};
  cfg.model.hidden = {H};
  cfg.model.classes = C;
  cfg.train.loss_mix = 0.0;
  cfg.train.freeze_noise = true;
  cfg.train.weight_decay = 0.0;
  cfg.train.v_weight_decay = 0.0;
  cfg.train.momentum = 0.9;
  const double lr = 0.05;

  RngStream root = RngStream::from_seed(cfg.train.seed);
  Model model = build_model(cfg.model, root);
  for (auto& p : model.registry()) {
    if (p.kind == ParamKind::NoiseS || p.kind == ParamKind::NoiseV) {
      for (double& v : p.tensor->values()) v = 0.0;
    }
  }

  // Reference copies of the initial parameters.
  std::vector<double> w1, b1, w2, b2;
  {
    auto reg = model.registry();
    for (const auto& p : reg) {
      if (p.name == "fc0.w") w1 = p.tensor->values();
      if (p.name == "fc0.b") b1 = p.tensor->values();
      if (p.name == "fc1.w") w2 = p.tensor->values();
      if (p.name == "fc1.b") b2 = p.tensor->values();
    }
  }
  std::vector<double> vw1(w1.size(), 0.0), vb1(b1.size(), 0.0), vw2(w2.size(), 0.0),
      vb2(b2.size(), 0.0);

  Trainer tr(std::move(model), cfg);
  Dataset ds = gen_synthetic(C, D, 10, 0.6, 52, "train");

  for (int step = 0; step < 5; ++step) {
    Tensor x = ds.batch_inputs(0, B);
    std::vector<int> y = ds.batch_labels(0, B);
    tr.step(x, y, lr);

    // Reference forward: h = relu(x W1 + b1), logits = h W2 + b2.
    const auto& xv = x.values();
    std::vector<double> pre(B * H), act(B * H), logits(B * C);
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        double acc = 0.0;
        for (int d = 0; d < D; ++d) acc += xv[b * D + d] * w1[d * H + h];
        pre[b * H + h] = acc + b1[h];
        act[b * H + h] = pre[b * H + h] > 0 ? pre[b * H + h] : 0.0;
      }
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int h = 0; h < H; ++h) acc += act[b * H + h] * w2[h * C + c];
        logits[b * C + c] = acc + b2[c];
      }
    // d(loss)/d(logits) via log-sum-exp softmax.
    std::vector<double> dlogits(B * C);
    for (int b = 0; b < B; ++b) {
      double mx = logits[b * C];
      for (int c = 1; c < C; ++c) mx = std::max(mx, logits[b * C + c]);
      double sum = 0.0;
      for (int c = 0; c < C; ++c) sum += std::exp(logits[b * C + c] - mx);
      double lse = mx + std::log(sum);
      double sc = 1.0 / B;
      for (int c = 0; c < C; ++c) {
        double pcb = std::exp(logits[b * C + c] - lse);
        dlogits[b * C + c] = (pcb - (y[b] == c ? 1.0 : 0.0)) * sc;
      }
    }
    // Backward through the second layer.
    std::vector<double> dact(B * H), dw2(w2.size()), db2(b2.size(), 0.0);
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        double acc = 0.0;
        for (int c = 0; c < C; ++c) acc += dlogits[b * C + c] * w2[h * C + c];
        dact[b * H + h] = acc;
      }
    for (int h = 0; h < H; ++h)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int b = 0; b < B; ++b) acc += act[b * H + h] * dlogits[b * C + c];
        dw2[h * C + c] = acc;
      }
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) db2[c] += dlogits[b * C + c];
    // Through relu and the first layer.
    std::vector<double> dpre(B * H), dw1(w1.size()), db1(b1.size(), 0.0);
    for (int i = 0; i < B * H; ++i) dpre[i] = pre[i] > 0 ? dact[i] : 0.0;
    for (int d = 0; d < D; ++d)
      for (int h = 0; h < H; ++h) {
        double acc = 0.0;
        for (int b = 0; b < B; ++b) acc += xv[b * D + d] * dpre[b * H + h];
        dw1[d * H + h] = acc;
      }
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) db1[h] += dpre[b * H + h];
    // Momentum SGD, no decay.
    auto upd = [&](std::vector<double>& w, std::vector<double>& v,
                   const std::vector<double>& g) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = 0.9 * v[i] + g[i];
        w[i] -= lr * v[i];
      }
    };
    upd(w1, vw1, dw1);
    upd(b1, vb1, db1);
    upd(w2, vw2, dw2);
    upd(b2, vb2, db2);

    for (const auto& [name, t] : tr.model().named_parameters()) {
      if (name == "fc0.w") CHECK(t->values() == w1);
      if (name == "fc0.b") CHECK(t->values() == b1);
      if (name == "fc1.w") CHECK(t->values() == w2);
      if (name == "fc1.b") CHECK(t->values() == b2);
    }
  }
}

TEST_CASE("evaluation of a noiseless model has zero std across draws") {
  RngStream rng = RngStream::from_seed(61);
  Model m = Model::mlp({8}, {6}, 3, rng);
  Dataset ds = gen_synthetic(3, 8, 15, 0.6, 62, "test");
  EvalResult res = evaluate_on(m, ds, 5, RngStream::from_seed(63));
  CHECK(res.std_accuracy == 0.0);
  for (double a : res.per_draw) CHECK(a == res.per_draw[0]);
}

TEST_CASE("constant-output model scores exactly 1/C on balanced data") {
  RngStream rng = RngStream::from_seed(64);
  Model m = Model::mlp({8}, {}, 4, rng);
  for (auto& p : m.registry()) {
    for (double& v : p.tensor->values()) v = 0.0;
  }
  Dataset ds = gen_synthetic(4, 8, 25, 0.6, 65, "test");
  EvalResult res = evaluate_on(m, ds, 3, RngStream::from_seed(66));
  CHECK(res.mean_accuracy == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("a memorizing model reaches accuracy 1.0 on its train split") {
  RunConfig cfg = tiny_config(Defense::None, 0, 71);
  cfg.train.loss_mix = 0.0;
  cfg.train.epochs = 40;
  cfg.train.lr = 0.2;
  cfg.train.lr_milestones = {};
  cfg.data.per_class = 5;
  cfg.data.separation = 0.7;
  SweepDatasets data = build_datasets(cfg.data, cfg.train.seed);
  TrainedRun run = train_run(cfg, data.train, data.train);
  EvalResult res = evaluate_on(run.model, data.train, 1, RngStream::from_seed(72));
  CHECK(res.mean_accuracy == 1.0);
}

TEST_CASE("restore puts parameters and streams back") {
  RunConfig cfg = tiny_config(Defense::CniW, 1, 81);
  RngStream root = RngStream::from_seed(cfg.train.seed);
  Trainer tr(build_model(cfg.model, root), cfg);
  Dataset ds = gen_synthetic(3, 8, 10, 0.6, 82, "train");

  Checkpoint before = tr.snapshot(0, 0.0);
  tr.step(ds.batch_inputs(0, 10), ds.batch_labels(0, 10), 0.05);
  Checkpoint after = tr.snapshot(1, 0.0);
  CHECK(serialize_checkpoint(before) != serialize_checkpoint(after));

  tr.restore(before);
  Checkpoint again = tr.snapshot(0, 0.0);
  CHECK(serialize_checkpoint(again) == serialize_checkpoint(before));
}
