#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

#include "extrap/estimator.hpp"

using namespace extrap;
namespace nd = extrap::ndgrad;

namespace {

ModelShape small_shape(Task task) {
  ModelShape shape;
  shape.hidden = 8;
  shape.task = task;
  return shape;
}

Dataset small_source(ShiftMode mode, Task task, std::size_t n, std::uint64_t seed) {
  GeneratorSpec spec;
  spec.mode = mode;
  spec.task = task;
  spec.seed = seed;
  auto gen = build_generator(spec);
  Rng rng(seed + 100);
  return sample_source(gen, n, rng);
}

// Loss value with a fixed noise stream, so perturbed evaluations share draws.
double loss_at(const EstimatorModel& model, const SourceBatch& batch, const Tensor& x_tgt, const LossWeights& w,
               ShiftMode mode, std::uint64_t noise_seed) {
  Rng noise(noise_seed);
  return loss(model, batch, &x_tgt, w, mode, &noise).total.item();
}

double full_loss_relative_error(EstimatorModel& model, const SourceBatch& batch, const Tensor& x_tgt,
                                const LossWeights& w, ShiftMode mode, std::uint64_t noise_seed) {
  for (auto& p : model.parameters()) p.zero_grad();
  Rng noise(noise_seed);
  auto res = loss(model, batch, &x_tgt, w, mode, &noise);
  nd::backward(res.total);
  double diff = 0.0, na = 0.0, nn = 0.0;
  const double h = 1e-6;
  for (auto p : model.parameters()) {
    Tensor& v = p.mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i];
      v[i] = keep + h;
      const double up = loss_at(model, batch, x_tgt, w, mode, noise_seed);
      v[i] = keep - h;
      const double down = loss_at(model, batch, x_tgt, w, mode, noise_seed);
      v[i] = keep;
      const double num = (up - down) / (2 * h);
      const double ana = p.grad().size() ? p.grad()[i] : 0.0;
      diff += (num - ana) * (num - ana);
      na += ana * ana;
      nn += num * num;
    }
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
}

}  // namespace

TEST_CASE("weights") {
  LossWeights w;
  CHECK(w.cls == 1.0);
  CHECK(w.recons == 0.1);
  CHECK(w.tgt_likelihood == 0.1);
  CHECK(w.s_distance == 0.01);
  CHECK(w.kl == 0.01);
  CHECK(w.anti_nat == 0.0);
  auto so = w.source_only();
  CHECK(so.recons == 0.0);
  CHECK(so.tgt_likelihood == 0.0);
  CHECK(so.kl == 0.0);
  CHECK(so.cls == 1.0);
  auto r = LossWeights::regression();
  CHECK(r.cls == 0.1);
  CHECK(r.kl == 0.01);
  w.kl = -1.0;
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
}

TEST_CASE("kl and reparameterization floors") {
  Tensor zeros({3, 4});
  auto kl0 = nd::kl_standard_normal(nd::Var::constant(zeros), nd::Var::constant(zeros));
  for (double v : kl0.value().storage()) CHECK(v == 0.0);
  Rng rng(1);
  for (int k = 0; k < 20; ++k) {
    Tensor mu({2, 4}), lv({2, 4});
    for (auto& v : mu.storage()) v = rng.normal();
    for (auto& v : lv.storage()) v = rng.normal();
    auto kl = nd::kl_standard_normal(nd::Var::constant(mu), nd::Var::constant(lv));
    for (double v : kl.value().storage()) CHECK(v >= 0.0);
  }
  Tensor mu({2, 3}, {1, 2, 3, 4, 5, 6}), lv({2, 3}, 0.7);
  auto s = nd::reparameterize(nd::Var::constant(mu), nd::Var::constant(lv), Tensor({2, 3}));
  CHECK(s.value() == mu);
}

TEST_CASE("code density fits") {
  Rng rng(3);
  // Constant codes, one component: mean v, floored variance.
  Tensor same({50, 4});
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t j = 0; j < 4; ++j) same.at(i, j) = 0.5 * j - 1.0;
  auto d1 = fit_code_density(same, 1, {}, rng);
  REQUIRE(d1.components() == 1);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(d1.means[0][j] == doctest::Approx(0.5 * j - 1.0));
    CHECK(d1.variances[0][j] == doctest::Approx(kVarianceFloor));
  }

  // Two separated clusters.
  Tensor two({400, 4});
  std::vector<int> labels(400);
  for (std::size_t i = 0; i < 400; ++i) {
    labels[i] = i % 2;
    for (std::size_t j = 0; j < 4; ++j) two.at(i, j) = (i % 2 ? 5.0 : -5.0) + 0.3 * rng.normal();
  }
  for (bool with_labels : {true, false}) {
    auto d2 = with_labels ? fit_code_density(two, 2, labels, rng) : fit_code_density(two, 2, {}, rng);
    double w = 0.0;
    for (double x : d2.weights) w += x;
    CHECK(w == doctest::Approx(1.0));
    for (std::size_t k = 0; k < 2; ++k) {
      const double target = d2.means[k][0] > 0 ? 5.0 : -5.0;
      for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(d2.means[k][j] - target) < 0.1);
      for (double v : d2.variances[k]) CHECK(v > kVarianceFloor);
    }
  }

  // A component's mean is its own density maximum.
  CodeDensity single{{1.0}, {{0.3, -0.2, 1.0, 0.0}}, {{0.5, 2.0, 1.0, 0.1}}};
  const double at_mean = single.log_density(single.means[0]);
  for (int k = 0; k < 100; ++k) {
    auto probe = rng.normal_vector(4);
    CHECK(single.log_density(probe) <= at_mean);
  }
  CHECK(at_mean == doctest::Approx(single.log_density(nd::Var::constant(Tensor({1, 4}, single.means[0]))).item()));
  CHECK_THROWS(fit_code_density(Tensor({1, 4}), 2, {}, rng));
}

TEST_CASE("naturalness at a unit-variance mode") {
  auto data = small_source(ShiftMode::Dense, Task::BinaryClassification, 64, 1);
  Rng init(2);
  EstimatorModel model(small_shape(Task::BinaryClassification), init);
  model.set_standardization(std::vector<double>(6, 0.0), std::vector<double>(6, 1.0));
  Tensor x_tgt({1, 6}, {0.3, -0.1, 0.2, 0.5, 0.0, 1.0});
  auto mu = model.encode(nd::Var::constant(x_tgt)).mu_c.value().storage();
  model.density() = CodeDensity{{1.0}, {mu}, {std::vector<double>(4, 1.0)}};

  LossWeights w{0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.0};
  SourceBatch batch{data.xs, data.classes, {}};
  auto res = loss(model, batch, &x_tgt, w, ShiftMode::Dense, nullptr);
  CHECK(res.terms.naturalness == doctest::Approx(0.1 * 4 * 0.5 * std::log(2 * std::numbers::pi)).epsilon(1e-12));
  CHECK(res.terms.total == doctest::Approx(0.36757541).epsilon(1e-7));
}

TEST_CASE("loss term floors and guards") {
  auto data = small_source(ShiftMode::Dense, Task::BinaryClassification, 64, 1);
  Rng init(2);
  EstimatorModel model(small_shape(Task::BinaryClassification), init);
  model.set_standardization(std::vector<double>(6, 0.0), std::vector<double>(6, 1.0));
  SourceBatch batch{data.xs, data.classes, {}};
  Tensor x_tgt({1, 6});

  LossWeights none{0, 0, 0, 0, 0, 0, 0};
  CHECK_THROWS_AS(loss(model, batch, &x_tgt, none, ShiftMode::Dense, nullptr), std::invalid_argument);
  // Naturalness needs a density.
  CHECK_THROWS(loss(model, batch, &x_tgt, LossWeights{}, ShiftMode::Dense, nullptr));

  // s-distance is dense-only, and zero at mu_s = 0 is its floor.
  LossWeights sd{0, 0, 0, 0.01, 0, 0, 0};
  sd.cls = 1.0;
  auto dense = loss(model, batch, &x_tgt, sd, ShiftMode::Dense, nullptr);
  auto sparse = loss(model, batch, &x_tgt, sd, ShiftMode::Sparse, nullptr);
  CHECK(dense.terms.s_distance >= 0.0);
  CHECK(sparse.terms.s_distance == 0.0);
  CHECK(dense.terms.total - dense.terms.s_distance == doctest::Approx(sparse.terms.total));
}

TEST_CASE("full training loss passes finite differences") {
  struct Case {
    ShiftMode mode;
    Task task;
  };
  const Case cases[] = {{ShiftMode::Dense, Task::BinaryClassification},
                        {ShiftMode::Sparse, Task::BinaryClassification},
                        {ShiftMode::Dense, Task::Regression},
                        {ShiftMode::Sparse, Task::Regression}};
  auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  int instances = 0;
  for (int k = 0; k < 20; ++k) {
    const Case c = cases[k % 4];
    auto data = small_source(c.mode, c.task, 16, 40 + k);
    Rng init(500 + k);
    EstimatorModel model(small_shape(c.task), init);
    model.set_standardization(std::vector<double>(6, 0.1), std::vector<double>(6, 2.0));
    if (k % 2) model.install_mask(0.3);
    Rng drng(k);
    model.density() = fit_code_density(model.codes(data.xs), c.task == Task::Regression ? 3 : 2, {}, drng);
    LossWeights w = c.task == Task::Regression ? LossWeights::regression() : LossWeights{};
    w.anti_nat = 0.05;
    w.mask_l1 = 0.02;
    Tensor x_tgt({1, 6}, {3.0, -2.0, 1.0, 0.5, 4.0, -1.0});
    SourceBatch batch{data.xs, data.classes, data.values};
    const double err = full_loss_relative_error(model, batch, x_tgt, w, c.mode, 900 + k);
    worst = std::max(worst, err);
    CHECK(err < 1e-4);
    ++instances;
  }
  CHECK(instances == 20);
  MESSAGE("worst relative error " << worst);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 60.0);
}

TEST_CASE("source-only objective is a plain supervised model") {
  // With every weight but classification at zero, the objective and its
  // Adam trajectory match a hand-built encoder-mean + head classifier.
  auto data = small_source(ShiftMode::Dense, Task::BinaryClassification, 128, 3);
  Rng init(7);
  EstimatorModel model(small_shape(Task::BinaryClassification), init);
  model.set_standardization(std::vector<double>(6, 0.0), std::vector<double>(6, 1.0));
  EstimatorModel twin = model.clone();
  Tensor x_tgt({1, 6}, 5.0);
  SourceBatch batch{data.xs, data.classes, {}};
  LossWeights so = LossWeights{}.source_only();

  nd::Adam a(model.parameters(), 2e-3), b(twin.parameters(), 2e-3);
  for (int step = 0; step < 5; ++step) {
    Rng noise(step);
    auto la = loss(model, batch, &x_tgt, so, ShiftMode::Dense, &noise);
    const nd::Var xs = nd::Var::constant(twin.standardize(data.xs));
    auto lb = nd::softmax_cross_entropy(twin.classify(twin.encode(xs).mu_c), data.classes);
    CHECK(std::abs(la.total.item() - lb.item()) < 1e-9);
    a.zero_grad();
    b.zero_grad();
    nd::backward(la.total);
    nd::backward(lb);
    a.step();
    b.step();
    auto pa = model.flat_parameters(), pb = twin.flat_parameters();
    double gap = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i) gap = std::max(gap, std::abs(pa[i] - pb[i]));
    CHECK(gap < 1e-9);
  }
}

TEST_CASE("prediction reads c only and is deterministic") {
  Rng init(1);
  EstimatorModel model(ModelShape{}, init);
  model.set_standardization(std::vector<double>(6, 0.0), std::vector<double>(6, 1.0));
  // The head takes d_c inputs.
  CHECK_THROWS(model.classify(nd::Var::constant(Tensor({1, 6}))));
  CHECK_NOTHROW(model.classify(nd::Var::constant(Tensor({1, 4}))));
  std::vector<double> x = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  auto p1 = model.predict(x), p2 = model.predict(x);
  CHECK(p1.outputs == p2.outputs);
  CHECK(p1.c_hat.size() == 4);
  CHECK(p1.s_hat.size() == 2);
  CHECK(p1.label == (p1.outputs[1] > p1.outputs[0] ? 1 : 0));
}

TEST_CASE("mask install keeps the head's function") {
  Rng init(4);
  EstimatorModel model(ModelShape{}, init);
  model.set_standardization(std::vector<double>(6, 0.0), std::vector<double>(6, 1.0));
  std::vector<double> x = {0.5, -0.2, 0.3, 1.0, -1.0, 0.7};
  auto before = model.predict(x);
  model.install_mask(0.0);
  auto after = model.predict(x);
  for (std::size_t i = 0; i < 2; ++i) CHECK(after.outputs[i] == doctest::Approx(before.outputs[i]).epsilon(1e-12));
  for (double m : model.mask_values()) CHECK(m == doctest::Approx(0.5));
  CHECK_THROWS(model.install_mask());
}

TEST_CASE("checkpoint round trip and clone independence") {
  auto data = small_source(ShiftMode::Sparse, Task::BinaryClassification, 256, 5);
  TrainConfig cfg;
  cfg.mode = ShiftMode::Sparse;
  cfg.epochs = 2;
  cfg.shape.hidden = 8;
  cfg.seed = 3;
  cfg.use_mask = true;
  Tensor one({1, 6}, {1, 2, 3, 4, 5, 6});
  auto res = train(data, &one, cfg);
  auto j = res.model.to_json();
  auto back = EstimatorModel::from_json(j);
  CHECK(back.flat_parameters() == res.model.flat_parameters());
  CHECK(back.to_json().dump() == j.dump());
  CHECK(back.mask_values() == res.model.mask_values());
  CHECK(back.density().means == res.model.density().means);

  auto copy = res.model.clone();
  copy.parameters()[0].mutable_value()[0] += 1.0;
  CHECK(copy.flat_parameters() != res.model.flat_parameters());
}

TEST_CASE("training: determinism, trace, hold-out accuracy") {
  GeneratorSpec spec;
  spec.seed = 2;
  auto gen = build_generator(spec);
  Rng srng(9);
  auto data = sample_source(gen, 10000, srng);
  Rng trng(10);
  auto tgt = sample_target(gen, 12.0, trng);
  TrainConfig cfg;
  cfg.seed = 4;
  auto a = train(data, &tgt.x, cfg);
  auto b = train(data, &tgt.x, cfg);
  CHECK(a.model.flat_parameters() == b.model.flat_parameters());
  REQUIRE(a.trace.size() == 25);

  // Finite trace, smoothed over 5 epochs, non-increasing on >= 80% of steps.
  std::vector<double> smooth;
  for (std::size_t e = 0; e + 5 <= a.trace.size(); ++e) {
    double s = 0.0;
    for (std::size_t k = e; k < e + 5; ++k) {
      CHECK(std::isfinite(a.trace[k].total));
      s += a.trace[k].total / 5.0;
    }
    smooth.push_back(s);
  }
  int down = 0;
  for (std::size_t e = 1; e < smooth.size(); ++e) down += smooth[e] <= smooth[e - 1];
  CHECK(down >= 0.8 * static_cast<double>(smooth.size() - 1));

  Rng hrng(11);
  auto hold = sample_source(gen, 2000, hrng);
  auto preds = a.model.predict(hold.xs);
  int correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i].label == hold.classes[i];
  CHECK(correct / 2000.0 > 0.95);

  std::ostringstream os;
  write_loss_trace_csv(os, a.trace);
  CHECK(os.str().rfind("epoch,total,reconstruction,kl,naturalness,classification,anti_naturalness,s_distance,mask\n", 0) == 0);
}

TEST_CASE("regression head hold-out error") {
  GeneratorSpec spec;
  spec.seed = 2;
  spec.task = Task::Regression;
  auto gen = build_generator(spec);
  Rng srng(9);
  auto data = sample_source(gen, 10000, srng);
  TrainConfig cfg;
  cfg.task = Task::Regression;
  cfg.weights = LossWeights::regression();
  cfg.seed = 1;
  auto res = train(data, nullptr, cfg);
  Rng hrng(12);
  auto hold = sample_source(gen, 2000, hrng);
  auto preds = res.model.predict(hold.xs);
  double mse = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) mse += std::pow(preds[i].value - hold.values[i], 2) / 2000.0;
  CHECK(mse < 0.5);
}

TEST_CASE("divergence aborts with a trace") {
  auto data = small_source(ShiftMode::Dense, Task::BinaryClassification, 64, 1);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.divergence_limit = 1e-6;
  try {
    train(data, nullptr, cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.trace.size() == 1);
  }
  cfg.task = Task::Regression;
  CHECK_THROWS_AS(train(data, nullptr, cfg), std::invalid_argument);
}
