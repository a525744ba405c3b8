#include <cmath>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "gistlab/peft.hpp"
#include "gistlab/trainer.hpp"

using namespace gistlab;

namespace {

OptimSpec schedule() {
  OptimSpec s;
  s.base_lr = 1e-3;
  s.warmup_lr = 1e-7;
  s.warmup_epochs = 2;
  s.total_epochs = 10;
  return s;
}

BackboneConfig small() {
  BackboneConfig c;
  c.image_side = 8;
  c.patch_side = 4;
  c.embed_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.ffn_hidden = 16;
  c.num_classes = 2;
  return c;
}

Splits tiny_data() {
  TaskSpec t;
  t.kind = GeneratorKind::Stripes;
  t.image_side = 8;
  t.num_classes = 2;
  t.noise_std = 0.05;
  SplitSpec s;
  s.train_n = 24;
  s.val_n = 8;
  s.test_n = 16;
  return make_splits(t, s);
}

template <typename T>
ModelGraph<T> adapter_model() {
  ModelGraph<T> m(small());
  m.initialize(1);
  m.reset_head(2, 2);
  attach_peft(m, PeftSpec{}, 3);
  m.set_finetune_freeze();
  return m;
}

FinetuneOptions<float> options(std::uint64_t seed) {
  FinetuneOptions<float> o;
  o.optim.base_lr = 1e-2;
  o.optim.warmup_epochs = 1;
  o.optim.total_epochs = 3;
  o.optim.batch_size = 8;
  o.seed = seed;
  return o;
}

}  // namespace

TEST(Schedule, Endpoints) {
  const auto s = schedule();
  const std::size_t spe = 5, warmup = 10, total = 50;
  EXPECT_EQ(lr_at(0, s, spe), s.warmup_lr);
  EXPECT_EQ(lr_at(warmup, s, spe), s.base_lr);
  EXPECT_NEAR(lr_at(warmup + (total - warmup) / 2, s, spe), s.base_lr / 2, 1e-18);
  EXPECT_EQ(lr_at(total, s, spe), 0.0);
  EXPECT_EQ(lr_at(total + 3, s, spe), 0.0);
}

TEST(Schedule, MonotoneRampThenDecay) {
  const auto s = schedule();
  for (std::size_t i = 1; i <= 10; ++i) EXPECT_GT(lr_at(i, s, 5), lr_at(i - 1, s, 5));
  for (std::size_t i = 11; i <= 50; ++i) EXPECT_LT(lr_at(i, s, 5), lr_at(i - 1, s, 5));
}

TEST(Schedule, NoWarmup) {
  auto s = schedule();
  s.warmup_epochs = 0;
  EXPECT_EQ(lr_at(0, s, 5), s.base_lr);
}

TEST(OptimSpec, Validation) {
  auto s = schedule();
  s.batch_size = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = schedule();
  s.warmup_epochs = 11;
  EXPECT_THROW(s.validate(), ConfigError);
  s = schedule();
  s.beta2 = 1.0;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_EQ(optim_from_json(optim_to_json(schedule()), "optim"), schedule());
}

TEST(AdamW, ThreeStepsMatchHandRecurrence) {
  OptimSpec spec;
  spec.weight_decay = 0.01;
  ParameterStore<double> store;
  auto w = store.add("w", Tensor<double>::from({2}, {1.0, -2.0}, true));
  auto frozen = store.add("frozen", Tensor<double>::from({1}, {3.0}));
  AdamW<double> opt(spec);

  const double grads[3][2] = {{0.5, -1.0}, {0.25, 2.0}, {-0.75, 0.0}};
  const double lrs[3] = {0.1, 0.05, 0.01};
  double x[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 0; t < 3; ++t) {
    w.zero_grad();
    for (int i = 0; i < 2; ++i) w.grad_accumulator()[i] = grads[t][i];
    opt.step(store, lrs[t]);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grads[t][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[t][i] * grads[t][i];
      const double mh = m[i] / (1 - std::pow(0.9, t + 1)), vh = v[i] / (1 - std::pow(0.999, t + 1));
      x[i] = x[i] - lrs[t] * 0.01 * x[i] - lrs[t] * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(w.data()[i], x[i], 1e-15) << "step " << t << " coordinate " << i;
    }
  }
  EXPECT_EQ(frozen.data()[0], 3.0);
  EXPECT_EQ(opt.tracked(), (std::vector<std::string>{"w"}));
  EXPECT_EQ(opt.steps(), 3u);
}

TEST(AdamW, SkipsParametersWithoutGradient) {
  ParameterStore<double> store;
  auto a = store.add("a", Tensor<double>::from({1}, {1.0}, true));
  AdamW<double> opt(OptimSpec{});
  opt.step(store, 0.1);
  EXPECT_EQ(a.data()[0], 1.0);
  EXPECT_TRUE(opt.tracked().empty());
}

TEST(Finetune, DeterministicForSeed) {
  const auto data = tiny_data();
  auto run = [&](std::uint64_t seed, std::string* metrics) {
    auto m = adapter_model<float>();
    TraditionalObjective<float> objective;
    std::ostringstream out;
    auto o = options(seed);
    o.metrics = &out;
    const auto rec = finetune(m, objective, data, o);
    *metrics = out.str();
    return std::make_pair(rec.to_json().dump(), snapshot_parameters(m.params(), false));
  };
  std::string m1, m2, m3;
  const auto a = run(5, &m1), b = run(5, &m2), c = run(6, &m3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(m1, m2);
  EXPECT_NE(a.second, c.second);
}

TEST(Finetune, MetricsStream) {
  const auto data = tiny_data();
  auto m = adapter_model<float>();
  TraditionalObjective<float> objective;
  std::ostringstream out;
  auto o = options(1);
  o.metrics = &out;
  const auto rec = finetune(m, objective, data, o);
  EXPECT_EQ(rec.steps.size(), 9u);  // 3 epochs x ceil(24 / 8)
  EXPECT_EQ(rec.epochs.size(), 3u);
  std::istringstream in(out.str());
  std::string line;
  std::map<std::string, int> kinds;
  while (std::getline(in, line)) ++kinds[nlohmann::json::parse(line).at("kind").get<std::string>()];
  EXPECT_EQ(kinds["step"], 9);
  EXPECT_EQ(kinds["epoch"], 3);
  EXPECT_EQ(kinds["final"], 1);
  EXPECT_EQ(rec.steps.front().lr, o.optim.warmup_lr);
  EXPECT_EQ(rec.test_predictions.size(), data.test.size());
  EXPECT_FALSE(rec.to_json().contains("elapsed_seconds"));
  EXPECT_TRUE(rec.to_json(true).contains("elapsed_seconds"));
}

TEST(Finetune, BackboneBitwiseUnchanged) {
  const auto data = tiny_data();
  auto m = adapter_model<float>();
  const auto before = snapshot_parameters(m.params(), true);
  const auto trainable_before = snapshot_parameters(m.params(), false);
  TraditionalObjective<float> objective;
  finetune(m, objective, data, options(2));
  EXPECT_EQ(snapshot_parameters(m.params(), true), before);
  EXPECT_NE(snapshot_parameters(m.params(), false), trainable_before);
  EXPECT_TRUE(before.contains("cls_token"));
}

TEST(Finetune, AuditCatchesChangedFrozenParameter) {
  const auto data = tiny_data();
  auto m = adapter_model<float>();
  TraditionalObjective<float> objective;
  auto o = options(3);
  o.after_backward = [](std::size_t step, const ParameterStore<float>& params) {
    if (step == 1) params.at("cls_token").data()[0] += 1.0f;
  };
  EXPECT_THROW(finetune(m, objective, data, o), Error);
}

TEST(Finetune, NonFiniteLossNamesTheStep) {
  const auto data = tiny_data();
  auto m = adapter_model<float>();
  m.head_w.data()[0] = std::numeric_limits<float>::quiet_NaN();
  TraditionalObjective<float> objective;
  try {
    finetune(m, objective, data, options(4));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(Finetune, RejectsMismatchedImages) {
  auto data = tiny_data();
  data.train.image_side = 16;
  auto m = adapter_model<float>();
  TraditionalObjective<float> objective;
  EXPECT_THROW(finetune(m, objective, data, options(1)), DimensionError);
}

TEST(Evaluate, AccuracyMatchesPredictions) {
  const auto data = tiny_data();
  auto m = adapter_model<double>();
  TraditionalObjective<double> objective;
  const auto r = evaluate(m, objective, data.test, 5);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.test.size(); ++i) hits += r.predictions[i] == data.test.labels[i];
  EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(hits) / data.test.size());
  // Batch size does not change predictions.
  EXPECT_EQ(evaluate(m, objective, data.test, 256).predictions, r.predictions);
}
