#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "gistlab/gradcheck.hpp"
#include "gistlab/ops.hpp"
#include "gistlab/rng.hpp"

using namespace gistlab;
using D = double;

namespace {

Tensor<D> random_tensor(Shape shape, Rng& rng, bool grad = false) {
  std::vector<D> v(numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor<D>::from(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST(Tensor, FactoriesAndShapes) {
  auto t = Tensor<float>::full({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(shape_string(t.shape()), "[2x3]");
  EXPECT_FLOAT_EQ(Tensor<float>::scalar(4.0f).item(), 4.0f);
  EXPECT_THROW(t.item(), DimensionError);
  EXPECT_THROW(Tensor<float>::from({2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Tensor, CloneIsDetached) {
  auto a = Tensor<D>::from({2}, {1, 2}, true);
  auto b = a.clone();
  b.data()[0] = 7;
  EXPECT_EQ(a.data()[0], 1);
  EXPECT_FALSE(a.same(b));
}

TEST(Ops, MatmulMatchesTripleLoop) {
  Rng rng(3);
  const std::size_t m = 5, k = 7, n = 4;
  auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
  Tape<D> tape;
  auto c = ops::matmul(tape, a, b);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      long double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += static_cast<long double>(a.data()[i * k + p]) * b.data()[p * n + j];
      EXPECT_NEAR(c.data()[i * n + j], static_cast<D>(s), 1e-12);
    }
  }
  EXPECT_THROW(ops::matmul(tape, a, a), DimensionError);
}

TEST(Ops, SoftmaxKnownValues) {
  Tape<D> tape;
  auto p = ops::softmax_t(tape, Tensor<D>::from({1, 2}, {2, 0}), 1.0);
  EXPECT_NEAR(p.data()[0], 0.880797, 1e-6);
  EXPECT_NEAR(p.data()[1], 0.119203, 1e-6);
  // Temperature divides the logits.
  auto q = ops::softmax_t(tape, Tensor<D>::from({1, 2}, {6, 0}), 3.0);
  EXPECT_NEAR(q.data()[0], p.data()[0], 1e-15);
  // Large logits do not overflow.
  auto r = ops::softmax_t(tape, Tensor<D>::from({1, 3}, {1000, 1000, 0}), 1.0);
  EXPECT_NEAR(r.data()[0], 0.5, 1e-15);
  EXPECT_THROW(ops::softmax_t(tape, p, 0.0), ParameterError);
}

TEST(Ops, LayerNormNormalizesRows) {
  Rng rng(5);
  auto x = random_tensor({3, 8}, rng);
  auto gamma = Tensor<D>::full({8}, 1.0), beta = Tensor<D>::zeros({8});
  Tape<D> tape;
  auto y = ops::layer_norm(tape, x, gamma, beta, 1e-6);
  for (std::size_t r = 0; r < 3; ++r) {
    auto row = x.data().subspan(r * 8, 8);
    const D mean = std::accumulate(row.begin(), row.end(), 0.0) / 8;
    D var = 0;
    for (D v : row) var += (v - mean) * (v - mean);
    var /= 8;
    for (std::size_t i = 0; i < 8; ++i) {
      EXPECT_NEAR(y.data()[r * 8 + i], (row[i] - mean) / std::sqrt(var + 1e-6), 1e-12);
    }
  }
}

TEST(Ops, GeluIsErfForm) {
  Tape<D> tape;
  auto y = ops::gelu(tape, Tensor<D>::from({3}, {1.0, 0.0, -2.0}));
  EXPECT_NEAR(y.data()[0], 0.8413447460685429, 1e-15);
  EXPECT_EQ(y.data()[1], 0.0);
  EXPECT_NEAR(y.data()[2], -2.0 * 0.5 * std::erfc(2.0 / std::sqrt(2.0)), 1e-15);
}

TEST(Ops, CrossEntropyOfUniformLogitsIsLogK) {
  Tape<D> tape;
  for (std::size_t k : {2u, 5u, 10u}) {
    std::vector<int> labels{0, static_cast<int>(k) - 1};
    auto l = ops::cross_entropy(tape, Tensor<D>::zeros({2, k}), labels);
    EXPECT_NEAR(l.item(), std::log(static_cast<D>(k)), 1e-15);
  }
  std::vector<int> bad{3};
  EXPECT_THROW(ops::cross_entropy(tape, Tensor<D>::zeros({1, 3}), bad), IndexError);
}

TEST(Ops, KlDivergenceTwoClassDirectSum) {
  const D t = 2.0;
  Tape<D> tape;
  auto kl = ops::kl_divergence(tape, Tensor<D>::from({1, 2}, {1.0, -1.0}), Tensor<D>::from({1, 2}, {0.5, 0.0}), t);
  const D p0 = 1 / (1 + std::exp(-2.0 / t)), q0 = 1 / (1 + std::exp(-0.5 / t));
  const D expected = p0 * std::log(p0 / q0) + (1 - p0) * std::log((1 - p0) / (1 - q0));
  EXPECT_NEAR(kl.item(), expected, 1e-15);
}

TEST(Ops, PatchifyOrder) {
  // 1 image, 1 channel, 4x4, patch 2: patch 1 is the top-right 2x2 block.
  std::vector<D> px(16);
  std::iota(px.begin(), px.end(), 0.0);
  Tape<D> tape;
  auto p = ops::patchify(tape, Tensor<D>::from({1, 1, 4, 4}, px), 2);
  ASSERT_EQ(p.shape(), (Shape{1, 4, 4}));
  EXPECT_EQ(std::vector<D>(p.data().begin() + 4, p.data().begin() + 8), (std::vector<D>{2, 3, 6, 7}));
}

TEST(Tape, BackwardAccumulatesIntoLeaves) {
  auto x = Tensor<D>::from({2}, {1.0, 2.0}, true);
  Tape<D> tape;
  auto y = ops::sum(tape, ops::mul(tape, x, x));
  tape.backward(y);
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  tape.backward(y);
  EXPECT_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(Tape, ConstantsAndInferenceRecordNothing) {
  auto c = Tensor<D>::from({2}, {1.0, 2.0});
  auto x = Tensor<D>::from({2}, {1.0, 2.0}, true);
  Tape<D> tape;
  auto y = ops::add(tape, c, c);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
  Tape<D> inference(Tape<D>::Mode::Inference);
  auto z = ops::add(inference, x, x);
  EXPECT_EQ(inference.size(), 0u);
  EXPECT_FALSE(z.requires_grad());
}

TEST(Tape, RejectsForeignIntermediates) {
  auto x = Tensor<D>::from({2}, {1.0, 2.0}, true);
  Tape<D> a, b;
  auto y = ops::scale(a, x, 2.0);
  EXPECT_THROW(ops::scale(b, y, 2.0), TapeError);
}

TEST(GradCheck, EveryPrimitivePasses) {
  for (unsigned seed : {0u, 7u}) {
    const auto report = run_gradcheck(primitive_gradcheck_cases(seed), 1e-4);
    EXPECT_TRUE(report.passed()) << report.to_string();
    EXPECT_GE(report.entries.size(), 29u);
  }
}

// A cross-entropy whose backward forgets the 1/B factor must be caught.
TEST(GradCheck, DetectsBrokenBackward) {
  Rng rng(11);
  auto logits = random_tensor({3, 4}, rng, true);
  const std::vector<int> labels{0, 2, 3};
  LossFn broken = [&labels, &logits](Tape<D>& tape) {
    Tape<D> values(Tape<D>::Mode::Inference);
    auto out = Tensor<D>::scalar(ops::cross_entropy(values, logits, labels).item());
    return tape.record("broken_ce", out, {logits}, [out, logits, labels]() mutable {
      Tape<D> v(Tape<D>::Mode::Inference);
      auto p = ops::softmax_t(v, logits, 1.0);
      auto g = logits.grad_accumulator();
      const std::size_t k = logits.dim(1);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const bool hit = static_cast<int>(i % k) == labels[i / k];
        g[i] += out.grad()[0] * (p.data()[i] - (hit ? 1.0 : 0.0));
      }
    });
  };
  EXPECT_GT(finite_diff_check(broken, logits).max_rel_error, 0.5);

  LossFn correct = [&labels, &logits](Tape<D>& tape) { return ops::cross_entropy(tape, logits, labels); };
  EXPECT_LT(finite_diff_check(correct, logits).max_rel_error, 1e-6);
}
