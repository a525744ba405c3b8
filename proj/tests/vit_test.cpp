#include <cmath>

#include <gtest/gtest.h>

#include "gistlab/ops.hpp"
#include "gistlab/rng.hpp"
#include "gistlab/vit.hpp"

using namespace gistlab;
using D = double;

namespace {

BackboneConfig small() {
  BackboneConfig c;
  c.image_side = 8;
  c.patch_side = 4;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 4;
  c.ffn_hidden = 32;
  c.num_classes = 5;
  return c;
}

Tensor<D> images(std::size_t batch, const BackboneConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<D> px(batch * c.channels * c.image_side * c.image_side);
  for (auto& p : px) p = rng.uniform();
  return Tensor<D>::from({batch, c.channels, c.image_side, c.image_side}, std::move(px));
}

}  // namespace

TEST(Backbone, ValidateRejectsBadShapes) {
  auto c = small();
  c.patch_side = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(small().validate());
}

TEST(Backbone, ParameterInventory) {
  const auto c = small();
  ModelGraph<D> m(c);
  const std::size_t d = 16, f = 32, per_layer = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
  const std::size_t expected = (16 * d + d) + d + 5 * d + 2 * per_layer + (d * 5 + 5);
  EXPECT_EQ(m.params().total_scalars(), expected);
  EXPECT_EQ(m.pos_embed.shape(), (Shape{5, d}));
  EXPECT_EQ(m.cls_token.shape(), (Shape{1, d}));
}

TEST(Backbone, InitializationIsSeededAndBounded) {
  ModelGraph<D> a(small()), b(small()), c(small());
  a.initialize(1);
  b.initialize(1);
  c.initialize(2);
  bool differs = false;
  for (std::size_t i = 0; i < a.params().entries().size(); ++i) {
    const auto x = a.params().entries()[i].tensor.data();
    const auto y = b.params().entries()[i].tensor.data();
    const auto z = c.params().entries()[i].tensor.data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
    differs = differs || !std::equal(x.begin(), x.end(), z.begin());
  }
  EXPECT_TRUE(differs);
  for (D w : a.layers[0].wq.data()) EXPECT_LE(std::abs(w), 0.04);
  for (D g : a.layers[1].ln2_gamma.data()) EXPECT_EQ(g, 1.0);
  for (D v : a.layers[1].bq.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, InputLayoutAndShapes) {
  const auto c = small();
  ModelGraph<D> m(c);
  m.initialize(3);
  Tape<D> tape;
  auto state = m.build_input(tape, images(2, c, 1));
  EXPECT_EQ(state.tokens.shape(), (Shape{2, 5, 16}));
  EXPECT_EQ(state.layout.front(), TokenRole::Cls);
  EXPECT_EQ(state.block(TokenRole::Patch), (std::pair<std::size_t, std::size_t>{1, 4}));
  auto out = m.encode(tape, state);
  EXPECT_EQ(out.tokens.shape(), (Shape{2, 5, 16}));
  EXPECT_EQ(m.classify(tape, out, TokenRole::Cls).shape(), (Shape{2, 5}));
}

TEST(Backbone, AttentionRowsAreDistributions) {
  const auto c = small();
  ModelGraph<D> m(c);
  m.initialize(4);
  Tape<D> tape(Tape<D>::Mode::Inference);
  AttentionProbe<D> probe;
  m.encode(tape, m.build_input(tape, images(3, c, 2)), &probe);
  ASSERT_EQ(probe.layers.size(), 2u);
  for (const auto& a : probe.layers) {
    ASSERT_EQ(a.shape(), (Shape{3 * 4, 5, 5}));
    for (std::size_t r = 0; r < a.size() / 5; ++r) {
      D s = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_GE(a.data()[r * 5 + j], 0.0);
        s += a.data()[r * 5 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Backbone, SamplesAreIndependentWithinABatch) {
  const auto c = small();
  ModelGraph<D> m(c);
  m.initialize(5);
  auto batch = images(3, c, 3);
  Tape<D> tape(Tape<D>::Mode::Inference);
  auto all = m.classify(tape, m.encode(tape, m.build_input(tape, batch)), TokenRole::Cls);
  const std::size_t px = c.image_side * c.image_side;
  std::vector<D> one(batch.data().begin() + px, batch.data().begin() + 2 * px);
  auto single = Tensor<D>::from({1, 1, c.image_side, c.image_side}, one);
  auto s = m.classify(tape, m.encode(tape, m.build_input(tape, single)), TokenRole::Cls);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(s.data()[k], all.data()[5 + k], 1e-13);
}

TEST(Backbone, CloneSharesNothing) {
  ModelGraph<D> m(small());
  m.initialize(6);
  auto copy = m.clone();
  copy.head_w.data()[0] += 1.0;
  copy.params().at("pos_embed").data()[0] += 1.0;
  EXPECT_NE(copy.head_w.data()[0], m.head_w.data()[0]);
  EXPECT_NE(copy.pos_embed.data()[0], m.pos_embed.data()[0]);
}

TEST(Backbone, FinetuneFreezeLeavesOnlyHeadTrainable) {
  ModelGraph<D> m(small());
  m.initialize(7);
  m.reset_head(3, 9);
  m.set_finetune_freeze();
  EXPECT_EQ(m.head_w.shape(), (Shape{16, 3}));
  for (const auto& e : m.params().entries()) {
    EXPECT_EQ(e.frozen(), !e.name.starts_with("head.")) << e.name;
  }
  EXPECT_FALSE(m.cls_token.requires_grad());
}

TEST(Backbone, PrecisionConversionKeepsValues) {
  ModelGraph<D> m(small());
  m.initialize(8);
  auto f = convert_model<float>(m);
  auto back = convert_model<D>(f);
  for (std::size_t i = 0; i < m.params().entries().size(); ++i) {
    const auto a = m.params().entries()[i].tensor.data();
    const auto b = back.params().entries()[i].tensor.data();
    for (std::size_t j = 0; j < a.size(); ++j) EXPECT_EQ(static_cast<float>(a[j]), static_cast<float>(b[j]));
  }
}

TEST(Backbone, ArgmaxTiesGoLow) {
  auto logits = Tensor<D>::from({2, 3}, {1, 3, 3, 0, 0, 0});
  EXPECT_EQ(argmax_rows(logits), (std::vector<int>{1, 0}));
}
