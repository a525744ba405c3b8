#include <gtest/gtest.h>

#include "gistlab/peft.hpp"
#include "gistlab/rng.hpp"

using namespace gistlab;
using D = double;

namespace {

BackboneConfig small() {
  BackboneConfig c;
  c.image_side = 8;
  c.patch_side = 4;
  c.embed_dim = 16;
  c.num_layers = 3;
  c.num_heads = 2;
  c.ffn_hidden = 32;
  c.num_classes = 4;
  return c;
}

ModelGraph<D> model() {
  ModelGraph<D> m(small());
  m.initialize(1);
  return m;
}

Tensor<D> logits(const ModelGraph<D>& m) {
  Rng rng(2);
  std::vector<D> px(2 * 64);
  for (auto& p : px) p = rng.uniform();
  Tape<D> tape(Tape<D>::Mode::Inference);
  auto state = m.encode(tape, m.build_input(tape, Tensor<D>::from({2, 1, 8, 8}, px)));
  return m.classify(tape, state, TokenRole::Cls);
}

PeftSpec spec(PeftKind kind) {
  PeftSpec s;
  s.kind = kind;
  s.prompt_len = 5;
  return s;
}

}  // namespace

TEST(Peft, AdapterCountMatchesClosedForm) {
  auto m = model();
  const auto p = attach_peft(m, spec(PeftKind::Adapter), 3);
  EXPECT_EQ(p.scalar_count(), adapter_parameter_count(16, 4, 3));
  EXPECT_EQ(p.scalar_count(), 3u * (16 * 4 + 4 + 4 * 16 + 16));
  m.set_finetune_freeze();
  EXPECT_EQ(trainable_parameter_count(m).without_head, p.scalar_count());
  EXPECT_EQ(trainable_parameter_count(m).with_head, p.scalar_count() + 16 * 4 + 4);
}

TEST(Peft, ClosedFormsAtViTBaseScale) {
  EXPECT_EQ(adapter_parameter_count(768, 4, 12), 82992u);
  EXPECT_EQ(prompt_parameter_count(768, 20), 15360u);
  EXPECT_EQ(scale_shift_parameter_count(768, 12), 2u * 768 * (7 * 12 + 1));
}

TEST(Peft, FirstLayerOnlyAdapter) {
  auto m = model();
  auto s = spec(PeftKind::Adapter);
  s.attach = PeftAttach::FirstLayerOnly;
  EXPECT_EQ(attach_peft(m, s, 3).scalar_count(), adapter_parameter_count(16, 4, 1));
  EXPECT_TRUE(m.adapters[0].has_value());
  EXPECT_FALSE(m.adapters[1].has_value());
}

TEST(Peft, FreshAdapterAndScaleShiftAreIdentity) {
  for (auto kind : {PeftKind::Adapter, PeftKind::ScaleShift}) {
    auto m = model();
    const auto before = logits(m);
    attach_peft(m, spec(kind), 4);
    const auto after = logits(m);
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before.data()[i], after.data()[i]) << peft_kind_name(kind);
  }
}

TEST(Peft, AdapterBranchIsScaled) {
  // With up.bias set to 1 the branch adds exactly s to every residual
  // feature of every token.
  auto a = model();
  auto b = model();
  auto s1 = spec(PeftKind::Adapter), s2 = s1;
  s1.adapter_scale = 0.1;
  s2.adapter_scale = 0.2;
  attach_peft(a, s1, 5);
  attach_peft(b, s2, 5);
  for (auto* m : {&a, &b}) {
    for (auto& ad : m->adapters) {
      for (auto& v : ad->up_b.data()) v = 1.0;
    }
  }
  const auto base = logits(model());
  const auto la = logits(a), lb = logits(b);
  bool moved = false;
  for (std::size_t i = 0; i < base.size(); ++i) moved = moved || la.data()[i] != base.data()[i];
  EXPECT_TRUE(moved);
  EXPECT_NE(la.data()[0], lb.data()[0]);
}

TEST(Peft, PromptsFollowClassToken) {
  auto m = model();
  EXPECT_EQ(attach_peft(m, spec(PeftKind::Prompt), 6).scalar_count(), prompt_parameter_count(16, 5));
  Tape<D> tape(Tape<D>::Mode::Inference);
  auto state = m.insert_prompts(tape, m.build_input(tape, Tensor<D>::zeros({1, 1, 8, 8})));
  EXPECT_EQ(state.block(TokenRole::Prompt), (std::pair<std::size_t, std::size_t>{1, 5}));
  EXPECT_EQ(state.block(TokenRole::Patch), (std::pair<std::size_t, std::size_t>{6, 4}));
  // The prompt rows enter without positional embedding.
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(state.tokens.data()[1 * 16 + j], m.prompts.data()[j]);
  // A second insertion is a no-op.
  EXPECT_EQ(m.insert_prompts(tape, state).length(), state.length());
}

TEST(Peft, ScaleShiftCountAndNames) {
  auto m = model();
  EXPECT_EQ(attach_peft(m, spec(PeftKind::ScaleShift), 7).scalar_count(), scale_shift_parameter_count(16, 3));
  EXPECT_TRUE(m.params().contains(param_names::head_scale_shift("gamma")));
  EXPECT_TRUE(m.params().contains(param_names::scale_shift(2, ScaleShiftPoint::FfnOut, "beta")));
}

TEST(Peft, DuplicateKindRejected) {
  auto m = model();
  attach_peft(m, spec(PeftKind::Adapter), 1);
  EXPECT_THROW(attach_peft(m, spec(PeftKind::Adapter), 2), ConfigError);
  auto bad = spec(PeftKind::Prompt);
  bad.prompt_len = 0;
  EXPECT_THROW(attach_peft(m, bad, 3), ConfigError);
}

TEST(Peft, FrozenBackboneAfterAttach) {
  auto m = model();
  attach_peft(m, spec(PeftKind::Adapter), 1);
  attach_peft(m, spec(PeftKind::Prompt), 2);
  m.set_finetune_freeze();
  for (const auto& name : m.backbone_parameter_names()) EXPECT_TRUE(!m.params().at(name).requires_grad()) << name;
  EXPECT_TRUE(m.prompts.requires_grad());
}
