#include <cmath>

#include <gtest/gtest.h>

#include "gistlab/gist.hpp"
#include "gistlab/ops.hpp"
#include "gistlab/peft.hpp"
#include "gistlab/rng.hpp"

using namespace gistlab;
using D = double;

namespace {

Tensor<D> random_logits(std::size_t b, std::size_t k, Rng& rng, bool grad = false) {
  std::vector<D> v(b * k);
  for (auto& x : v) x = 2.0 * rng.normal();
  return Tensor<D>::from({b, k}, std::move(v), grad);
}

BackboneConfig small() {
  BackboneConfig c;
  c.image_side = 8;
  c.patch_side = 4;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ffn_hidden = 32;
  c.num_classes = 3;
  return c;
}

Tensor<D> images(std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<D> px(batch * 64);
  for (auto& p : px) p = rng.uniform();
  return Tensor<D>::from({batch, 1, 8, 8}, std::move(px));
}

}  // namespace

TEST(GistConfig, Defaults) {
  GistLossConfig c;
  EXPECT_EQ(c.gist_len, 1u);
  EXPECT_EQ(c.temperature, 3.0);
  EXPECT_EQ(c.mu, 0.5);
  EXPECT_EQ(c.lambda, 0.75);
  EXPECT_EQ(c.interaction, InteractionKind::Bkld);
}

TEST(GistConfig, Validation) {
  GistLossConfig c;
  c.interaction = InteractionKind::None;
  EXPECT_THROW(c.validate(), ConfigError);
  c.lambda = 0.0;
  EXPECT_NO_THROW(c.validate());
  c = GistLossConfig{};
  c.temperature = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = GistLossConfig{};
  c.gist_len = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_interaction("kl"), ConfigError);
}

TEST(GistConfig, JsonRoundTripIsStrict) {
  GistLossConfig c;
  c.mu = 0.25;
  c.interaction = InteractionKind::Cosine;
  EXPECT_EQ(gist_from_json(gist_to_json(c), "gist"), c);
  auto j = gist_to_json(c);
  j["extra"] = 1;
  EXPECT_THROW(gist_from_json(j, "gist"), ConfigError);
  j = gist_to_json(c);
  j.erase("mu");
  EXPECT_THROW(gist_from_json(j, "gist"), ConfigError);
}

TEST(InjectGist, AppendsWithoutPositionalEmbedding) {
  ModelGraph<D> m(small());
  m.initialize(1);
  auto token = Tensor<D>::from({2, 16}, std::vector<D>(32, 0.5), true);
  Tape<D> tape;
  auto base = m.build_input(tape, images(3, 2));
  auto state = inject_gist(tape, base, token);
  EXPECT_EQ(state.length(), base.length() + 2);
  EXPECT_EQ(state.block(TokenRole::Gist), (std::pair<std::size_t, std::size_t>{5, 2}));
  EXPECT_NO_THROW(state.validate());
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(state.tokens.data()[(b * 7 + 5) * 16 + j], 0.5);
  }
  // The prefix is untouched.
  for (std::size_t i = 0; i < 5 * 16; ++i) EXPECT_EQ(state.tokens.data()[i], base.tokens.data()[i]);
  EXPECT_THROW(inject_gist(tape, state, token), LayoutError);
  EXPECT_THROW(inject_gist(tape, base, Tensor<D>::zeros({1, 8})), DimensionError);
}

TEST(InjectGist, GoesAfterPrompts) {
  ModelGraph<D> m(small());
  m.initialize(1);
  PeftSpec p;
  p.kind = PeftKind::Prompt;
  p.prompt_len = 3;
  attach_peft(m, p, 2);
  GistObjective<D> objective(GistLossConfig{});
  objective.prepare(m, 3);
  Tape<D> tape(Tape<D>::Mode::Inference);
  auto state = objective.forward(tape, m, images(1, 4));
  ASSERT_EQ(state.length(), 1u + 3 + 4 + 1);
  EXPECT_EQ(state.layout[1], TokenRole::Prompt);
  EXPECT_EQ(state.layout.back(), TokenRole::Gist);
}

TEST(Bkld, SymmetricNonNegativeAndZeroOnEqual) {
  Rng rng(5);
  Tape<D> tape;
  for (int i = 0; i < 50; ++i) {
    auto a = random_logits(4, 6, rng), b = random_logits(4, 6, rng);
    for (D t : {0.5, 1.0, 3.0}) {
      auto ab = bkld(tape, a, b, t), ba = bkld(tape, b, a, t);
      EXPECT_GE(ab.l_bkl.item(), 0.0);
      EXPECT_EQ(ab.l_bkl.item(), ba.l_bkl.item());
      EXPECT_EQ(ab.l_fkl.item(), ba.l_rkl.item());
      EXPECT_NEAR(bkld(tape, a, a, t).l_bkl.item(), 0.0, 1e-12);
    }
  }
  // Softened distributions are shift invariant.
  auto a = random_logits(2, 4, rng);
  auto shifted = Tensor<D>::from({2, 4}, std::vector<D>(a.data().begin(), a.data().end()));
  for (auto& v : shifted.data()) v += 3.0;
  EXPECT_NEAR(bkld(tape, a, shifted, 3.0).l_bkl.item(), 0.0, 1e-12);
  EXPECT_THROW(bkld(tape, a, a, 0.0), ParameterError);
}

TEST(Bkld, GradientReachesBothSides) {
  Rng rng(6);
  auto a = random_logits(3, 4, rng, true), b = random_logits(3, 4, rng, true);
  Tape<D> tape;
  tape.backward(bkld(tape, a, b, 3.0).l_bkl);
  ASSERT_TRUE(a.has_grad() && b.has_grad());
  D na = 0, nb = 0;
  for (D g : a.grad()) na += g * g;
  for (D g : b.grad()) nb += g * g;
  EXPECT_GT(na, 0.0);
  EXPECT_GT(nb, 0.0);
}

TEST(Substitutes, MatchHandValues) {
  Tape<D> tape;
  auto a = Tensor<D>::from({2, 2}, {1, 0, 0, 2}), b = Tensor<D>::from({2, 2}, {0, 1, 0, 1});
  EXPECT_NEAR(interaction_substitute(tape, a, b, InteractionKind::Mse).item(), (1 + 1 + 0 + 1) / 4.0, 1e-15);
  // Row 0 orthogonal, row 1 parallel.
  EXPECT_NEAR(interaction_substitute(tape, a, b, InteractionKind::Cosine).item(), 1.0 - 0.5, 1e-15);
  // A zero row has similarity 0.
  auto z = Tensor<D>::zeros({2, 2});
  EXPECT_NEAR(interaction_substitute(tape, z, b, InteractionKind::Cosine).item(), 1.0, 1e-15);
  EXPECT_THROW(interaction_substitute(tape, a, b, InteractionKind::Bkld), ConfigError);
}

TEST(OverallLoss, UniformLogitsArithmetic) {
  // Equal zero logits: L_cls = L_gist = ln K, BKLD = 0.
  const std::vector<int> labels{0, 1};
  LossInputs<D> in{Tensor<D>::zeros({2, 4}, true), Tensor<D>::zeros({2, 4}, true), labels, std::nullopt};
  Tape<D> tape;
  const auto out = overall_loss(tape, in, GistLossConfig{});
  EXPECT_NEAR(out.breakdown.l_all, 1.5 * std::log(4.0), 1e-15);
  EXPECT_EQ(out.breakdown.l_bkl, 0.0);
}

TEST(OverallLoss, RecomposesFromBreakdown) {
  Rng rng(7);
  const std::vector<int> labels{0, 2, 1};
  for (auto kind : {InteractionKind::Bkld, InteractionKind::Mse, InteractionKind::Cosine}) {
    GistLossConfig cfg;
    cfg.interaction = kind;
    LossInputs<D> in{random_logits(3, 3, rng), random_logits(3, 3, rng), labels, std::nullopt};
    Tape<D> tape;
    const auto b = overall_loss(tape, in, cfg).breakdown;
    EXPECT_NEAR(b.l_all, b.l_cls + 0.5 * b.l_gist + 0.75 * b.l_interaction, 1e-12);
    if (kind == InteractionKind::Bkld) {
      EXPECT_EQ(b.l_interaction, b.l_bkl);
      EXPECT_NEAR(b.l_bkl, b.l_fkl + b.l_rkl, 1e-15);
    }
    EXPECT_NEAR(b.l_cls, ops::cross_entropy(tape, in.s_cls, labels).item(), 1e-15);
  }
}

TEST(OverallLoss, DerivativeInLambdaIsInteraction) {
  Rng rng(8);
  const std::vector<int> labels{1, 0};
  LossInputs<D> in{random_logits(2, 3, rng), random_logits(2, 3, rng), labels, std::nullopt};
  GistLossConfig lo, hi;
  lo.lambda = 0.75 - 1e-3;
  hi.lambda = 0.75 + 1e-3;
  Tape<D> tape;
  const auto a = overall_loss(tape, in, lo).breakdown, b = overall_loss(tape, in, hi).breakdown;
  EXPECT_NEAR((b.l_all - a.l_all) / 2e-3, a.l_bkl, 1e-9);
}

TEST(OverallLoss, ZeroCoefficientsStayOutOfTheGraph) {
  Rng rng(9);
  const std::vector<int> labels{1, 0};
  GistLossConfig cfg;
  cfg.mu = 0.0;
  cfg.lambda = 0.0;
  LossInputs<D> in{random_logits(2, 3, rng, true), random_logits(2, 3, rng, true), labels, std::nullopt};
  Tape<D> tape;
  const auto out = overall_loss(tape, in, cfg);
  EXPECT_GT(out.breakdown.l_gist, 0.0);
  EXPECT_GT(out.breakdown.l_bkl, 0.0);
  EXPECT_EQ(out.breakdown.l_all, out.breakdown.l_cls);
  tape.backward(out.l_all);
  EXPECT_TRUE(in.s_cls.has_grad());
  EXPECT_FALSE(in.s_gist.has_grad());
}

TEST(OverallLoss, AuxPromptLossNeedsPromptLogits) {
  GistLossConfig cfg;
  cfg.aux_vpt_loss = true;
  const std::vector<int> labels{0};
  LossInputs<D> in{Tensor<D>::zeros({1, 2}), Tensor<D>::zeros({1, 2}), labels, std::nullopt};
  Tape<D> tape;
  EXPECT_THROW(overall_loss(tape, in, cfg), ConfigError);
  in.s_vpt = Tensor<D>::zeros({1, 2});
  EXPECT_NEAR(overall_loss(tape, in, cfg).breakdown.l_all, 2.5 * std::log(2.0), 1e-15);
}

TEST(GistObjective, PrepareAddsExactlyGistLenTimesD) {
  for (std::size_t len : {1u, 4u}) {
    ModelGraph<D> m(small());
    m.initialize(1);
    m.set_finetune_freeze();
    const auto before = trainable_parameter_count(m).with_head;
    GistLossConfig cfg;
    cfg.gist_len = len;
    GistObjective<D> objective(cfg);
    objective.prepare(m, 2);
    EXPECT_EQ(trainable_parameter_count(m).with_head - before, 16 * len);
    // A second prepare keeps the existing token.
    const D first = m.params().at(kGistTokenName).data()[0];
    objective.prepare(m, 3);
    EXPECT_EQ(m.params().at(kGistTokenName).data()[0], first);
  }
}

TEST(GistObjective, DisabledIsTraditional) {
  ModelGraph<D> m(small());
  m.initialize(1);
  GistLossConfig cfg;
  cfg.enabled = false;
  GistObjective<D> objective(cfg);
  objective.prepare(m, 2);
  EXPECT_FALSE(m.params().contains(kGistTokenName));
  EXPECT_EQ(objective.name(), "traditional");
  const std::vector<int> labels{0, 1};
  Tape<D> t1, t2;
  const auto a = objective.compute(t1, m, images(2, 3), labels);
  const auto b = TraditionalObjective<D>().compute(t2, m, images(2, 3), labels);
  EXPECT_EQ(a.loss.item(), b.loss.item());
  EXPECT_EQ(a.breakdown, b.breakdown);
}

TEST(GistObjective, PredictReadsOnlyClassLogits) {
  ModelGraph<D> m(small());
  m.initialize(1);
  GistObjective<D> objective(GistLossConfig{});
  objective.prepare(m, 2);
  Tape<D> tape(Tape<D>::Mode::Inference);
  auto state = objective.forward(tape, m, images(4, 5));
  const auto p = predict(tape, m, state);
  EXPECT_EQ(p, argmax_rows(m.classify(tape, state, TokenRole::Cls)));
}
