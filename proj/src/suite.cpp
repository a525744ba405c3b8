#include "gistlab/suite.hpp"

#include "gistlab/gist.hpp"
#include "gistlab/ops.hpp"
#include "gistlab/peft.hpp"
#include "gistlab/rng.hpp"

namespace gistlab {

namespace {

using D = double;

BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.image_side = 8;
  c.patch_side = 4;
  c.channels = 1;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ffn_hidden = 32;
  c.num_classes = 3;
  return c;
}

// Well-spread random values so every nonlinearity is exercised away from its
// flat regions; LayerNorm and scale-shift gammas stay near one.
void randomize(ModelGraph<D>& model, Rng& rng) {
  for (const auto& e : model.params().entries()) {
    const bool gamma = e.name.find("gamma") != std::string::npos;
    Tensor<D> t = e.tensor;
    for (auto& v : t.data()) v = gamma ? 1.0 + 0.1 * rng.normal() : 0.2 * rng.normal();
  }
}

struct Fixture {
  std::shared_ptr<ModelGraph<D>> model;
  Tensor<D> images;
  std::vector<int> labels;
};

Fixture make_fixture(unsigned seed, const std::vector<PeftSpec>& peft, std::size_t gist_len, bool freeze) {
  Rng rng(derive_seed(seed, 0x5017E));
  auto model = std::make_shared<ModelGraph<D>>(tiny_backbone());
  model->initialize(derive_seed(seed, 1));
  for (std::size_t i = 0; i < peft.size(); ++i) attach_peft(*model, peft[i], derive_seed(seed, 2 + i));
  if (gist_len > 0) {
    model->params().add(kGistTokenName, Tensor<D>::zeros({gist_len, model->config().embed_dim}, true));
  }
  randomize(*model, rng);
  if (freeze) model->set_finetune_freeze();

  const std::size_t batch = 3;
  const auto& c = model->config();
  std::vector<D> pixels(batch * c.channels * c.image_side * c.image_side);
  for (auto& p : pixels) p = rng.uniform();
  Fixture f{model, Tensor<D>::from({batch, c.channels, c.image_side, c.image_side}, std::move(pixels)), {}};
  for (std::size_t i = 0; i < batch; ++i) f.labels.push_back(static_cast<int>(rng.below(c.num_classes)));
  return f;
}

GradCheckCase objective_case(std::string name, unsigned seed, double h, std::vector<PeftSpec> peft,
                             std::optional<GistLossConfig> gist, bool freeze) {
  return {std::move(name), [=] {
            auto f = make_fixture(seed, peft, gist ? gist->gist_len : 0, freeze);
            std::shared_ptr<Objective<D>> objective;
            if (gist) {
              objective = std::make_shared<GistObjective<D>>(*gist);
            } else {
              objective = std::make_shared<TraditionalObjective<D>>();
            }
            LossFn loss = [f, objective](Tape<D>& tape) {
              return objective->compute(tape, *f.model, f.images, f.labels).loss;
            };
            std::vector<Tensor<D>> trainable;
            for (const auto& e : f.model->params().entries()) {
              if (!e.frozen()) trainable.push_back(e.tensor);
            }
            return finite_diff_check(loss, trainable, h).max_rel_error;
          }};
}

GradCheckCase encoder_layer_case(unsigned seed, double h) {
  return {"model.encoder_layer", [=] {
            auto f = make_fixture(seed, {}, 0, false);
            const auto& m = *f.model;
            Rng rng(derive_seed(seed, 0xE1));
            const std::size_t s = m.config().num_patches() + 1, d = m.config().embed_dim;
            std::vector<D> x(f.images.dim(0) * s * d), w(x.size());
            for (auto& v : x) v = rng.normal();
            // Small readout weights keep the loss, and with it the round-off
            // on the key bias's exactly-zero gradient, small.
            for (auto& v : w) v = 0.1 * rng.normal();
            auto tokens = Tensor<D>::from({f.images.dim(0), s, d}, std::move(x), true);
            auto weights = Tensor<D>::from(tokens.shape(), std::move(w));
            LossFn loss = [&m, tokens, weights](Tape<D>& tape) {
              SequenceState<D> state{tokens, {TokenRole::Cls}};
              state.layout.insert(state.layout.end(), tokens.dim(1) - 1, TokenRole::Patch);
              auto out = m.encoder_layer(tape, state, 0);
              return ops::sum(tape, ops::mul(tape, out.tokens, weights));
            };
            std::vector<Tensor<D>> inputs{tokens};
            const auto& layer = m.layers[0];
            for (const auto& t : {layer.ln1_gamma, layer.ln1_beta, layer.wq, layer.bq, layer.wk, layer.bk, layer.wv,
                                  layer.bv, layer.wo, layer.bo, layer.ln2_gamma, layer.ln2_beta, layer.w1, layer.b1,
                                  layer.w2, layer.b2}) {
              inputs.push_back(t);
            }
            return finite_diff_check(loss, inputs, h).max_rel_error;
          }};
}

}  // namespace

std::vector<GradCheckCase> model_gradcheck_cases(unsigned seed, double h) {
  PeftSpec adapter;
  adapter.kind = PeftKind::Adapter;
  PeftSpec prompt;
  prompt.kind = PeftKind::Prompt;
  prompt.prompt_len = 3;
  PeftSpec ssf;
  ssf.kind = PeftKind::ScaleShift;

  GistLossConfig full;  // T = 3, mu = 0.5, lambda = 0.75, BKLD
  GistLossConfig mse = full;
  mse.interaction = InteractionKind::Mse;
  GistLossConfig cosine = full;
  cosine.interaction = InteractionKind::Cosine;
  GistLossConfig long_aux = full;
  long_aux.gist_len = 2;
  long_aux.aux_vpt_loss = true;

  std::vector<GradCheckCase> cases;
  cases.push_back(encoder_layer_case(seed, h));
  cases.push_back(objective_case("model.cross_entropy", seed, h, {}, std::nullopt, false));
  cases.push_back(objective_case("model.full_loss(bkld)", seed, h, {adapter}, full, false));
  cases.push_back(objective_case("model.full_loss(bkld,frozen backbone)", seed, h, {adapter}, full, true));
  cases.push_back(objective_case("model.full_loss(mse)", seed, h, {adapter}, mse, false));
  cases.push_back(objective_case("model.full_loss(cosine)", seed, h, {adapter}, cosine, false));
  cases.push_back(
      objective_case("model.full_loss(prompt,ssf,gist_len=2,aux)", seed, h, {prompt, ssf}, long_aux, false));
  return cases;
}

GradCheckReport run_full_gradcheck(unsigned seed, double threshold, double h) {
  auto cases = primitive_gradcheck_cases(seed, h);
  for (auto& c : model_gradcheck_cases(seed, h)) cases.push_back(std::move(c));
  return run_gradcheck(cases, threshold);
}

}  // namespace gistlab
