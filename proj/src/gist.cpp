#include "gistlab/gist.hpp"

#include <cmath>

#include "gistlab/json_fields.hpp"
#include "gistlab/ops.hpp"
#include "gistlab/rng.hpp"

namespace gistlab {

const char* interaction_name(InteractionKind kind) {
  switch (kind) {
    case InteractionKind::Bkld: return "bkld";
    case InteractionKind::Mse: return "mse";
    case InteractionKind::Cosine: return "cosine";
    case InteractionKind::None: return "none";
  }
  return "?";
}

InteractionKind parse_interaction(const std::string& name) {
  for (auto k : {InteractionKind::Bkld, InteractionKind::Mse, InteractionKind::Cosine, InteractionKind::None}) {
    if (name == interaction_name(k)) return k;
  }
  throw ConfigError("unknown interaction '" + name + "' (expected bkld, mse, cosine or none)");
}

void GistLossConfig::validate() const {
  if (gist_len == 0) throw ConfigError("gist.gist_len must be at least 1");
  if (!(temperature > 0.0)) throw ConfigError("gist.temperature must be positive");
  if (!std::isfinite(mu) || !std::isfinite(lambda)) throw ConfigError("gist.mu and gist.lambda must be finite");
  if (interaction == InteractionKind::None && lambda != 0.0) {
    throw ConfigError("gist.interaction is none but gist.lambda is " + std::to_string(lambda));
  }
}

nlohmann::json gist_to_json(const GistLossConfig& c) {
  return {{"enabled", c.enabled}, {"gist_len", c.gist_len},   {"temperature", c.temperature},
          {"mu", c.mu},           {"lambda", c.lambda},       {"interaction", interaction_name(c.interaction)},
          {"aux_vpt_loss", c.aux_vpt_loss}};
}

GistLossConfig gist_from_json(const nlohmann::json& j, const std::string& path) {
  FieldReader r(j, path);
  GistLossConfig c;
  c.enabled = r.boolean("enabled");
  c.gist_len = r.count("gist_len");
  c.temperature = r.number("temperature");
  c.mu = r.number("mu");
  c.lambda = r.number("lambda");
  c.interaction = parse_interaction(r.string("interaction"));
  c.aux_vpt_loss = r.boolean("aux_vpt_loss");
  r.finish();
  c.validate();
  return c;
}

template <typename T>
SequenceState<T> inject_gist(Tape<T>& tape, const SequenceState<T>& state, const Tensor<T>& token) {
  if (state.has(TokenRole::Gist)) throw LayoutError("inject_gist: the sequence already holds gist tokens");
  const std::size_t d = state.tokens.dim(2);
  if (token.rank() != 2 || token.dim(1) != d) {
    throw DimensionError("inject_gist: token " + shape_string(token.shape()) + " does not match width " +
                         std::to_string(d));
  }
  SequenceState<T> out{ops::concat_tokens<T>(tape, {state.tokens, ops::broadcast_batch(tape, token, state.batch())}),
                       state.layout};
  out.layout.insert(out.layout.end(), token.dim(0), TokenRole::Gist);
  return out;
}

template <typename T>
TokenLosses<T> token_losses(Tape<T>& tape, const Tensor<T>& s_cls, const Tensor<T>& s_gist,
                            std::span<const int> labels) {
  if (s_cls.shape() != s_gist.shape()) {
    throw DimensionError("token_losses: " + shape_string(s_cls.shape()) + " vs " + shape_string(s_gist.shape()));
  }
  return {ops::cross_entropy(tape, s_cls, labels), ops::cross_entropy(tape, s_gist, labels)};
}

template <typename T>
BkldTerms<T> bkld(Tape<T>& tape, const Tensor<T>& s_cls, const Tensor<T>& s_gist, T temperature) {
  if (!(temperature > T(0))) throw ParameterError("bkld: temperature must be positive");
  auto fkl = ops::kl_divergence(tape, s_cls, s_gist, temperature);
  auto rkl = ops::kl_divergence(tape, s_gist, s_cls, temperature);
  return {fkl, rkl, ops::add(tape, fkl, rkl)};
}

template <typename T>
Tensor<T> interaction_substitute(Tape<T>& tape, const Tensor<T>& s_cls, const Tensor<T>& s_gist,
                                 InteractionKind kind) {
  switch (kind) {
    case InteractionKind::Mse: return ops::mse(tape, s_cls, s_gist);
    case InteractionKind::Cosine: return ops::cosine_distance(tape, s_cls, s_gist);
    default: throw ConfigError(std::string("interaction_substitute: '") + interaction_name(kind) + "' is not a substitute");
  }
}

template <typename T>
OverallLoss<T> overall_loss(Tape<T>& tape, const LossInputs<T>& in, const GistLossConfig& cfg) {
  cfg.validate();
  if (!cfg.enabled) throw ConfigError("overall_loss: the gist objective is disabled");
  if (cfg.aux_vpt_loss && !in.s_vpt) throw ConfigError("overall_loss: aux_vpt_loss needs prompt logits");
  Tape<T> values(Tape<T>::Mode::Inference);
  auto on = [&](double coefficient) -> Tape<T>& { return coefficient != 0.0 ? tape : values; };

  LossBreakdown b;
  auto l_cls = ops::cross_entropy(tape, in.s_cls, in.labels);
  auto l_gist = ops::cross_entropy(on(cfg.mu), in.s_gist, in.labels);
  b.l_cls = l_cls.item();
  b.l_gist = l_gist.item();
  auto total = l_cls;
  if (cfg.mu != 0.0) total = ops::add(tape, total, ops::scale(tape, l_gist, static_cast<T>(cfg.mu)));

  if (cfg.interaction != InteractionKind::None) {
    Tape<T>& t = on(cfg.lambda);
    Tensor<T> interaction;
    if (cfg.interaction == InteractionKind::Bkld) {
      auto terms = bkld(t, in.s_cls, in.s_gist, static_cast<T>(cfg.temperature));
      b.l_fkl = terms.l_fkl.item();
      b.l_rkl = terms.l_rkl.item();
      b.l_bkl = terms.l_bkl.item();
      interaction = terms.l_bkl;
    } else {
      interaction = interaction_substitute(t, in.s_cls, in.s_gist, cfg.interaction);
    }
    b.l_interaction = interaction.item();
    if (cfg.lambda != 0.0) total = ops::add(tape, total, ops::scale(tape, interaction, static_cast<T>(cfg.lambda)));
  }
  if (cfg.aux_vpt_loss) {
    auto l_vpt = ops::cross_entropy(tape, *in.s_vpt, in.labels);
    b.l_aux_vpt = l_vpt.item();
    total = ops::add(tape, total, l_vpt);
  }
  b.l_all = total.item();
  return {total, b};
}

template <typename T>
std::vector<int> predict(Tape<T>& tape, const ModelGraph<T>& model, const SequenceState<T>& state) {
  return argmax_rows(model.classify(tape, state, TokenRole::Cls));
}

template <typename T>
GistObjective<T>::GistObjective(GistLossConfig cfg) : cfg_(cfg) {
  cfg_.validate();
}

template <typename T>
std::string GistObjective<T>::name() const {
  return cfg_.enabled ? "gist" : traditional_.name();
}

template <typename T>
void GistObjective<T>::prepare(ModelGraph<T>& model, std::uint64_t seed) {
  if (!cfg_.enabled) return;
  const Shape shape{cfg_.gist_len, model.config().embed_dim};
  if (model.params().contains(kGistTokenName)) {
    if (model.params().at(kGistTokenName).shape() != shape) {
      throw ConfigError("gist token in the model has shape " + shape_string(model.params().at(kGistTokenName).shape()) +
                        ", config asks for " + shape_string(shape));
    }
    model.params().set_frozen(kGistTokenName, false);
    return;
  }
  Rng rng(seed);
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.truncated_normal(ModelGraph<T>::kInitStd));
  model.params().add(kGistTokenName, Tensor<T>::from(shape, std::move(values), true));
}

template <typename T>
SequenceState<T> GistObjective<T>::forward(Tape<T>& tape, const ModelGraph<T>& model, const Tensor<T>& images,
                                           AttentionProbe<T>* probe) const {
  if (!cfg_.enabled) return traditional_.forward(tape, model, images, probe);
  if (!model.params().contains(kGistTokenName)) throw ConfigError("gist objective: model has no gist token");
  auto state = inject_gist(tape, model.build_input(tape, images), model.params().at(kGistTokenName));
  return model.encode(tape, state, probe);
}

template <typename T>
ObjectiveOutput<T> GistObjective<T>::compute(Tape<T>& tape, const ModelGraph<T>& model, const Tensor<T>& images,
                                             std::span<const int> labels) const {
  if (!cfg_.enabled) return traditional_.compute(tape, model, images, labels);
  auto state = forward(tape, model, images);
  LossInputs<T> in;
  in.s_cls = model.classify(tape, state, TokenRole::Cls);
  in.s_gist = model.classify(tape, state, TokenRole::Gist);
  in.labels = labels;
  if (cfg_.aux_vpt_loss) {
    if (!state.has(TokenRole::Prompt)) throw ConfigError("aux_vpt_loss needs an attached prompt");
    in.s_vpt = model.classify(tape, state, TokenRole::Prompt);
  }
  auto loss = overall_loss(tape, in, cfg_);
  return {loss.l_all, in.s_cls, loss.breakdown};
}

#define GISTLAB_INSTANTIATE(T)                                                                                 \
  template SequenceState<T> inject_gist(Tape<T>&, const SequenceState<T>&, const Tensor<T>&);                  \
  template TokenLosses<T> token_losses(Tape<T>&, const Tensor<T>&, const Tensor<T>&, std::span<const int>);    \
  template BkldTerms<T> bkld(Tape<T>&, const Tensor<T>&, const Tensor<T>&, T);                                 \
  template Tensor<T> interaction_substitute(Tape<T>&, const Tensor<T>&, const Tensor<T>&, InteractionKind);    \
  template OverallLoss<T> overall_loss(Tape<T>&, const LossInputs<T>&, const GistLossConfig&);                 \
  template std::vector<int> predict(Tape<T>&, const ModelGraph<T>&, const SequenceState<T>&);                  \
  template class GistObjective<T>;

GISTLAB_INSTANTIATE(float)
GISTLAB_INSTANTIATE(double)

#undef GISTLAB_INSTANTIATE

}  // namespace gistlab
