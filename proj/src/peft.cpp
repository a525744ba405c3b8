#include "gistlab/peft.hpp"

#include <algorithm>

#include "gistlab/rng.hpp"

namespace gistlab {
namespace {

template <typename T>
Tensor<T> truncated_normal(Rng& rng, Shape shape) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(ModelGraph<T>::kInitStd));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
void register_spec(ModelGraph<T>& model, const PeftSpec& spec) {
  spec.validate();
  for (const auto& existing : model.peft) {
    if (existing.kind == spec.kind) {
      throw ConfigError(std::string("PEFT method '") + peft_kind_name(spec.kind) + "' is already attached");
    }
  }
  model.peft.push_back(spec);
}

template <typename T>
std::size_t attached_layers(const ModelGraph<T>& model, const PeftSpec& spec) {
  return spec.attach == PeftAttach::FirstLayerOnly ? 1 : model.config().num_layers;
}

}  // namespace

template <typename T>
std::size_t PeftParams<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

template <typename T>
PeftParams<T> attach_adapter(ModelGraph<T>& model, const PeftSpec& spec, std::uint64_t seed) {
  if (spec.kind != PeftKind::Adapter) throw ConfigError("attach_adapter: spec is not an adapter");
  register_spec(model, spec);
  Rng rng(derive_seed(seed, 0xADA7));
  const std::size_t d = model.config().embed_dim, r = spec.adapter_hidden;
  PeftParams<T> out;
  auto add = [&](std::string name, Tensor<T> t) {
    model.params().add(name, t);
    out.tensors.emplace_back(std::move(name), t);
  };
  for (std::size_t l = 0; l < attached_layers(model, spec); ++l) {
    add(param_names::adapter(l, "down.weight"), truncated_normal<T>(rng, {d, r}));
    add(param_names::adapter(l, "down.bias"), Tensor<T>::zeros({r}, true));
    add(param_names::adapter(l, "up.weight"), Tensor<T>::zeros({r, d}, true));
    add(param_names::adapter(l, "up.bias"), Tensor<T>::zeros({d}, true));
  }
  model.rebind();
  return out;
}

template <typename T>
PeftParams<T> attach_prompt(ModelGraph<T>& model, const PeftSpec& spec, std::uint64_t seed) {
  if (spec.kind != PeftKind::Prompt) throw ConfigError("attach_prompt: spec is not a prompt");
  register_spec(model, spec);
  Rng rng(derive_seed(seed, 0x9801));
  auto tokens = truncated_normal<T>(rng, {spec.prompt_len, model.config().embed_dim});
  model.params().add(param_names::kPrompts, tokens);
  model.rebind();
  return {{{param_names::kPrompts, tokens}}};
}

template <typename T>
PeftParams<T> attach_scale_shift(ModelGraph<T>& model, const PeftSpec& spec, std::uint64_t /*seed*/) {
  if (spec.kind != PeftKind::ScaleShift) throw ConfigError("attach_scale_shift: spec is not scale-shift");
  register_spec(model, spec);
  const std::size_t d = model.config().embed_dim;
  PeftParams<T> out;
  auto add_pair = [&](const std::string& gamma_name, const std::string& beta_name) {
    auto g = Tensor<T>::full({d}, T(1), true);
    auto b = Tensor<T>::zeros({d}, true);
    model.params().add(gamma_name, g);
    model.params().add(beta_name, b);
    out.tensors.emplace_back(gamma_name, g);
    out.tensors.emplace_back(beta_name, b);
  };
  for (std::size_t l = 0; l < attached_layers(model, spec); ++l) {
    for (std::size_t p = 0; p < kScaleShiftPoints; ++p) {
      const auto point = static_cast<ScaleShiftPoint>(p);
      add_pair(param_names::scale_shift(l, point, "gamma"), param_names::scale_shift(l, point, "beta"));
    }
  }
  add_pair(param_names::head_scale_shift("gamma"), param_names::head_scale_shift("beta"));
  model.rebind();
  return out;
}

template <typename T>
PeftParams<T> attach_peft(ModelGraph<T>& model, const PeftSpec& spec, std::uint64_t seed) {
  switch (spec.kind) {
    case PeftKind::Adapter: return attach_adapter(model, spec, seed);
    case PeftKind::Prompt: return attach_prompt(model, spec, seed);
    case PeftKind::ScaleShift: return attach_scale_shift(model, spec, seed);
  }
  throw ConfigError("attach_peft: unknown kind");
}

template <typename T>
ParameterCount trainable_parameter_count(const ModelGraph<T>& model) {
  ParameterCount c;
  for (const auto& e : model.params().entries()) {
    if (e.frozen()) continue;
    c.with_head += e.tensor.size();
    if (!e.name.starts_with("head.")) c.without_head += e.tensor.size();
  }
  return c;
}

std::size_t adapter_parameter_count(std::size_t embed_dim, std::size_t hidden, std::size_t layers) {
  return layers * ((embed_dim * hidden + hidden) + (hidden * embed_dim + embed_dim));
}

std::size_t prompt_parameter_count(std::size_t embed_dim, std::size_t prompt_len) { return embed_dim * prompt_len; }

std::size_t scale_shift_parameter_count(std::size_t embed_dim, std::size_t layers) {
  return 2 * embed_dim * (kScaleShiftPoints * layers + 1);
}

#define GISTLAB_INSTANTIATE_PEFT(T)                                                       \
  template struct PeftParams<T>;                                                          \
  template PeftParams<T> attach_adapter(ModelGraph<T>&, const PeftSpec&, std::uint64_t); \
  template PeftParams<T> attach_prompt(ModelGraph<T>&, const PeftSpec&, std::uint64_t);  \
  template PeftParams<T> attach_scale_shift(ModelGraph<T>&, const PeftSpec&, std::uint64_t); \
  template PeftParams<T> attach_peft(ModelGraph<T>&, const PeftSpec&, std::uint64_t);    \
  template ParameterCount trainable_parameter_count(const ModelGraph<T>&);

GISTLAB_INSTANTIATE_PEFT(float)
GISTLAB_INSTANTIATE_PEFT(double)

}  // namespace gistlab
