#include "gistlab/vit.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "gistlab/ops.hpp"
#include "gistlab/rng.hpp"

namespace gistlab {

void BackboneConfig::validate() const {
  if (image_side == 0 || patch_side == 0 || image_side % patch_side != 0) {
    throw ConfigError("backbone: image_side " + std::to_string(image_side) + " is not divisible by patch_side " +
                      std::to_string(patch_side));
  }
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("backbone: embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (channels == 0 || num_layers == 0 || ffn_hidden == 0 || num_classes == 0) {
    throw ConfigError("backbone: channels, num_layers, ffn_hidden and num_classes must be positive");
  }
}

const char* token_role_name(TokenRole role) {
  switch (role) {
    case TokenRole::Cls: return "CLS";
    case TokenRole::Patch: return "PATCH";
    case TokenRole::Prompt: return "PROMPT";
    case TokenRole::Gist: return "GIST";
  }
  return "?";
}

const char* peft_kind_name(PeftKind kind) {
  switch (kind) {
    case PeftKind::Adapter: return "adapter";
    case PeftKind::Prompt: return "prompt";
    case PeftKind::ScaleShift: return "scale_shift";
  }
  return "?";
}

PeftKind parse_peft_kind(const std::string& name) {
  if (name == "adapter") return PeftKind::Adapter;
  if (name == "prompt") return PeftKind::Prompt;
  if (name == "scale_shift") return PeftKind::ScaleShift;
  throw ConfigError("unknown PEFT kind '" + name + "'");
}

void PeftSpec::validate() const {
  if (kind == PeftKind::Adapter && adapter_hidden < 1) throw ConfigError("adapter_hidden must be at least 1");
  if (kind == PeftKind::Prompt && prompt_len < 1) throw ConfigError("prompt_len must be at least 1");
  if (kind == PeftKind::Adapter && !std::isfinite(adapter_scale)) throw ConfigError("adapter_scale must be finite");
}

const char* scale_shift_point_name(ScaleShiftPoint point) {
  switch (point) {
    case ScaleShiftPoint::Ln1: return "ln1";
    case ScaleShiftPoint::Query: return "q";
    case ScaleShiftPoint::Key: return "k";
    case ScaleShiftPoint::Value: return "v";
    case ScaleShiftPoint::AttnOut: return "attn_out";
    case ScaleShiftPoint::Ln2: return "ln2";
    case ScaleShiftPoint::FfnOut: return "ffn_out";
  }
  return "?";
}

namespace param_names {
std::string layer(std::size_t l, std::string_view leaf) {
  return "layers." + std::to_string(l) + "." + std::string(leaf);
}
std::string adapter(std::size_t l, std::string_view leaf) {
  return "peft.adapter." + std::to_string(l) + "." + std::string(leaf);
}
std::string scale_shift(std::size_t l, ScaleShiftPoint point, std::string_view leaf) {
  return "peft.ssf." + std::to_string(l) + "." + scale_shift_point_name(point) + "." + std::string(leaf);
}
std::string head_scale_shift(std::string_view leaf) { return "peft.ssf.head." + std::string(leaf); }
}  // namespace param_names

// ---------------------------------------------------------------------------
// SequenceState

template <typename T>
bool SequenceState<T>::has(TokenRole role) const {
  return std::find(layout.begin(), layout.end(), role) != layout.end();
}

template <typename T>
std::pair<std::size_t, std::size_t> SequenceState<T>::block(TokenRole role) const {
  auto first = std::find(layout.begin(), layout.end(), role);
  if (first == layout.end()) {
    throw LayoutError(std::string("no ") + token_role_name(role) + " token in the sequence");
  }
  auto last = std::find_if(first, layout.end(), [role](TokenRole r) { return r != role; });
  if (std::find(last, layout.end(), role) != layout.end()) {
    throw LayoutError(std::string(token_role_name(role)) + " tokens are not contiguous");
  }
  return {static_cast<std::size_t>(first - layout.begin()), static_cast<std::size_t>(last - first)};
}

template <typename T>
void SequenceState<T>::validate() const {
  if (!tokens.defined() || tokens.rank() != 3 || tokens.dim(1) != layout.size()) {
    throw LayoutError("layout of " + std::to_string(layout.size()) + " roles does not match tokens " +
                      (tokens.defined() ? shape_string(tokens.shape()) : std::string("<null>")));
  }
  if (std::count(layout.begin(), layout.end(), TokenRole::Cls) != 1) {
    throw LayoutError("sequence must hold exactly one CLS token");
  }
  if (has(TokenRole::Gist)) {
    auto [begin, count] = block(TokenRole::Gist);
    if (begin + count != layout.size()) throw LayoutError("GIST tokens must be the last positions");
  }
}

// ---------------------------------------------------------------------------
// ParameterStore

template <typename T>
Tensor<T> ParameterStore<T>::add(std::string name, Tensor<T> tensor) {
  if (contains(name)) throw ConfigError("parameter '" + name + "' registered twice");
  entries_.push_back({std::move(name), tensor});
  return tensor;
}

template <typename T>
void ParameterStore<T>::replace(std::string_view name, Tensor<T> tensor) {
  for (auto& e : entries_) {
    if (e.name == name) {
      e.tensor = std::move(tensor);
      return;
    }
  }
  throw ConfigError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
bool ParameterStore<T>::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

template <typename T>
Tensor<T> ParameterStore<T>::at(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw ConfigError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
void ParameterStore<T>::set_frozen(std::string_view name, bool frozen) {
  at(name).set_requires_grad(!frozen);
}

template <typename T>
void ParameterStore<T>::set_all_frozen(bool frozen) {
  for (auto& e : entries_) e.tensor.set_requires_grad(!frozen);
}

template <typename T>
std::map<std::string, bool> ParameterStore<T>::freeze_map() const {
  std::map<std::string, bool> m;
  for (const auto& e : entries_) m.emplace(e.name, e.frozen());
  return m;
}

template <typename T>
std::size_t ParameterStore<T>::trainable_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (!e.frozen()) n += e.tensor.size();
  }
  return n;
}

template <typename T>
std::size_t ParameterStore<T>::total_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

template <typename T>
void ParameterStore<T>::release_grads() {
  for (auto& e : entries_) e.tensor.release_grad();
}

template <typename T>
void ParameterStore<T>::reorder(const std::vector<std::string>& names) {
  if (names.size() != entries_.size()) throw ConfigError("reorder: parameter sets differ in size");
  std::vector<Entry> sorted;
  sorted.reserve(entries_.size());
  for (const auto& n : names) {
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == n; });
    if (it == entries_.end()) throw ConfigError("reorder: unknown parameter '" + n + "'");
    sorted.push_back(*it);
  }
  entries_ = std::move(sorted);
}

// ---------------------------------------------------------------------------
// ModelGraph

template <typename T>
ModelGraph<T>::ModelGraph(BackboneConfig config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.embed_dim, f = config_.ffn_hidden;
  auto param = [this](const std::string& name, Shape shape, T value = T(0)) {
    params_.add(name, Tensor<T>::full(std::move(shape), value, true));
  };
  param("patch_embed.weight", {config_.patch_dim(), d});
  param("patch_embed.bias", {d});
  param("cls_token", {1, d});
  param("pos_embed", {config_.num_patches() + 1, d});
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    using param_names::layer;
    param(layer(l, "ln1.gamma"), {d}, T(1));
    param(layer(l, "ln1.beta"), {d});
    for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.out"}) {
      param(layer(l, std::string(proj) + ".weight"), {d, d});
      param(layer(l, std::string(proj) + ".bias"), {d});
    }
    param(layer(l, "ln2.gamma"), {d}, T(1));
    param(layer(l, "ln2.beta"), {d});
    param(layer(l, "ffn.fc1.weight"), {d, f});
    param(layer(l, "ffn.fc1.bias"), {f});
    param(layer(l, "ffn.fc2.weight"), {f, d});
    param(layer(l, "ffn.fc2.bias"), {d});
  }
  param("head.weight", {d, config_.num_classes});
  param("head.bias", {config_.num_classes});
  rebind();
}

template <typename T>
void ModelGraph<T>::rebind() {
  using param_names::layer;
  patch_w = params_.at("patch_embed.weight");
  patch_b = params_.at("patch_embed.bias");
  cls_token = params_.at("cls_token");
  pos_embed = params_.at("pos_embed");
  layers.assign(config_.num_layers, {});
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    auto& L = layers[l];
    L.ln1_gamma = params_.at(layer(l, "ln1.gamma"));
    L.ln1_beta = params_.at(layer(l, "ln1.beta"));
    L.wq = params_.at(layer(l, "attn.q.weight"));
    L.bq = params_.at(layer(l, "attn.q.bias"));
    L.wk = params_.at(layer(l, "attn.k.weight"));
    L.bk = params_.at(layer(l, "attn.k.bias"));
    L.wv = params_.at(layer(l, "attn.v.weight"));
    L.bv = params_.at(layer(l, "attn.v.bias"));
    L.wo = params_.at(layer(l, "attn.out.weight"));
    L.bo = params_.at(layer(l, "attn.out.bias"));
    L.ln2_gamma = params_.at(layer(l, "ln2.gamma"));
    L.ln2_beta = params_.at(layer(l, "ln2.beta"));
    L.w1 = params_.at(layer(l, "ffn.fc1.weight"));
    L.b1 = params_.at(layer(l, "ffn.fc1.bias"));
    L.w2 = params_.at(layer(l, "ffn.fc2.weight"));
    L.b2 = params_.at(layer(l, "ffn.fc2.bias"));
  }
  head_w = params_.at("head.weight");
  head_b = params_.at("head.bias");

  adapters.assign(config_.num_layers, std::nullopt);
  scale_shift.assign(config_.num_layers, std::nullopt);
  head_scale_shift.reset();
  prompts = Tensor<T>();
  for (const auto& spec : peft) {
    switch (spec.kind) {
      case PeftKind::Adapter:
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
          if (!params_.contains(param_names::adapter(l, "down.weight"))) continue;
          AdapterBranch<T> a;
          a.down_w = params_.at(param_names::adapter(l, "down.weight"));
          a.down_b = params_.at(param_names::adapter(l, "down.bias"));
          a.up_w = params_.at(param_names::adapter(l, "up.weight"));
          a.up_b = params_.at(param_names::adapter(l, "up.bias"));
          a.scale = static_cast<T>(spec.adapter_scale);
          adapters[l] = a;
        }
        break;
      case PeftKind::Prompt:
        prompts = params_.at(param_names::kPrompts);
        break;
      case PeftKind::ScaleShift:
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
          if (!params_.contains(param_names::scale_shift(l, ScaleShiftPoint::Ln1, "gamma"))) continue;
          LayerScaleShift<T> set;
          for (std::size_t p = 0; p < kScaleShiftPoints; ++p) {
            const auto point = static_cast<ScaleShiftPoint>(p);
            set[p].gamma = params_.at(param_names::scale_shift(l, point, "gamma"));
            set[p].beta = params_.at(param_names::scale_shift(l, point, "beta"));
          }
          scale_shift[l] = set;
        }
        head_scale_shift = ScaleShiftPair<T>{params_.at(param_names::head_scale_shift("gamma")),
                                             params_.at(param_names::head_scale_shift("beta"))};
        break;
    }
  }
}

template <typename T>
ModelGraph<T> ModelGraph<T>::clone() const {
  return convert_model<T, T>(*this);
}

template <typename T>
void ModelGraph<T>::initialize(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x1A17));
  for (const auto& e : params_.entries()) {
    const std::string& n = e.name;
    Tensor<T> t = e.tensor;
    auto data = t.data();
    const bool is_gamma = n.ends_with("gamma");
    const bool is_bias = n.ends_with(".bias") || n.ends_with("beta");
    if (n.starts_with("peft.") || n.starts_with("gist.")) continue;
    for (auto& v : data) {
      v = is_gamma ? T(1) : is_bias ? T(0) : static_cast<T>(rng.truncated_normal(kInitStd));
    }
  }
}

template <typename T>
void ModelGraph<T>::reset_head(std::size_t num_classes, std::uint64_t seed) {
  if (num_classes == 0) throw ConfigError("reset_head: num_classes must be positive");
  Rng rng(derive_seed(seed, 0x4EAD));
  const std::size_t d = config_.embed_dim;
  std::vector<T> w(d * num_classes);
  for (auto& v : w) v = static_cast<T>(rng.truncated_normal(kInitStd));
  config_.num_classes = num_classes;
  params_.replace("head.weight", Tensor<T>::from({d, num_classes}, std::move(w), true));
  params_.replace("head.bias", Tensor<T>::zeros({num_classes}, true));
  rebind();
}

template <typename T>
std::vector<std::string> ModelGraph<T>::backbone_parameter_names() const {
  std::vector<std::string> names;
  for (const auto& e : params_.entries()) {
    if (e.name.starts_with("head.") || e.name.starts_with("peft.") || e.name.starts_with("gist.")) continue;
    names.push_back(e.name);
  }
  return names;
}

template <typename T>
void ModelGraph<T>::set_finetune_freeze() {
  params_.set_all_frozen(false);
  for (const auto& n : backbone_parameter_names()) params_.set_frozen(n, true);
}

template <typename T>
SequenceState<T> ModelGraph<T>::build_input(Tape<T>& tape, const Tensor<T>& images) const {
  const std::size_t side = config_.image_side;
  if (images.rank() != 4 || images.dim(1) != config_.channels || images.dim(2) != side || images.dim(3) != side) {
    throw DimensionError("build_input: expected images [B x " + std::to_string(config_.channels) + " x " +
                         std::to_string(side) + " x " + std::to_string(side) + "], got " +
                         shape_string(images.shape()));
  }
  const std::size_t b = images.dim(0);
  auto patches = ops::patchify(tape, images, config_.patch_side);
  auto embedded = ops::linear(tape, patches, patch_w, patch_b);
  auto cls = ops::broadcast_batch(tape, cls_token, b);
  auto seq = ops::concat_tokens<T>(tape, {cls, embedded});
  auto tokens = ops::add(tape, seq, ops::broadcast_batch(tape, pos_embed, b));
  SequenceState<T> state{tokens, {TokenRole::Cls}};
  state.layout.insert(state.layout.end(), config_.num_patches(), TokenRole::Patch);
  return state;
}

template <typename T>
SequenceState<T> ModelGraph<T>::insert_prompts(Tape<T>& tape, const SequenceState<T>& state) const {
  if (!prompts.defined() || state.has(TokenRole::Prompt)) return state;
  auto [cls_at, cls_n] = state.block(TokenRole::Cls);
  const std::size_t b = state.batch(), s = state.length();
  std::vector<Tensor<T>> parts;
  parts.push_back(ops::slice_tokens(tape, state.tokens, 0, cls_at + 1));
  parts.push_back(ops::broadcast_batch(tape, prompts, b));
  if (cls_at + 1 < s) parts.push_back(ops::slice_tokens(tape, state.tokens, cls_at + 1, s - cls_at - 1));
  SequenceState<T> out{ops::concat_tokens(tape, parts), {}};
  out.layout.assign(state.layout.begin(), state.layout.begin() + static_cast<std::ptrdiff_t>(cls_at + 1));
  out.layout.insert(out.layout.end(), prompts.dim(0), TokenRole::Prompt);
  out.layout.insert(out.layout.end(), state.layout.begin() + static_cast<std::ptrdiff_t>(cls_at + 1),
                    state.layout.end());
  return out;
}

template <typename T>
Tensor<T> ModelGraph<T>::maybe_scale_shift(Tape<T>& tape, const Tensor<T>& x, std::size_t layer,
                                           ScaleShiftPoint point) const {
  if (!scale_shift[layer]) return x;
  const auto& pair = (*scale_shift[layer])[static_cast<std::size_t>(point)];
  return ops::scale_shift(tape, x, pair.gamma, pair.beta);
}

template <typename T>
SequenceState<T> ModelGraph<T>::encoder_layer(Tape<T>& tape, const SequenceState<T>& state, std::size_t layer,
                                              AttentionProbe<T>* probe) const {
  if (layer >= layers.size()) {
    throw IndexError("encoder_layer: layer " + std::to_string(layer) + " of " + std::to_string(layers.size()));
  }
  const auto& L = layers[layer];
  const T eps = static_cast<T>(kLayerNormEps);
  const std::size_t heads = config_.num_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(config_.embed_dim / heads));
  const auto& x = state.tokens;
  using P = ScaleShiftPoint;

  // X' = MHSA(LN(X)) + X
  auto h = maybe_scale_shift(tape, ops::layer_norm(tape, x, L.ln1_gamma, L.ln1_beta, eps), layer, P::Ln1);
  auto q = maybe_scale_shift(tape, ops::linear(tape, h, L.wq, L.bq), layer, P::Query);
  auto k = maybe_scale_shift(tape, ops::linear(tape, h, L.wk, L.bk), layer, P::Key);
  auto v = maybe_scale_shift(tape, ops::linear(tape, h, L.wv, L.bv), layer, P::Value);
  auto qh = ops::split_heads(tape, q, heads);
  auto kh = ops::split_heads(tape, k, heads);
  auto vh = ops::split_heads(tape, v, heads);
  auto scores = ops::scale(tape, ops::batched_matmul(tape, qh, kh, true), inv_sqrt);
  auto attn = ops::softmax_t(tape, scores, T(1));
  if (probe) probe->layers.push_back(attn);
  auto ctx = ops::merge_heads(tape, ops::batched_matmul(tape, attn, vh, false), heads);
  auto attn_out = maybe_scale_shift(tape, ops::linear(tape, ctx, L.wo, L.bo), layer, P::AttnOut);
  auto x1 = ops::add(tape, x, attn_out);

  // X_out = FFN(LN(X')) + X'  (+ s * adapter(LN(X')) when attached)
  auto h2 = maybe_scale_shift(tape, ops::layer_norm(tape, x1, L.ln2_gamma, L.ln2_beta, eps), layer, P::Ln2);
  auto hidden = ops::gelu(tape, ops::linear(tape, h2, L.w1, L.b1));
  auto ffn = maybe_scale_shift(tape, ops::linear(tape, hidden, L.w2, L.b2), layer, P::FfnOut);
  auto out = ops::add(tape, x1, ffn);
  if (const auto& adapter = adapters[layer]) {
    auto down = ops::gelu(tape, ops::linear(tape, h2, adapter->down_w, adapter->down_b));
    auto up = ops::linear(tape, down, adapter->up_w, adapter->up_b);
    out = ops::add(tape, out, ops::scale(tape, up, adapter->scale));
  }
  return {out, state.layout};
}

template <typename T>
SequenceState<T> ModelGraph<T>::encode(Tape<T>& tape, const SequenceState<T>& state, AttentionProbe<T>* probe) const {
  state.validate();
  auto current = insert_prompts(tape, state);
  for (std::size_t l = 0; l < layers.size(); ++l) current = encoder_layer(tape, current, l, probe);
  return current;
}

template <typename T>
Tensor<T> ModelGraph<T>::classify(Tape<T>& tape, const SequenceState<T>& state, TokenRole role) const {
  auto [begin, count] = state.block(role);
  const std::size_t b = state.batch(), d = config_.embed_dim;
  auto selected = ops::slice_tokens(tape, state.tokens, begin, count);
  auto pooled = count == 1 ? ops::reshape(tape, selected, {b, d}) : ops::mean_tokens(tape, selected);
  if (head_scale_shift) pooled = ops::scale_shift(tape, pooled, head_scale_shift->gamma, head_scale_shift->beta);
  return ops::linear(tape, pooled, head_w, head_b);
}

template <typename To, typename From>
ModelGraph<To> convert_model(const ModelGraph<From>& source) {
  ModelGraph<To> out(source.config());
  std::vector<std::string> order;
  for (const auto& e : source.params().entries()) {
    auto src = e.tensor.data();
    std::vector<To> values(src.begin(), src.end());
    auto t = Tensor<To>::from(e.tensor.shape(), std::move(values), e.tensor.requires_grad());
    if (out.params().contains(e.name)) {
      out.params().replace(e.name, t);
    } else {
      out.params().add(e.name, t);
    }
    order.push_back(e.name);
  }
  out.params().reorder(order);
  out.peft = source.peft;
  out.rebind();
  return out;
}

template <typename T>
Tensor<T> image_tensor(std::span<const float> pixels, std::size_t batch, std::size_t channels, std::size_t side) {
  const Shape shape{batch, channels, side, side};
  if (pixels.size() != numel(shape)) {
    throw DimensionError("image_tensor: " + std::to_string(pixels.size()) + " pixels do not form " +
                         shape_string(shape));
  }
  return Tensor<T>::from(shape, std::vector<T>(pixels.begin(), pixels.end()));
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t k = logits.shape().back(), rows = logits.size() / k;
  std::vector<int> out(rows);
  auto z = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (z[r * k + j] > z[r * k + best]) best = j;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

template struct SequenceState<float>;
template struct SequenceState<double>;
template class ParameterStore<float>;
template class ParameterStore<double>;
template class ModelGraph<float>;
template class ModelGraph<double>;
template ModelGraph<float> convert_model<float, float>(const ModelGraph<float>&);
template ModelGraph<double> convert_model<double, double>(const ModelGraph<double>&);
template ModelGraph<double> convert_model<double, float>(const ModelGraph<float>&);
template ModelGraph<float> convert_model<float, double>(const ModelGraph<double>&);
template Tensor<float> image_tensor<float>(std::span<const float>, std::size_t, std::size_t, std::size_t);
template Tensor<double> image_tensor<double>(std::span<const float>, std::size_t, std::size_t, std::size_t);
template std::vector<int> argmax_rows<float>(const Tensor<float>&);
template std::vector<int> argmax_rows<double>(const Tensor<double>&);

}  // namespace gistlab
