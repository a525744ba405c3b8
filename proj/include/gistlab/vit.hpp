#pragma once

// Micro Vision Transformer: patch embedding, class token, learned positional
// embedding, pre-norm encoder layers and a linear classification head.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gistlab/peft_spec.hpp"
#include "gistlab/tensor.hpp"

namespace gistlab {

struct BackboneConfig {
  std::size_t image_side = 16;
  std::size_t patch_side = 4;
  std::size_t channels = 1;
  std::size_t embed_dim = 32;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t ffn_hidden = 64;
  std::size_t num_classes = 10;

  void validate() const;
  std::size_t num_patches() const { return (image_side / patch_side) * (image_side / patch_side); }
  std::size_t patch_dim() const { return channels * patch_side * patch_side; }
  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

enum class TokenRole : std::uint8_t { Cls, Patch, Prompt, Gist };
const char* token_role_name(TokenRole role);

/// Token sequence flowing through the encoder plus the role of every
/// position.
template <typename T>
struct SequenceState {
  Tensor<T> tokens;  // [B x S x D]
  std::vector<TokenRole> layout;

  std::size_t batch() const { return tokens.dim(0); }
  std::size_t length() const { return layout.size(); }
  bool has(TokenRole role) const;
  /// (begin, count) of the contiguous block holding `role`.
  std::pair<std::size_t, std::size_t> block(TokenRole role) const;
  /// Exactly one CLS; GIST positions, if any, form the tail.
  void validate() const;
};

/// Named parameters in registration order. A parameter is frozen exactly when
/// its tensor does not require a gradient.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool frozen() const { return !tensor.requires_grad(); }
  };

  Tensor<T> add(std::string name, Tensor<T> tensor);
  /// Swaps the tensor registered under `name`.
  void replace(std::string_view name, Tensor<T> tensor);
  bool contains(std::string_view name) const;
  Tensor<T> at(std::string_view name) const;
  void set_frozen(std::string_view name, bool frozen);
  void set_all_frozen(bool frozen);

  const std::vector<Entry>& entries() const { return entries_; }
  std::map<std::string, bool> freeze_map() const;
  std::size_t trainable_scalars() const;
  std::size_t total_scalars() const;
  void release_grads();
  /// Reorders entries to follow `names`, which must be a permutation.
  void reorder(const std::vector<std::string>& names);

 private:
  std::vector<Entry> entries_;
};

template <typename T>
struct EncoderLayer {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> w1, b1, w2, b2;
};

/// Post-softmax attention probabilities of every layer, [B*H x S x S] each.
template <typename T>
struct AttentionProbe {
  std::vector<Tensor<T>> layers;
};

template <typename T>
class ModelGraph {
 public:
  static constexpr double kLayerNormEps = 1e-6;
  static constexpr double kInitStd = 0.02;

  /// Allocates all backbone parameters: weights zero, LayerNorm gamma one.
  explicit ModelGraph(BackboneConfig config);

  ModelGraph(ModelGraph&&) noexcept = default;
  ModelGraph& operator=(ModelGraph&&) noexcept = default;
  ModelGraph(const ModelGraph&) = delete;
  ModelGraph& operator=(const ModelGraph&) = delete;

  /// Deep copy: no tensor is shared with the source.
  ModelGraph clone() const;

  /// Truncated-normal(0.02) weights, zero biases, unit LayerNorm gamma.
  void initialize(std::uint64_t seed);

  /// Replaces the head by a fresh [D x K] truncated-normal(0.02) weight and a
  /// zero bias. The new head is trainable.
  void reset_head(std::size_t num_classes, std::uint64_t seed);

  /// Freezes the backbone (patch projection, class token, positional
  /// embedding, every encoder weight) and makes everything else trainable.
  void set_finetune_freeze();

  const BackboneConfig& config() const { return config_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  /// Parameter names that belong to the pretrained backbone.
  std::vector<std::string> backbone_parameter_names() const;

  /// Patch embedding, class token prepended, positional embedding added:
  /// X0 = [cls; x] + P, layout [CLS, PATCH x L].
  SequenceState<T> build_input(Tape<T>& tape, const Tensor<T>& images) const;
  /// Inserts prompt tokens right after CLS (no positional embedding). No-op
  /// when no prompt is attached or prompts are already present.
  SequenceState<T> insert_prompts(Tape<T>& tape, const SequenceState<T>& state) const;
  SequenceState<T> encoder_layer(Tape<T>& tape, const SequenceState<T>& state, std::size_t layer,
                                 AttentionProbe<T>* probe = nullptr) const;
  /// Prompt insertion followed by every encoder layer.
  SequenceState<T> encode(Tape<T>& tape, const SequenceState<T>& state, AttentionProbe<T>* probe = nullptr) const;
  /// Head logits for the token(s) of `role`. Multi-token roles are mean
  /// pooled before the head.
  Tensor<T> classify(Tape<T>& tape, const SequenceState<T>& state, TokenRole role) const;

  /// Re-derives every structure handle below from the parameter store; PEFT
  /// handles follow the `peft` list.
  void rebind();

  // Structure handles; every one of them is also registered in params().
  Tensor<T> patch_w, patch_b, cls_token, pos_embed;
  std::vector<EncoderLayer<T>> layers;
  Tensor<T> head_w, head_b;

  std::vector<PeftSpec> peft;
  std::vector<std::optional<AdapterBranch<T>>> adapters;
  std::vector<std::optional<LayerScaleShift<T>>> scale_shift;
  std::optional<ScaleShiftPair<T>> head_scale_shift;
  Tensor<T> prompts;  // [P x D] or undefined

 private:
  Tensor<T> maybe_scale_shift(Tape<T>& tape, const Tensor<T>& x, std::size_t layer, ScaleShiftPoint point) const;

  BackboneConfig config_;
  ParameterStore<T> params_;
};

/// Values of `source` converted to another precision; same structure and
/// freeze flags.
template <typename To, typename From>
ModelGraph<To> convert_model(const ModelGraph<From>& source);

/// Images as float pixels [B x C x H x W] converted to a constant tensor.
template <typename T>
Tensor<T> image_tensor(std::span<const float> pixels, std::size_t batch, std::size_t channels, std::size_t side);

/// Argmax over the last axis; ties go to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

namespace param_names {
std::string layer(std::size_t layer, std::string_view leaf);
std::string adapter(std::size_t layer, std::string_view leaf);
std::string scale_shift(std::size_t layer, ScaleShiftPoint point, std::string_view leaf);
std::string head_scale_shift(std::string_view leaf);
inline constexpr const char* kPrompts = "peft.prompt.tokens";
}  // namespace param_names

extern template class ModelGraph<float>;
extern template class ModelGraph<double>;

}  // namespace gistlab
