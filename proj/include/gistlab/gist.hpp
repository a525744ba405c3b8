#pragma once

// Gist token and the knowledge-interaction objective.
//
// A learnable [gist_len x D] token is appended to the input sequence after
// the positional embedding has been added, so it never receives one. During
// training its pooled final state goes through the classification head to
// give S_gist, and the loss is
//
//   L_all = L_cls + mu * L_gist + lambda * L_interaction  (+ L_vpt)
//
// with L_interaction = KL(S_cls || S_gist) + KL(S_gist || S_cls) at
// temperature T by default. Prediction uses S_cls only.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gistlab/objective.hpp"
#include "gistlab/vit.hpp"

namespace gistlab {

enum class InteractionKind : std::uint8_t { Bkld, Mse, Cosine, None };

const char* interaction_name(InteractionKind kind);
InteractionKind parse_interaction(const std::string& name);

struct GistLossConfig {
  bool enabled = true;
  std::size_t gist_len = 1;
  double temperature = 3.0;
  double mu = 0.5;
  double lambda = 0.75;
  InteractionKind interaction = InteractionKind::Bkld;
  /// Adds CE on the mean-pooled prompt tokens (needs an attached prompt).
  bool aux_vpt_loss = false;

  void validate() const;
  friend bool operator==(const GistLossConfig&, const GistLossConfig&) = default;
};

nlohmann::json gist_to_json(const GistLossConfig& cfg);
GistLossConfig gist_from_json(const nlohmann::json& j, const std::string& path);

inline constexpr const char* kGistTokenName = "gist.token";

/// Appends `token` [G x D] to every sequence of the batch.
template <typename T>
SequenceState<T> inject_gist(Tape<T>& tape, const SequenceState<T>& state, const Tensor<T>& token);

template <typename T>
struct TokenLosses {
  Tensor<T> l_cls;
  Tensor<T> l_gist;
};

template <typename T>
TokenLosses<T> token_losses(Tape<T>& tape, const Tensor<T>& s_cls, const Tensor<T>& s_gist,
                            std::span<const int> labels);

template <typename T>
struct BkldTerms {
  Tensor<T> l_fkl;  // KL(soft(s_cls) || soft(s_gist))
  Tensor<T> l_rkl;  // KL(soft(s_gist) || soft(s_cls))
  Tensor<T> l_bkl;
};

/// Both directions keep their gradients; no T^2 factor.
template <typename T>
BkldTerms<T> bkld(Tape<T>& tape, const Tensor<T>& s_cls, const Tensor<T>& s_gist, T temperature);

/// MSE: mean squared logit difference. Cosine: 1 - mean per-sample cosine
/// similarity, where a zero logit vector has similarity 0.
template <typename T>
Tensor<T> interaction_substitute(Tape<T>& tape, const Tensor<T>& s_cls, const Tensor<T>& s_gist,
                                 InteractionKind kind);

template <typename T>
struct LossInputs {
  Tensor<T> s_cls;
  Tensor<T> s_gist;
  std::span<const int> labels;
  /// Logits of the pooled prompt tokens, for the auxiliary prompt loss.
  std::optional<Tensor<T>> s_vpt;
};

template <typename T>
struct OverallLoss {
  Tensor<T> l_all;
  LossBreakdown breakdown;
};

/// Terms whose coefficient is zero are evaluated for the breakdown but kept
/// out of the differentiated sum.
template <typename T>
OverallLoss<T> overall_loss(Tape<T>& tape, const LossInputs<T>& inputs, const GistLossConfig& cfg);

/// argmax of the class-token logits; the gist tokens are never read.
template <typename T>
std::vector<int> predict(Tape<T>& tape, const ModelGraph<T>& model, const SequenceState<T>& state);

/// Trainer objective. With cfg.enabled == false it reproduces
/// TraditionalObjective exactly and registers no parameter.
template <typename T>
class GistObjective : public Objective<T> {
 public:
  explicit GistObjective(GistLossConfig cfg);

  std::string name() const override;
  /// Registers kGistTokenName ([gist_len x D], truncated normal 0.02) unless
  /// the model already carries one (e.g. loaded from a checkpoint).
  void prepare(ModelGraph<T>& model, std::uint64_t seed) override;
  SequenceState<T> forward(Tape<T>& tape, const ModelGraph<T>& model, const Tensor<T>& images,
                           AttentionProbe<T>* probe = nullptr) const override;
  ObjectiveOutput<T> compute(Tape<T>& tape, const ModelGraph<T>& model, const Tensor<T>& images,
                             std::span<const int> labels) const override;

  const GistLossConfig& config() const { return cfg_; }

 private:
  GistLossConfig cfg_;
  TraditionalObjective<T> traditional_;
};

extern template class GistObjective<float>;
extern template class GistObjective<double>;

}  // namespace gistlab
