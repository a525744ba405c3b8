#pragma once

// Training objectives. The trainer only sees this interface: an objective
// may add its own parameters to the model, decides how a batch is encoded
// and turns the encoded batch into a scalar loss.

#include <cstdint>
#include <span>
#include <string>

#include <json.hpp>

#include "gistlab/vit.hpp"

namespace gistlab {

/// Per-step loss values. Terms an objective does not use stay zero.
struct LossBreakdown {
  double l_cls = 0.0;
  double l_gist = 0.0;
  double l_fkl = 0.0;
  double l_rkl = 0.0;
  double l_bkl = 0.0;
  /// The interaction term actually weighted by lambda (BKLD, MSE or cosine).
  double l_interaction = 0.0;
  double l_aux_vpt = 0.0;
  double l_all = 0.0;

  nlohmann::json to_json() const;
  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

template <typename T>
struct ObjectiveOutput {
  Tensor<T> loss;        // rank-0, attached to the tape
  Tensor<T> cls_logits;  // [B x K], used for running train accuracy
  LossBreakdown breakdown;
};

template <typename T>
class Objective {
 public:
  virtual ~Objective() = default;

  virtual std::string name() const = 0;

  /// Called once before training; may register extra trainable parameters.
  virtual void prepare(ModelGraph<T>& model, std::uint64_t seed) {
    (void)model;
    (void)seed;
  }

  /// Encoded batch as used for both training and evaluation.
  virtual SequenceState<T> forward(Tape<T>& tape, const ModelGraph<T>& model, const Tensor<T>& images,
                                   AttentionProbe<T>* probe = nullptr) const {
    return model.encode(tape, model.build_input(tape, images), probe);
  }

  virtual ObjectiveOutput<T> compute(Tape<T>& tape, const ModelGraph<T>& model, const Tensor<T>& images,
                                     std::span<const int> labels) const = 0;
};

/// Cross-entropy on the class-token logits.
template <typename T>
class TraditionalObjective : public Objective<T> {
 public:
  std::string name() const override { return "traditional"; }
  ObjectiveOutput<T> compute(Tape<T>& tape, const ModelGraph<T>& model, const Tensor<T>& images,
                             std::span<const int> labels) const override;
};

extern template class TraditionalObjective<float>;
extern template class TraditionalObjective<double>;

}  // namespace gistlab
