#pragma once

// AdamW with decoupled weight decay, linear-warmup + cosine schedule and the
// deterministic fine-tuning loop.

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gistlab/data.hpp"
#include "gistlab/objective.hpp"
#include "gistlab/vit.hpp"

namespace gistlab {

struct OptimSpec {
  double base_lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_epochs = 10;
  double warmup_lr = 1e-7;
  std::size_t total_epochs = 100;
  std::size_t batch_size = 32;

  void validate() const;
  friend bool operator==(const OptimSpec&, const OptimSpec&) = default;
};

nlohmann::json optim_to_json(const OptimSpec& spec);
OptimSpec optim_from_json(const nlohmann::json& j, const std::string& path);

/// Learning rate at optimizer step `step` (0-based). Warmup ramps linearly
/// from warmup_lr to base_lr over warmup_epochs * steps_per_epoch steps;
/// afterwards base_lr * (1 + cos(pi * progress)) / 2, which reaches exactly 0
/// at step total_epochs * steps_per_epoch.
double lr_at(std::size_t step, const OptimSpec& spec, std::size_t steps_per_epoch);

template <typename T>
class AdamW {
 public:
  explicit AdamW(const OptimSpec& spec) : spec_(spec) {}

  /// One update of every parameter that requires a gradient and holds one:
  /// w <- w (1 - lr wd), then the bias-corrected Adam step. Frozen
  /// parameters are neither read nor written and get no moment buffers.
  void step(ParameterStore<T>& params, double lr);

  std::size_t steps() const { return t_; }
  /// Parameter names that own moment buffers.
  std::vector<std::string> tracked() const;

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  OptimSpec spec_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;
  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_acc = 0.0;  // running accuracy of the training batches
  double val_acc = 0.0;
  double mean_loss = 0.0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainRecord {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  double test_acc = 0.0;
  std::vector<int> test_predictions;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string objective;
  double elapsed_seconds = 0.0;

  /// elapsed_seconds is omitted unless requested, so that records of
  /// identical runs serialize identically.
  nlohmann::json to_json(bool include_elapsed = false) const;
};

template <typename T>
struct FinetuneOptions {
  OptimSpec optim;
  std::uint64_t seed = 0;
  std::string config_hash;
  /// Receives one JSON object per line when set.
  std::ostream* metrics = nullptr;
  /// Observes gradients after each backward pass, before the update.
  std::function<void(std::size_t step, const ParameterStore<T>&)> after_backward;
};

/// Runs the epoch loop: per-epoch shuffle with seed derive_seed(seed, epoch),
/// forward through the objective, backward, AdamW at lr_at(step). The
/// objective's prepare() runs first with derive_seed(seed, kPrepareStream).
/// The final-epoch model is kept. Parameters that do not require a gradient
/// are verified to be bitwise unchanged at the end.
template <typename T>
TrainRecord finetune(ModelGraph<T>& model, Objective<T>& objective, const Splits& data,
                     const FinetuneOptions<T>& options);

inline constexpr std::uint64_t kPrepareStream = 0x9E57'0001;

struct EvalResult {
  double accuracy = 0.0;
  std::vector<int> predictions;
};

/// CLS-based argmax accuracy (ties to the lowest class index).
template <typename T>
EvalResult evaluate(const ModelGraph<T>& model, const Objective<T>& objective, const Dataset& split,
                    std::size_t batch_size = 256);

/// Bytes of every parameter, by name.
template <typename T>
std::map<std::string, std::vector<T>> snapshot_parameters(const ParameterStore<T>& params, bool frozen_only);

}  // namespace gistlab
