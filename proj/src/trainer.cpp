#include "gistlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "gistlab/json_fields.hpp"
#include "gistlab/ops.hpp"
#include "gistlab/rng.hpp"

namespace gistlab {

nlohmann::json LossBreakdown::to_json() const {
  return {{"l_cls", l_cls}, {"l_gist", l_gist}, {"l_fkl", l_fkl},         {"l_rkl", l_rkl},
          {"l_bkl", l_bkl}, {"l_interaction", l_interaction}, {"l_aux_vpt", l_aux_vpt}, {"l_all", l_all}};
}

template <typename T>
ObjectiveOutput<T> TraditionalObjective<T>::compute(Tape<T>& tape, const ModelGraph<T>& model,
                                                    const Tensor<T>& images, std::span<const int> labels) const {
  auto state = this->forward(tape, model, images);
  auto logits = model.classify(tape, state, TokenRole::Cls);
  auto loss = ops::cross_entropy(tape, logits, labels);
  LossBreakdown b;
  b.l_cls = loss.item();
  b.l_all = b.l_cls;
  return {loss, logits, b};
}

template class TraditionalObjective<float>;
template class TraditionalObjective<double>;

void OptimSpec::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("optim.base_lr must be positive");
  if (!(warmup_lr > 0.0)) throw ConfigError("optim.warmup_lr must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("optim betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("optim.eps must be positive");
  if (total_epochs == 0) throw ConfigError("optim.total_epochs must be positive");
  if (warmup_epochs > total_epochs) throw ConfigError("optim.warmup_epochs exceeds total_epochs");
  if (batch_size == 0) throw ConfigError("optim.batch_size must be positive");
}

nlohmann::json optim_to_json(const OptimSpec& s) {
  return {{"base_lr", s.base_lr},           {"weight_decay", s.weight_decay}, {"beta1", s.beta1},
          {"beta2", s.beta2},               {"eps", s.eps},                   {"warmup_epochs", s.warmup_epochs},
          {"warmup_lr", s.warmup_lr},       {"total_epochs", s.total_epochs}, {"batch_size", s.batch_size}};
}

OptimSpec optim_from_json(const nlohmann::json& j, const std::string& path) {
  FieldReader r(j, path);
  OptimSpec s;
  s.base_lr = r.number("base_lr");
  s.weight_decay = r.number("weight_decay");
  s.beta1 = r.number("beta1");
  s.beta2 = r.number("beta2");
  s.eps = r.number("eps");
  s.warmup_epochs = r.count("warmup_epochs");
  s.warmup_lr = r.number("warmup_lr");
  s.total_epochs = r.count("total_epochs");
  s.batch_size = r.count("batch_size");
  r.finish();
  s.validate();
  return s;
}

double lr_at(std::size_t step, const OptimSpec& spec, std::size_t steps_per_epoch) {
  const std::size_t warmup = spec.warmup_epochs * steps_per_epoch;
  const std::size_t total = spec.total_epochs * steps_per_epoch;
  if (step < warmup) {
    return spec.warmup_lr + (spec.base_lr - spec.warmup_lr) * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total <= warmup) return spec.base_lr;
  const double progress = static_cast<double>(std::min(step, total) - warmup) / static_cast<double>(total - warmup);
  return spec.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void AdamW<T>::step(ParameterStore<T>& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(spec_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(spec_.beta2, static_cast<double>(t_));
  const double decay = 1.0 - lr * spec_.weight_decay;
  for (const auto& e : params.entries()) {
    if (e.frozen() || !e.tensor.has_grad()) continue;
    Tensor<T> w = e.tensor;
    auto data = w.data();
    auto grad = w.grad();
    if (grad.size() != data.size()) {
      throw DimensionError("adamw: gradient of '" + e.name + "' has " + std::to_string(grad.size()) +
                           " scalars, parameter has " + std::to_string(data.size()));
    }
    auto& mom = moments_[e.name];
    if (mom.m.empty()) {
      mom.m.assign(data.size(), 0.0);
      mom.v.assign(data.size(), 0.0);
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      mom.m[i] = spec_.beta1 * mom.m[i] + (1.0 - spec_.beta1) * g;
      mom.v[i] = spec_.beta2 * mom.v[i] + (1.0 - spec_.beta2) * g * g;
      const double m_hat = mom.m[i] / bc1;
      const double v_hat = mom.v[i] / bc2;
      const double decayed = static_cast<double>(data[i]) * decay;
      data[i] = static_cast<T>(decayed - lr * m_hat / (std::sqrt(v_hat) + spec_.eps));
    }
  }
}

template <typename T>
std::vector<std::string> AdamW<T>::tracked() const {
  std::vector<std::string> out;
  for (const auto& [name, m] : moments_) out.push_back(name);
  return out;
}

template class AdamW<float>;
template class AdamW<double>;

nlohmann::json TrainRecord::to_json(bool include_elapsed) const {
  nlohmann::json steps_json = nlohmann::json::array();
  for (const auto& s : steps) {
    auto j = s.loss.to_json();
    j["step"] = s.step;
    j["epoch"] = s.epoch;
    j["lr"] = s.lr;
    steps_json.push_back(std::move(j));
  }
  nlohmann::json epochs_json = nlohmann::json::array();
  for (const auto& e : epochs) {
    epochs_json.push_back(
        {{"epoch", e.epoch}, {"train_acc", e.train_acc}, {"val_acc", e.val_acc}, {"mean_loss", e.mean_loss}});
  }
  nlohmann::json out = {{"objective", objective}, {"seed", seed},           {"config_hash", config_hash},
                        {"steps", steps_json},    {"epochs", epochs_json},  {"test_acc", test_acc},
                        {"test_predictions", test_predictions}};
  if (include_elapsed) out["elapsed_seconds"] = elapsed_seconds;
  return out;
}

template <typename T>
std::map<std::string, std::vector<T>> snapshot_parameters(const ParameterStore<T>& params, bool frozen_only) {
  std::map<std::string, std::vector<T>> out;
  for (const auto& e : params.entries()) {
    if (frozen_only && !e.frozen()) continue;
    auto d = e.tensor.data();
    out.emplace(e.name, std::vector<T>(d.begin(), d.end()));
  }
  return out;
}

template <typename T>
EvalResult evaluate(const ModelGraph<T>& model, const Objective<T>& objective, const Dataset& split,
                    std::size_t batch_size) {
  if (split.size() == 0) throw ConfigError("evaluate: empty split");
  if (batch_size == 0) throw ConfigError("evaluate: batch_size must be positive");
  EvalResult out;
  out.predictions.reserve(split.size());
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t begin = 0; begin < split.size(); begin += batch_size) {
    const std::size_t n = std::min(batch_size, split.size() - begin);
    rows.resize(n);
    std::iota(rows.begin(), rows.end(), begin);
    Tape<T> tape(Tape<T>::Mode::Inference);
    auto images = image_tensor<T>(split.gather_images(rows), n, split.channels, split.image_side);
    auto state = objective.forward(tape, model, images);
    auto preds = argmax_rows(model.classify(tape, state, TokenRole::Cls));
    for (std::size_t i = 0; i < n; ++i) {
      if (preds[i] == split.labels[begin + i]) ++correct;
      out.predictions.push_back(preds[i]);
    }
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(split.size());
  return out;
}

namespace {

template <typename T>
void write_line(std::ostream* out, const nlohmann::json& j) {
  if (out) *out << j.dump() << '\n';
}

}  // namespace

template <typename T>
TrainRecord finetune(ModelGraph<T>& model, Objective<T>& objective, const Splits& data,
                     const FinetuneOptions<T>& options) {
  options.optim.validate();
  const Dataset& train = data.train;
  if (train.size() == 0) throw ConfigError("finetune: empty training split");
  if (train.image_side != model.config().image_side || train.channels != model.config().channels) {
    throw DimensionError("finetune: dataset images do not match the model input size");
  }
  objective.prepare(model, derive_seed(options.seed, kPrepareStream));
  const auto frozen_before = snapshot_parameters(model.params(), true);
  model.params().release_grads();

  const auto started = std::chrono::steady_clock::now();
  TrainRecord record;
  record.seed = options.seed;
  record.config_hash = options.config_hash;
  record.objective = objective.name();

  const std::size_t batch = options.optim.batch_size;
  const std::size_t steps_per_epoch = (train.size() + batch - 1) / batch;
  AdamW<T> optimizer(options.optim);
  std::vector<std::size_t> order(train.size());
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < options.optim.total_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(options.seed, epoch));
    rng.shuffle(std::span<std::size_t>(order));
    std::size_t correct = 0;
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t n = std::min(batch, order.size() - begin);
      std::span<const std::size_t> rows(order.data() + begin, n);
      const auto labels = train.gather_labels(rows);
      auto images = image_tensor<T>(train.gather_images(rows), n, train.channels, train.image_side);

      const std::string where = " at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) + ")";
      Tape<T> tape;
      ObjectiveOutput<T> out;
      try {
        out = objective.compute(tape, model, images, labels);
      } catch (const NumericError& e) {
        throw NumericError(e.what() + where);
      }
      if (!std::isfinite(out.breakdown.l_all)) throw NumericError("non-finite loss" + where);
      tape.backward(out.loss);
      if (options.after_backward) options.after_backward(step, model.params());
      const double lr = lr_at(step, options.optim, steps_per_epoch);
      optimizer.step(model.params(), lr);
      model.params().release_grads();

      const auto preds = argmax_rows(out.cls_logits);
      for (std::size_t i = 0; i < n; ++i) correct += preds[i] == labels[i] ? 1 : 0;
      loss_sum += out.breakdown.l_all;

      StepRecord s{step, epoch, lr, out.breakdown};
      if (options.metrics) {
        auto j = s.loss.to_json();
        j["kind"] = "step";
        j["step"] = step;
        j["epoch"] = epoch;
        j["lr"] = lr;
        write_line<T>(options.metrics, j);
      }
      record.steps.push_back(s);
      ++step;
    }
    EpochRecord e;
    e.epoch = epoch;
    e.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
    e.mean_loss = loss_sum / static_cast<double>(steps_per_epoch);
    if (data.val.size() > 0) e.val_acc = evaluate(model, objective, data.val).accuracy;
    write_line<T>(options.metrics, {{"kind", "epoch"},
                                    {"epoch", epoch},
                                    {"train_acc", e.train_acc},
                                    {"val_acc", e.val_acc},
                                    {"mean_loss", e.mean_loss}});
    record.epochs.push_back(e);
  }

  if (data.test.size() > 0) {
    auto test = evaluate(model, objective, data.test);
    record.test_acc = test.accuracy;
    record.test_predictions = std::move(test.predictions);
  }
  write_line<T>(options.metrics, {{"kind", "final"}, {"test_acc", record.test_acc}});

  if (snapshot_parameters(model.params(), true) != frozen_before) {
    throw Error("finetune: a frozen parameter changed during training");
  }
  record.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return record;
}

template TrainRecord finetune(ModelGraph<float>&, Objective<float>&, const Splits&, const FinetuneOptions<float>&);
template TrainRecord finetune(ModelGraph<double>&, Objective<double>&, const Splits&, const FinetuneOptions<double>&);
template EvalResult evaluate(const ModelGraph<float>&, const Objective<float>&, const Dataset&, std::size_t);
template EvalResult evaluate(const ModelGraph<double>&, const Objective<double>&, const Dataset&, std::size_t);
template std::map<std::string, std::vector<float>> snapshot_parameters(const ParameterStore<float>&, bool);
template std::map<std::string, std::vector<double>> snapshot_parameters(const ParameterStore<double>&, bool);

}  // namespace gistlab
