#pragma once

// Experiment configuration and the batch commands built on it.
//
// A config file is strict UTF-8 JSON: every field is required and unknown
// keys are rejected. Run directories are keyed by the fingerprint of the
// normalized config, so identical configs map to identical locations.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gistlab/data.hpp"
#include "gistlab/gist.hpp"
#include "gistlab/gradcheck.hpp"
#include "gistlab/peft_spec.hpp"
#include "gistlab/trainer.hpp"
#include "gistlab/vit.hpp"

namespace gistlab {

enum class Precision : std::uint8_t { F32, F64 };
Precision parse_precision(const std::string& name);

enum class FrameworkMode : std::uint8_t { Traditional, Gist };
const char* mode_name(FrameworkMode mode);
FrameworkMode parse_mode(const std::string& name);

struct PretrainConfig {
  std::vector<TaskSpec> tasks;
  SplitSpec split;
  OptimSpec optim;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  /// num_classes must equal the total class count of the pretraining tasks.
  BackboneConfig backbone;
  PretrainConfig pretrain;
  /// Written by pretrain, read by finetune and ablate.
  std::string checkpoint;
  std::vector<PeftSpec> peft;
  GistLossConfig gist;
  OptimSpec optim;
  std::vector<TaskSpec> tasks;
  SplitSpec split;
  std::vector<FrameworkMode> modes;
  std::vector<std::uint64_t> seeds;
  std::string output_dir;

  void validate() const;
};

nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);
/// Parses config text; syntax errors report line and column of `origin`.
ExperimentConfig parse_config(const std::string& text, const std::string& origin);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_hash(const ExperimentConfig& cfg);

/// Short name of downstream task `index`, e.g. "t0-stripes".
std::string task_name(const ExperimentConfig& cfg, std::size_t index);
/// Seed of one (task, seed) cell; shared by both framework modes so that
/// head, PEFT initialization and data order are paired.
std::uint64_t cell_seed(std::uint64_t seed, std::size_t task_index);

/// Trains a freshly initialized backbone on the pretraining mixture with
/// every parameter trainable.
template <typename T>
ModelGraph<T> pretrain_model(const ExperimentConfig& cfg, TrainRecord* record = nullptr,
                             std::ostream* metrics = nullptr);

/// One fine-tuning run: copy of `pretrained`, fresh head for the task, PEFT
/// attached, backbone frozen, then finetune() under the objective of `mode`.
template <typename T>
TrainRecord finetune_run(const ExperimentConfig& cfg, const ModelGraph<T>& pretrained, const Splits& data,
                         std::size_t task_index, std::uint64_t seed, FrameworkMode mode,
                         std::ostream* metrics = nullptr, ModelGraph<T>* final_model = nullptr);

struct ModeSummary {
  std::vector<double> test_acc;  // one per seed (or per cell for overall)
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
  static ModeSummary of(std::vector<double> values);
};

struct FinetuneSummary {
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> tasks;
  /// [task][mode] -> per-seed accuracies.
  std::vector<std::map<FrameworkMode, ModeSummary>> per_task;
  std::map<FrameworkMode, ModeSummary> overall;
  /// (task, seed) cells where GIST beats traditional strictly, when both ran.
  std::size_t gist_better_cells = 0;
  std::size_t cells = 0;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

struct RunOptions {
  std::optional<std::filesystem::path> out;
  std::optional<std::vector<std::uint64_t>> seeds;
  Precision precision = Precision::F32;
  std::ostream* log = nullptr;
};

/// Applies --out and --seeds overrides.
ExperimentConfig apply_overrides(ExperimentConfig cfg, const RunOptions& options);

/// In-process sweep of every (task, seed, mode). When `dir` is set, each run
/// writes record.json, metrics.jsonl and model.ckpt under
/// dir/<task>/<mode>/seed-<seed>/.
template <typename T>
FinetuneSummary run_finetune_sweep(const ExperimentConfig& cfg, const ModelGraph<T>& pretrained,
                                   const std::optional<std::filesystem::path>& dir, std::ostream* log = nullptr);

/// Writes <out>/pretrain-<hash>/ and the checkpoint at cfg.checkpoint.
/// Returns the run directory.
std::filesystem::path cmd_pretrain(const ExperimentConfig& cfg, const RunOptions& options);

/// Writes <out>/finetune-<hash>/ with summary.json and summary.txt.
FinetuneSummary cmd_finetune(const ExperimentConfig& cfg, const RunOptions& options,
                             std::filesystem::path* run_dir = nullptr);

enum class AblationGrid : std::uint8_t { Lambda, TokenLen, LossTerms, Interaction };
AblationGrid parse_grid(const std::string& name);
const char* grid_name(AblationGrid grid);

struct AblationCell {
  std::string name;
  ExperimentConfig config;  // single-mode config reproducing the cell
  FrameworkMode mode = FrameworkMode::Gist;
  std::size_t extra_parameters = 0;  // gist-token scalars over the baseline
};

/// Cells of a grid, baseline (traditional) first where the grid has one.
std::vector<AblationCell> ablation_cells(const ExperimentConfig& cfg, AblationGrid grid);

struct AblationRow {
  std::string name;
  std::size_t extra_parameters = 0;
  ModeSummary accuracy;
};

struct AblationTable {
  AblationGrid grid = AblationGrid::Lambda;
  std::string config_hash;
  std::vector<AblationRow> rows;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

template <typename T>
AblationTable run_ablation(const ExperimentConfig& cfg, AblationGrid grid, const ModelGraph<T>& pretrained,
                           const std::optional<std::filesystem::path>& dir, std::ostream* log = nullptr);

/// Writes <out>/ablate-<grid>-<hash>/ with table.json, table.txt and, per
/// cell, cells/<name>/config.json plus its runs.
AblationTable cmd_ablate(const ExperimentConfig& cfg, AblationGrid grid, const RunOptions& options);

GradCheckReport cmd_gradcheck(unsigned seed = 0, double threshold = 1e-4);

/// Attention probabilities of the first `count` images of a dataset file,
/// one JSON file per layer and head in `out`. The gist token is included when
/// the checkpoint carries one.
std::vector<std::filesystem::path> cmd_export_attention(const std::filesystem::path& checkpoint,
                                                        const std::filesystem::path& images,
                                                        const std::filesystem::path& out, std::size_t count);

/// Writes train/val/test dataset files for every downstream and pretraining
/// task of the config.
std::vector<std::filesystem::path> cmd_make_data(const ExperimentConfig& cfg, const RunOptions& options);

}  // namespace gistlab
