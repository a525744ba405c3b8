#pragma once

// Procedural 16x16 image classification tasks and their splits.
//
// Every sample is a pure function of (TaskSpec, index): the label is
// (index + offset(seed)) mod K, so any contiguous index range is balanced
// within one sample per class, and the image comes from a per-sample RNG
// stream. Splits are disjoint index ranges of the same generator.
//
// `variant` changes the class semantics of a generator family: variant 0
// is used for pretraining and later variants for downstream tasks.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gistlab/tensor.hpp"

namespace gistlab {

enum class GeneratorKind : std::uint8_t { Stripes, Blobs, Count, XorPatch };

const char* generator_name(GeneratorKind kind);
GeneratorKind parse_generator(const std::string& name);

struct TaskSpec {
  GeneratorKind kind = GeneratorKind::Stripes;
  std::size_t image_side = 16;
  std::size_t channels = 1;
  std::size_t num_classes = 4;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
  std::uint32_t variant = 0;

  /// Checks the class count and image size the generator supports.
  void validate() const;
  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

nlohmann::json task_to_json(const TaskSpec& spec);
TaskSpec task_from_json(const nlohmann::json& j, const std::string& path);

struct SplitSpec {
  std::size_t train_n = 800;
  std::size_t val_n = 200;
  std::size_t test_n = 2000;
  /// Draws exactly k samples per class from the train pool.
  std::optional<std::size_t> few_shot_k;

  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

nlohmann::json split_to_json(const SplitSpec& spec);
SplitSpec split_from_json(const nlohmann::json& j, const std::string& path);

struct Dataset {
  std::size_t channels = 1;
  std::size_t image_side = 16;
  std::size_t num_classes = 0;
  std::vector<float> images;  // [n x C x H x W], values in [0, 1]
  std::vector<std::uint16_t> labels;
  /// Globally unique sample identifiers (source task in the top 16 bits).
  std::vector<std::uint64_t> ids;
  /// Description of the sample source, stored in the file header.
  nlohmann::json source = nlohmann::json::object();

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * image_side * image_side; }
  std::span<const float> image(std::size_t i) const { return {images.data() + i * image_size(), image_size()}; }
  /// Gathers the given samples (in that order) into a contiguous buffer.
  std::vector<float> gather_images(std::span<const std::size_t> rows) const;
  std::vector<int> gather_labels(std::span<const std::size_t> rows) const;

  void append(const Dataset& other);
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct Sample {
  std::vector<float> image;
  int label = 0;
};

/// The sample at `index` of the generator.
Sample generate_sample(const TaskSpec& spec, std::uint64_t index);
/// Samples [first, first + n).
Dataset generate(const TaskSpec& spec, std::size_t n, std::uint64_t first = 0);

/// Closed-form labeler that recovers the class of a noise-free image.
int oracle_label(const TaskSpec& spec, std::span<const float> image);

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Train takes indices [0, train_n), val the next val_n and test the next
/// test_n. In few-shot mode the first k samples of each class in the train
/// range form the training set.
Splits make_splits(const TaskSpec& spec, const SplitSpec& split);

/// Several tasks merged into one label space: task t's classes are shifted by
/// the class counts of tasks 0..t-1 and every split is the concatenation of
/// the per-task splits.
Splits make_mixture_splits(const std::vector<TaskSpec>& tasks, const SplitSpec& split);

inline constexpr char kDatasetMagic[8] = {'G', 'S', 'T', 'D', 'A', 'T', 'A', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace gistlab
