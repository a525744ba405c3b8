#pragma once

// Attachment of parameter-efficient fine-tuning methods to a ModelGraph.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gistlab/peft_spec.hpp"
#include "gistlab/vit.hpp"

namespace gistlab {

/// Trainable tensors created by one attachment, by parameter name.
template <typename T>
struct PeftParams {
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
  std::size_t scalar_count() const;
};

/// Parallel bottleneck adapter beside every FFN: down [D x d] (truncated
/// normal 0.02), GELU, up [d x D] (zeros), output scaled by s and added to
/// the residual sum.
template <typename T>
PeftParams<T> attach_adapter(ModelGraph<T>& model, const PeftSpec& spec, std::uint64_t seed);

/// Shallow prompts: prompt_len D-vectors (truncated normal 0.02) inserted
/// after CLS at the input of the first layer, without positional embedding.
template <typename T>
PeftParams<T> attach_prompt(ModelGraph<T>& model, const PeftSpec& spec, std::uint64_t seed);

/// gamma (.) x + beta after LN1, the q/k/v/out projections, LN2 and the FFN
/// output of each layer, plus one pair on the head input. gamma = 1, beta = 0.
template <typename T>
PeftParams<T> attach_scale_shift(ModelGraph<T>& model, const PeftSpec& spec, std::uint64_t seed);

template <typename T>
PeftParams<T> attach_peft(ModelGraph<T>& model, const PeftSpec& spec, std::uint64_t seed);

struct ParameterCount {
  std::size_t with_head = 0;
  std::size_t without_head = 0;
};

/// Number of scalars that require a gradient.
template <typename T>
ParameterCount trainable_parameter_count(const ModelGraph<T>& model);

/// Closed-form sizes of each attachment.
std::size_t adapter_parameter_count(std::size_t embed_dim, std::size_t hidden, std::size_t layers);
std::size_t prompt_parameter_count(std::size_t embed_dim, std::size_t prompt_len);
std::size_t scale_shift_parameter_count(std::size_t embed_dim, std::size_t layers);

}  // namespace gistlab
