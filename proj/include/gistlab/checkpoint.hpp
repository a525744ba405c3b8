#pragma once

// Binary checkpoint format (all integers little-endian):
//
//   "GSTCKPT1"                      8-byte magic
//   u32 version                     currently 1
//   u32 n, n bytes                  UTF-8 JSON metadata
//   u32 parameter count
//   per parameter:
//     u16 n, n bytes                UTF-8 name
//     u8 dtype                      0 = f32, 1 = f64
//     u8 rank, rank x u64           dims
//     raw scalars                   little-endian, row-major
//     u8 frozen
//
// The metadata carries the backbone config, attached PEFT specs, the GELU
// variant, initialization schemes, optional pretrain seed, a caller-supplied
// "extra" object and "config_hash", a fingerprint of config + PEFT that is
// verified on load.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "gistlab/hash.hpp"
#include "gistlab/vit.hpp"

namespace gistlab {

inline constexpr char kCheckpointMagic[8] = {'G', 'S', 'T', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kGeluVariant = "erf";

struct CheckpointInfo {
  std::optional<std::uint64_t> pretrain_seed;
  nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json backbone_to_json(const BackboneConfig& config);
BackboneConfig backbone_from_json(const nlohmann::json& j, const std::string& path);
nlohmann::json peft_to_json(const PeftSpec& spec);
PeftSpec peft_from_json(const nlohmann::json& j, const std::string& path);

template <typename T>
std::vector<std::uint8_t> save_checkpoint(const ModelGraph<T>& model, const CheckpointInfo& info = {});

/// Rebuilds the model, its PEFT attachments and any extra parameters (e.g.
/// a gist token) in file order. Scalars are converted when the file dtype
/// differs from T.
template <typename T>
ModelGraph<T> load_checkpoint(std::span<const std::uint8_t> bytes, nlohmann::json* metadata = nullptr);

}  // namespace gistlab
