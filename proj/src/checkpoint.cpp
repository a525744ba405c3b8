#include "gistlab/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <set>

#include "gistlab/binary_io.hpp"
#include "gistlab/hash.hpp"
#include "gistlab/json_fields.hpp"

namespace gistlab {

nlohmann::json backbone_to_json(const BackboneConfig& c) {
  return {{"image_side", c.image_side}, {"patch_side", c.patch_side}, {"channels", c.channels},
          {"embed_dim", c.embed_dim},   {"num_layers", c.num_layers}, {"num_heads", c.num_heads},
          {"ffn_hidden", c.ffn_hidden}, {"num_classes", c.num_classes}};
}

BackboneConfig backbone_from_json(const nlohmann::json& j, const std::string& path) {
  FieldReader r(j, path);
  BackboneConfig c;
  c.image_side = r.count("image_side");
  c.patch_side = r.count("patch_side");
  c.channels = r.count("channels");
  c.embed_dim = r.count("embed_dim");
  c.num_layers = r.count("num_layers");
  c.num_heads = r.count("num_heads");
  c.ffn_hidden = r.count("ffn_hidden");
  c.num_classes = r.count("num_classes");
  r.finish();
  c.validate();
  return c;
}

nlohmann::json peft_to_json(const PeftSpec& s) {
  return {{"kind", peft_kind_name(s.kind)},
          {"adapter_hidden", s.adapter_hidden},
          {"adapter_scale", s.adapter_scale},
          {"prompt_len", s.prompt_len},
          {"attach", s.attach == PeftAttach::PerLayer ? "per_layer" : "first_layer_only"}};
}

PeftSpec peft_from_json(const nlohmann::json& j, const std::string& path) {
  FieldReader r(j, path);
  PeftSpec s;
  s.kind = parse_peft_kind(r.string("kind"));
  s.adapter_hidden = r.count("adapter_hidden");
  s.adapter_scale = r.number("adapter_scale");
  s.prompt_len = r.count("prompt_len");
  const auto attach = r.string("attach");
  if (attach == "per_layer") {
    s.attach = PeftAttach::PerLayer;
  } else if (attach == "first_layer_only") {
    s.attach = PeftAttach::FirstLayerOnly;
  } else {
    throw ConfigError(r.field("attach") + ": expected per_layer or first_layer_only");
  }
  r.finish();
  s.validate();
  return s;
}

namespace {

nlohmann::json structure_json(const BackboneConfig& config, const std::vector<PeftSpec>& peft) {
  nlohmann::json p = nlohmann::json::array();
  for (const auto& s : peft) p.push_back(peft_to_json(s));
  return {{"config", backbone_to_json(config)}, {"peft", p}};
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> save_checkpoint(const ModelGraph<T>& model, const CheckpointInfo& info) {
  nlohmann::json structure = structure_json(model.config(), model.peft);
  nlohmann::json meta = structure;
  meta["gelu"] = kGeluVariant;
  meta["init"] = {{"weights", "truncated_normal(std=0.02)"},
                  {"adapter", "down truncated_normal(std=0.02), up zeros"},
                  {"prompt", "truncated_normal(std=0.02)"},
                  {"gist", "truncated_normal(std=0.02)"}};
  meta["pretrain_seed"] = info.pretrain_seed ? nlohmann::json(*info.pretrain_seed) : nlohmann::json(nullptr);
  meta["extra"] = info.extra;
  meta["config_hash"] = json_fingerprint(structure);

  ByteWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic, 8));
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string text = meta.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.put_bytes(text);
  const auto& entries = model.params().entries();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.put_bytes(e.name);
    w.put<std::uint8_t>(std::is_same_v<T, float> ? 0 : 1);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape()) w.put<std::uint64_t>(d);
    for (T v : e.tensor.data()) w.put<T>(v);
    w.put<std::uint8_t>(e.frozen() ? 1 : 0);
  }
  return w.take();
}

template <typename T>
ModelGraph<T> load_checkpoint(std::span<const std::uint8_t> bytes, nlohmann::json* metadata) {
  ByteReader r(bytes);
  if (r.get_string(8, "magic") != std::string_view(kCheckpointMagic, 8)) {
    throw FormatError("bad checkpoint magic", 0);
  }
  const std::size_t version_at = r.offset();
  if (const auto version = r.get<std::uint32_t>("version"); version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  const std::size_t meta_at = r.offset();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.get_string(meta_len, "metadata"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("metadata is not valid JSON: ") + e.what(), meta_at);
  }
  BackboneConfig config;
  std::vector<PeftSpec> peft;
  try {
    config = backbone_from_json(meta.at("config"), "metadata.config");
    for (const auto& p : meta.at("peft")) peft.push_back(peft_from_json(p, "metadata.peft[]"));
    if (meta.at("config_hash").get<std::string>() != json_fingerprint(structure_json(config, peft))) {
      throw FormatError("config_hash does not match the embedded config", meta_at);
    }
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid metadata: ") + e.what(), meta_at);
  }

  ModelGraph<T> model(config);
  std::set<std::string> required;
  for (const auto& e : model.params().entries()) required.insert(e.name);

  const auto count = r.get<std::uint32_t>("parameter count");
  std::vector<std::string> order;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_at = r.offset();
    const auto name_len = r.get<std::uint16_t>("parameter name length");
    std::string name = r.get_string(name_len, "parameter name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) throw FormatError("unknown dtype code " + std::to_string(dtype) + " for '" + name + "'", entry_at);
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>("dimension"));
    const std::size_t n = numel(shape);
    r.require(n * (dtype == 0 ? 4 : 8), "parameter data");
    std::vector<T> values(n);
    for (auto& v : values) v = dtype == 0 ? static_cast<T>(r.get<float>("scalar")) : static_cast<T>(r.get<double>("scalar"));
    const auto frozen = r.get<std::uint8_t>("frozen flag");
    if (frozen > 1) throw FormatError("invalid frozen flag for '" + name + "'", r.offset() - 1);
    auto tensor = Tensor<T>::from(shape, std::move(values), frozen == 0);
    if (std::find(order.begin(), order.end(), name) != order.end()) {
      throw FormatError("duplicate parameter '" + name + "'", entry_at);
    }
    if (model.params().contains(name)) {
      if (model.params().at(name).shape() != shape) {
        throw FormatError("parameter '" + name + "' has shape " + shape_string(shape) + ", expected " +
                              shape_string(model.params().at(name).shape()),
                          entry_at);
      }
      model.params().replace(name, tensor);
      required.erase(name);
    } else {
      model.params().add(name, tensor);
    }
    order.push_back(std::move(name));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after the last parameter", r.offset());
  if (!required.empty()) throw FormatError("missing parameter '" + *required.begin() + "'", r.offset());
  model.params().reorder(order);
  model.peft = peft;
  try {
    model.rebind();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("incomplete PEFT parameters: ") + e.what(), r.offset());
  }
  if (metadata) *metadata = std::move(meta);
  return model;
}

template std::vector<std::uint8_t> save_checkpoint(const ModelGraph<float>&, const CheckpointInfo&);
template std::vector<std::uint8_t> save_checkpoint(const ModelGraph<double>&, const CheckpointInfo&);
template ModelGraph<float> load_checkpoint<float>(std::span<const std::uint8_t>, nlohmann::json*);
template ModelGraph<double> load_checkpoint<double>(std::span<const std::uint8_t>, nlohmann::json*);

}  // namespace gistlab
