#include "gistlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "gistlab/binary_io.hpp"
#include "gistlab/hash.hpp"
#include "gistlab/json_fields.hpp"
#include "gistlab/rng.hpp"

namespace gistlab {

namespace {

constexpr double kPi = std::numbers::pi;

constexpr std::size_t kMaxStripeClasses = 8;
constexpr std::size_t kMaxBlobClasses = 8;
constexpr std::size_t kMaxCountClasses = 8;
constexpr std::size_t kXorCell = 4;
constexpr double kXorTexture = 0.1;
constexpr std::size_t kStripeFrequencies[] = {2, 3};

int label_for(const TaskSpec& spec, std::uint64_t index) {
  return static_cast<int>((index + spec.seed % spec.num_classes) % spec.num_classes);
}

Rng sample_rng(const TaskSpec& spec, std::uint64_t index) {
  const std::uint64_t family = static_cast<std::uint64_t>(spec.kind) << 32 | spec.variant;
  return Rng(derive_seed(derive_seed(spec.seed, family), index));
}

double stripe_angle(const TaskSpec& spec, int k) {
  return kPi * (k + 0.5 * spec.variant) / static_cast<double>(spec.num_classes);
}

double sector_angle(const TaskSpec& spec, int k) {
  return 2.0 * kPi * (k + 0.5 * spec.variant) / static_cast<double>(spec.num_classes);
}

std::size_t count_offset(const TaskSpec& spec) { return 1 + spec.variant; }

std::pair<std::size_t, std::size_t> xor_cells(const TaskSpec& spec) {
  const std::size_t cells = (spec.image_side / kXorCell) * (spec.image_side / kXorCell);
  const std::size_t a = (3 * spec.variant + 5) % cells;
  std::size_t b = (7 * spec.variant + 10) % cells;
  if (b == a) b = (a + 1) % cells;
  return {a, b};
}

float xor_intensity(const TaskSpec& spec, std::size_t level) {
  return static_cast<float>(0.15 + 0.8 * (static_cast<double>(level) + 0.5) / static_cast<double>(spec.num_classes));
}

void render_stripes(const TaskSpec& spec, int label, Rng& rng, std::vector<double>& img) {
  const std::size_t s = spec.image_side;
  const double theta = stripe_angle(spec, label);
  const double freq = static_cast<double>(kStripeFrequencies[rng.below(std::size(kStripeFrequencies))]);
  const double phase = rng.uniform(0.0, 2.0 * kPi);
  const double amp = rng.uniform(0.25, 0.45);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const double u = x * std::cos(theta) + y * std::sin(theta);
      img[y * s + x] = 0.5 + amp * std::sin(2.0 * kPi * freq * u / static_cast<double>(s) + phase);
    }
  }
}

void render_blob(const TaskSpec& spec, int label, Rng& rng, std::vector<double>& img) {
  const std::size_t s = spec.image_side;
  const double c = (static_cast<double>(s) - 1.0) / 2.0;
  const double half_sector = kPi / static_cast<double>(spec.num_classes);
  const double angle = sector_angle(spec, label) + rng.uniform(-0.6, 0.6) * half_sector;
  const double radius = rng.uniform(0.15, 0.3) * static_cast<double>(s);
  const double sigma = rng.uniform(0.06, 0.09) * static_cast<double>(s);
  const double amp = rng.uniform(0.6, 1.0);
  const double bx = c + radius * std::cos(angle);
  const double by = c + radius * std::sin(angle);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const double dx = x - bx, dy = y - by;
      img[y * s + x] = amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
    }
  }
}

void render_count(const TaskSpec& spec, int label, Rng& rng, std::vector<double>& img) {
  const std::size_t s = spec.image_side;
  const std::size_t count = static_cast<std::size_t>(label) + count_offset(spec);
  std::vector<std::pair<std::size_t, std::size_t>> placed;
  while (placed.size() < count) {
    const std::size_t x = rng.below(s - 1), y = rng.below(s - 1);
    // 2x2 squares with at least one empty pixel between any two of them.
    const bool clear = std::all_of(placed.begin(), placed.end(), [&](const auto& p) {
      const auto dx = x > p.first ? x - p.first : p.first - x;
      const auto dy = y > p.second ? y - p.second : p.second - y;
      return dx >= 3 || dy >= 3;
    });
    if (!clear) continue;
    placed.emplace_back(x, y);
    const double v = rng.uniform(0.6, 1.0);
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < 2; ++j) img[(y + i) * s + x + j] = v;
    }
  }
}

void render_xor(const TaskSpec& spec, int label, Rng& rng, std::vector<double>& img) {
  const std::size_t s = spec.image_side;
  const std::size_t grid = s / kXorCell;
  const std::size_t k = spec.num_classes;
  const auto [a, b] = xor_cells(spec);
  const std::size_t level_a = rng.below(k);
  const std::size_t level_b = (static_cast<std::size_t>(label) + k - level_a) % k;
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const std::size_t cell = (y / kXorCell) * grid + x / kXorCell;
      // Cells other than A and B carry texture below the darkest level.
      img[y * s + x] = cell == a   ? xor_intensity(spec, level_a)
                       : cell == b ? xor_intensity(spec, level_b)
                                   : rng.uniform(0.0, kXorTexture);
    }
  }
}

int nearest_sector(double angle, double offset, std::size_t k) {
  const double pos = angle / (2.0 * kPi) * static_cast<double>(k) - offset;
  const long r = std::lround(pos);
  return static_cast<int>(((r % static_cast<long>(k)) + static_cast<long>(k)) % static_cast<long>(k));
}

}  // namespace

const char* generator_name(GeneratorKind kind) {
  switch (kind) {
    case GeneratorKind::Stripes: return "stripes";
    case GeneratorKind::Blobs: return "blobs";
    case GeneratorKind::Count: return "count";
    case GeneratorKind::XorPatch: return "xor_patch";
  }
  return "?";
}

GeneratorKind parse_generator(const std::string& name) {
  for (auto k : {GeneratorKind::Stripes, GeneratorKind::Blobs, GeneratorKind::Count, GeneratorKind::XorPatch}) {
    if (name == generator_name(k)) return k;
  }
  throw ConfigError("unknown generator '" + name + "' (expected stripes, blobs, count or xor_patch)");
}

void TaskSpec::validate() const {
  if (num_classes < 2) throw ConfigError("task: num_classes must be at least 2");
  if (channels < 1) throw ConfigError("task: channels must be at least 1");
  if (image_side < 8) throw ConfigError("task: image_side must be at least 8");
  if (!(noise_std >= 0.0)) throw ConfigError("task: noise_std must be non-negative");
  switch (kind) {
    case GeneratorKind::Stripes:
      if (num_classes > kMaxStripeClasses) throw ConfigError("task: stripes supports at most 8 classes");
      break;
    case GeneratorKind::Blobs:
      if (num_classes > kMaxBlobClasses) throw ConfigError("task: blobs supports at most 8 classes");
      break;
    case GeneratorKind::Count:
      if (num_classes > kMaxCountClasses) throw ConfigError("task: count supports at most 8 classes");
      if (num_classes + count_offset(*this) > 12) throw ConfigError("task: count variant too large for the image");
      break;
    case GeneratorKind::XorPatch:
      if (image_side % kXorCell != 0) throw ConfigError("task: xor_patch needs image_side divisible by 4");
      break;
  }
}

nlohmann::json task_to_json(const TaskSpec& s) {
  return {{"generator", generator_name(s.kind)}, {"image_side", s.image_side}, {"channels", s.channels},
          {"num_classes", s.num_classes},        {"noise_std", s.noise_std},   {"seed", s.seed},
          {"variant", s.variant}};
}

TaskSpec task_from_json(const nlohmann::json& j, const std::string& path) {
  FieldReader r(j, path);
  TaskSpec s;
  s.kind = parse_generator(r.string("generator"));
  s.image_side = r.count("image_side");
  s.channels = r.count("channels");
  s.num_classes = r.count("num_classes");
  s.noise_std = r.number("noise_std");
  s.seed = r.u64("seed");
  s.variant = static_cast<std::uint32_t>(r.count("variant"));
  r.finish();
  s.validate();
  return s;
}

nlohmann::json split_to_json(const SplitSpec& s) {
  return {{"train_n", s.train_n},
          {"val_n", s.val_n},
          {"test_n", s.test_n},
          {"few_shot_k", s.few_shot_k ? nlohmann::json(*s.few_shot_k) : nlohmann::json(nullptr)}};
}

SplitSpec split_from_json(const nlohmann::json& j, const std::string& path) {
  FieldReader r(j, path);
  SplitSpec s;
  s.train_n = r.count("train_n");
  s.val_n = r.count("val_n");
  s.test_n = r.count("test_n");
  const auto& k = r.raw("few_shot_k");
  if (!k.is_null()) {
    if (!k.is_number_unsigned() || k.get<std::size_t>() == 0) {
      throw ConfigError(r.field("few_shot_k") + ": expected null or a positive integer");
    }
    s.few_shot_k = k.get<std::size_t>();
  }
  r.finish();
  if (s.train_n == 0 || s.val_n == 0 || s.test_n == 0) throw ConfigError(path + ": split sizes must be positive");
  return s;
}

std::vector<float> Dataset::gather_images(std::span<const std::size_t> rows) const {
  std::vector<float> out;
  out.reserve(rows.size() * image_size());
  for (std::size_t r : rows) {
    auto img = image(r);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> rows) const {
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(labels[r]);
  return out;
}

void Dataset::append(const Dataset& other) {
  if (size() > 0 && (other.channels != channels || other.image_side != image_side)) {
    throw DimensionError("dataset append: image dimensions differ");
  }
  if (size() == 0) {
    channels = other.channels;
    image_side = other.image_side;
  }
  num_classes = std::max(num_classes, other.num_classes);
  images.insert(images.end(), other.images.begin(), other.images.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  ids.insert(ids.end(), other.ids.begin(), other.ids.end());
}

Sample generate_sample(const TaskSpec& spec, std::uint64_t index) {
  spec.validate();
  const std::size_t s = spec.image_side;
  Sample out;
  out.label = label_for(spec, index);
  Rng rng = sample_rng(spec, index);
  std::vector<double> base(s * s, 0.0);
  switch (spec.kind) {
    case GeneratorKind::Stripes: render_stripes(spec, out.label, rng, base); break;
    case GeneratorKind::Blobs: render_blob(spec, out.label, rng, base); break;
    case GeneratorKind::Count: render_count(spec, out.label, rng, base); break;
    case GeneratorKind::XorPatch: render_xor(spec, out.label, rng, base); break;
  }
  out.image.resize(spec.channels * s * s);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    for (std::size_t p = 0; p < s * s; ++p) {
      double v = base[p];
      if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
      out.image[c * s * s + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

Dataset generate(const TaskSpec& spec, std::size_t n, std::uint64_t first) {
  spec.validate();
  if (n == 0) throw ConfigError("generate: n must be at least 1");
  Dataset d;
  d.channels = spec.channels;
  d.image_side = spec.image_side;
  d.num_classes = spec.num_classes;
  d.source = {{"task", task_to_json(spec)}, {"first", first}, {"count", n}};
  d.images.reserve(n * d.image_size());
  for (std::uint64_t i = first; i < first + n; ++i) {
    auto sample = generate_sample(spec, i);
    d.images.insert(d.images.end(), sample.image.begin(), sample.image.end());
    d.labels.push_back(static_cast<std::uint16_t>(sample.label));
    d.ids.push_back(i);
  }
  return d;
}

int oracle_label(const TaskSpec& spec, std::span<const float> image) {
  spec.validate();
  const std::size_t s = spec.image_side;
  if (image.size() != spec.channels * s * s) throw DimensionError("oracle_label: image size mismatch");
  auto px = [&](std::size_t x, std::size_t y) { return static_cast<double>(image[y * s + x]); };
  const int k = static_cast<int>(spec.num_classes);

  switch (spec.kind) {
    case GeneratorKind::Stripes: {
      // Largest Fourier magnitude over the class orientations and the
      // generator's frequencies.
      double mean = 0.0;
      for (std::size_t p = 0; p < s * s; ++p) mean += image[p];
      mean /= static_cast<double>(s * s);
      int best = 0;
      double best_power = -1.0;
      for (int c = 0; c < k; ++c) {
        const double theta = stripe_angle(spec, c);
        for (std::size_t f : kStripeFrequencies) {
          double re = 0.0, im = 0.0;
          for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
              const double u = x * std::cos(theta) + y * std::sin(theta);
              const double w = 2.0 * kPi * static_cast<double>(f) * u / static_cast<double>(s);
              re += (px(x, y) - mean) * std::cos(w);
              im += (px(x, y) - mean) * std::sin(w);
            }
          }
          const double power = re * re + im * im;
          if (power > best_power) {
            best_power = power;
            best = c;
          }
        }
      }
      return best;
    }
    case GeneratorKind::Blobs: {
      double total = 0.0, mx = 0.0, my = 0.0;
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          total += px(x, y);
          mx += px(x, y) * x;
          my += px(x, y) * y;
        }
      }
      const double c = (static_cast<double>(s) - 1.0) / 2.0;
      double angle = std::atan2(my / total - c, mx / total - c);
      if (angle < 0.0) angle += 2.0 * kPi;
      return nearest_sector(angle, 0.5 * spec.variant, spec.num_classes);
    }
    case GeneratorKind::Count: {
      std::vector<char> seen(s * s, 0);
      int components = 0;
      std::vector<std::size_t> stack;
      for (std::size_t p = 0; p < s * s; ++p) {
        if (seen[p] || image[p] <= 0.3f) continue;
        ++components;
        stack.push_back(p);
        seen[p] = 1;
        while (!stack.empty()) {
          const std::size_t q = stack.back();
          stack.pop_back();
          const long qx = static_cast<long>(q % s), qy = static_cast<long>(q / s);
          for (long dy = -1; dy <= 1; ++dy) {
            for (long dx = -1; dx <= 1; ++dx) {
              const long nx = qx + dx, ny = qy + dy;
              if (nx < 0 || ny < 0 || nx >= static_cast<long>(s) || ny >= static_cast<long>(s)) continue;
              const std::size_t n = static_cast<std::size_t>(ny) * s + static_cast<std::size_t>(nx);
              if (!seen[n] && image[n] > 0.3f) {
                seen[n] = 1;
                stack.push_back(n);
              }
            }
          }
        }
      }
      return components - static_cast<int>(count_offset(spec));
    }
    case GeneratorKind::XorPatch: {
      const std::size_t grid = s / kXorCell;
      auto level = [&](std::size_t cell) {
        const std::size_t cx = (cell % grid) * kXorCell, cy = (cell / grid) * kXorCell;
        double m = 0.0;
        for (std::size_t y = 0; y < kXorCell; ++y) {
          for (std::size_t x = 0; x < kXorCell; ++x) m += px(cx + x, cy + y);
        }
        m /= static_cast<double>(kXorCell * kXorCell);
        const double l = (m - 0.15) / 0.8 * static_cast<double>(k) - 0.5;
        return std::clamp(static_cast<int>(std::lround(l)), 0, k - 1);
      };
      const auto [a, b] = xor_cells(spec);
      return (level(a) + level(b)) % k;
    }
  }
  return -1;
}

namespace {

Dataset few_shot(const Dataset& pool, std::size_t k) {
  if (k * pool.num_classes > pool.size()) {
    throw ConfigError("few-shot: " + std::to_string(k) + " per class needs " + std::to_string(k * pool.num_classes) +
                      " samples but the train pool has " + std::to_string(pool.size()));
  }
  std::vector<std::size_t> taken(pool.num_classes, 0);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < pool.size() && rows.size() < k * pool.num_classes; ++i) {
    if (taken[pool.labels[i]] < k) {
      ++taken[pool.labels[i]];
      rows.push_back(i);
    }
  }
  if (rows.size() != k * pool.num_classes) throw ConfigError("few-shot: train pool lacks samples of some class");
  Dataset out;
  out.channels = pool.channels;
  out.image_side = pool.image_side;
  out.num_classes = pool.num_classes;
  out.images = pool.gather_images(rows);
  for (std::size_t r : rows) {
    out.labels.push_back(pool.labels[r]);
    out.ids.push_back(pool.ids[r]);
  }
  return out;
}

}  // namespace

Splits make_splits(const TaskSpec& spec, const SplitSpec& split) {
  if (split.train_n == 0 || split.val_n == 0 || split.test_n == 0) {
    throw ConfigError("make_splits: split sizes must be positive");
  }
  Splits out;
  out.train = generate(spec, split.train_n, 0);
  out.val = generate(spec, split.val_n, split.train_n);
  out.test = generate(spec, split.test_n, split.train_n + split.val_n);
  if (split.few_shot_k) out.train = few_shot(out.train, *split.few_shot_k);
  const nlohmann::json base = {{"task", task_to_json(spec)}, {"split", split_to_json(split)}};
  out.train.source = base;
  out.train.source["part"] = "train";
  out.val.source = base;
  out.val.source["part"] = "val";
  out.test.source = base;
  out.test.source["part"] = "test";
  return out;
}

Splits make_mixture_splits(const std::vector<TaskSpec>& tasks, const SplitSpec& split) {
  if (tasks.empty()) throw ConfigError("make_mixture_splits: no tasks");
  Splits out;
  std::size_t offset = 0;
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    Splits part = make_splits(tasks[t], split);
    for (Dataset* d : {&part.train, &part.val, &part.test}) {
      for (auto& l : d->labels) l = static_cast<std::uint16_t>(l + offset);
      for (auto& id : d->ids) id |= static_cast<std::uint64_t>(t) << 48;
      d->num_classes += offset;
    }
    out.train.append(part.train);
    out.val.append(part.val);
    out.test.append(part.test);
    offset += tasks[t].num_classes;
    list.push_back(task_to_json(tasks[t]));
  }
  const nlohmann::json base = {{"mixture", list}, {"split", split_to_json(split)}};
  out.train.source = base;
  out.train.source["part"] = "train";
  out.val.source = base;
  out.val.source["part"] = "val";
  out.test.source = base;
  out.test.source["part"] = "test";
  return out;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
  if (data.images.size() != data.size() * data.image_size() || data.ids.size() != data.size()) {
    throw DimensionError("encode_dataset: inconsistent dataset buffers");
  }
  nlohmann::json header = {{"source", data.source},         {"config_hash", json_fingerprint(data.source)},
                           {"count", data.size()},          {"channels", data.channels},
                           {"image_side", data.image_side}, {"num_classes", data.num_classes},
                           {"ids", data.ids}};
  ByteWriter w;
  w.put_bytes(std::string_view(kDatasetMagic, 8));
  w.put<std::uint32_t>(kDatasetVersion);
  const std::string text = header.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.put_bytes(text);
  for (float v : data.images) w.put<float>(v);
  for (std::uint16_t l : data.labels) w.put<std::uint16_t>(l);
  return w.take();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.get_string(8, "magic") != std::string_view(kDatasetMagic, 8)) throw FormatError("bad dataset magic", 0);
  const std::size_t version_at = r.offset();
  if (const auto v = r.get<std::uint32_t>("version"); v != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(v), version_at);
  }
  const auto len = r.get<std::uint32_t>("header length");
  const std::size_t header_at = r.offset();
  Dataset d;
  std::size_t count = 0;
  try {
    const auto header = nlohmann::json::parse(r.get_string(len, "header"));
    d.source = header.at("source");
    if (header.at("config_hash").get<std::string>() != json_fingerprint(d.source)) {
      throw FormatError("config_hash does not match the embedded source description", header_at);
    }
    count = header.at("count").get<std::size_t>();
    d.channels = header.at("channels").get<std::size_t>();
    d.image_side = header.at("image_side").get<std::size_t>();
    d.num_classes = header.at("num_classes").get<std::size_t>();
    d.ids = header.at("ids").get<std::vector<std::uint64_t>>();
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid dataset header: ") + e.what(), header_at);
  }
  if (d.ids.size() != count) throw FormatError("header lists a different number of ids than count", header_at);
  const std::size_t pixels = count * d.image_size();
  r.require(pixels * 4, "images");
  d.images.resize(pixels);
  for (auto& v : d.images) v = r.get<float>("pixel");
  r.require(count * 2, "labels");
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    d.labels[i] = r.get<std::uint16_t>("label");
    if (d.labels[i] >= d.num_classes) throw FormatError("label out of range", at);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after the labels", r.offset());
  return d;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  write_file_bytes(path, encode_dataset(data));
}

Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(read_file_bytes(path)); }

}  // namespace gistlab
