#include "gistlab/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <set>
#include <sstream>

#include "gistlab/binary_io.hpp"
#include "gistlab/checkpoint.hpp"
#include "gistlab/hash.hpp"
#include "gistlab/json_fields.hpp"
#include "gistlab/peft.hpp"
#include "gistlab/rng.hpp"
#include "gistlab/suite.hpp"

namespace gistlab {

namespace fs = std::filesystem;

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::F32;
  if (name == "f64") return Precision::F64;
  throw ConfigError("unknown precision '" + name + "' (expected f32 or f64)");
}

const char* mode_name(FrameworkMode mode) { return mode == FrameworkMode::Gist ? "gist" : "traditional"; }

FrameworkMode parse_mode(const std::string& name) {
  if (name == "traditional") return FrameworkMode::Traditional;
  if (name == "gist") return FrameworkMode::Gist;
  throw ConfigError("unknown framework mode '" + name + "' (expected traditional or gist)");
}

void ExperimentConfig::validate() const {
  backbone.validate();
  if (pretrain.tasks.empty()) throw ConfigError("pretrain.tasks must not be empty");
  std::size_t source_classes = 0;
  auto check_task = [&](const TaskSpec& t, const std::string& where) {
    t.validate();
    if (t.image_side != backbone.image_side || t.channels != backbone.channels) {
      throw ConfigError(where + ": image size differs from the backbone input");
    }
  };
  for (std::size_t i = 0; i < pretrain.tasks.size(); ++i) {
    check_task(pretrain.tasks[i], "pretrain.tasks[" + std::to_string(i) + "]");
    source_classes += pretrain.tasks[i].num_classes;
  }
  if (source_classes != backbone.num_classes) {
    throw ConfigError("backbone.num_classes is " + std::to_string(backbone.num_classes) +
                      " but the pretraining tasks have " + std::to_string(source_classes) + " classes");
  }
  pretrain.optim.validate();
  optim.validate();
  gist.validate();
  if (tasks.empty()) throw ConfigError("tasks must not be empty");
  for (std::size_t i = 0; i < tasks.size(); ++i) check_task(tasks[i], "tasks[" + std::to_string(i) + "]");
  std::set<PeftKind> kinds;
  for (const auto& p : peft) {
    p.validate();
    if (!kinds.insert(p.kind).second) throw ConfigError(std::string("peft: ") + peft_kind_name(p.kind) + " listed twice");
  }
  if (gist.aux_vpt_loss && !kinds.count(PeftKind::Prompt)) {
    throw ConfigError("gist.aux_vpt_loss needs a prompt entry in peft");
  }
  if (modes.empty()) throw ConfigError("modes must not be empty");
  if (std::set<FrameworkMode>(modes.begin(), modes.end()).size() != modes.size()) {
    throw ConfigError("modes lists a mode twice");
  }
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (checkpoint.empty()) throw ConfigError("checkpoint must not be empty");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

namespace {

nlohmann::json tasks_to_json(const std::vector<TaskSpec>& tasks) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& t : tasks) out.push_back(task_to_json(t));
  return out;
}

std::vector<TaskSpec> tasks_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected an array");
  std::vector<TaskSpec> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(task_from_json(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

nlohmann::json pretrain_json(const ExperimentConfig& cfg) {
  return {{"tasks", tasks_to_json(cfg.pretrain.tasks)},
          {"split", split_to_json(cfg.pretrain.split)},
          {"optim", optim_to_json(cfg.pretrain.optim)},
          {"seed", cfg.pretrain.seed}};
}

// Identifies the pretrained checkpoint a config expects.
std::string pretrain_hash(const ExperimentConfig& cfg) {
  return json_fingerprint({{"backbone", backbone_to_json(cfg.backbone)}, {"pretrain", pretrain_json(cfg)}});
}

std::pair<std::size_t, std::size_t> line_and_column(const std::string& text, std::size_t byte) {
  std::size_t line = 1, column = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  return {line, column};
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void log_line(std::ostream* log, const std::string& line) {
  if (log) *log << line << std::endl;
}

std::string percent(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * v;
  return s.str();
}

}  // namespace

nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json peft = nlohmann::json::array();
  for (const auto& p : cfg.peft) peft.push_back(peft_to_json(p));
  nlohmann::json modes = nlohmann::json::array();
  for (auto m : cfg.modes) modes.push_back(mode_name(m));
  return {{"backbone", backbone_to_json(cfg.backbone)},
          {"pretrain", pretrain_json(cfg)},
          {"checkpoint", cfg.checkpoint},
          {"peft", peft},
          {"gist", gist_to_json(cfg.gist)},
          {"optim", optim_to_json(cfg.optim)},
          {"tasks", tasks_to_json(cfg.tasks)},
          {"split", split_to_json(cfg.split)},
          {"modes", modes},
          {"seeds", cfg.seeds},
          {"output_dir", cfg.output_dir}};
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  FieldReader r(j, "config");
  ExperimentConfig cfg;
  cfg.backbone = backbone_from_json(r.raw("backbone"), "config.backbone");
  {
    FieldReader p(r.raw("pretrain"), "config.pretrain");
    cfg.pretrain.tasks = tasks_from_json(p.raw("tasks"), p.field("tasks"));
    cfg.pretrain.split = split_from_json(p.raw("split"), p.field("split"));
    cfg.pretrain.optim = optim_from_json(p.raw("optim"), p.field("optim"));
    cfg.pretrain.seed = p.u64("seed");
    p.finish();
  }
  cfg.checkpoint = r.string("checkpoint");
  const auto& peft = r.raw("peft");
  if (!peft.is_array()) throw ConfigError("config.peft: expected an array");
  for (std::size_t i = 0; i < peft.size(); ++i) {
    cfg.peft.push_back(peft_from_json(peft[i], "config.peft[" + std::to_string(i) + "]"));
  }
  cfg.gist = gist_from_json(r.raw("gist"), "config.gist");
  cfg.optim = optim_from_json(r.raw("optim"), "config.optim");
  cfg.tasks = tasks_from_json(r.raw("tasks"), "config.tasks");
  cfg.split = split_from_json(r.raw("split"), "config.split");
  const auto& modes = r.raw("modes");
  if (!modes.is_array()) throw ConfigError("config.modes: expected an array");
  for (const auto& m : modes) {
    if (!m.is_string()) throw ConfigError("config.modes: expected strings");
    cfg.modes.push_back(parse_mode(m.get<std::string>()));
  }
  const auto& seeds = r.raw("seeds");
  if (!seeds.is_array()) throw ConfigError("config.seeds: expected an array");
  for (const auto& s : seeds) {
    if (!s.is_number_unsigned()) throw ConfigError("config.seeds: expected non-negative integers");
    cfg.seeds.push_back(s.get<std::uint64_t>());
  }
  cfg.output_dir = r.string("output_dir");
  r.finish();
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, column] = line_and_column(text, e.byte);
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(column) + ": invalid JSON (" +
                      e.what() + ")");
  }
  try {
    return config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

std::string config_hash(const ExperimentConfig& cfg) { return json_fingerprint(config_to_json(cfg)); }

std::string task_name(const ExperimentConfig& cfg, std::size_t index) {
  return "t" + std::to_string(index) + "-" + generator_name(cfg.tasks.at(index).kind);
}

std::uint64_t cell_seed(std::uint64_t seed, std::size_t task_index) { return derive_seed(seed, 1000 + task_index); }

ExperimentConfig apply_overrides(ExperimentConfig cfg, const RunOptions& options) {
  if (options.out) cfg.output_dir = options.out->string();
  if (options.seeds) cfg.seeds = *options.seeds;
  cfg.validate();
  return cfg;
}

template <typename T>
ModelGraph<T> pretrain_model(const ExperimentConfig& cfg, TrainRecord* record, std::ostream* metrics) {
  cfg.validate();
  const Splits data = make_mixture_splits(cfg.pretrain.tasks, cfg.pretrain.split);
  ModelGraph<T> model(cfg.backbone);
  model.initialize(cfg.pretrain.seed);
  model.params().set_all_frozen(false);
  TraditionalObjective<T> objective;
  FinetuneOptions<T> options;
  options.optim = cfg.pretrain.optim;
  options.seed = cfg.pretrain.seed;
  options.config_hash = pretrain_hash(cfg);
  options.metrics = metrics;
  auto r = finetune(model, objective, data, options);
  if (record) *record = std::move(r);
  return model;
}

template <typename T>
TrainRecord finetune_run(const ExperimentConfig& cfg, const ModelGraph<T>& pretrained, const Splits& data,
                         std::size_t task_index, std::uint64_t seed, FrameworkMode mode, std::ostream* metrics,
                         ModelGraph<T>* final_model) {
  const auto& task = cfg.tasks.at(task_index);
  const std::uint64_t s = cell_seed(seed, task_index);
  ModelGraph<T> model = pretrained.clone();
  model.reset_head(task.num_classes, derive_seed(s, 1));
  for (std::size_t i = 0; i < cfg.peft.size(); ++i) attach_peft(model, cfg.peft[i], derive_seed(s, 2 + i));
  model.set_finetune_freeze();

  std::unique_ptr<Objective<T>> objective;
  if (mode == FrameworkMode::Gist) {
    objective = std::make_unique<GistObjective<T>>(cfg.gist);
  } else {
    objective = std::make_unique<TraditionalObjective<T>>();
  }
  FinetuneOptions<T> options;
  options.optim = cfg.optim;
  options.seed = s;
  options.config_hash = config_hash(cfg);
  options.metrics = metrics;
  auto record = finetune(model, *objective, data, options);
  if (final_model) *final_model = std::move(model);
  return record;
}

ModeSummary ModeSummary::of(std::vector<double> values) {
  ModeSummary s;
  s.test_acc = std::move(values);
  if (s.test_acc.empty()) return s;
  double sum = 0.0;
  for (double v : s.test_acc) sum += v;
  s.mean = sum / static_cast<double>(s.test_acc.size());
  if (s.test_acc.size() > 1) {
    double sq = 0.0;
    for (double v : s.test_acc) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(s.test_acc.size() - 1));
  }
  return s;
}

namespace {

nlohmann::json mode_json(const ModeSummary& s) {
  return {{"test_acc", s.test_acc}, {"mean", s.mean}, {"std", s.std}};
}

}  // namespace

nlohmann::json FinetuneSummary::to_json() const {
  nlohmann::json tasks_json = nlohmann::json::array();
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    nlohmann::json modes = nlohmann::json::object();
    for (const auto& [m, s] : per_task[t]) modes[mode_name(m)] = mode_json(s);
    tasks_json.push_back({{"task", tasks[t]}, {"modes", modes}});
  }
  nlohmann::json overall_json = nlohmann::json::object();
  for (const auto& [m, s] : overall) overall_json[mode_name(m)] = mode_json(s);
  return {{"config_hash", config_hash}, {"seeds", seeds},
          {"tasks", tasks_json},        {"overall", overall_json},
          {"gist_better_cells", gist_better_cells}, {"cells", cells}};
}

std::string FinetuneSummary::to_text() const {
  std::ostringstream out;
  std::vector<FrameworkMode> modes;
  for (const auto& [m, s] : overall) modes.push_back(m);
  out << "config " << config_hash << ", " << seeds.size() << " seed(s), test accuracy % (mean +- std)\n";
  out << std::left << std::setw(16) << "task";
  for (auto m : modes) out << std::setw(20) << mode_name(m);
  out << '\n';
  auto row = [&](const std::string& name, const std::map<FrameworkMode, ModeSummary>& cells_of) {
    out << std::left << std::setw(16) << name;
    for (auto m : modes) {
      const auto& s = cells_of.at(m);
      out << std::setw(20) << (percent(s.mean) + " +- " + percent(s.std));
    }
    out << '\n';
  };
  for (std::size_t t = 0; t < tasks.size(); ++t) row(tasks[t], per_task[t]);
  row("overall", overall);
  if (cells > 0) out << "gist > traditional in " << gist_better_cells << "/" << cells << " (task, seed) cells\n";
  return out.str();
}

template <typename T>
FinetuneSummary run_finetune_sweep(const ExperimentConfig& cfg, const ModelGraph<T>& pretrained,
                                   const std::optional<fs::path>& dir, std::ostream* log) {
  cfg.validate();
  FinetuneSummary summary;
  summary.config_hash = config_hash(cfg);
  summary.seeds = cfg.seeds;
  std::map<FrameworkMode, std::vector<double>> all;
  const bool paired = std::count(cfg.modes.begin(), cfg.modes.end(), FrameworkMode::Gist) &&
                      std::count(cfg.modes.begin(), cfg.modes.end(), FrameworkMode::Traditional);
  for (std::size_t t = 0; t < cfg.tasks.size(); ++t) {
    const Splits data = make_splits(cfg.tasks[t], cfg.split);
    const std::string name = task_name(cfg, t);
    summary.tasks.push_back(name);
    std::map<FrameworkMode, std::vector<double>> per_seed;
    for (std::uint64_t seed : cfg.seeds) {
      std::map<FrameworkMode, double> acc;
      for (FrameworkMode mode : cfg.modes) {
        std::optional<fs::path> run_dir;
        std::ofstream metrics;
        if (dir) {
          run_dir = *dir / name / mode_name(mode) / ("seed-" + std::to_string(seed));
          fs::create_directories(*run_dir);
          metrics.open(*run_dir / "metrics.jsonl", std::ios::binary);
        }
        ModelGraph<T> final_model(cfg.backbone);
        auto record = finetune_run(cfg, pretrained, data, t, seed, mode, dir ? &metrics : nullptr, &final_model);
        if (run_dir) {
          write_text(*run_dir / "record.json", record.to_json().dump(1) + "\n");
          CheckpointInfo info;
          info.pretrain_seed = cfg.pretrain.seed;
          info.extra = {{"config_hash", summary.config_hash}, {"task", name}, {"mode", mode_name(mode)},
                        {"seed", seed}, {"test_acc", record.test_acc}};
          write_file_bytes(*run_dir / "model.ckpt", save_checkpoint(final_model, info));
        }
        log_line(log, name + " " + mode_name(mode) + " seed " + std::to_string(seed) + ": test " +
                          percent(record.test_acc) + "% (" + std::to_string(record.elapsed_seconds) + " s)");
        acc[mode] = record.test_acc;
        per_seed[mode].push_back(record.test_acc);
        all[mode].push_back(record.test_acc);
      }
      if (paired) {
        ++summary.cells;
        if (acc[FrameworkMode::Gist] > acc[FrameworkMode::Traditional]) ++summary.gist_better_cells;
      }
    }
    std::map<FrameworkMode, ModeSummary> task_summary;
    for (auto& [m, v] : per_seed) task_summary[m] = ModeSummary::of(v);
    summary.per_task.push_back(std::move(task_summary));
  }
  for (auto& [m, v] : all) summary.overall[m] = ModeSummary::of(v);
  return summary;
}

namespace {

template <typename T>
ModelGraph<T> load_pretrained(const ExperimentConfig& cfg) {
  if (!fs::exists(cfg.checkpoint)) {
    throw Error("pretrained checkpoint '" + cfg.checkpoint + "' does not exist (run pretrain first)");
  }
  nlohmann::json meta;
  auto model = load_checkpoint<T>(read_file_bytes(cfg.checkpoint), &meta);
  const auto expected = pretrain_hash(cfg);
  const auto& extra = meta.at("extra");
  if (!extra.contains("pretrain_hash") || extra.at("pretrain_hash") != expected) {
    throw ConfigError("checkpoint '" + cfg.checkpoint + "' was not produced by this config's pretrain section");
  }
  return model;
}

template <typename T>
fs::path pretrain_impl(const ExperimentConfig& cfg, std::ostream* log) {
  const fs::path dir = fs::path(cfg.output_dir) / ("pretrain-" + pretrain_hash(cfg));
  fs::create_directories(dir);
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  TrainRecord record;
  log_line(log, "pretraining on " + std::to_string(cfg.pretrain.tasks.size()) + " task(s)");
  auto model = pretrain_model<T>(cfg, &record, &metrics);
  log_line(log, "source test accuracy " + percent(record.test_acc) + "% (" + std::to_string(record.elapsed_seconds) +
                    " s)");
  CheckpointInfo info;
  info.pretrain_seed = cfg.pretrain.seed;
  info.extra = {{"pretrain_hash", pretrain_hash(cfg)}, {"source_test_acc", record.test_acc}};
  const auto bytes = save_checkpoint(model, info);
  write_file_bytes(dir / "model.ckpt", bytes);
  write_file_bytes(cfg.checkpoint, bytes);
  write_text(dir / "record.json", record.to_json().dump(1) + "\n");
  write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  return dir;
}

template <typename T>
FinetuneSummary finetune_impl(const ExperimentConfig& cfg, std::ostream* log, fs::path* run_dir) {
  const auto pretrained = load_pretrained<T>(cfg);
  const fs::path dir = fs::path(cfg.output_dir) / ("finetune-" + config_hash(cfg));
  fs::create_directories(dir);
  write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  auto summary = run_finetune_sweep(cfg, pretrained, dir, log);
  write_text(dir / "summary.json", summary.to_json().dump(2) + "\n");
  write_text(dir / "summary.txt", summary.to_text());
  if (run_dir) *run_dir = dir;
  return summary;
}

}  // namespace

fs::path cmd_pretrain(const ExperimentConfig& config, const RunOptions& options) {
  const auto cfg = apply_overrides(config, options);
  return options.precision == Precision::F64 ? pretrain_impl<double>(cfg, options.log)
                                             : pretrain_impl<float>(cfg, options.log);
}

FinetuneSummary cmd_finetune(const ExperimentConfig& config, const RunOptions& options, fs::path* run_dir) {
  const auto cfg = apply_overrides(config, options);
  return options.precision == Precision::F64 ? finetune_impl<double>(cfg, options.log, run_dir)
                                             : finetune_impl<float>(cfg, options.log, run_dir);
}

AblationGrid parse_grid(const std::string& name) {
  for (auto g : {AblationGrid::Lambda, AblationGrid::TokenLen, AblationGrid::LossTerms, AblationGrid::Interaction}) {
    if (name == grid_name(g)) return g;
  }
  throw ConfigError("unknown grid '" + name + "' (expected LAMBDA, TOKEN_LEN, LOSS_TERMS or INTERACTION)");
}

const char* grid_name(AblationGrid grid) {
  switch (grid) {
    case AblationGrid::Lambda: return "LAMBDA";
    case AblationGrid::TokenLen: return "TOKEN_LEN";
    case AblationGrid::LossTerms: return "LOSS_TERMS";
    case AblationGrid::Interaction: return "INTERACTION";
  }
  return "?";
}

std::vector<AblationCell> ablation_cells(const ExperimentConfig& cfg, AblationGrid grid) {
  std::vector<AblationCell> cells;
  const std::size_t d = cfg.backbone.embed_dim;
  auto baseline = [&](std::string name) {
    AblationCell c{std::move(name), cfg, FrameworkMode::Traditional, 0};
    c.config.modes = {FrameworkMode::Traditional};
    cells.push_back(std::move(c));
  };
  auto gist_cell = [&](std::string name, GistLossConfig g) {
    g.enabled = true;
    g.validate();
    AblationCell c{std::move(name), cfg, FrameworkMode::Gist, d * g.gist_len};
    c.config.gist = g;
    c.config.modes = {FrameworkMode::Gist};
    cells.push_back(std::move(c));
  };
  GistLossConfig base = cfg.gist;
  switch (grid) {
    case AblationGrid::Lambda:
      baseline("baseline");
      for (double lambda : {0.25, 0.5, 0.75}) {
        GistLossConfig g = base;
        g.interaction = InteractionKind::Bkld;
        g.lambda = lambda;
        std::ostringstream name;
        name << "lambda=" << lambda;
        gist_cell(name.str(), g);
      }
      break;
    case AblationGrid::TokenLen:
      for (std::size_t len : {1, 10, 50, 100}) {
        GistLossConfig g = base;
        g.gist_len = len;
        gist_cell("len=" + std::to_string(len), g);
      }
      break;
    case AblationGrid::LossTerms: {
      baseline("cls");
      GistLossConfig g = base;
      g.interaction = InteractionKind::Bkld;
      GistLossConfig no_bkl = g;
      no_bkl.lambda = 0.0;
      gist_cell("cls+gist", no_bkl);
      GistLossConfig no_gist = g;
      no_gist.mu = 0.0;
      gist_cell("cls+bkl", no_gist);
      gist_cell("cls+gist+bkl", g);
      break;
    }
    case AblationGrid::Interaction: {
      baseline("cls");
      for (auto kind : {InteractionKind::Mse, InteractionKind::Cosine, InteractionKind::Bkld}) {
        GistLossConfig g = base;
        g.interaction = kind;
        const std::string suffix = kind == InteractionKind::Mse ? "mse" : kind == InteractionKind::Cosine ? "cos" : "bkl";
        gist_cell("cls+gist+" + suffix, g);
      }
      break;
    }
  }
  return cells;
}

nlohmann::json AblationTable::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"name", r.name}, {"extra_parameters", r.extra_parameters}, {"accuracy", mode_json(r.accuracy)}});
  }
  return {{"grid", grid_name(grid)}, {"config_hash", config_hash}, {"rows", rows_json}};
}

std::string AblationTable::to_text() const {
  std::ostringstream out;
  out << grid_name(grid) << " ablation, config " << config_hash << ", test accuracy % over (task, seed) cells\n";
  out << std::left << std::setw(18) << "cell" << std::setw(20) << "mean +- std"
      << "extra params\n";
  for (const auto& r : rows) {
    out << std::left << std::setw(18) << r.name << std::setw(20)
        << (percent(r.accuracy.mean) + " +- " + percent(r.accuracy.std)) << r.extra_parameters << '\n';
  }
  return out.str();
}

template <typename T>
AblationTable run_ablation(const ExperimentConfig& cfg, AblationGrid grid, const ModelGraph<T>& pretrained,
                           const std::optional<fs::path>& dir, std::ostream* log) {
  AblationTable table;
  table.grid = grid;
  table.config_hash = config_hash(cfg);
  for (const auto& cell : ablation_cells(cfg, grid)) {
    log_line(log, std::string("cell ") + cell.name);
    std::optional<fs::path> cell_dir;
    if (dir) {
      cell_dir = *dir / "cells" / cell.name;
      fs::create_directories(*cell_dir);
      write_text(*cell_dir / "config.json", config_to_json(cell.config).dump(2) + "\n");
    }
    auto summary = run_finetune_sweep(cell.config, pretrained, cell_dir, log);
    if (cell_dir) {
      write_text(*cell_dir / "summary.json", summary.to_json().dump(2) + "\n");
      write_text(*cell_dir / "summary.txt", summary.to_text());
    }
    table.rows.push_back({cell.name, cell.extra_parameters, summary.overall.at(cell.mode)});
  }
  return table;
}

namespace {

template <typename T>
AblationTable ablate_impl(const ExperimentConfig& cfg, AblationGrid grid, std::ostream* log) {
  const auto pretrained = load_pretrained<T>(cfg);
  const fs::path dir = fs::path(cfg.output_dir) / (std::string("ablate-") + grid_name(grid) + "-" + config_hash(cfg));
  fs::create_directories(dir);
  auto table = run_ablation(cfg, grid, pretrained, dir, log);
  write_text(dir / "table.json", table.to_json().dump(2) + "\n");
  write_text(dir / "table.txt", table.to_text());
  return table;
}

}  // namespace

AblationTable cmd_ablate(const ExperimentConfig& config, AblationGrid grid, const RunOptions& options) {
  const auto cfg = apply_overrides(config, options);
  return options.precision == Precision::F64 ? ablate_impl<double>(cfg, grid, options.log)
                                             : ablate_impl<float>(cfg, grid, options.log);
}

GradCheckReport cmd_gradcheck(unsigned seed, double threshold) { return run_full_gradcheck(seed, threshold); }

std::vector<fs::path> cmd_export_attention(const fs::path& checkpoint, const fs::path& images, const fs::path& out,
                                           std::size_t count) {
  auto model = load_checkpoint<float>(read_file_bytes(checkpoint));
  const Dataset data = read_dataset(images);
  const auto& c = model.config();
  if (data.image_side != c.image_side || data.channels != c.channels) {
    throw DimensionError("export-attention: images are " + std::to_string(data.channels) + "x" +
                         std::to_string(data.image_side) + "x" + std::to_string(data.image_side) +
                         " but the model expects " + std::to_string(c.channels) + "x" + std::to_string(c.image_side) +
                         "x" + std::to_string(c.image_side));
  }
  if (data.size() == 0) throw ConfigError("export-attention: the image file is empty");
  const std::size_t n = std::min(count, data.size());

  std::unique_ptr<Objective<float>> objective;
  if (model.params().contains(kGistTokenName)) {
    GistLossConfig g;
    g.gist_len = model.params().at(kGistTokenName).dim(0);
    objective = std::make_unique<GistObjective<float>>(g);
  } else {
    objective = std::make_unique<TraditionalObjective<float>>();
  }
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  Tape<float> tape(Tape<float>::Mode::Inference);
  AttentionProbe<float> probe;
  auto state = objective->forward(tape, model, image_tensor<float>(data.gather_images(rows), n, c.channels, c.image_side),
                                  &probe);
  nlohmann::json layout = nlohmann::json::array();
  for (auto role : state.layout) layout.push_back(token_role_name(role));

  fs::create_directories(out);
  std::vector<fs::path> written;
  const std::size_t heads = c.num_heads, s = state.length();
  for (std::size_t l = 0; l < probe.layers.size(); ++l) {
    auto values = probe.layers[l].data();
    for (std::size_t h = 0; h < heads; ++h) {
      nlohmann::json samples = nlohmann::json::array();
      for (std::size_t b = 0; b < n; ++b) {
        const float* m = values.data() + ((b * heads + h) * s * s);
        nlohmann::json matrix = nlohmann::json::array();
        for (std::size_t i = 0; i < s; ++i) matrix.push_back(std::vector<float>(m + i * s, m + (i + 1) * s));
        samples.push_back({{"id", data.ids[b]}, {"label", data.labels[b]}, {"attention", matrix}});
      }
      nlohmann::json doc = {{"layer", l}, {"head", h}, {"layout", layout}, {"samples", samples}};
      const fs::path path = out / ("layer" + std::to_string(l) + "_head" + std::to_string(h) + ".json");
      write_text(path, doc.dump() + "\n");
      written.push_back(path);
    }
  }
  return written;
}

std::vector<fs::path> cmd_make_data(const ExperimentConfig& config, const RunOptions& options) {
  const auto cfg = apply_overrides(config, options);
  const fs::path dir = fs::path(cfg.output_dir) / ("data-" + config_hash(cfg));
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const Splits& s) {
    for (const auto& [part, d] : {std::pair<const char*, const Dataset*>{"train", &s.train}, {"val", &s.val},
                                  {"test", &s.test}}) {
      const fs::path path = dir / (name + "-" + part + ".gstd");
      write_dataset(path, *d);
      written.push_back(path);
    }
  };
  emit("pretrain", make_mixture_splits(cfg.pretrain.tasks, cfg.pretrain.split));
  for (std::size_t t = 0; t < cfg.tasks.size(); ++t) emit(task_name(cfg, t), make_splits(cfg.tasks[t], cfg.split));
  return written;
}

#define GISTLAB_INSTANTIATE(T)                                                                                    \
  template ModelGraph<T> pretrain_model(const ExperimentConfig&, TrainRecord*, std::ostream*);                    \
  template TrainRecord finetune_run(const ExperimentConfig&, const ModelGraph<T>&, const Splits&, std::size_t,    \
                                    std::uint64_t, FrameworkMode, std::ostream*, ModelGraph<T>*);                 \
  template FinetuneSummary run_finetune_sweep(const ExperimentConfig&, const ModelGraph<T>&,                      \
                                              const std::optional<fs::path>&, std::ostream*);                     \
  template AblationTable run_ablation(const ExperimentConfig&, AblationGrid, const ModelGraph<T>&,                \
                                      const std::optional<fs::path>&, std::ostream*);

GISTLAB_INSTANTIATE(float)
GISTLAB_INSTANTIATE(double)

#undef GISTLAB_INSTANTIATE

}  // namespace gistlab
