// gistlab: batch front end for pretraining, fine-tuning, ablation sweeps,
// gradient checks and attention export.
//
// Exit codes: 0 success, 1 validation failure (bad config or arguments,
// failed gradient check), 2 runtime error.

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gistlab/experiment.hpp"

namespace {

using namespace gistlab;

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> out;
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || item.front() == '-') throw ConfigError("--seeds: '" + item + "' is not a seed");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--seeds: empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gistlab: gist-token fine-tuning laboratory on a micro vision transformer"};
  app.require_subcommand(1);

  std::string config_path, out_dir, seeds, precision = "f32", grid;
  std::string checkpoint, images;
  std::size_t count = 4;
  unsigned gradcheck_seed = 0;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
    cmd->add_option("--out", out_dir, "output directory (overrides output_dir)");
    cmd->add_option("--seeds", seeds, "comma-separated seeds (overrides seeds)");
    cmd->add_option("--precision", precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  };

  auto* pretrain = app.add_subcommand("pretrain", "train the backbone on the source mixture");
  add_common(pretrain);
  auto* finetune = app.add_subcommand("finetune", "fine-tune every task x seed x mode");
  add_common(finetune);
  auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
  add_common(ablate);
  ablate->add_option("--grid", grid, "LAMBDA, TOKEN_LEN, LOSS_TERMS or INTERACTION")->required();
  auto* make_data = app.add_subcommand("make-data", "write the config's datasets as .gstd files");
  add_common(make_data);
  auto* gradcheck = app.add_subcommand("gradcheck", "64-bit finite-difference gradient suite");
  gradcheck->add_option("--seed", gradcheck_seed, "seed of the random inputs");
  auto* attention = app.add_subcommand("export-attention", "dump attention maps as JSON");
  attention->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  attention->add_option("--images", images, "dataset file (.gstd)")->required();
  attention->add_option("--out", out_dir, "output directory")->required();
  attention->add_option("--count", count, "number of images");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (gradcheck->parsed()) {
      const auto report = cmd_gradcheck(gradcheck_seed);
      std::cout << report.to_string();
      return report.passed() ? kOk : kValidation;
    }
    if (attention->parsed()) {
      for (const auto& p : cmd_export_attention(checkpoint, images, out_dir, count)) std::cout << p.string() << '\n';
      return kOk;
    }

    RunOptions options;
    if (!out_dir.empty()) options.out = out_dir;
    if (!seeds.empty()) options.seeds = parse_seeds(seeds);
    options.precision = parse_precision(precision);
    options.log = &std::cerr;
    const auto cfg = load_config(config_path);

    if (pretrain->parsed()) {
      std::cout << cmd_pretrain(cfg, options).string() << '\n';
    } else if (finetune->parsed()) {
      std::filesystem::path dir;
      const auto summary = cmd_finetune(cfg, options, &dir);
      std::cout << summary.to_text() << dir.string() << '\n';
    } else if (ablate->parsed()) {
      const auto table = cmd_ablate(cfg, parse_grid(grid), options);
      std::cout << table.to_text();
    } else if (make_data->parsed()) {
      for (const auto& p : cmd_make_data(cfg, options)) std::cout << p.string() << '\n';
    }
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
}
