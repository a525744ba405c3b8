#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "gistlab/binary_io.hpp"
#include "gistlab/checkpoint.hpp"
#include "gistlab/experiment.hpp"

using namespace gistlab;
namespace fs = std::filesystem;

namespace {

nlohmann::json smoke_json() {
  std::ifstream in(fs::path(GISTLAB_SOURCE_DIR) / "configs" / "smoke.json");
  return nlohmann::json::parse(in);
}

ExperimentConfig smoke_config(const fs::path& dir) {
  auto j = smoke_json();
  j["checkpoint"] = (dir / "pretrain.ckpt").string();
  j["output_dir"] = (dir / "out").string();
  return config_from_json(j);
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("gistlab_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Config, RoundTripAndHash) {
  const auto cfg = config_from_json(smoke_json());
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(cfg))), config_to_json(cfg));
  EXPECT_EQ(config_hash(cfg).size(), 16u);
  auto other = cfg;
  other.gist.lambda = 0.5;
  EXPECT_NE(config_hash(other), config_hash(cfg));
}

TEST(Config, UnknownAndMissingFieldsRejected) {
  auto j = smoke_json();
  j["optim"]["momentum"] = 0.9;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = smoke_json();
  j["backbone"].erase("num_heads");
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = smoke_json();
  j["gist"]["lambda"] = "high";
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = smoke_json();
  j["modes"] = {"gist", "gist"};
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = smoke_json();
  j["seeds"] = {-1};
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Config, PretrainClassCountMustMatchHead) {
  auto j = smoke_json();
  j["backbone"]["num_classes"] = 3;
  try {
    config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("num_classes"), std::string::npos);
  }
}

TEST(Config, SyntaxErrorsCarryLineAndColumn) {
  try {
    parse_config("{\n  \"backbone\": ,\n}", "bad.json");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.json:2:"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, Overrides) {
  const auto cfg = config_from_json(smoke_json());
  RunOptions o;
  o.out = "/tmp/elsewhere";
  o.seeds = std::vector<std::uint64_t>{9};
  const auto c = apply_overrides(cfg, o);
  EXPECT_EQ(c.output_dir, "/tmp/elsewhere");
  EXPECT_EQ(c.seeds, std::vector<std::uint64_t>{9});
  EXPECT_EQ(apply_overrides(cfg, RunOptions{}).seeds, cfg.seeds);
}

TEST(Summary, SampleStandardDeviation) {
  const auto s = ModeSummary::of({0.5, 0.7});
  EXPECT_DOUBLE_EQ(s.mean, 0.6);
  EXPECT_NEAR(s.std, std::sqrt(0.02), 1e-15);
  EXPECT_EQ(ModeSummary::of({0.3}).std, 0.0);
}

TEST(Ablation, CellsPerGrid) {
  const auto cfg = config_from_json(smoke_json());
  const std::size_t d = cfg.backbone.embed_dim;
  auto names = [](const std::vector<AblationCell>& cells) {
    std::vector<std::string> out;
    for (const auto& c : cells) out.push_back(c.name);
    return out;
  };
  const auto lambda = ablation_cells(cfg, AblationGrid::Lambda);
  EXPECT_EQ(names(lambda), (std::vector<std::string>{"baseline", "lambda=0.25", "lambda=0.5", "lambda=0.75"}));
  EXPECT_EQ(lambda[2].config.gist.lambda, 0.5);
  const auto len = ablation_cells(cfg, AblationGrid::TokenLen);
  ASSERT_EQ(len.size(), 4u);
  EXPECT_EQ(len[0].extra_parameters, d);
  EXPECT_EQ(len[3].extra_parameters, 100 * d);
  EXPECT_EQ(len[3].config.gist.gist_len, 100u);
  const auto terms = ablation_cells(cfg, AblationGrid::LossTerms);
  EXPECT_EQ(names(terms), (std::vector<std::string>{"cls", "cls+gist", "cls+bkl", "cls+gist+bkl"}));
  EXPECT_EQ(terms[0].mode, FrameworkMode::Traditional);
  EXPECT_EQ(terms[1].config.gist.lambda, 0.0);
  EXPECT_EQ(terms[2].config.gist.mu, 0.0);
  EXPECT_EQ(terms[3].config.gist, cfg.gist);
  const auto inter = ablation_cells(cfg, AblationGrid::Interaction);
  EXPECT_EQ(names(inter), (std::vector<std::string>{"cls", "cls+gist+mse", "cls+gist+cos", "cls+gist+bkl"}));
  EXPECT_EQ(inter[1].config.gist.interaction, InteractionKind::Mse);
  EXPECT_THROW(parse_grid("lambda"), ConfigError);
}

TEST(Runs, PairedModesShareHeadAndData) {
  const auto cfg = smoke_config(fresh_dir("paired"));
  const auto pre = pretrain_model<float>(cfg);
  const auto data = make_splits(cfg.tasks[0], cfg.split);
  ModelGraph<float> trad(cfg.backbone), gist(cfg.backbone);
  finetune_run(cfg, pre, data, 0, 1, FrameworkMode::Traditional, nullptr, &trad);
  finetune_run(cfg, pre, data, 0, 1, FrameworkMode::Gist, nullptr, &gist);
  EXPECT_FALSE(trad.params().contains("gist.token"));
  EXPECT_TRUE(gist.params().contains("gist.token"));
  for (const auto& name : pre.backbone_parameter_names()) {
    const auto a = pre.params().at(name).data(), b = trad.params().at(name).data(), c = gist.params().at(name).data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()) && std::equal(a.begin(), a.end(), c.begin())) << name;
  }
  EXPECT_NE(cell_seed(1, 0), cell_seed(1, 1));
  EXPECT_NE(cell_seed(1, 0), cell_seed(2, 0));
}

TEST(Runs, CommandsWriteReproducibleDirectories) {
  const auto dir = fresh_dir("commands");
  const auto cfg = smoke_config(dir);
  RunOptions o;
  const auto pre_dir = cmd_pretrain(cfg, o);
  EXPECT_TRUE(fs::exists(pre_dir / "record.json"));
  EXPECT_TRUE(fs::exists(cfg.checkpoint));
  const auto ckpt = read_file_bytes(cfg.checkpoint);

  fs::path run_dir;
  const auto s1 = cmd_finetune(cfg, o, &run_dir);
  const auto run = run_dir / "t0-stripes" / "gist" / "seed-1";
  EXPECT_TRUE(fs::exists(run / "record.json"));
  EXPECT_TRUE(fs::exists(run / "metrics.jsonl"));
  EXPECT_TRUE(fs::exists(run / "model.ckpt"));
  EXPECT_TRUE(fs::exists(run_dir / "summary.json"));
  const auto record = read_file_bytes(run / "record.json");
  const auto model = read_file_bytes(run / "model.ckpt");
  EXPECT_TRUE(load_checkpoint<float>(model).params().contains("gist.token"));

  // Identical config: identical pretrain checkpoint, records and models.
  cmd_pretrain(cfg, o);
  EXPECT_EQ(read_file_bytes(cfg.checkpoint), ckpt);
  const auto s2 = cmd_finetune(cfg, o);
  EXPECT_EQ(s1.to_json(), s2.to_json());
  EXPECT_EQ(read_file_bytes(run / "record.json"), record);
  EXPECT_EQ(read_file_bytes(run / "model.ckpt"), model);
  EXPECT_EQ(s1.cells, 4u);
}

TEST(Runs, FinetuneRejectsForeignCheckpoint) {
  const auto dir = fresh_dir("foreign");
  auto cfg = smoke_config(dir);
  EXPECT_THROW(cmd_finetune(cfg, RunOptions{}), Error);
  cmd_pretrain(cfg, RunOptions{});
  auto changed = cfg;
  changed.pretrain.seed += 1;
  EXPECT_THROW(cmd_finetune(changed, RunOptions{}), ConfigError);
}

TEST(Runs, MakeDataAndExportAttention) {
  const auto dir = fresh_dir("export");
  const auto cfg = smoke_config(dir);
  const auto files = cmd_make_data(cfg, RunOptions{});
  EXPECT_EQ(files.size(), 3u * (1 + cfg.tasks.size()));
  for (const auto& f : files) EXPECT_NO_THROW(read_dataset(f));
  cmd_pretrain(cfg, RunOptions{});
  const auto maps = cmd_export_attention(cfg.checkpoint, files.back(), dir / "att", 2);
  EXPECT_EQ(maps.size(), cfg.backbone.num_layers * cfg.backbone.num_heads);
  std::ifstream in(maps.front());
  const auto doc = nlohmann::json::parse(in);
  EXPECT_EQ(doc.at("samples").size(), 2u);
  const auto& row = doc.at("samples")[0].at("attention")[0];
  double sum = 0;
  for (const auto& v : row) sum += v.get<double>();
  EXPECT_NEAR(sum, 1.0, 1e-5);
}
