#include <cstdlib>
#include <filesystem>
#include <functional>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(GISTLAB_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path config_in(const fs::path& dir, const std::function<void(nlohmann::json&)>& edit = {}) {
  std::ifstream in(fs::path(GISTLAB_SOURCE_DIR) / "configs" / "smoke.json");
  auto j = nlohmann::json::parse(in);
  j["checkpoint"] = (dir / "pretrain.ckpt").string();
  j["output_dir"] = (dir / "out").string();
  if (edit) edit(j);
  const auto path = dir / "config.json";
  std::ofstream(path) << j.dump(2);
  return path;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("gistlab_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("finetune"), 1);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, ConfigErrorsExitOne) {
  const auto dir = fresh_dir("config");
  EXPECT_EQ(run("pretrain --config " + (dir / "missing.json").string()), 1);
  const auto bad = config_in(dir, [](nlohmann::json& j) { j["gist"]["temperature"] = -1; });
  EXPECT_EQ(run("pretrain --config " + bad.string()), 1);
  const auto good = config_in(dir);
  EXPECT_EQ(run("finetune --config " + good.string() + " --seeds 1,x"), 1);
  EXPECT_EQ(run("finetune --config " + good.string() + " --precision f16"), 1);
  EXPECT_EQ(run("ablate --config " + good.string() + " --grid NOPE"), 1);
}

TEST(Cli, RuntimeErrorsExitTwo) {
  const auto dir = fresh_dir("runtime");
  // No pretrained checkpoint yet.
  EXPECT_EQ(run("finetune --config " + config_in(dir).string()), 2);
  EXPECT_EQ(run("export-attention --checkpoint /nonexistent --images /nonexistent --out " + dir.string()), 2);
}

TEST(Cli, EndToEnd) {
  const auto dir = fresh_dir("e2e");
  const auto cfg = config_in(dir).string();
  ASSERT_EQ(run("pretrain --config " + cfg), 0);
  EXPECT_EQ(run("finetune --config " + cfg + " --seeds 3 --out " + (dir / "ft").string()), 0);
  EXPECT_EQ(run("finetune --config " + cfg + " --precision f64 --seeds 3 --out " + (dir / "ft64").string()), 0);
  EXPECT_EQ(run("ablate --grid LAMBDA --config " + cfg + " --seeds 3"), 0);
  EXPECT_EQ(run("make-data --config " + cfg), 0);
  fs::path images;
  for (const auto& e : fs::recursive_directory_iterator(dir / "out")) {
    if (e.path().filename() == "t0-stripes-test.gstd") images = e.path();
  }
  ASSERT_FALSE(images.empty());
  EXPECT_EQ(run("export-attention --checkpoint " + (dir / "pretrain.ckpt").string() + " --images " + images.string() +
                " --out " + (dir / "att").string() + " --count 1"),
            0);
  EXPECT_TRUE(fs::exists(dir / "att" / "layer0_head0.json"));
  bool table = false;
  for (const auto& e : fs::recursive_directory_iterator(dir / "out")) table = table || e.path().filename() == "table.json";
  EXPECT_TRUE(table);
}

TEST(Cli, GradcheckPasses) { EXPECT_EQ(run("gradcheck --seed 1"), 0); }
