#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "deepcsp/epochs.hpp"
#include "deepcsp/models.hpp"
#include "test_support.hpp"

namespace deepcsp {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run deepcsp(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// A small file shared by the tests that only need some data.
const fs::path& small_file() {
  static const fs::path path = [] {
    const auto p = testing::scratch_dir("cli-small") / "small.eege";
    const auto r = deepcsp({"synth", "--out", p.string(), "--d", "4", "--t", "192", "--fs", "64", "--trials",
                            "40", "--band-low", "8", "--band-high", "20", "--seed", "3"});
    if (r.code != 0) throw std::runtime_error(r.err);
    return p;
  }();
  return path;
}

std::vector<std::string> small_train(const fs::path& out) {
  return {"train", "--data", small_file().string(), "--out", out.string(), "--filters", "2", "--components", "1",
          "--hidden", "6", "--batch-size", "8", "--band-low", "8", "--band-high", "20", "--log-every", "0"};
}

TEST(Cli, SynthHeaderEchoesFlags) {
  const auto dir = testing::scratch_dir("cli-synth");
  const auto r = deepcsp({"synth", "--d", "15", "--fs", "512", "--trials", "100", "--out", (dir / "a.eege").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto set = data::read_epochs(dir / "a.eege");
  EXPECT_EQ(set.size(), 100u);
  EXPECT_EQ(set.channels(), 15u);
  EXPECT_EQ(set.samples(), 2560u);
  EXPECT_EQ(set.fs, 512.0);
  EXPECT_EQ(set.count(0), 50u);
  EXPECT_TRUE(set.channel_positions.has_value());
  const auto config = read_json(dir / "config.json");
  EXPECT_EQ(config["command"], "synth");
  EXPECT_EQ(config["channels"], 15);
  EXPECT_EQ(config["trials"], 100);
  EXPECT_EQ(config["fs"], 512.0);
}

TEST(Cli, SameSeedGivesIdenticalFiles) {
  const auto dir = testing::scratch_dir("cli-seed");
  std::vector<std::string> base{"synth", "--d", "5", "--t", "300", "--fs", "100", "--trials", "10"};
  auto with = [&](const std::string& name, const std::string& seed) {
    auto args = base;
    args.insert(args.end(), {"--seed", seed, "--out", (dir / name).string()});
    EXPECT_EQ(deepcsp(args).code, 0);
    return slurp(dir / name);
  };
  const auto a = with("a.eege", "7");
  EXPECT_EQ(with("b.eege", "7"), a);
  EXPECT_NE(with("c.eege", "8"), a);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(deepcsp({"synth", "--d", "4"}).code, cli::kExitUsage);  // missing --out
  EXPECT_EQ(deepcsp({}).code, cli::kExitUsage);
  EXPECT_EQ(deepcsp({"frobnicate"}).code, cli::kExitUsage);
  EXPECT_EQ(deepcsp({"synth", "--out", "x.eege", "--bogus"}).code, cli::kExitUsage);
  EXPECT_EQ(deepcsp({"synth", "--out", "x.eege", "--trials", "7"}).code, cli::kExitUsage);
  EXPECT_EQ(deepcsp({"synth", "--out", "x.eege", "--mixing", "diagonal"}).code, cli::kExitUsage);
  EXPECT_EQ(deepcsp({"train", "--data", small_file().string(), "--out", "o", "--test-fraction", "1.5"}).code,
            cli::kExitUsage);
  const auto missing = deepcsp({"eval", "--checkpoint", "/nonexistent/model.ckpt", "--data", small_file().string()});
  EXPECT_EQ(missing.code, cli::kExitFailure);
  EXPECT_NE(missing.err.find("/nonexistent/model.ckpt"), std::string::npos);
  EXPECT_EQ(deepcsp({"--help"}).code, cli::kExitOk);
  EXPECT_EQ(deepcsp({"train", "--help"}).code, cli::kExitOk);
  const auto version = deepcsp({"--version"});
  EXPECT_EQ(version.code, cli::kExitOk);
  EXPECT_FALSE(version.out.empty());
}

TEST(Cli, HelpDocumentsDefaults) {
  const auto r = deepcsp({"train", "--help"});
  EXPECT_NE(r.out.find("0.01"), std::string::npos);
  EXPECT_NE(r.out.find("--lr-classifier"), std::string::npos);
  EXPECT_NE(r.out.find("64"), std::string::npos);
}

TEST(Cli, ConfigFileReplaysAndFlagsOverride) {
  const auto dir = testing::scratch_dir("cli-config");
  ASSERT_EQ(deepcsp({"synth", "--d", "3", "--t", "100", "--fs", "100", "--trials", "6", "--seed", "11", "--out",
                     (dir / "first" / "x.eege").string()})
                .code,
            0);
  // The echoed config alone reproduces the file.
  fs::create_directories(dir / "replay");
  auto config = read_json(dir / "first" / "config.json");
  config["out"] = (dir / "replay" / "x.eege").string();
  std::ofstream(dir / "replay.json") << config.dump();
  ASSERT_EQ(deepcsp({"synth", "--config", (dir / "replay.json").string()}).code, 0);
  EXPECT_EQ(slurp(dir / "replay" / "x.eege"), slurp(dir / "first" / "x.eege"));
  EXPECT_EQ(read_json(dir / "replay" / "config.json"), config);

  const auto r = deepcsp({"synth", "--config", (dir / "replay.json").string(), "--seed", "12", "--out",
                          (dir / "override" / "x.eege").string()});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(read_json(dir / "override" / "config.json")["seed"], 12);
  EXPECT_NE(slurp(dir / "override" / "x.eege"), slurp(dir / "first" / "x.eege"));

  std::ofstream(dir / "wrong.json") << R"({"command": "train"})";
  EXPECT_EQ(deepcsp({"synth", "--config", (dir / "wrong.json").string(), "--out", "x"}).code, cli::kExitUsage);
  std::ofstream(dir / "broken.json") << "{";
  EXPECT_EQ(deepcsp({"synth", "--config", (dir / "broken.json").string(), "--out", "x"}).code, cli::kExitUsage);
}

TEST(Cli, TrainWritesArtifactsAndIsReproducible) {
  const auto dir = testing::scratch_dir("cli-train");
  auto args = small_train(dir / "a");
  args.insert(args.end(), {"--epochs", "4"});
  ASSERT_EQ(deepcsp(args).code, 0);
  for (const char* f : {"model.ckpt", "metrics.jsonl", "filters.json", "config.json", "summary.json"}) {
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  }
  const auto summary = read_json(dir / "a" / "summary.json");
  EXPECT_EQ(summary["test"]["trials"], 8);
  EXPECT_EQ(read_json(dir / "a" / "config.json")["lr-feature"], 0.01);

  args = small_train(dir / "b");
  args.insert(args.end(), {"--epochs", "4"});
  ASSERT_EQ(deepcsp(args).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "metrics.jsonl"), slurp(dir / "b" / "metrics.jsonl"));
  EXPECT_EQ(slurp(dir / "a" / "model.ckpt"), slurp(dir / "b" / "model.ckpt"));
}

TEST(Cli, ZeroEpochsWritesTheInitialCheckpoint) {
  const auto dir = testing::scratch_dir("cli-epoch0");
  auto args = small_train(dir);
  args.insert(args.end(), {"--epochs", "0"});
  ASSERT_EQ(deepcsp(args).code, 0);
  const auto model = models::load_checkpoint(dir / "model.ckpt");
  auto config = model.config;
  const auto init = models::init_params(config);
  for (std::size_t k = 0; k < init.feature_extractor.size(); ++k) {
    auto expected = init.feature_extractor[k].value;
    expected.quantize();
    EXPECT_EQ(model.params.feature_extractor[k].value.storage(), expected.storage());
  }
  std::ifstream is(dir / "metrics.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(is, line);) ++lines;
  EXPECT_EQ(lines, 1u);
}

TEST(Cli, EvalOnTrainingTrialsMatchesTheLog) {
  const auto dir = testing::scratch_dir("cli-eval");
  auto args = small_train(dir / "run");
  args.insert(args.end(), {"--epochs", "5", "--validation-fraction", "0"});
  ASSERT_EQ(deepcsp(args).code, 0);
  const auto summary = read_json(dir / "run" / "summary.json");
  const auto r = deepcsp({"eval", "--checkpoint", (dir / "run" / "model.ckpt").string(), "--data",
                          small_file().string(), "--part", "train", "--out", (dir / "eval").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto eval = read_json(dir / "eval" / "eval.json");
  EXPECT_EQ(eval["trials"], 32);
  EXPECT_DOUBLE_EQ(eval["accuracy"].get<double>(), summary["best"]["train_accuracy"].get<double>());
  const auto test = deepcsp({"eval", "--checkpoint", (dir / "run" / "model.ckpt").string(), "--data",
                             small_file().string(), "--part", "test"});
  EXPECT_DOUBLE_EQ(json::parse(test.out)["accuracy"].get<double>(), summary["test"]["accuracy"].get<double>());
}

TEST(Cli, EvalReportsShapeMismatchWithFileNames) {
  const auto dir = testing::scratch_dir("cli-mismatch");
  auto args = small_train(dir / "run");
  args.insert(args.end(), {"--epochs", "0"});
  ASSERT_EQ(deepcsp(args).code, 0);
  ASSERT_EQ(deepcsp({"synth", "--d", "5", "--t", "192", "--fs", "64", "--trials", "4", "--out",
                     (dir / "five.eege").string()})
                .code,
            0);
  const auto r = deepcsp({"eval", "--checkpoint", (dir / "run" / "model.ckpt").string(), "--data",
                          (dir / "five.eege").string()});
  EXPECT_EQ(r.code, cli::kExitFailure);
  EXPECT_NE(r.err.find("five.eege"), std::string::npos);
  EXPECT_NE(r.err.find("model.ckpt"), std::string::npos);
}

TEST(Cli, NonFiniteLossExitsWithFailure) {
  const auto dir = testing::scratch_dir("cli-nonfinite");
  auto args = small_train(dir);
  args.insert(args.end(), {"--epochs", "20", "--lr-feature", "1e300"});
  const auto r = deepcsp(args);
  EXPECT_EQ(r.code, cli::kExitFailure);
  EXPECT_NE(r.err.find("non-finite"), std::string::npos) << r.err;
}

TEST(Cli, CspBaselineSeparatesPlantedData) {
  const auto dir = testing::scratch_dir("cli-csp");
  ASSERT_EQ(deepcsp({"synth", "--d", "8", "--t", "512", "--fs", "128", "--trials", "100", "--out",
                     (dir / "set.eege").string()})
                .code,
            0);
  const auto r = deepcsp({"csp", "--data", (dir / "set.eege").string(), "--out", (dir / "csp").string(),
                          "--components", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto metrics = read_json(dir / "csp" / "metrics.json");
  EXPECT_GE(metrics["test"]["accuracy"].get<double>(), 0.95);
  EXPECT_EQ(metrics["test"]["trials"], 20);
  EXPECT_EQ(read_json(dir / "csp" / "filters.json")["n_components"], 2);
}

TEST(Cli, DpliMatrixIsComplementary) {
  const auto dir = testing::scratch_dir("cli-dpli");
  const auto r = deepcsp({"connectivity", "--data", small_file().string(), "--out", dir.string(), "--method",
                          "dpli", "--band-low", "8", "--band-high", "20"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream is(slurp(dir / "connectivity.csv"));
  std::vector<std::vector<double>> a;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    a.push_back(row);
  }
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    ASSERT_EQ(a[i].size(), 4u);
    for (std::size_t j = 0; j < 4; ++j) {
      if (i != j) EXPECT_NEAR(a[i][j] + a[j][i], 1.0, 1e-9);
    }
  }
  EXPECT_EQ(read_json(dir / "connectivity.json")["estimator"], "dpli");
}

TEST(Cli, ExportWritesFiguresData) {
  const auto dir = testing::scratch_dir("cli-export");
  auto args = small_train(dir / "run");
  args.insert(args.end(), {"--epochs", "2"});
  ASSERT_EQ(deepcsp(args).code, 0);
  const auto r = deepcsp({"export-filters", "--data", small_file().string(), "--out", (dir / "fig").string(),
                          "--checkpoint", (dir / "run" / "model.ckpt").string(), "--components", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto topo = read_json(dir / "fig" / "topomap.json");
  EXPECT_EQ(topo["components"].size(), 4u);
  EXPECT_EQ(topo["components"][0]["records"].size(), 4u);
  std::istringstream scatter(slurp(dir / "fig" / "scatter.csv"));
  std::size_t rows = 0;
  for (std::string line; std::getline(scatter, line);) ++rows;
  EXPECT_EQ(rows, 41u);
  EXPECT_EQ(deepcsp({"export", "--data", small_file().string(), "--out", (dir / "bad").string(),
                     "--components", "2", "--scatter-components", "5"})
                .code,
            cli::kExitUsage);
}

}  // namespace
}  // namespace deepcsp
