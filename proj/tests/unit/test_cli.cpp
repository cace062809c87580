// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "rankuncert/checkpoint.hpp"
#include "rankuncert/cli.hpp"
#include "support/helpers.hpp"

namespace rankuncert {
namespace {

using testing::ScratchDir;

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "rankuncert");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> data_flags(const ScratchDir& d) {
  return {"--images", (d / "images.emb").string(), "--texts", (d / "texts.emb").string(),
          "--manifest", (d / "manifest.jsonl").string()};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

TEST(Cli, MissingSubcommandOrFlagIsUsageError) {
  EXPECT_EQ(cli({}).code, 2);
  ScratchDir d("cli-usage");
  ASSERT_EQ(cli({"synth", "--out", d.path().string(), "--train", "64", "--val", "0"}).code, 0);
  const CliRun r = cli({"train", "--images", (d / "images.emb").string(), "--texts",
                     (d / "texts.emb").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--manifest"), std::string::npos) << r.err;
  EXPECT_EQ(cli({"train", "--bogus"}).code, 2);
}

TEST(Cli, HelpExitsZero) {
  const CliRun r = cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("train"), std::string::npos);
}

TEST(Cli, ConfigErrorExitsTwo) {
  ScratchDir d("cli-config");
  ASSERT_EQ(cli({"synth", "--out", d.path().string(), "--train", "64", "--val", "0"}).code, 0);
  const CliRun r = cli(concat({"train", "--ablation", "most", "--run-dir", (d / "run").string()},
                           data_flags(d)));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("most"), std::string::npos);
}

TEST(Cli, SynthTrainEvalEndToEnd) {
  ScratchDir d("cli-e2e");
  ASSERT_EQ(cli({"synth", "--out", d.path().string(), "--dim", "16", "--clusters", "4",
                 "--sigma", "0", "--sources-per-target", "1", "--targets-per-source", "1",
                 "--train", "64", "--val", "16"})
                .code,
            0);
  const std::string run = (d / "run").string();
  const CliRun t = cli(concat({"train", "--ablation", "baseline", "--epochs", "2", "--batch-size",
                            "8", "--eval-ks", "1,5", "--selection-k", "1", "--lr", "0",
                            "--run-dir", run},
                           data_flags(d)));
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* f : {"config.ini", "metrics.jsonl", "checkpoint.runc", "last.runc", "eval.json"}) {
    EXPECT_TRUE(std::filesystem::exists(d / ("run/" + std::string(f)))) << f;
  }
  const auto metrics = lines_of(slurp(d / "run/metrics.jsonl"));
  ASSERT_EQ(metrics.size(), 2u);
  const auto first = nlohmann::json::parse(metrics[0]);
  EXPECT_EQ(first["epoch"], 0);
  EXPECT_EQ(first["gamma"], 1.0);
  EXPECT_TRUE(first.contains("R@1"));

  // the additive combiner is the identity fusion, so noiseless sources hit their targets
  const CliRun e = cli(concat({"eval", "--checkpoint", run + "/checkpoint.runc", "--split", "train",
                            "--ks", "1,5,10,50", "--json"},
                           data_flags(d)));
  ASSERT_EQ(e.code, 0) << e.err;
  const auto report = nlohmann::json::parse(e.out);
  EXPECT_EQ(report["recalls"][0], 1.0);
  EXPECT_EQ(report["ks"].size(), 4u);

  const CliRun table = cli(concat({"eval", "--checkpoint", run + "/checkpoint.runc", "--split",
                                "val", "--ks", "1,5,10,16"},
                               data_flags(d)));
  ASSERT_EQ(table.code, 0) << table.err;
  const auto header = lines_of(table.out).at(0);
  for (const char* col : {"R@1", "R@5", "R@10", "R@16"}) {
    EXPECT_NE(header.find(col), std::string::npos) << header;
  }
}

TEST(Cli, SubsetEvaluationAddsOverall) {
  ScratchDir d("cli-subset");
  ASSERT_EQ(cli({"synth", "--out", d.path().string(), "--dim", "16", "--clusters", "4",
                 "--train", "64", "--val", "0"})
                .code,
            0);
  // attach a subset of six candidates to every triplet
  std::ifstream in(d / "manifest.jsonl");
  std::ostringstream rewritten;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    j["subset_ids"] = {j["target_image_id"], "a0/tgt0", "a1/tgt0", "a2/tgt1", "a3/tgt0",
                       "a4/tgt1"};
    j["split"] = "test";
    rewritten << j.dump() << "\n";
  }
  in.close();
  std::ofstream(d / "manifest.jsonl", std::ios::trunc) << rewritten.str();

  const std::string run = (d / "run").string();
  ASSERT_EQ(cli(concat({"train", "--split", "test", "--val-split", "none", "--ablation",
                        "baseline", "--epochs", "1", "--batch-size", "8", "--eval-ks", "1,5",
                        "--selection-k", "1", "--run-dir", run},
                       data_flags(d)))
                .code,
            0);
  const CliRun e = cli(concat({"eval", "--checkpoint", run + "/checkpoint.runc", "--ks", "1,5",
                            "--subset", "--json", "--out", (d / "report.json").string()},
                           data_flags(d)));
  ASSERT_EQ(e.code, 0) << e.err;
  const auto report = nlohmann::json::parse(e.out);
  EXPECT_EQ(report["subset_ks"], nlohmann::json({1, 2, 3}));
  EXPECT_FALSE(report["overall"].is_null());
  EXPECT_EQ(nlohmann::json::parse(slurp(d / "report.json")), report);
}

TEST(Cli, CheckpointDimensionMismatchExitsWithDataCode) {
  ScratchDir a("cli-dim-a"), b("cli-dim-b");
  ASSERT_EQ(cli({"synth", "--out", a.path().string(), "--dim", "16", "--clusters", "4",
                 "--train", "64", "--val", "0"})
                .code,
            0);
  ASSERT_EQ(cli({"synth", "--out", b.path().string(), "--dim", "8", "--clusters", "4",
                 "--train", "64", "--val", "0", "--seed", "3"})
                .code,
            0);
  const std::string run = (a / "run").string();
  ASSERT_EQ(cli(concat({"train", "--ablation", "baseline", "--epochs", "1", "--batch-size", "8",
                        "--eval-ks", "1", "--selection-k", "1", "--run-dir", run},
                       data_flags(a)))
                .code,
            0);
  const CliRun e = cli(concat({"eval", "--checkpoint", run + "/checkpoint.runc", "--split", "train"},
                           data_flags(b)));
  EXPECT_EQ(e.code, 3);
  EXPECT_NE(e.err.find("16"), std::string::npos) << e.err;
  EXPECT_NE(e.err.find("8"), std::string::npos) << e.err;
}

TEST(Cli, CorruptStoreExitsWithDataCode) {
  ScratchDir d("cli-corrupt");
  ASSERT_EQ(cli({"synth", "--out", d.path().string(), "--train", "64", "--val", "0"}).code, 0);
  std::filesystem::resize_file(d / "images.emb", 100);
  const CliRun r = cli(concat({"train", "--run-dir", (d / "run").string()}, data_flags(d)));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("images.emb"), std::string::npos) << r.err;
}

TEST(Cli, GradcheckSingleComponent) {
  const CliRun ok = cli({"gradcheck", "--component", "loss_dr", "--instances", "4"});
  EXPECT_EQ(ok.code, 0);
  EXPECT_NE(ok.out.find("loss_dr"), std::string::npos);
  EXPECT_NE(ok.out.find("PASS"), std::string::npos);
  const CliRun bad = cli({"gradcheck", "--component", "loss_dr", "--instances", "4",
                       "--inject-fault", "loss_dr"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
  EXPECT_EQ(cli({"gradcheck", "--component", "nope"}).code, 2);
}

TEST(Cli, SweepGridOrderAndDeterminism) {
  ScratchDir d("cli-sweep");
  ASSERT_EQ(cli({"synth", "--out", d.path().string(), "--dim", "16", "--clusters", "4",
                 "--train", "32", "--val", "48"})
                .code,
            0);
  const auto args = concat({"sweep", "--epochs", "1", "--batch-size", "8", "--tokens", "2",
                            "--combiner", "concat_project", "--lr", "1e-3", "--eval-ks", "1,5",
                            "--selection-k", "5", "--thetas", "30,45,60,75", "--n-values",
                            "3,1,2"},
                           data_flags(d));
  const CliRun first = cli(args);
  ASSERT_EQ(first.code, 0) << first.err;
  const auto rows = lines_of(first.out);
  ASSERT_EQ(rows.size(), 13u);
  EXPECT_EQ(rows[0], "theta_degrees,n_ua,R@1,R@5");
  const char* expected[] = {"75,1", "75,2", "75,3", "60,1", "60,2", "60,3",
                            "45,1", "45,2", "45,3", "30,1", "30,2", "30,3"};
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(rows[i + 1].rfind(expected[i], 0), 0u) << rows[i + 1];
    std::istringstream cells(rows[i + 1]);
    std::string cell;
    std::getline(cells, cell, ',');
    std::getline(cells, cell, ',');
    while (std::getline(cells, cell, ',')) {
      const double v = std::stod(cell);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_EQ(cli(args).out, first.out);
}

}  // namespace
}  // namespace rankuncert
