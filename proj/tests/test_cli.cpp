#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fortress/checkpoint.hpp"
#include "fortress/dataio/pnm.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace fortress;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / ("fortress_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string bin() {
  const char* b = std::getenv("FORTRESS_BIN");
  return b ? b : "fortress";
}

/// Runs the CLI inside the work directory; stdout goes to `log` when given.
int run(const std::string& args, const std::string& log = "", const std::string& env = "") {
  const std::string out = log.empty() ? "/dev/null" : (work() / log).string();
  const std::string cmd = "cd '" + work().string() + "' && " + env + " '" + bin() + "' " + args + " >'" + out + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

const char* kTiny =
    R"({"model": {"levels": 3, "widths": [8, 16, 32], "input_size": 32, "num_classes": 4},
        "train": {"batch": 4, "accum_steps": 1}})";

/// 20-sample dataset and tiny config shared by the train/eval/predict cases.
void ensure_fixture() {
  static bool done = false;
  if (done) return;
  ASSERT_EQ(run("synth --out data --n 20 --seed 0 --size 32"), 0);
  ASSERT_EQ(run("synth --out data3 --n 6 --seed 0 --size 32 --classes 3"), 0);
  write(work() / "tiny.json", kTiny);
  done = true;
}

}  // namespace

TEST(CliSynth, DeterministicAndValidated) {
  ASSERT_EQ(run("synth --out s1 --n 10 --seed 0"), 0);
  ASSERT_EQ(run("synth --out s2 --n 10 --seed 0"), 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(work() / "s1")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto rel = fs::relative(e.path(), work() / "s1");
    EXPECT_EQ(slurp(e.path()), slurp(work() / "s2" / rel)) << rel;
  }
  EXPECT_EQ(files, 21u);  // 10 images, 10 masks, manifest

  EXPECT_EQ(run("synth --out bad --n 2 --size 50"), 2);
  EXPECT_EQ(run("synth --out bad --n 2 --classes 7"), 2);
  EXPECT_EQ(run("synth --n 2"), 2);  // missing --out

  ASSERT_EQ(run("synth --out empty --n 0"), 0);
  const auto m = nlohmann::json::parse(slurp(work() / "empty" / "manifest.json"));
  EXPECT_TRUE(m["samples"].empty());
}

TEST(CliTrain, ProducesCheckpointsDeterministically) {
  ensure_fixture();
  ASSERT_EQ(run("train --data data --out t1 --config tiny.json --epochs 2 --seed 7", "t1.log"), 0);
  for (const char* f : {"best.fkpt", "last.fkpt", "history.jsonl", "config.json"}) EXPECT_TRUE(fs::exists(work() / "t1" / f)) << f;
  EXPECT_NE(slurp(work() / "t1.log").find("effective config"), std::string::npos);

  std::istringstream hist(slurp(work() / "t1" / "history.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(hist, line)) {
    const auto r = nlohmann::json::parse(line);
    EXPECT_EQ(r["epoch"].get<std::size_t>(), n++);
  }
  EXPECT_EQ(n, 2u);

  ASSERT_EQ(run("train --data data --out t2 --config tiny.json --epochs 2 --seed 7"), 0);
  EXPECT_EQ(slurp(work() / "t1" / "history.jsonl"), slurp(work() / "t2" / "history.jsonl"));
  EXPECT_EQ(slurp(work() / "t1" / "last.fkpt"), slurp(work() / "t2" / "last.fkpt"));

  // FORTRESS_SEED stands in for --seed
  ASSERT_EQ(run("train --data data --out t3 --config tiny.json --epochs 2", "", "FORTRESS_SEED=7"), 0);
  EXPECT_EQ(slurp(work() / "t1" / "history.jsonl"), slurp(work() / "t3" / "history.jsonl"));
  ASSERT_EQ(run("train --data data --out t4 --config tiny.json --epochs 2 --seed 8"), 0);
  EXPECT_NE(slurp(work() / "t1" / "history.jsonl"), slurp(work() / "t4" / "history.jsonl"));
  EXPECT_EQ(run("train --data data --out t5 --config tiny.json --epochs 1", "", "FORTRESS_SEED=abc"), 2);
}

TEST(CliTrain, ZeroLearningRateLeavesParametersUnchanged) {
  ensure_fixture();
  ASSERT_EQ(run("train --data data --out z --config tiny.json --epochs 2 --seed 3 --lr-max 0"), 0);
  auto trained = load_checkpoint<float>((work() / "z" / "last.fkpt").string());
  auto fresh = FortressModel<float>::build(trained.config(), 3);
  const auto& a = trained.store().params();
  const auto& b = fresh.store().params();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].value.bitwise_equal(b[i].value)) << a[i].name;
}

TEST(CliTrain, ErrorExitCodes) {
  ensure_fixture();
  // parameters blow up on the first step; the forward pass names the tensor
  EXPECT_EQ(run("train --data data --out nf --config tiny.json --epochs 2 --set train.lr_max=1e30", "nf.log"), 3);
  EXPECT_NE(slurp(work() / "nf.log").find("non-finite"), std::string::npos);

  EXPECT_EQ(run("train --data data --out e --epochs 1"), 2);  // default K = 9 vs 4-class data
  EXPECT_EQ(run("train --data data --out e --config tiny.json --set train.nope=1"), 2);
  EXPECT_EQ(run("train --data data --out e --config tiny.json --set train.batch=-1"), 2);
  EXPECT_EQ(run("train --data data --out e --config tiny.json --set train.batch"), 2);
  EXPECT_EQ(run("train --data data --out e --config missing.json"), 1);
  EXPECT_EQ(run("train --data nowhere --out e --config tiny.json"), 1);
  write(work() / "broken.json", "{\"model\": ");
  EXPECT_EQ(run("train --data data --out e --config broken.json"), 2);
}

TEST(CliEvalPredict, FusionMasksAndMismatch) {
  ensure_fixture();
  ASSERT_EQ(run("train --data data --out hf --config tiny.json --epochs 2 --set model.aux_weights=[0,0,0]"), 0);
  const std::string image = "data/images/" + fs::directory_iterator(work() / "data" / "images")->path().filename().string();

  ASSERT_EQ(run("predict --checkpoint hf/best.fkpt --image " + image + " --out plain.pgm --overlay plain.ppm"), 0);
  ASSERT_EQ(run("predict --checkpoint hf/best.fkpt --image " + image + " --out fused.pgm --head-fusion"), 0);
  EXPECT_EQ(slurp(work() / "plain.pgm"), slurp(work() / "fused.pgm"));
  const LabelMap mask = decode_pgm(slurp(work() / "plain.pgm"));
  EXPECT_EQ(mask.h, 32u);
  for (auto v : mask.data) EXPECT_LT(v, 4);
  EXPECT_TRUE(fs::exists(work() / "plain.ppm"));

  ASSERT_EQ(run("eval --checkpoint hf/best.fkpt --data data --json", "e1.json"), 0);
  ASSERT_EQ(run("eval --checkpoint hf/best.fkpt --data data --json --head-fusion", "e2.json"), 0);
  auto j1 = nlohmann::json::parse(slurp(work() / "e1.json"));
  auto j2 = nlohmann::json::parse(slurp(work() / "e2.json"));
  j1.erase("head_fusion");
  j2.erase("head_fusion");
  EXPECT_EQ(j1, j2);

  EXPECT_EQ(run("eval --checkpoint hf/best.fkpt --data data3"), 2);
  EXPECT_EQ(run("eval --checkpoint nothing.fkpt --data data"), 1);
  EXPECT_EQ(run("predict --checkpoint hf/best.fkpt --image nothing.ppm --out x.pgm"), 1);
  write(work() / "junk.fkpt", "not a checkpoint");
  EXPECT_EQ(run("eval --checkpoint junk.fkpt --data data"), 1);
}

TEST(CliEvalPredict, OverfitsFiveSamples) {
  ASSERT_EQ(run("synth --out five --n 6 --seed 3 --size 32 --val-fraction 0.17"), 0);
  write(work() / "overfit.json",
        R"({"model": {"levels": 3, "widths": [8, 16, 32], "input_size": 32, "num_classes": 4, "tikan": {"dropout": 0.0}},
            "train": {"batch": 5, "accum_steps": 1, "lr_max": 0.01, "warmup_epochs": 0, "restart_epochs": 1000,
                      "patience": 1000, "weight_decay": 0}})");
  ASSERT_EQ(run("train --data five --out of --config overfit.json --epochs 200"), 0);
  ASSERT_EQ(run("eval --checkpoint of/last.fkpt --data five --split train --json", "of.json"), 0);
  const auto j = nlohmann::json::parse(slurp(work() / "of.json"));
  EXPECT_EQ(j["samples"].get<std::size_t>(), 5u);
  EXPECT_GT(j["pixel_acc"].get<double>(), 0.9);
}

TEST(CliAnalyzeVerify, Surface) {
  ASSERT_EQ(run("analyze --config default --json", "an.json"), 0);
  const auto j = nlohmann::json::parse(slurp(work() / "an.json"));
  EXPECT_GE(j["twin_ratio"].get<double>(), 3.0);
  EXPECT_EQ(j["config"]["num_classes"].get<std::size_t>(), 9u);
  ASSERT_EQ(run("analyze --config default", "an.txt"), 0);
  EXPECT_NE(slurp(work() / "an.txt").find("twin ratio"), std::string::npos);
  EXPECT_EQ(run("analyze --config default --size 250"), 2);
  EXPECT_EQ(run("analyze --set model.levels=0"), 2);

  EXPECT_EQ(run("verify schedule", "vs.txt"), 0);
  EXPECT_NE(slurp(work() / "vs.txt").find("lr_at(30)"), std::string::npos);
  EXPECT_EQ(run("verify grad"), 0);
  EXPECT_EQ(run("verify nonsense"), 2);
  EXPECT_EQ(run("gradcheck --seeds 1 --seed 11"), 0);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run(""), 2);
}
