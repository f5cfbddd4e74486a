// Acceptance gate: one PASS/FAIL line per criterion. Criteria 1 and 9 go
// through the command-line binary; the rest call the library directly.
// Exit status is 0 only when every criterion passes.

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "fortress/analysis.hpp"
#include "fortress/checkpoint.hpp"
#include "fortress/dataio/dli.hpp"
#include "fortress/dataio/synth.hpp"
#include "fortress/verify.hpp"

namespace fs = std::filesystem;
using namespace fortress;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string g_cli;
fs::path g_work;

int run_cli(const std::string& args, const std::string& log) {
  const std::string cmd =
      "cd '" + g_work.string() + "' && '" + g_cli + "' " + args + " >'" + (g_work / log).string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_cli(int code, const std::string& what, const std::string& log) {
  if (code != 0) throw std::runtime_error(what + " exited " + std::to_string(code) + ": " + slurp(g_work / log));
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream ss;
  ss << std::setprecision(prec) << v;
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Folds library check results into one outcome, naming the first failures.
Outcome from_checks(const std::vector<CheckResult>& results) {
  Outcome o{true, ""};
  std::size_t failed = 0;
  for (const auto& r : results) {
    if (r.pass) continue;
    o.pass = false;
    if (failed++ < 3) o.detail += "[" + r.name + ": " + fmt(r.value) + " > " + fmt(r.tolerance) + "] ";
  }
  o.detail += std::to_string(results.size() - failed) + "/" + std::to_string(results.size()) + " checks";
  return o;
}

Outcome efficiency() {
  const auto t0 = std::chrono::steady_clock::now();
  require_cli(run_cli("analyze --config default --json", "c1.json"), "analyze", "c1.json");
  const double secs = seconds_since(t0);
  const auto j = nlohmann::json::parse(slurp(g_work / "c1.json"));
  const auto params = j.at("total_params").get<double>();
  const double gflops = j.at("total_flops").get<double>() * 1e-9;
  const double twin = j.at("twin_ratio").get<double>();
  const bool ok_p = params >= 1.7e6 && params <= 4.0e6;
  const bool ok_f = gflops >= 0.6 && gflops <= 2.0;
  const bool ok_t = twin >= 3.0;
  const bool ok_s = secs < 5.0;
  return {ok_p && ok_f && ok_t && ok_s,
          "params " + fmt(params / 1e6, 4) + "M in [1.7, 4.0]: " + (ok_p ? "yes" : "no") + "; GFLOPs " + fmt(gflops, 4) +
              " in [0.6, 2.0]: " + (ok_f ? "yes" : "no") + "; twin ratio " + fmt(twin, 4) + " >= 3: " +
              (ok_t ? "yes" : "no") + "; " + fmt(secs, 3) + " s"};
}

Outcome reduction_identity() {
  const auto r = analyze_config(ModelConfig{});
  double worst = 0;
  std::size_t n = 0;
  for (const auto& row : r.rows) {
    if (row.kind != "ds_conv") continue;
    ++n;
    const double c = static_cast<double>(row.c_out);
    const double ratio = static_cast<double>(row.twin_params) / static_cast<double>(row.params);
    worst = std::max(worst, std::abs(ratio - 9.0 * c / (9.0 + c)));
  }
  const double spot = reduction_factor(3, 64);
  const bool ok = n > 0 && worst <= 1e-9 && std::abs(spot - 7.8904) <= 1e-3;
  return {ok, std::to_string(n) + " DS rows, max |ratio - 9C/(9+C)| = " + fmt(worst) + "; C_out=64 -> " + fmt(spot, 6)};
}

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o = from_checks(run_verify_suite("grad", {1, 2, 3}));
  const double secs = seconds_since(t0);
  if (secs >= 120.0) o.pass = false;
  o.detail += ", " + fmt(secs, 3) + " s";
  return o;
}

Outcome toy_training() {
  const auto t0 = std::chrono::steady_clock::now();
  require_cli(run_cli("synth --out toy_data --n 250 --size 64 --classes 4 --seed 0 --val-fraction 0.2", "c9_synth.log"),
              "synth", "c9_synth.log");
  for (const char* run : {"toy_a", "toy_b"}) {
    require_cli(run_cli(std::string("train --data toy_data --out ") + run + " --epochs 20 --seed 0 --set model.num_classes=4",
                        std::string("c9_") + run + ".log"),
                "train", std::string("c9_") + run + ".log");
  }
  const double secs = seconds_since(t0);

  const std::string ha = slurp(g_work / "toy_a" / "history.jsonl");
  const bool deterministic =
      ha == slurp(g_work / "toy_b" / "history.jsonl") && slurp(g_work / "toy_a" / "last.fkpt") == slurp(g_work / "toy_b" / "last.fkpt");

  std::vector<double> loss;
  std::istringstream lines(ha);
  for (std::string line; std::getline(lines, line);) loss.push_back(nlohmann::json::parse(line).at("train_loss").get<double>());
  const bool decreasing = loss.size() == 20 && loss.back() < loss.front();

  require_cli(run_cli("eval --checkpoint toy_a/last.fkpt --data toy_data --split val --json", "c9_eval.json"), "eval",
              "c9_eval.json");
  const auto e = nlohmann::json::parse(slurp(g_work / "c9_eval.json"));
  const double miou = e.at("miou_nobg").get<double>(), f1 = e.at("f1_nobg").get<double>();
  const bool ok = miou >= 0.5 && f1 >= 0.6 && decreasing && deterministic && secs < 1800.0;
  return {ok, "epoch-20 val mIoU(no bg) " + fmt(miou, 4) + " (need >= 0.5), F1(no bg) " + fmt(f1, 4) + " (need >= 0.6); train loss " +
                  fmt(loss.empty() ? 0 : loss.front(), 4) + " -> " + fmt(loss.empty() ? 0 : loss.back(), 4) +
                  (decreasing ? " decreasing" : " NOT decreasing") + "; " + (deterministic ? "deterministic" : "NOT deterministic") +
                  "; " + fmt(secs / 60.0, 3) + " min for both runs"};
}

Outcome persistence() {
  ModelConfig cfg;
  cfg.num_classes = 4;
  auto model = FortressModel<float>::build(cfg, 11);
  Rng rng(12);
  Tensor<float> x({2, 3, 64, 64});
  for (float& v : x.span()) v = static_cast<float>(rng.normal());
  {
    // one training-mode pass so the batch-norm running statistics are not at their initial values
    Tape<float> tape(false);
    Rng drop(13);
    model.forward(tape, tape.constant(x), true, &drop);
  }
  const fs::path p1 = g_work / "persist_1.fkpt", p2 = g_work / "persist_2.fkpt";
  save_checkpoint(model, p1.string());
  auto loaded = load_checkpoint<float>(p1.string());
  save_checkpoint(loaded, p2.string());
  const bool bytes = slurp(p1) == slurp(p2);
  const bool logits = model.predict_logits(x, false).bitwise_equal(loaded.predict_logits(x, false));
  return {bytes && logits, std::string("save/load/save ") + (bytes ? "byte-identical" : "DIFFERS") + " (" +
                               std::to_string(slurp(p1).size()) + " bytes); eval forward " +
                               (logits ? "bitwise equal" : "DIFFERS")};
}

Outcome dli_property() {
  SynthConfig cfg;
  cfg.n_samples = 80;
  cfg.density_min = 0.03;
  cfg.density_max = 0.08;
  std::vector<Sample> donors, targets;
  for (std::size_t i = 0; i < 30; ++i) donors.push_back(synth_sample(cfg, i));
  for (std::size_t i = 30; i < 80; ++i) targets.push_back(synth_sample(cfg, i));
  Rng bank_rng(21), rng(22);
  const PatchBank bank = build_patch_bank(donors, 4, 32, bank_rng);

  std::vector<std::uint64_t> before(4, 0), after(4, 0);
  std::size_t overwritten = 0, total = 0;
  for (const Sample& s : targets) {
    const auto r = dli_inject(s, bank, 4, rng);
    // recount straight from the masks
    for (std::size_t p = 0; p < s.mask.size(); ++p) {
      ++before[static_cast<std::size_t>(s.mask.data[p])];
      ++after[static_cast<std::size_t>(r.sample.mask.data[p])];
      ++total;
      if (s.mask.data[p] == 0) continue;
      bool changed = r.sample.mask.data[p] != s.mask.data[p];
      for (std::size_t c = 0; c < 3; ++c) changed = changed || r.sample.image[c * s.mask.size() + p] != s.image[c * s.mask.size() + p];
      overwritten += changed;
    }
  }
  bool increases = true;
  std::string shares;
  for (std::size_t k = 1; k < 4; ++k) {
    const double b = static_cast<double>(before[k]) / static_cast<double>(total);
    const double a = static_cast<double>(after[k]) / static_cast<double>(total);
    increases = increases && a > b;
    shares += " class " + std::to_string(k) + " " + fmt(100 * b, 3) + "% -> " + fmt(100 * a, 3) + "%;";
  }
  return {increases && overwritten == 0, "50 samples," + shares + " non-background pixels altered: " + std::to_string(overwritten)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  app.add_option("--cli", g_cli, "path to the fortress binary")->required();
  std::string work = "acceptance_work";
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  g_cli = fs::absolute(g_cli).string();
  g_work = fs::absolute(work);
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 efficiency arithmetic", efficiency},
      {"2 reduction-factor identity", reduction_identity},
      {"3 gradient correctness", gradients},
      {"4 spline properties", [] { return from_checks(run_verify_suite("spline")); }},
      {"5 gate and identity contracts", [] { return from_checks(run_verify_suite("gate")); }},
      {"6 schedule and decay values", [] { return from_checks(run_verify_suite("schedule")); }},
      {"7 loss degeneracies", [] { return from_checks(run_verify_suite("loss")); }},
      {"8 metrics oracle", [] { return from_checks(run_verify_suite("metrics")); }},
      {"9 toy training", toy_training},
      {"10 persistence", persistence},
      {"11 DLI property", dli_property},
  };
  std::size_t passed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    passed += o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail << std::endl;
  }
  std::cout << passed << "/" << criteria.size() << " criteria passed" << std::endl;
  return passed == criteria.size() ? 0 : 1;
}
