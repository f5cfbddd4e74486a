// fortress: synthesize data, train, evaluate, predict, analyze and self-check.
//
// Exit codes: 0 success, 1 I/O or data, 2 usage or configuration, 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "fortress/analysis.hpp"
#include "fortress/checkpoint.hpp"
#include "fortress/config.hpp"
#include "fortress/dataio/dataset.hpp"
#include "fortress/dataio/synth.hpp"
#include "fortress/training.hpp"
#include "fortress/verify.hpp"

namespace fs = std::filesystem;
using namespace fortress;

namespace {

enum Exit { kOk = 0, kIo = 1, kUsage = 2, kNumeric = 3 };

/// --seed, else FORTRESS_SEED, else the config value.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (const char* env = std::getenv("FORTRESS_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw ConfigError(std::string("FORTRESS_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  return fallback;
}

RunConfig build_config(const std::string& path, const std::vector<std::string>& sets) {
  RunConfig cfg = load_run_config(path);
  for (const auto& s : sets) apply_override(cfg, s);
  return cfg;
}

void echo_config(const nlohmann::json& j) { std::cout << "effective config: " << j.dump() << "\n"; }

std::vector<double> uniform_weights(std::size_t k) { return std::vector<double>(k, 1.0); }

void check_classes(const FortressModel<float>& model, const Dataset& ds, const std::string& what) {
  if (model.config().num_classes != ds.num_classes) {
    throw ConfigError("model has " + std::to_string(model.config().num_classes) + " classes but " + what + " has " +
                      std::to_string(ds.num_classes));
  }
}

Tensor<float> to_batch(const Tensor<float>& image, bool normalize) {
  const Shape s = image.shape();
  Tensor<float> b({1, s.c, s.h, s.w});
  std::copy(image.data(), image.data() + image.numel(), b.data());
  if (normalize) normalize_imagenet(b);
  return b;
}

const std::array<std::array<float, 3>, 9>& palette() {
  static const std::array<std::array<float, 3>, 9> p{{{0, 0, 0},
                                                      {1, 0.1f, 0.1f},
                                                      {0.1f, 0.4f, 1},
                                                      {1, 0.85f, 0.1f},
                                                      {0.2f, 0.9f, 0.3f},
                                                      {0.9f, 0.3f, 0.9f},
                                                      {0.1f, 0.9f, 0.9f},
                                                      {1, 0.55f, 0.1f},
                                                      {0.6f, 0.6f, 0.6f}}};
  return p;
}

Tensor<float> overlay(const Tensor<float>& image, const LabelMap& mask) {
  Tensor<float> out = image;
  const Shape s = image.shape();
  for (std::size_t p = 0; p < s.plane(); ++p) {
    const auto cls = static_cast<std::size_t>(mask.data[p]);
    if (cls == 0) continue;
    const auto& col = palette()[cls % palette().size()];
    for (std::size_t c = 0; c < 3; ++c) out[c * s.plane() + p] = 0.45f * out[c * s.plane() + p] + 0.55f * col[c];
  }
  return out;
}

void print_checks(const std::vector<CheckResult>& results) {
  for (const auto& r : results) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.suite << ": " << r.name << "  value=" << std::setprecision(6)
              << r.value << " tol=" << r.tolerance << "\n";
  }
}

int run_checks(const std::vector<std::string>& suites, const std::vector<std::uint64_t>& seeds) {
  std::size_t failed = 0, total = 0;
  for (const auto& s : suites) {
    const auto results = run_verify_suite(s, seeds);
    print_checks(results);
    for (const auto& r : results) failed += !r.pass;
    total += results.size();
  }
  std::cout << total - failed << "/" << total << " checks passed\n";
  return failed ? kNumeric : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fortress: lightweight segmentation network toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic defect dataset");
  std::string synth_out;
  std::optional<std::uint64_t> synth_seed;
  SynthConfig sc;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--n", sc.n_samples, "number of samples")->required();
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--size", sc.size, "image side (multiple of 16)");
  synth->add_option("--classes", sc.num_classes, "classes including background (2-4)");
  synth->add_option("--val-fraction", sc.val_fraction, "share of samples in the val split");

  // train
  auto* train = app.add_subcommand("train", "train a model on a dataset directory");
  std::string data_dir, out_dir, config_path = "default";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::size_t> epochs, batch, accum, patience;
  std::optional<double> lr_max;
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "run directory")->required();
  train->add_option("--config", config_path, "JSON config file or 'default'");
  train->add_option("--set", sets, "dotted-path override, e.g. train.lr_max=3e-4 (repeatable)");
  train->add_option("--seed", train_seed, "training seed");
  train->add_option("--epochs", epochs);
  train->add_option("--lr-max", lr_max);
  train->add_option("--batch", batch);
  train->add_option("--accum", accum);
  train->add_option("--patience", patience);

  // eval
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  std::string ckpt, split = "val";
  bool head_fusion = false, as_json = false, no_normalize = false;
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--split", split, "train, val, test or all");
  eval->add_flag("--head-fusion", head_fusion, "add scaled auxiliary logits at inference");
  eval->add_flag("--json", as_json);
  eval->add_flag("--no-normalize", no_normalize, "skip ImageNet normalization");

  // predict
  auto* predict = app.add_subcommand("predict", "segment a single PPM image");
  std::string image_path, mask_out, overlay_out;
  predict->add_option("--checkpoint", ckpt)->required();
  predict->add_option("--image", image_path)->required();
  predict->add_option("--out", mask_out, "output PGM mask")->required();
  predict->add_option("--overlay", overlay_out, "optional color overlay PPM");
  predict->add_flag("--head-fusion", head_fusion);
  predict->add_flag("--no-normalize", no_normalize);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "parameter and FLOP accounting");
  std::optional<std::size_t> size;
  std::size_t bench = 0;
  analyze->add_option("--config", config_path, "JSON config file or 'default'");
  analyze->add_option("--set", sets);
  analyze->add_option("--size", size, "input side (default: model.input_size)");
  analyze->add_flag("--json", as_json);
  analyze->add_option("--bench", bench, "time N single-thread forward passes");

  // verify / gradcheck
  auto* verify = app.add_subcommand("verify", "run a property suite");
  std::string suite;
  verify->add_option("suite", suite, "grad, spline, gate, metrics, schedule, loss or all")->required();
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::size_t n_seeds = 3;
  std::optional<std::uint64_t> gc_seed;
  gradcheck_cmd->add_option("--seeds", n_seeds, "number of seeds");
  gradcheck_cmd->add_option("--seed", gc_seed, "first seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*synth) {
      sc.seed = resolve_seed(synth_seed, 0);
      sc.validate();
      echo_config(nlohmann::json{{"synth", sc}});
      const auto manifest = synth_generate(sc, synth_out);
      std::size_t n_train = 0, n_val = 0, n_test = 0;
      for (const auto& s : manifest["samples"]) {
        const auto sp = s["split"].get<std::string>();
        (sp == "train" ? n_train : sp == "val" ? n_val : n_test) += 1;
      }
      std::cout << "wrote " << sc.n_samples << " samples to " << synth_out << " (train " << n_train << ", val " << n_val
                << ", test " << n_test << ")\nclass pixel counts:";
      const auto& counts = manifest["class_counts"];
      for (std::size_t k = 0; k < counts.size(); ++k) {
        std::cout << " " << manifest["class_names"][k].get<std::string>() << "=" << counts[k].get<std::uint64_t>();
      }
      std::cout << "\n";
      return kOk;
    }

    if (*train) {
      RunConfig cfg = build_config(config_path, sets);
      if (epochs) cfg.train.epochs = *epochs;
      if (lr_max) cfg.train.lr_max = *lr_max;
      if (batch) cfg.train.batch = *batch;
      if (accum) cfg.train.accum_steps = *accum;
      if (patience) cfg.train.patience = *patience;
      cfg.train.seed = resolve_seed(train_seed, cfg.train.seed);
      cfg.validate();
      const nlohmann::json effective{{"model", cfg.model}, {"train", cfg.train}};
      echo_config(effective);

      const Dataset tr = load_dataset(data_dir, "train");
      const Dataset va = load_dataset(data_dir, "val");
      auto model = FortressModel<float>::build(cfg.model, cfg.train.seed);
      check_classes(model, tr, "dataset " + data_dir);

      fs::create_directories(out_dir);
      detail::write_file((fs::path(out_dir) / "config.json").string(), effective.dump(2) + "\n");
      const std::string history_path = (fs::path(out_dir) / "history.jsonl").string();
      std::ofstream history(history_path, std::ios::trunc);
      if (!history) throw std::ios_base::failure("cannot write " + history_path);
      std::cout << "train " << tr.samples.size() << " / val " << va.samples.size() << " samples, " << model.param_count()
                << " parameters\n";

      FitHooks hooks{[&](const EpochRecord& r) {
        history << nlohmann::json(r).dump() << "\n" << std::flush;
        std::cout << "epoch " << r.epoch << "  loss " << std::setprecision(5) << r.train_loss << "  val_loss "
                  << r.val_loss << "  mIoU " << r.val_miou << "  F1 " << r.val_f1 << "  lr " << r.lr
                  << (r.best ? "  *" : "") << std::endl;
      }};
      auto result = fit(model, tr.samples, va.samples, cfg.train, hooks);
      save_checkpoint(model, (fs::path(out_dir) / "last.fkpt").string());
      model.store().restore(result.best_state);
      save_checkpoint(model, (fs::path(out_dir) / "best.fkpt").string());
      std::cout << "best epoch " << result.history.best_epoch << (result.history.early_stopped ? " (early stop)" : "")
                << "; checkpoints in " << out_dir << "\n";
      return kOk;
    }

    if (*eval) {
      auto model = load_checkpoint<float>(ckpt);
      const Dataset ds = load_dataset(data_dir, split);
      check_classes(model, ds, "dataset " + data_dir);
      if (ds.samples.empty()) throw ConfigError("split '" + split + "' of " + data_dir + " is empty");
      const std::size_t K = model.config().num_classes;
      const auto w = uniform_weights(K);
      const auto res = evaluate(model, ds.samples, std::vector<float>(w.begin(), w.end()), 8, !no_normalize, head_fusion);
      nlohmann::json report = metric_report(res.cm);
      report["loss"] = res.loss;
      report["split"] = split;
      report["samples"] = ds.samples.size();
      report["head_fusion"] = head_fusion;
      if (as_json) {
        std::cout << report.dump(2) << "\n";
      } else {
        const auto bg = scores(res.cm, true), nobg = scores(res.cm, false);
        std::cout << std::fixed << std::setprecision(4) << split << " (" << ds.samples.size() << " samples)  loss "
                  << res.loss << "\n"
                  << "              w/ bg    w/o bg\n"
                  << "mIoU        " << std::setw(7) << bg.miou << "   " << std::setw(7) << nobg.miou << "\n"
                  << "F1          " << std::setw(7) << bg.f1 << "   " << std::setw(7) << nobg.f1 << "\n"
                  << "mean MCC    " << std::setw(7) << bg.mean_mcc << "   " << std::setw(7) << nobg.mean_mcc << "\n"
                  << "pixel acc   " << std::setw(7) << bg.pixel_acc << "\n"
                  << "balanced    " << std::setw(7) << bg.bal_acc << "\n"
                  << "FWIoU       " << std::setw(7) << bg.fwiou << "\n";
        for (std::size_t k = 0; k < K; ++k) {
          const auto& c = bg.per_class[k];
          std::cout << "class " << k << (c.present ? "" : " (absent)") << "  IoU " << c.iou << "  F1 " << c.f1
                    << "  recall " << c.recall << "  MCC " << c.mcc << "\n";
        }
      }
      return kOk;
    }

    if (*predict) {
      auto model = load_checkpoint<float>(ckpt);
      const Tensor<float> image = read_image(image_path);
      const Shape s = image.shape();
      if (s.h % 16 != 0 || s.w % 16 != 0) {
        throw ConfigError("image side must be a multiple of 16, got " + std::to_string(s.h) + "x" + std::to_string(s.w));
      }
      const LabelMap mask = model.predict(to_batch(image, !no_normalize), head_fusion);
      write_mask(mask_out, mask);
      if (!overlay_out.empty()) write_image(overlay_out, overlay(image, mask));
      std::cout << "wrote " << mask_out << (overlay_out.empty() ? "" : " and " + overlay_out) << "\n";
      return kOk;
    }

    if (*analyze) {
      const RunConfig cfg = build_config(config_path, sets);
      const std::size_t side = size.value_or(cfg.model.input_size);
      const auto report = analyze_config(cfg.model, side, side);
      std::optional<LatencyStats> lat;
      if (bench > 0) {
        auto model = FortressModel<float>::build(cfg.model, 0);
        lat = bench_forward(model, side, bench);
      }
      if (as_json) {
        nlohmann::json j = report_json(report);
        j["config"] = cfg.model;
        if (lat) j["latency_ms"] = {{"iterations", lat->iterations}, {"mean", lat->mean_ms}, {"median", lat->median_ms}, {"min", lat->min_ms}};
        std::cout << j.dump(2) << "\n";
      } else {
        echo_config(nlohmann::json{{"model", cfg.model}});
        std::cout << report_text(report);
        if (lat) {
          std::cout << "latency (1 thread, " << lat->iterations << " runs): mean " << lat->mean_ms << " ms, median "
                    << lat->median_ms << " ms, min " << lat->min_ms << " ms\n";
        }
      }
      return kOk;
    }

    if (*verify) {
      std::vector<std::string> suites;
      if (suite == "all") {
        suites = verify_suite_names();
      } else {
        const auto& names = verify_suite_names();
        if (std::find(names.begin(), names.end(), suite) == names.end()) {
          throw ConfigError("unknown verify suite '" + suite + "' (expected grad, spline, gate, metrics, schedule, loss or all)");
        }
        suites = {suite};
      }
      return run_checks(suites, {1, 2, 3});
    }

    if (*gradcheck_cmd) {
      if (n_seeds == 0) throw ConfigError("--seeds must be at least 1");
      const std::uint64_t first = resolve_seed(gc_seed, 1);
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = 0; i < n_seeds; ++i) seeds.push_back(first + i);
      return run_checks({"grad"}, seeds);
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kIo;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}
