#pragma once

// Self-check suites runnable from the command line: gradient checks, spline
// properties, gate and identity contracts, metric oracle, schedule and loss values.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fortress/gradcheck.hpp"
#include "fortress/metrics.hpp"
#include "fortress/model.hpp"
#include "fortress/training.hpp"

namespace fortress {

struct CheckResult {
  std::string suite;
  std::string name;
  bool pass = false;
  double value = 0;      // measured quantity (error, difference, ...)
  double tolerance = 0;  // pass threshold on value
};

inline const std::vector<std::string>& verify_suite_names() {
  static const std::vector<std::string> names{"grad", "spline", "gate", "metrics", "schedule", "loss"};
  return names;
}

namespace detail {

inline Tensor<double> verify_random(Shape s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  Tensor<double> t(s);
  for (double& v : t.span()) v = rng.normal(0.0, sd);
  return t;
}

inline Var<double> projected_sum(Tape<double>& t, const Var<double>& out, std::uint64_t seed) {
  return ops::sum(t, ops::mul(t, out, t.constant(verify_random(out.shape(), seed))));
}

inline std::vector<Parameter<double>*> param_ptrs(ParamStore<double>& store) {
  std::vector<Parameter<double>*> out;
  for (auto& p : store.params()) out.push_back(&p);
  return out;
}

class SuiteRecorder {
 public:
  explicit SuiteRecorder(std::string suite) : suite_(std::move(suite)) {}
  /// Passes when value <= tolerance.
  void below(const std::string& name, double value, double tolerance) {
    out_.push_back({suite_, name, std::isfinite(value) && value <= tolerance, value, tolerance});
  }
  void truth(const std::string& name, bool ok) { out_.push_back({suite_, name, ok, ok ? 0.0 : 1.0, 0.0}); }
  std::vector<CheckResult> take() { return std::move(out_); }

 private:
  std::string suite_;
  std::vector<CheckResult> out_;
};

inline std::vector<CheckResult> verify_grad(const std::vector<std::uint64_t>& seeds) {
  SuiteRecorder rec("grad");
  for (std::uint64_t seed : seeds) {
    const std::string tag = " seed " + std::to_string(seed);
    struct ConvCase {
      const char* name;
      std::size_t cin, cout, k, groups, stride, pad;
      bool bias;
    };
    for (const ConvCase& c : {ConvCase{"conv2d dense", 3, 4, 3, 1, 1, 1, true},
                              ConvCase{"conv2d grouped", 4, 6, 3, 2, 1, 1, true},
                              ConvCase{"conv2d depthwise", 3, 3, 3, 3, 1, 1, false},
                              ConvCase{"conv2d pointwise", 3, 5, 1, 1, 1, 0, true},
                              ConvCase{"conv2d depthwise stride 2", 3, 6, 3, 3, 2, 1, false}}) {
      std::vector<Shape> shapes{{2, c.cin, 5, 5}, {c.cout, c.cin / c.groups, c.k, c.k}};
      if (c.bias) shapes.push_back({c.cout, 1, 1, 1});
      auto f = [c, seed](Tape<double>& t, const std::vector<Var<double>>& in) {
        std::optional<Var<double>> b;
        if (c.bias) b = in[2];
        return projected_sum(t, ops::conv2d(t, in[0], in[1], b, {c.groups, c.stride, c.pad}), seed + 11);
      };
      rec.below(std::string(c.name) + tag, gradcheck(f, shapes, seed).max_rel_error, 1e-4);
    }

    auto bn = [seed](Tape<double>& t, const std::vector<Var<double>>& in) {
      Tensor<double> rm({1, 3, 1, 1}, 0.0), rv({1, 3, 1, 1}, 1.0);
      return projected_sum(t, ops::batchnorm(t, in[0], in[1], in[2], {&rm, &rv}, true), seed + 12);
    };
    rec.below("batchnorm train" + tag,
              gradcheck(bn, {Shape{2, 3, 4, 4}, Shape{1, 3, 1, 1}, Shape{1, 3, 1, 1}}, seed).max_rel_error, 1e-4);

    Rng lr(seed + 13);
    LabelMap target(2, 4, 4);
    for (auto& y : target.data) y = static_cast<std::int32_t>(lr.below(3));
    auto ce = [&target](Tape<double>& t, const std::vector<Var<double>>& in) {
      return ops::weighted_cross_entropy(t, in[0], target, std::vector<double>{1.0, 2.5, 0.6});
    };
    rec.below("softmax + cross-entropy" + tag, gradcheck(ce, {Shape{2, 3, 4, 4}}, seed).max_rel_error, 1e-4);

    {
      ParamStore<double> store;
      Rng rng(seed);
      auto a = make_attention(store, "a", 4, 3, rng);
      a.ch_b1->value.fill(0.3);  // keep the bottleneck ReLU off its kink
      auto fs = [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        return projected_sum(t, spatial_attention(t, in[0], a), seed + 14);
      };
      auto fc = [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        return projected_sum(t, channel_attention(t, in[0], a), seed + 15);
      };
      rec.below("spatial attention" + tag,
                gradcheck(fs, {verify_random({2, 4, 4, 4}, seed)}, param_ptrs(store)).max_rel_error, 1e-4);
      rec.below("channel attention" + tag,
                gradcheck(fc, {verify_random({2, 4, 4, 4}, seed)}, param_ptrs(store)).max_rel_error, 1e-4);
    }
    {
      ParamStore<double> store;
      Rng rng(seed);
      TiKANConfig cfg;
      auto p = make_kan_linear(store, "k", 6, 5, 3, cfg, rng);
      for (double& v : p.control->value.span()) v = rng.uniform(-1.0, 1.0);
      auto f = [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        return projected_sum(t, kan_linear(t, in[0], 2, 3, 3, p), seed + 16);
      };
      rec.below("kan_linear" + tag,
                gradcheck(f, {verify_random({18, 6, 1, 1}, seed)}, param_ptrs(store)).max_rel_error, 1e-4);
    }
    {
      ModelConfig mc;
      mc.levels = 2;
      mc.widths = {4, 8};
      mc.num_classes = 2;
      mc.input_size = 16;
      auto m = FortressModel<double>::build(mc, seed);
      LabelMap y(1, 16, 16);
      Rng yr(seed + 17);
      for (auto& v : y.data) v = static_cast<std::int32_t>(yr.below(2));
      auto f = [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        Rng drop(seed);
        auto out = m.forward(t, in[0], true, &drop);
        return ops::weighted_cross_entropy(t, out.final, y, std::vector<double>{1.0, 2.0});
      };
      rec.below("miniature model end-to-end" + tag,
                gradcheck(f, {verify_random({1, 3, 16, 16}, seed)}, param_ptrs(m.store())).max_rel_error, 1e-3);
    }
  }
  return rec.take();
}

inline std::vector<CheckResult> verify_spline() {
  SuiteRecorder rec("spline");
  for (auto [g, o] : {std::pair<std::size_t, std::size_t>{5, 3}, {2, 1}, {8, 3}}) {
    BSplineBasis basis(g, o);
    const std::string tag = " (G=" + std::to_string(g) + ", O=" + std::to_string(o) + ")";
    double unity = 0, constant = 0, negative = 0;
    const std::vector<double> c(basis.size(), 0.731);
    for (int i = 0; i < 1000; ++i) {
      const double x = i / 999.0;
      double s = 0;
      for (double v : basis.evaluate(x)) {
        s += v;
        negative = std::max(negative, -v);
      }
      unity = std::max(unity, std::abs(s - 1.0));
      constant = std::max(constant, std::abs(basis.spline(x, c) - 0.731));
    }
    rec.below("partition of unity" + tag, unity, 1e-6);
    rec.below("constant reproduction" + tag, constant, 1e-9);
    rec.below("non-negative basis" + tag, negative, 0.0);
  }
  return rec.take();
}

inline std::vector<CheckResult> verify_gate() {
  SuiteRecorder rec("gate");
  const TiKANConfig cfg;
  rec.truth("gate(16, 32, 32) is open", gate(16, 32, 32, cfg));
  rec.truth("gate(8, 8, 8) is closed", !gate(8, 8, 8, cfg));
  rec.truth("gate(64, 64, 64) is closed", !gate(64, 64, 64, cfg));

  ParamStore<double> store;
  Rng rng(5);
  auto with = make_kan_double_conv(store, "b", 8, 16, true, cfg, rng);
  // DS-only reference: the same units without TiKAN parameters
  KANDoubleConv<double> plain = with;
  plain.tikan.reset();
  Tape<double> tape(false);
  auto x = tape.constant(verify_random({1, 8, 32, 32}, 6));  // 16 x 32 x 32 opens the gate
  const auto ds_only = kan_double_conv(tape, x, plain, false, cfg, false, nullptr).value();
  for (double& v : with.tikan->kan.control->value.span()) v = 2.0;
  const auto closed = kan_double_conv(tape, x, with, false, cfg, false, nullptr).value();
  rec.truth("gate false: block output bitwise equals the DS-only path", closed.bitwise_equal(ds_only));
  with.tikan->alpha->value.fill(0.0);
  const auto zero = kan_double_conv(tape, x, with, true, cfg, false, nullptr).value();
  rec.truth("alpha = 0: block output bitwise equals the DS-only path", zero.bitwise_equal(ds_only));
  with.tikan->alpha->value.fill(0.1);
  const auto open = kan_double_conv(tape, x, with, true, cfg, false, nullptr).value();
  rec.truth("alpha = 0.1 with the gate open changes the output", !open.bitwise_equal(ds_only));
  return rec.take();
}

inline std::vector<CheckResult> verify_metrics() {
  SuiteRecorder rec("metrics");
  const std::size_t K = 3;
  Rng rng(2025);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    LabelMap gt(1, 8, 8), pred(1, 8, 8);
    for (auto& v : gt.data) v = static_cast<std::int32_t>(rng.below(K));
    for (auto& v : pred.data) v = static_cast<std::int32_t>(rng.below(K));
    ConfusionMatrix cm(K);
    accumulate(cm, pred, gt);
    const auto bg = scores(cm, true), nobg = scores(cm, false);

    // per-class counting straight from the masks
    const auto n = static_cast<double>(gt.size());
    bool all_correct = true;
    double correct = 0, recall_sum = 0, fwiou = 0;
    int gt_classes = 0;
    std::vector<double> iou(K), f1(K), mcc(K);
    std::vector<bool> present(K);
    for (std::size_t c = 0; c < K; ++c) {
      double tp = 0, g = 0, p = 0, uni = 0;
      for (std::size_t i = 0; i < gt.size(); ++i) {
        const bool in_g = gt.data[i] == static_cast<std::int32_t>(c), in_p = pred.data[i] == static_cast<std::int32_t>(c);
        tp += in_g && in_p;
        g += in_g;
        p += in_p;
        uni += in_g || in_p;
        if (c == 0) all_correct = all_correct && gt.data[i] == pred.data[i];
      }
      const double fp = p - tp, fn = g - tp, tn = n - uni;
      correct += tp;
      present[c] = uni > 0;
      iou[c] = uni > 0 ? tp / uni : 0.0;
      f1[c] = uni > 0 ? 2 * tp / (g + p) : 0.0;
      const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
      mcc[c] = den > 0 ? (tp * tn - fp * fn) / std::sqrt(den) : (all_correct ? 1.0 : 0.0);
      if (g > 0) {
        recall_sum += tp / g;
        ++gt_classes;
        fwiou += g / n * iou[c];
      }
      mismatches += bg.per_class[c].iou != iou[c] || bg.per_class[c].f1 != f1[c] || bg.per_class[c].mcc != mcc[c];
    }
    auto mean = [&](const std::vector<double>& v, bool with_bg) {
      double s = 0;
      int m = 0;
      for (std::size_t c = with_bg ? 0 : 1; c < K; ++c)
        if (present[c]) {
          s += v[c];
          ++m;
        }
      return m ? s / m : 1.0;
    };
    mismatches += bg.miou != mean(iou, true) || nobg.miou != mean(iou, false);
    mismatches += bg.f1 != mean(f1, true) || nobg.f1 != mean(f1, false);
    mismatches += bg.mean_mcc != mean(mcc, true) || nobg.mean_mcc != mean(mcc, false);
    mismatches += bg.pixel_acc != correct / n || bg.bal_acc != recall_sum / gt_classes || bg.fwiou != fwiou;
  }
  rec.below("200 random 8x8 pairs match the counting oracle exactly (mismatches)", static_cast<double>(mismatches), 0.0);

  LabelMap perfect(1, 8, 8);
  for (std::size_t i = 0; i < perfect.size(); ++i) perfect.data[i] = static_cast<std::int32_t>(i % K);
  ConfusionMatrix cm(K);
  accumulate(cm, perfect, perfect);
  const auto s = scores(cm, true);
  bool ones = s.miou == 1.0 && s.f1 == 1.0 && s.mean_mcc == 1.0 && s.pixel_acc == 1.0 && s.bal_acc == 1.0 && s.fwiou == 1.0;
  for (const auto& c : s.per_class) ones = ones && c.iou == 1.0 && c.f1 == 1.0 && c.recall == 1.0 && c.mcc == 1.0;
  rec.truth("perfect prediction scores 1.0 everywhere", ones);
  return rec.take();
}

inline std::vector<CheckResult> verify_schedule() {
  SuiteRecorder rec("schedule");
  const TrainConfig cfg;
  rec.below("lr_at(5) == 1e-4 exactly", std::abs(lr_at(5.0, cfg) - 1e-4), 0.0);
  rec.below("lr_at(30) == 1e-6 exactly", std::abs(lr_at(30.0, cfg) - 1e-6), 0.0);
  rec.below("lr_at(17.5) == 5.05e-5", std::abs(lr_at(17.5, cfg) - 5.05e-5), 1e-12);
  rec.below("beta_2 decay at t = tau = 1000 equals 0.4/e",
            std::abs(0.4 * supervision_decay(1000.0, cfg.tau) - 0.4 / std::exp(1.0)), 1e-9);
  rec.below("warm-up continuity at epoch 5", std::abs(lr_at(5.0 - 1e-12, cfg) - lr_at(5.0, cfg)), 1e-15);
  return rec.take();
}

inline std::vector<CheckResult> verify_loss() {
  SuiteRecorder rec("loss");
  Tape<double> tape(false);
  for (std::size_t k : {2u, 4u, 9u}) {
    LabelMap y(2, 4, 4);
    Rng rng(k);
    for (auto& v : y.data) v = static_cast<std::int32_t>(rng.below(k));
    const auto ce = ops::weighted_cross_entropy(tape, tape.constant(Tensor<double>({2, k, 4, 4}, 0.3)), y,
                                                std::vector<double>(k, 1.0));
    rec.below("uniform logits give ln K (K=" + std::to_string(k) + ")", std::abs(ce.value()[0] - std::log(double(k))), 1e-9);
  }
  ModelOutput<double> out;
  out.final = tape.constant(verify_random({2, 3, 16, 16}, 1));
  for (std::size_t i = 0; i < 3; ++i) out.aux.push_back(tape.constant(verify_random({2, 3, 8u >> i, 8u >> i}, 2 + i)));
  LabelMap y(2, 16, 16);
  Rng rng(9);
  for (auto& v : y.data) v = static_cast<std::int32_t>(rng.below(3));
  const std::vector<double> w{0.4, 2.0, 1.1};
  const double final_ce = ops::weighted_cross_entropy(tape, out.final, y, w).value()[0];
  const double total = total_loss(tape, out, y, w, {0.0, 0.0, 0.0}, 0.0, 1000.0).value()[0];
  rec.below("total loss with beta = 0 equals the final CE", std::abs(total - final_ce), 1e-12);
  return rec.take();
}

}  // namespace detail

/// Runs one named suite. Unknown names are a ConfigError.
inline std::vector<CheckResult> run_verify_suite(const std::string& name, const std::vector<std::uint64_t>& seeds = {1, 2, 3}) {
  if (name == "grad") return detail::verify_grad(seeds);
  if (name == "spline") return detail::verify_spline();
  if (name == "gate") return detail::verify_gate();
  if (name == "metrics") return detail::verify_metrics();
  if (name == "schedule") return detail::verify_schedule();
  if (name == "loss") return detail::verify_loss();
  throw ConfigError("unknown verify suite '" + name + "' (expected grad, spline, gate, metrics, schedule or loss)");
}

}  // namespace fortress
