#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fortress/dataio/synth.hpp"
#include "fortress/gradcheck.hpp"
#include "fortress/training.hpp"

using namespace fortress;

namespace {

ModelConfig tiny_config(std::size_t k = 3) {
  ModelConfig cfg;
  cfg.levels = 3;
  cfg.widths = {8, 16, 32};
  cfg.num_classes = k;
  cfg.input_size = 32;
  return cfg;
}

std::vector<Sample> toy_samples(std::size_t n, std::size_t k, std::uint64_t seed, std::size_t offset = 0) {
  SynthConfig sc;
  sc.n_samples = n + offset;
  sc.size = 32;
  sc.num_classes = k;
  sc.seed = seed;
  std::vector<Sample> out;
  for (std::size_t i = offset; i < offset + n; ++i) out.push_back(synth_sample(sc, i));
  return out;
}

Tensor<double> random_tensor(Shape s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  Tensor<double> t(s);
  for (double& v : t.span()) v = rng.normal(0.0, sd);
  return t;
}

LabelMap random_labels(std::size_t n, std::size_t h, std::size_t w, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  LabelMap m(n, h, w);
  for (auto& v : m.data) v = static_cast<std::int32_t>(rng.below(k));
  return m;
}

// Plain double-precision reference for mean weighted cross-entropy.
double reference_ce(const Tensor<double>& z, const LabelMap& y, const std::vector<double>& w) {
  const Shape s = z.shape();
  double acc = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t py = 0; py < s.h; ++py)
      for (std::size_t px = 0; px < s.w; ++px) {
        double denom = 0;
        for (std::size_t c = 0; c < s.c; ++c) denom += std::exp(z.at(n, c, py, px));
        const auto k = static_cast<std::size_t>(y.at(n, py, px));
        acc += -w[k] * std::log(std::exp(z.at(n, k, py, px)) / denom);
      }
  return acc / static_cast<double>(s.n * s.h * s.w);
}

}  // namespace

TEST(ClassWeights, Examples) {
  const auto lit = class_weights({3, 1}, "literal");
  EXPECT_DOUBLE_EQ(lit[0], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(lit[1], 1.0);
  const auto mf = class_weights({3, 1}, "mean_freq");
  EXPECT_DOUBLE_EQ(mf[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(mf[1], 2.0);
  const auto fixed = class_weights(std::vector<std::uint64_t>(9, 5), "fixed");
  EXPECT_EQ(fixed, (std::vector<double>{1.0, 3.0, 1.0, 1.0, 1.2, 1.5, 3.0, 1.2, 1.3}));
  EXPECT_THROW(class_weights({3, 0}, "literal"), ConfigError);
  EXPECT_THROW(class_weights({3, 0}, "mean_freq"), ConfigError);
  EXPECT_THROW(class_weights({3, 1}, "fixed"), ConfigError);
  EXPECT_THROW(class_weights({3, 1}, "median"), ConfigError);
}

TEST(ClassWeights, MeanFreqIsInverseFrequencyScaled) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint64_t> counts(2 + rng.below(8));
    for (auto& c : counts) c = 1 + rng.below(10000);
    const auto w = class_weights(counts, "mean_freq");
    // sum_k w_k N_k = N for every count vector
    double total = 0, weighted = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      total += static_cast<double>(counts[k]);
      weighted += w[k] * static_cast<double>(counts[k]);
    }
    EXPECT_NEAR(weighted, total, 1e-9 * total);
  }
}

TEST(WeightedCe, Examples) {
  Tape<double> tape(false);
  const Tensor<double> flat({2, 4, 3, 5}, 0.7);
  const auto labels = random_labels(2, 3, 5, 4, 1);
  const auto uniform = ops::weighted_cross_entropy(tape, tape.constant(flat), labels, std::vector<double>(4, 1.0));
  EXPECT_NEAR(uniform.value()[0], std::log(4.0), 1e-9);

  LabelMap one(1, 1, 1, 0);
  const auto pair = ops::weighted_cross_entropy(tape, tape.constant(Tensor<double>({1, 2, 1, 1}, 0.0)), one,
                                                std::vector<double>{2.0, 1.0});
  EXPECT_NEAR(pair.value()[0], 2.0 * std::log(2.0), 1e-12);

  double prev = std::numeric_limits<double>::infinity();
  for (double scale : {1.0, 4.0, 16.0, 64.0, 256.0}) {
    Tensor<double> z({1, 3, 2, 2}, 0.0);
    const auto y = random_labels(1, 2, 2, 3, 2);
    for (std::size_t p = 0; p < 4; ++p) z[static_cast<std::size_t>(y.data[p]) * 4 + p] = scale;
    const double loss = ops::weighted_cross_entropy(tape, tape.constant(z), y, std::vector<double>(3, 1.0)).value()[0];
    EXPECT_TRUE(loss < prev || loss == 0.0) << scale;
    prev = loss;
  }
  EXPECT_LT(prev, 1e-12);
}

TEST(WeightedCe, MatchesReferenceAndGradcheck) {
  const auto z = random_tensor({2, 3, 4, 4}, 5, 2.0);
  const auto y = random_labels(2, 4, 4, 3, 6);
  const std::vector<double> w{0.5, 2.0, 1.3};
  Tape<double> tape(false);
  EXPECT_NEAR(ops::weighted_cross_entropy(tape, tape.constant(z), y, w).value()[0], reference_ce(z, y, w), 1e-12);
  EXPECT_THROW(ops::weighted_cross_entropy(tape, tape.constant(z), random_labels(2, 4, 4, 4, 1), w), DataError);

  for (std::uint64_t seed : {1, 2, 3}) {
    auto f = [&](Tape<double>& t, const std::vector<Var<double>>& in) { return ops::weighted_cross_entropy(t, in[0], y, w); };
    EXPECT_LT(gradcheck(f, {random_tensor({2, 3, 4, 4}, seed)}).max_rel_error, 1e-4);
  }
}

TEST(TotalLoss, SubsampleIndexRule) {
  const auto m = random_labels(2, 16, 16, 5, 3);
  const auto half = subsample_labels(m, 8, 8);
  const auto quarter = subsample_labels(m, 4, 4);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(quarter.at(n, y, x), m.at(n, 4 * y + 2, 4 * x + 2));
  EXPECT_EQ(half.at(1, 3, 5), m.at(1, 7, 11));
  EXPECT_EQ(subsample_labels(m, 16, 16), m);
  EXPECT_THROW(subsample_labels(m, 5, 5), ConfigError);
  EXPECT_THROW(subsample_labels(m, 8, 4), ConfigError);
}

TEST(TotalLoss, DecayAndDegeneracies) {
  EXPECT_EQ(supervision_decay(0.0, 1000.0), 1.0);
  EXPECT_NEAR(0.4 * supervision_decay(1000.0, 1000.0), 0.4 / std::exp(1.0), 1e-9);
  EXPECT_NEAR(0.4 * supervision_decay(1000.0, 1000.0), 0.147152, 1e-6);

  Tape<double> tape(false);
  ModelOutput<double> out;
  out.final = tape.constant(random_tensor({2, 3, 16, 16}, 1));
  for (std::size_t i = 0; i < 3; ++i) out.aux.push_back(tape.constant(random_tensor({2, 3, 8u >> i, 8u >> i}, 2 + i)));
  const auto y = random_labels(2, 16, 16, 3, 7);
  const std::vector<double> w{1.0, 2.5, 0.7};
  const double final_ce = ops::weighted_cross_entropy(tape, out.final, y, w).value()[0];

  EXPECT_EQ(total_loss(tape, out, y, w, {0.0, 0.0, 0.0}, 0.0, 1000.0).value()[0], final_ce);

  for (double t : {0.0, 250.0, 1000.0, 5000.0}) {
    const std::vector<double> betas{0.4, 0.3, 0.2};
    double expected = reference_ce(out.final.value(), y, w);
    for (std::size_t i = 0; i < 3; ++i) {
      const std::size_t side = 8u >> i;
      expected += betas[i] * std::exp(-t / 1000.0) * reference_ce(out.aux[i].value(), subsample_labels(y, side, side), w);
    }
    const double got = total_loss(tape, out, y, w, betas, t, 1000.0).value()[0];
    EXPECT_NEAR(got, expected, 1e-12 * expected) << t;
    EXPECT_GE(got, final_ce);
  }
}

TEST(TotalLoss, GradcheckThroughAuxTerms) {
  const auto y = random_labels(1, 8, 8, 3, 9);
  const std::vector<double> w{1.0, 2.0, 0.5};
  auto f = [&](Tape<double>& t, const std::vector<Var<double>>& in) {
    ModelOutput<double> out{in[0], {in[1], in[2]}, {}};
    return total_loss(t, out, y, w, {0.4, 0.3}, 300.0, 1000.0);
  };
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto r = gradcheck(
        f, {random_tensor({1, 3, 8, 8}, seed), random_tensor({1, 3, 4, 4}, seed + 10), random_tensor({1, 3, 2, 2}, seed + 20)});
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

TEST(Schedule, Values) {
  const TrainConfig cfg;
  EXPECT_EQ(lr_at(5.0, cfg), 1e-4);
  EXPECT_EQ(lr_at(30.0, cfg), 1e-6);
  EXPECT_NEAR(lr_at(17.5, cfg), 5.05e-5, 1e-12);
  EXPECT_EQ(lr_at(0.0, cfg), 1e-6);
  EXPECT_NEAR(lr_at(2.5, cfg), 0.5 * (1e-4 + 1e-6), 1e-18);
  EXPECT_THROW(lr_at(-1.0, cfg), ConfigError);
}

TEST(Schedule, ContinuityAndRestarts) {
  const TrainConfig cfg;
  EXPECT_NEAR(lr_at(5.0 - 1e-9, cfg), lr_at(5.0, cfg), 1e-12);
  for (int k = 1; k <= 4; ++k) {
    const double boundary = 5.0 + 25.0 * k;
    EXPECT_EQ(lr_at(boundary, cfg), cfg.lr_min);
    EXPECT_NEAR(lr_at(boundary + 1e-9, cfg), cfg.lr_max, 1e-12);
    EXPECT_NEAR(lr_at(boundary - 1e-9, cfg), cfg.lr_min, 1e-12);
  }
  double prev = lr_at(5.0, cfg);
  for (double e = 5.25; e <= 30.0; e += 0.25) {
    const double lr = lr_at(e, cfg);
    EXPECT_LT(lr, prev);
    EXPECT_GE(lr, cfg.lr_min);
    prev = lr;
  }
  for (double e = 0.25; e <= 5.0; e += 0.25) EXPECT_GT(lr_at(e, cfg), lr_at(e - 0.25, cfg));
  TrainConfig frozen;
  frozen.lr_max = 0.0;
  EXPECT_EQ(lr_at(1.0, frozen), 0.0);
  EXPECT_EQ(lr_at(12.0, frozen), 0.0);
}

TEST(AdamW, HandComputedStep) {
  ParamStore<double> store;
  auto& p = store.add("p", Tensor<double>({1, 1, 1, 1}, 1.0));
  p.grad[0] = 1.0;
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
  opt.step(store, 0.1);
  EXPECT_NEAR(p.value[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value[0], 0.9, 1e-8);
}

TEST(AdamW, ZeroGradientAndDecoupledDecay) {
  ParamStore<double> store;
  auto& p = store.add("p", random_tensor({2, 3, 1, 1}, 3));
  const Tensor<double> before = p.value;
  AdamW<double> still(0.9, 0.999, 1e-8, 0.0);
  for (int i = 0; i < 10; ++i) still.step(store, 0.1);
  EXPECT_TRUE(p.value.bitwise_equal(before));

  AdamW<double> decay(0.9, 0.999, 1e-8, 0.5);
  decay.step(store, 0.1);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(p.value[i], before[i] - 0.1 * 0.5 * before[i]);
}

TEST(AdamW, ConstantGradientStepTendsToLr) {
  ParamStore<double> store;
  auto& p = store.add("p", Tensor<double>({1, 1, 1, 2}, 0.0));
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
  double last_step = 0;
  for (int i = 0; i < 2000; ++i) {
    p.grad[0] = 3.0;
    p.grad[1] = -0.02;
    const double a = p.value[0], b = p.value[1];
    opt.step(store, 0.01);
    last_step = a - p.value[0];
    EXPECT_NEAR(p.value[1] - b, 0.01, 1e-6);
  }
  EXPECT_NEAR(last_step, 0.01, 1e-8);
}

TEST(EarlyStopping, PatienceZeroStopsAfterSecondEpoch) {
  EarlyStopper s(0);
  EXPECT_TRUE(s.update(0.9));
  EXPECT_FALSE(s.should_stop());
  EXPECT_FALSE(s.update(0.8));
  EXPECT_TRUE(s.should_stop());

  EarlyStopper p(2);
  p.update(0.5);
  p.update(0.4);
  p.update(0.5);  // ties do not count as improvement
  EXPECT_FALSE(p.should_stop());
  p.update(0.6);
  EXPECT_FALSE(p.should_stop());
  EXPECT_DOUBLE_EQ(p.best(), 0.6);
}

TEST(Accumulation, DuplicatedMicroBatchesMatchCombinedBatch) {
  ModelConfig mc = tiny_config();
  mc.tikan.dropout = 0.0;
  const auto samples = toy_samples(2, 3, 1);
  const Batch one = make_batch(samples, {0, 1}, 0, true);
  const Batch both = make_batch(samples, {0, 1, 0, 1}, 0, true);
  const std::vector<double> w{0.5, 2.0, 1.5};
  const std::vector<double> betas{0.4, 0.3, 0.2};

  auto a = FortressModel<double>::build(mc, 7);
  auto b = FortressModel<double>::build(mc, 7);
  Rng ra(1), rb(1);
  const double la = accumulate_gradients(a, {one, one}, w, betas, 0.0, 1000.0, ra);
  const double lb = accumulate_gradients(b, {both}, w, betas, 0.0, 1000.0, rb);
  EXPECT_NEAR(la, lb, 1e-6 * std::abs(lb));
  double max_diff = 0;
  for (std::size_t i = 0; i < a.store().params().size(); ++i) {
    const auto& ga = a.store().params()[i].grad;
    const auto& gb = b.store().params()[i].grad;
    for (std::size_t k = 0; k < ga.numel(); ++k) max_diff = std::max(max_diff, std::abs(ga[k] - gb[k]));
  }
  EXPECT_LT(max_diff, 1e-6);

  TrainConfig tc;
  AdamW<double> oa(tc), ob(tc);
  oa.step(a.store(), 1e-3);
  ob.step(b.store(), 1e-3);
  for (std::size_t i = 0; i < a.store().params().size(); ++i) {
    const auto& pa = a.store().params()[i].value;
    const auto& pb = b.store().params()[i].value;
    for (std::size_t k = 0; k < pa.numel(); ++k) EXPECT_NEAR(pa[k], pb[k], 1e-6);
  }
}

TEST(TrainConfigJson, RoundTripAndUnknownKeys) {
  TrainConfig c;
  c.lr_max = 3e-4;
  c.augment = {"hflip", "histeq"};
  const nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
  nlohmann::json bad = j;
  bad["learning_rate"] = 1;
  EXPECT_THROW(bad.get<TrainConfig>(), ConfigError);

  TrainConfig v;
  v.lr_min = 1e-3;
  EXPECT_THROW(v.validate(), ConfigError);
  v = TrainConfig{};
  v.accum_steps = 0;
  EXPECT_THROW(v.validate(), ConfigError);
  v = TrainConfig{};
  v.augment = {"shear"};
  EXPECT_THROW(v.validate(), ConfigError);
}

TEST(Fit, DeterministicAndDecreasing) {
  const auto train = toy_samples(24, 3, 0);
  const auto val = toy_samples(8, 3, 0, 24);
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch = 4;
  tc.lr_max = 2e-3;
  tc.lr_min = 1e-5;
  tc.warmup_epochs = 1;

  auto run = [&] {
    auto m = FortressModel<float>::build(tiny_config(), 0);
    std::vector<EpochRecord> seen;
    auto r = fit(m, train, val, tc, FitHooks{[&](const EpochRecord& e) { seen.push_back(e); }});
    EXPECT_EQ(seen.size(), r.history.epochs.size());
    std::ostringstream os;
    r.history.write_jsonl(os);
    return std::make_pair(os.str(), std::move(r));
  };
  const auto [text1, r1] = run();
  const auto [text2, r2] = run();
  EXPECT_EQ(text1, text2);
  ASSERT_EQ(r1.best_state.size(), r2.best_state.size());
  for (std::size_t i = 0; i < r1.best_state.size(); ++i) EXPECT_TRUE(r1.best_state[i].bitwise_equal(r2.best_state[i]));

  const auto& ep = r1.history.epochs;
  ASSERT_EQ(ep.size(), 4u);
  for (std::size_t i = 1; i < ep.size(); ++i) {
    EXPECT_EQ(ep[i].epoch, i);
    EXPECT_LT(ep[i].train_loss, ep[i - 1].train_loss) << "epoch " << i;
  }
  std::istringstream lines(text1);
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"epoch", "train_loss", "val_loss", "val_miou", "val_f1", "lr"}) EXPECT_TRUE(j.contains(key));
    ++count;
  }
  EXPECT_EQ(count, 4u);
  EXPECT_TRUE(ep[r1.history.best_epoch].best);
}

TEST(Fit, ZeroLearningRateLeavesParametersUntouched) {
  const auto train = toy_samples(6, 3, 2);
  const auto val = toy_samples(2, 3, 2, 6);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch = 3;
  tc.lr_max = 0.0;
  auto m = FortressModel<float>::build(tiny_config(), 1);
  std::vector<Tensor<float>> before;
  for (const auto& p : m.store().params()) before.push_back(p.value);
  fit(m, train, val, tc);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(m.store().params()[i].value.bitwise_equal(before[i]));
}

TEST(Fit, InputErrors) {
  auto m = FortressModel<float>::build(tiny_config(), 0);
  const auto train = toy_samples(4, 3, 0);
  TrainConfig tc;
  tc.epochs = 1;
  EXPECT_THROW(fit(m, {}, train, tc), ConfigError);
  EXPECT_THROW(fit(m, train, {}, tc), ConfigError);
  auto wide = FortressModel<float>::build(tiny_config(2), 0);
  EXPECT_THROW(fit(wide, train, train, tc), ConfigError);
}

TEST(Fit, AugmentationAndInjectionRun) {
  const auto train = toy_samples(8, 3, 3);
  const auto val = toy_samples(4, 3, 3, 8);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch = 4;
  tc.augment = {"hflip", "rot30", "histeq"};
  tc.dli = true;
  auto m = FortressModel<float>::build(tiny_config(), 0);
  const auto r = fit(m, train, val, tc);
  ASSERT_EQ(r.history.epochs.size(), 1u);
  EXPECT_TRUE(std::isfinite(r.history.epochs[0].train_loss));
}
