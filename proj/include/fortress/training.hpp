#pragma once

// Loss, schedule, optimizer and the epoch loop.

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fortress/dataio/augment.hpp"
#include "fortress/dataio/dataset.hpp"
#include "fortress/dataio/dli.hpp"
#include "fortress/metrics.hpp"
#include "fortress/model.hpp"

namespace fortress {

struct TrainConfig {
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  double weight_decay = 1e-4;
  std::vector<double> betas{0.9, 0.999};
  double adam_eps = 1e-8;
  std::size_t batch = 16;
  std::size_t accum_steps = 2;
  double warmup_epochs = 5;
  double restart_epochs = 25;
  std::size_t patience = 15;
  double tau = 1000;
  std::string decay_clock = "iteration";  // or "epoch"
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  std::string class_weight_mode = "mean_freq";  // literal | mean_freq | fixed
  std::vector<std::string> augment;             // subset of hflip, rot30, rot50, histeq
  bool dli = false;
  std::size_t dli_max_patches = 3;
  bool normalize = true;

  void validate() const {
    if (!(lr_min >= 0.0) || !(lr_max >= 0.0)) throw ConfigError("learning rates must be >= 0");
    if (!(lr_min < lr_max) && lr_max != 0.0) throw ConfigError("lr_min must be below lr_max");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (betas.size() != 2 || betas[0] < 0 || betas[0] >= 1 || betas[1] < 0 || betas[1] >= 1) {
      throw ConfigError("betas must be two values in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (batch == 0) throw ConfigError("batch must be >= 1");
    if (accum_steps == 0) throw ConfigError("accum_steps must be >= 1");
    if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
    if (!(restart_epochs > 0)) throw ConfigError("restart_epochs must be positive");
    if (!(tau > 0)) throw ConfigError("tau must be positive");
    if (decay_clock != "iteration" && decay_clock != "epoch") throw ConfigError("decay_clock must be iteration or epoch");
    if (class_weight_mode != "literal" && class_weight_mode != "mean_freq" && class_weight_mode != "fixed") {
      throw ConfigError("class_weight_mode must be literal, mean_freq or fixed");
    }
    check_augment_ops(augment);
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr_max", c.lr_max},
                     {"lr_min", c.lr_min},
                     {"weight_decay", c.weight_decay},
                     {"betas", c.betas},
                     {"adam_eps", c.adam_eps},
                     {"batch", c.batch},
                     {"accum_steps", c.accum_steps},
                     {"warmup_epochs", c.warmup_epochs},
                     {"restart_epochs", c.restart_epochs},
                     {"patience", c.patience},
                     {"tau", c.tau},
                     {"decay_clock", c.decay_clock},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"class_weight_mode", c.class_weight_mode},
                     {"augment", c.augment},
                     {"dli", c.dli},
                     {"dli_max_patches", c.dli_max_patches},
                     {"normalize", c.normalize}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  detail::read_strict(j, "train", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "lr_max") v.get_to(c.lr_max);
    else if (k == "lr_min") v.get_to(c.lr_min);
    else if (k == "weight_decay") v.get_to(c.weight_decay);
    else if (k == "betas") v.get_to(c.betas);
    else if (k == "adam_eps") v.get_to(c.adam_eps);
    else if (k == "batch") v.get_to(c.batch);
    else if (k == "accum_steps") v.get_to(c.accum_steps);
    else if (k == "warmup_epochs") v.get_to(c.warmup_epochs);
    else if (k == "restart_epochs") v.get_to(c.restart_epochs);
    else if (k == "patience") v.get_to(c.patience);
    else if (k == "tau") v.get_to(c.tau);
    else if (k == "decay_clock") v.get_to(c.decay_clock);
    else if (k == "epochs") v.get_to(c.epochs);
    else if (k == "seed") v.get_to(c.seed);
    else if (k == "class_weight_mode") v.get_to(c.class_weight_mode);
    else if (k == "augment") v.get_to(c.augment);
    else if (k == "dli") v.get_to(c.dli);
    else if (k == "dli_max_patches") v.get_to(c.dli_max_patches);
    else if (k == "normalize") v.get_to(c.normalize);
    else return false;
    return true;
  });
}

// ------------------------------------------------------------------ losses

inline const std::vector<double>& fixed_class_weights() {
  static const std::vector<double> w{1.0, 3.0, 1.0, 1.0, 1.2, 1.5, 3.0, 1.2, 1.3};
  return w;
}

/// Per-class loss weights from pixel counts.
///   literal:   (N / sum_j N_j) / N_k, i.e. 1 / N_k
///   mean_freq: (N / K) / N_k
///   fixed:     the 9-class table
inline std::vector<double> class_weights(const std::vector<std::uint64_t>& counts, const std::string& mode) {
  if (mode == "fixed") {
    if (counts.size() != fixed_class_weights().size()) {
      throw ConfigError("fixed class weights are defined for 9 classes, got " + std::to_string(counts.size()));
    }
    return fixed_class_weights();
  }
  if (mode != "literal" && mode != "mean_freq") throw ConfigError("unknown class weight mode '" + mode + "'");
  if (counts.empty()) throw ConfigError("class_weights needs at least one class");
  double total = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) {
      throw ConfigError("class " + std::to_string(k) + " has no pixels; inverse-frequency weights are undefined");
    }
    total += static_cast<double>(counts[k]);
  }
  std::vector<double> w(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) {
    const auto n = static_cast<double>(counts[k]);
    w[k] = mode == "literal" ? (total / total) / n : (total / static_cast<double>(counts.size())) / n;
  }
  return w;
}

/// Nearest subsampling of (N, H, W) labels to (N, h, w) where H/h = W/w = s is a
/// power of two: source index i*s + s/2.
inline LabelMap subsample_labels(const LabelMap& m, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0 || m.h % h != 0 || m.w % w != 0 || m.h / h != m.w / w) {
    throw ConfigError("cannot subsample labels " + std::to_string(m.h) + "x" + std::to_string(m.w) + " to " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t s = m.h / h;
  LabelMap out(m.n, h, w);
  for (std::size_t n = 0; n < m.n; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(n, y, x) = m.at(n, y * s + s / 2, x * s + s / 2);
  return out;
}

/// exp(-t / tau).
inline double supervision_decay(double t, double tau) { return std::exp(-t / tau); }

/// CE(final) + sum_d beta_d * exp(-t/tau) * CE(aux_d). Aux targets are the
/// subsampled labels at each head's resolution.
template <Scalar T>
Var<T> total_loss(Tape<T>& tape, const ModelOutput<T>& out, const LabelMap& target, const std::vector<T>& weights,
                  const std::vector<double>& betas, double t, double tau) {
  Var<T> loss = ops::weighted_cross_entropy(tape, out.final, target, weights);
  const double decay = supervision_decay(t, tau);
  for (std::size_t i = 0; i < out.aux.size(); ++i) {
    const double beta = i < betas.size() ? betas[i] * decay : 0.0;
    if (beta == 0.0) continue;
    const Shape s = out.aux[i].shape();
    const auto ce = ops::weighted_cross_entropy(tape, out.aux[i], subsample_labels(target, s.h, s.w), weights);
    loss = ops::add(tape, loss, ops::scale(tape, ce, static_cast<T>(beta)));
  }
  return loss;
}

// -------------------------------------------------------------- schedule

/// Learning rate at a (fractional) epoch: linear warm-up from lr_min to lr_max,
/// then cosine cycles of restart_epochs. A cycle covers (start, start + T], so
/// lr_at(warmup + k*T) is lr_min for k >= 1 and the restart to lr_max happens
/// immediately after.
inline double lr_at(double epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("lr_at: epoch must be >= 0");
  if (cfg.lr_max == 0.0) return 0.0;  // frozen run
  if (epoch < cfg.warmup_epochs) {
    const double f = epoch / cfg.warmup_epochs;
    return cfg.lr_max * f + cfg.lr_min * (1.0 - f);
  }
  double t = std::fmod(epoch - cfg.warmup_epochs, cfg.restart_epochs);
  if (t == 0.0 && epoch > cfg.warmup_epochs) t = cfg.restart_epochs;
  const double w = 0.5 * (1.0 + std::cos(t * std::numbers::pi / cfg.restart_epochs));
  return cfg.lr_max * w + cfg.lr_min * (1.0 - w);
}

// -------------------------------------------------------------- optimizer

/// Adam with decoupled weight decay. Moments live in double.
template <Scalar T>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}
  explicit AdamW(const TrainConfig& cfg) : AdamW(cfg.betas[0], cfg.betas[1], cfg.adam_eps, cfg.weight_decay) {}

  std::size_t steps() const { return step_; }

  void step(ParamStore<T>& store, double lr) {
    auto& params = store.params();
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.numel(), 0.0);
        v_.emplace_back(p.value.numel(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ConfigError("optimizer state does not match the parameter store");
    ++step_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    std::size_t i = 0;
    for (auto& p : params) {
      auto& m = m_[i];
      auto& v = v_[i];
      ++i;
      for (std::size_t k = 0; k < p.value.numel(); ++k) {
        const double g = static_cast<double>(p.grad[k]);
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
        double theta = static_cast<double>(p.value[k]);
        theta -= lr * wd_ * theta;
        theta -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
        p.value[k] = static_cast<T>(theta);
      }
    }
  }

 private:
  double beta1_, beta2_, eps_, wd_;
  std::size_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Stops once `patience` + 1 consecutive epochs fail to beat the best score.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  /// Records a score; returns true when it is a new best.
  bool update(double score) {
    if (score > best_) {
      best_ = score;
      bad_ = 0;
      return true;
    }
    ++bad_;
    return false;
  }
  bool should_stop() const { return bad_ > patience_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t bad_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
};

// ------------------------------------------------------------ epoch loop

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_miou = 0;  // background excluded
  double val_f1 = 0;    // background excluded
  double lr = 0;        // rate of the epoch's last optimizer step
  bool best = false;
  bool stopped = false;  // early stopping fired after this epoch
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch},       {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
                     {"val_miou", r.val_miou}, {"val_f1", r.val_f1},         {"lr", r.lr},
                     {"best", r.best},         {"stopped", r.stopped}};
}

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  bool early_stopped = false;

  /// One JSON object per line.
  void write_jsonl(std::ostream& os) const {
    for (const auto& r : epochs) os << nlohmann::json(r).dump() << "\n";
  }
};

template <Scalar T>
struct FitResult {
  TrainHistory history;
  std::vector<Tensor<T>> best_state;  // ParamStore::snapshot() of the best-F1 epoch
};

struct ValResult {
  double loss = 0;
  ConfusionMatrix cm{1};
};

/// Eval-mode pass over `samples`: mean final-head CE and the confusion matrix.
template <Scalar T>
ValResult evaluate(FortressModel<T>& model, const std::vector<Sample>& samples, const std::vector<T>& weights,
                   std::size_t batch, bool normalize, bool head_fusion = false) {
  const std::size_t K = model.config().num_classes;
  ValResult res{0.0, ConfusionMatrix(K)};
  if (samples.empty()) throw ConfigError("evaluation set is empty");
  double loss_sum = 0;
  for (const auto& idx : batch_indices(samples.size(), batch, 0, 0, false)) {
    const Batch b = make_batch(samples, idx, 0, normalize);
    Tensor<T> images(b.images.shape());
    for (std::size_t i = 0; i < images.numel(); ++i) images[i] = static_cast<T>(b.images[i]);
    Tape<T> tape(false);
    auto out = model.forward(tape, tape.constant(images), false);
    const auto ce = ops::weighted_cross_entropy(tape, out.final, b.masks, weights);
    loss_sum += static_cast<double>(ce.value()[0]) * static_cast<double>(idx.size());
    const Tensor<T> logits = head_fusion ? model.predict_logits(images, true) : out.final.value();
    accumulate(res.cm, FortressModel<T>::argmax_channels(logits), b.masks);
  }
  res.loss = loss_sum / static_cast<double>(samples.size());
  return res;
}

/// Backward of the mean loss over `micro` batches, accumulated into the
/// parameter gradients (which are zeroed first). Returns the mean loss.
template <Scalar T>
double accumulate_gradients(FortressModel<T>& model, const std::vector<Batch>& micro, const std::vector<T>& weights,
                            const std::vector<double>& betas, double t, double tau, Rng& dropout_rng) {
  model.store().zero_grad();
  const T inv = T(1) / static_cast<T>(micro.size());
  double total = 0;
  for (const Batch& b : micro) {
    Tensor<T> images(b.images.shape());
    for (std::size_t i = 0; i < images.numel(); ++i) images[i] = static_cast<T>(b.images[i]);
    Tape<T> tape;
    auto out = model.forward(tape, tape.constant(images), true, &dropout_rng);
    auto loss = total_loss(tape, out, b.masks, weights, betas, t, tau);
    total += static_cast<double>(loss.value()[0]);
    tape.backward(ops::scale(tape, loss, inv));
  }
  for (const auto& p : model.store().params()) {
    if (!p.grad.all_finite()) throw NumericError("non-finite gradient in " + p.name);
  }
  return total / static_cast<double>(micro.size());
}

struct FitHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains with micro-batches of cfg.batch, one optimizer step per accum_steps
/// micro-batches, the scheduled learning rate evaluated per step at fractional
/// epochs, and early stopping on validation macro-F1 without background.
template <Scalar T>
FitResult<T> fit(FortressModel<T>& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
                 const TrainConfig& cfg, const FitHooks& hooks = {}) {
  cfg.validate();
  if (train.empty() || val.empty()) throw ConfigError("training and validation sets must be non-empty");
  const std::size_t K = model.config().num_classes;
  std::vector<std::uint64_t> counts(K, 0);
  for (const auto& s : train) {
    for (auto v : s.mask.data) {
      if (v < 0 || static_cast<std::size_t>(v) >= K) {
        throw ConfigError("sample " + s.id + " has label " + std::to_string(v) + " but the model has " +
                          std::to_string(K) + " classes");
      }
      ++counts[static_cast<std::size_t>(v)];
    }
  }
  std::vector<T> weights;
  for (double w : class_weights(counts, cfg.class_weight_mode)) weights.push_back(static_cast<T>(w));
  const auto& betas = model.config().aux_weights;

  PatchBank bank;
  if (cfg.dli) {
    Rng bank_rng = Rng(cfg.seed).fork(0xB4);
    bank = build_patch_bank(train, K, 64, bank_rng);
  }

  AdamW<T> opt(cfg);
  EarlyStopper stopper(cfg.patience);
  FitResult<T> result;
  result.best_state = model.store().snapshot();
  const std::size_t micro_per_epoch = (train.size() + cfg.batch - 1) / cfg.batch;
  const std::size_t steps_per_epoch = (micro_per_epoch + cfg.accum_steps - 1) / cfg.accum_steps;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng = Rng(cfg.seed).fork(1000 + epoch);
    Rng dropout_rng = epoch_rng.fork(1);
    Rng aug_rng = epoch_rng.fork(2);
    const auto groups = batch_indices(train.size(), cfg.batch, cfg.seed, epoch, true);

    auto load = [&](const std::vector<std::size_t>& idx) {
      if (cfg.augment.empty() && !cfg.dli) return make_batch(train, idx, 0, cfg.normalize);
      std::vector<Sample> local;
      std::vector<std::size_t> ids;
      for (std::size_t i : idx) {
        Sample s = train[i];
        if (cfg.dli) s = dli_inject(s, bank, K, aug_rng, DliOptions{cfg.dli_max_patches}).sample;
        if (!cfg.augment.empty()) s = augment(s, cfg.augment, aug_rng);
        ids.push_back(local.size());
        local.push_back(std::move(s));
      }
      return make_batch(local, ids, 0, cfg.normalize);
    };

    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<Batch> micro;
      std::size_t n = 0;
      for (std::size_t a = 0; a < cfg.accum_steps; ++a) {
        const std::size_t g = step * cfg.accum_steps + a;
        if (g >= groups.size()) break;
        micro.push_back(load(groups[g]));
        n += groups[g].size();
      }
      const double clock = cfg.decay_clock == "iteration" ? static_cast<double>(opt.steps())
                                                          : static_cast<double>(epoch);
      const double loss = accumulate_gradients(model, micro, weights, betas, clock, cfg.tau, dropout_rng);
      if (!std::isfinite(loss)) throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
      loss_sum += loss * static_cast<double>(n);
      seen += n;
      rec.lr = lr_at(static_cast<double>(epoch) + static_cast<double>(step) / static_cast<double>(steps_per_epoch), cfg);
      opt.step(model.store(), rec.lr);
    }
    rec.train_loss = loss_sum / static_cast<double>(seen);

    const ValResult v = evaluate(model, val, weights, cfg.batch, cfg.normalize);
    const MetricRecord m = scores(v.cm, false);
    rec.val_loss = v.loss;
    rec.val_miou = m.miou;
    rec.val_f1 = m.f1;
    rec.best = stopper.update(m.f1);
    if (rec.best) {
      result.best_state = model.store().snapshot();
      result.history.best_epoch = epoch;
    }
    rec.stopped = stopper.should_stop();
    result.history.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (rec.stopped) {
      result.history.early_stopped = true;
      break;
    }
  }
  return result;
}

}  // namespace fortress
