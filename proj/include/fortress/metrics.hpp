#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fortress/errors.hpp"
#include "fortress/ops.hpp"

namespace fortress {

/// K x K pixel counts, entry (g, p) = pixels with ground truth g predicted p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0) {
    if (k == 0) throw ConfigError("confusion matrix needs at least one class");
  }

  std::size_t classes() const { return k_; }
  std::uint64_t at(std::size_t g, std::size_t p) const { return counts_[g * k_ + p]; }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }
  std::uint64_t gt_count(std::size_t g) const {
    std::uint64_t t = 0;
    for (std::size_t p = 0; p < k_; ++p) t += at(g, p);
    return t;
  }
  std::uint64_t pred_count(std::size_t p) const {
    std::uint64_t t = 0;
    for (std::size_t g = 0; g < k_; ++g) t += at(g, p);
    return t;
  }

  void add(std::size_t g, std::size_t p, std::uint64_t n = 1) { counts_[g * k_ + p] += n; }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.k_ != k_) throw ConfigError("cannot merge confusion matrices of different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }
  bool operator==(const ConfusionMatrix&) const = default;

  bool is_diagonal() const {
    for (std::size_t g = 0; g < k_; ++g)
      for (std::size_t p = 0; p < k_; ++p)
        if (g != p && at(g, p) != 0) return false;
    return true;
  }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

/// Adds one count per pixel whose ground truth is not `ignore_label`.
inline void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt,
                       std::optional<std::int32_t> ignore_label = std::nullopt) {
  if (pred.n != gt.n || pred.h != gt.h || pred.w != gt.w) throw DataError("prediction and ground truth shapes differ");
  const auto k = static_cast<std::int32_t>(cm.classes());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::int32_t g = gt.data[i];
    if (ignore_label && g == *ignore_label) continue;
    const std::int32_t p = pred.data[i];
    if (g < 0 || g >= k) throw DataError("ground-truth class " + std::to_string(g) + " outside [0, " + std::to_string(k) + ")");
    if (p < 0 || p >= k) throw DataError("predicted class " + std::to_string(p) + " outside [0, " + std::to_string(k) + ")");
    cm.add(static_cast<std::size_t>(g), static_cast<std::size_t>(p));
  }
}

struct ClassScores {
  bool present = false;  // appears in ground truth or prediction
  double iou = 0.0;
  double f1 = 0.0;
  double recall = 0.0;
  double mcc = 0.0;
};

struct MetricRecord {
  std::vector<ClassScores> per_class;
  double miou = 0.0;
  double f1 = 0.0;
  double mean_mcc = 0.0;
  double pixel_acc = 0.0;
  double bal_acc = 0.0;
  double fwiou = 0.0;
};

/// Macro means run over classes present in ground truth or prediction
/// (class 0 dropped when include_background is false); a class that appears in
/// neither has no defined IoU or F1. An empty mean is 1, which only happens when
/// every counted pixel is correct.
inline MetricRecord scores(const ConfusionMatrix& cm, bool include_background) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw ConfigError("metrics need at least one counted pixel");
  const std::size_t k = cm.classes();
  const bool diagonal = cm.is_diagonal();
  MetricRecord r;
  r.per_class.resize(k);
  std::uint64_t trace = 0;
  double recall_sum = 0.0;
  std::size_t gt_classes = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    const double fn = static_cast<double>(cm.gt_count(c)) - tp;
    const double fp = static_cast<double>(cm.pred_count(c)) - tp;
    const double tn = static_cast<double>(total) - tp - fn - fp;
    trace += cm.at(c, c);
    ClassScores& s = r.per_class[c];
    s.present = tp + fn + fp > 0;
    if (s.present) {
      s.iou = tp / (tp + fp + fn);
      s.f1 = 2 * tp / (2 * tp + fp + fn);
    }
    if (tp + fn > 0) {
      s.recall = tp / (tp + fn);
      recall_sum += s.recall;
      ++gt_classes;
      r.fwiou += (tp + fn) / static_cast<double>(total) * s.iou;
    }
    const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (den > 0) s.mcc = (tp * tn - fp * fn) / std::sqrt(den);
    else s.mcc = diagonal ? 1.0 : 0.0;
  }
  std::size_t counted = 0;
  for (std::size_t c = include_background ? 0 : 1; c < k; ++c) {
    if (!r.per_class[c].present) continue;
    r.miou += r.per_class[c].iou;
    r.f1 += r.per_class[c].f1;
    r.mean_mcc += r.per_class[c].mcc;
    ++counted;
  }
  if (counted > 0) {
    r.miou /= static_cast<double>(counted);
    r.f1 /= static_cast<double>(counted);
    r.mean_mcc /= static_cast<double>(counted);
  } else {
    r.miou = r.f1 = r.mean_mcc = 1.0;
  }
  r.pixel_acc = static_cast<double>(trace) / static_cast<double>(total);
  r.bal_acc = recall_sum / static_cast<double>(gt_classes);
  return r;
}

/// The fixed-key metric report. mean_mcc and the scalar accuracies are over all classes.
inline nlohmann::json metric_report(const ConfusionMatrix& cm) {
  const MetricRecord bg = scores(cm, true);
  const MetricRecord nobg = scores(cm, false);
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& c : bg.per_class) {
    nlohmann::json row = {{"present", c.present}, {"recall", c.recall}, {"mcc", c.mcc}};
    row["iou"] = c.present ? nlohmann::json(c.iou) : nlohmann::json(nullptr);
    row["f1"] = c.present ? nlohmann::json(c.f1) : nlohmann::json(nullptr);
    per_class.push_back(row);
  }
  return {{"f1_bg", bg.f1},           {"f1_nobg", nobg.f1},      {"miou_bg", bg.miou},
          {"miou_nobg", nobg.miou},   {"pixel_acc", bg.pixel_acc}, {"bal_acc", bg.bal_acc},
          {"mean_mcc", bg.mean_mcc},  {"fwiou", bg.fwiou},       {"per_class", per_class}};
}

}  // namespace fortress
