#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fortress/errors.hpp"

namespace fortress {

/// Clamped uniform B-spline basis on [0, 1]: `grid` intervals, degree
/// `order`, order+1 repeated knots at each end, grid+order functions.
class BSplineBasis {
 public:
  BSplineBasis(std::size_t grid, std::size_t order) : grid_(grid), order_(order) {
    if (grid < 1) throw ConfigError("B-spline grid size must be >= 1");
    if (order < 1) throw ConfigError("B-spline order must be >= 1");
    knots_.reserve(grid + 2 * order + 1);
    for (std::size_t i = 0; i <= order; ++i) knots_.push_back(0.0);
    for (std::size_t i = 1; i < grid; ++i) knots_.push_back(static_cast<double>(i) / static_cast<double>(grid));
    for (std::size_t i = 0; i <= order; ++i) knots_.push_back(1.0);
  }

  std::size_t grid() const { return grid_; }
  std::size_t order() const { return order_; }
  std::size_t size() const { return grid_ + order_; }
  const std::vector<double>& knots() const { return knots_; }

  /// Basis values at x (clamped to [0,1]) written to `values` (length size()).
  /// If `derivs` is non-empty it receives d/dx of each basis function.
  void evaluate(double x, std::span<double> values, std::span<double> derivs = {}) const {
    if (values.size() != size()) throw ConfigError("B-spline output span has wrong length");
    x = std::clamp(x, 0.0, 1.0);
    const std::size_t m = knots_.size();
    // Degree-0 table over all m-1 knot intervals; only one is active.
    std::vector<double> table(m - 1, 0.0);
    const std::size_t span = find_span(x);
    table[span] = 1.0;
    std::vector<double> lower;
    for (std::size_t p = 1; p <= order_; ++p) {
      if (p == order_ && !derivs.empty()) lower = table;
      const std::size_t count = m - 1 - p;
      for (std::size_t i = 0; i < count; ++i) {
        double v = 0.0;
        const double left_den = knots_[i + p] - knots_[i];
        const double right_den = knots_[i + p + 1] - knots_[i + 1];
        if (left_den > 0.0) v += (x - knots_[i]) / left_den * table[i];
        if (right_den > 0.0) v += (knots_[i + p + 1] - x) / right_den * table[i + 1];
        table[i] = v;
      }
      table[count] = 0.0;
    }
    std::copy_n(table.begin(), size(), values.begin());
    if (!derivs.empty()) {
      if (derivs.size() != size()) throw ConfigError("B-spline derivative span has wrong length");
      const double p = static_cast<double>(order_);
      for (std::size_t i = 0; i < size(); ++i) {
        double d = 0.0;
        const double left_den = knots_[i + order_] - knots_[i];
        const double right_den = knots_[i + order_ + 1] - knots_[i + 1];
        if (left_den > 0.0) d += p / left_den * lower[i];
        if (right_den > 0.0) d -= p / right_den * lower[i + 1];
        derivs[i] = d;
      }
    }
  }

  std::vector<double> evaluate(double x) const {
    std::vector<double> v(size());
    evaluate(x, v);
    return v;
  }

  /// sum_i control[i] * B_i(x)
  double spline(double x, std::span<const double> control) const {
    if (control.size() != size()) {
      throw ConfigError("spline control length " + std::to_string(control.size()) + " != grid+order " +
                        std::to_string(size()));
    }
    const auto basis = evaluate(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < size(); ++i) acc += control[i] * basis[i];
    return acc;
  }

 private:
  // Index i of the knot interval [t_i, t_{i+1}) holding x; x = 1 maps to the last non-empty one.
  std::size_t find_span(double x) const {
    const std::size_t last = grid_ + order_ - 1;
    if (x >= 1.0) return last;
    for (std::size_t i = order_; i < last; ++i)
      if (x < knots_[i + 1]) return i;
    return last;
  }

  std::size_t grid_;
  std::size_t order_;
  std::vector<double> knots_;
};

}  // namespace fortress
