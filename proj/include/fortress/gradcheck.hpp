#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "fortress/autograd.hpp"
#include "fortress/rng.hpp"

namespace fortress {

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

/// Scalar-valued closure over leaf inputs. It must be a pure function of its
/// inputs and of any parameters it captures (fix its own dropout seed).
using GradClosure = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

namespace detail {

inline double rel_error(double analytic, double numeric) {
  const double den = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / den;
}

inline double eval_scalar(const GradClosure& f, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape(false);
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  const Var<double> out = f(tape, vars);
  if (out.value().numel() != 1) throw ConfigError("gradcheck closure must return a scalar");
  return out.value()[0];
}

}  // namespace detail

/// Compares reverse-mode gradients against central differences
/// (f(x+eps) - f(x-eps)) / 2eps for every coordinate of every input and of
/// every listed parameter. Returns the max of |a - n| / max(|a|, |n|, 1e-8).
inline GradcheckResult gradcheck(const GradClosure& f, std::vector<Tensor<double>> inputs,
                                 const std::vector<Parameter<double>*>& params = {}, double eps = 1e-5) {
  for (Parameter<double>* p : params) p->zero_grad();
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape(true);
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    const Var<double> loss = f(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  GradcheckResult result;
  auto diff = [&](double& slot, double h) {
    const double saved = slot;
    const double hi = saved + h;
    const double lo = saved - h;
    slot = hi;
    const double up = detail::eval_scalar(f, inputs);
    slot = lo;
    const double down = detail::eval_scalar(f, inputs);
    slot = saved;
    // divide by the step actually taken, which differs from 2h by rounding
    return (up - down) / (hi - lo);
  };
  auto probe = [&](double& slot, double a) {
    result.max_rel_error = std::max(result.max_rel_error, detail::rel_error(a, diff(slot, eps)));
    ++result.coordinates;
  };
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) probe(inputs[i][j], analytic[i][j]);
  for (Parameter<double>* p : params) {
    const Tensor<double> g = p->grad;
    for (std::size_t j = 0; j < p->value.numel(); ++j) probe(p->value[j], g[j]);
  }
  return result;
}

/// Random N(0,1) inputs of the given shapes drawn from `seed`.
inline GradcheckResult gradcheck(const GradClosure& f, const std::vector<Shape>& shapes, std::uint64_t seed,
                                 double eps = 1e-5) {
  Rng rng(seed);
  std::vector<Tensor<double>> inputs;
  for (const Shape& s : shapes) {
    Tensor<double> t(s);
    for (double& v : t.span()) v = rng.normal();
    inputs.push_back(std::move(t));
  }
  return gradcheck(f, std::move(inputs), {}, eps);
}

}  // namespace fortress
