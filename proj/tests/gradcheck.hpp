#pragma once

// Central-difference gradient oracle shared by the unit and acceptance suites.
// Works only through forward evaluation, independent of Tape::backward.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "omnibind/autodiff.hpp"
#include "omnibind/rng.hpp"

namespace omnibind::testing {

using LossBuilder = std::function<Var(Tape&)>;

inline double evaluate(const LossBuilder& build) {
  Tape tape;
  return build(tape).value()[0];
}

inline Tensor numeric_gradient(Parameter& p, const LossBuilder& build, double h = 1e-5) {
  Tensor g(p.value.rows(), p.value.cols());
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double saved = p.value[i];
    p.value[i] = saved + h;
    const double up = evaluate(build);
    p.value[i] = saved - h;
    const double down = evaluate(build);
    p.value[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Largest per-parameter relative error ||analytic - numeric|| / max(||a||, ||n||).
// Parameters whose true gradient vanishes are compared absolutely.
inline double max_gradient_error(const std::vector<Parameter*>& params, const LossBuilder& build,
                                 double h = 1e-5) {
  Tape tape;
  const Var loss = build(tape);
  const Gradients grads = tape.backward(loss);
  double worst = 0.0;
  for (Parameter* p : params) {
    const Tensor numeric = numeric_gradient(*p, build, h);
    const auto it = grads.find(p);
    const Tensor analytic = it == grads.end() ? Tensor(p->value.rows(), p->value.cols()) : it->second;
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double denom = std::max(std::sqrt(std::max(na, nn)), 1e-6);
    worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

inline Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Tensor t(rows, cols);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

inline Tensor random_unit_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t = random_tensor(rng, rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double n = 0.0;
    for (double v : t.row(i)) n += v * v;
    n = std::sqrt(n);
    for (double& v : t.row(i)) v /= n;
  }
  return t;
}

inline Tensor random_stochastic_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double total = 0.0;
    for (double& v : t.row(i)) {
      v = rng.uniform(0.01, 1.0);
      total += v;
    }
    for (double& v : t.row(i)) v /= total;
  }
  return t;
}

}  // namespace omnibind::testing
