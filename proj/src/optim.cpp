#include "omnibind/optim.hpp"

#include <algorithm>
#include <cmath>

#include "omnibind/error.hpp"

namespace omnibind {

double linear_warmup_factor(std::size_t step, std::size_t warmup_steps, std::size_t total_steps) {
  if (step < warmup_steps) {
    return static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(1, warmup_steps));
  }
  if (total_steps == 0) return 1.0;
  const double remaining = static_cast<double>(total_steps) - static_cast<double>(step);
  const double span = static_cast<double>(std::max<std::size_t>(1, total_steps - std::min(total_steps, warmup_steps)));
  return std::max(0.0, remaining / span);
}

AdamW::AdamW(AdamConfig config, std::vector<Parameter*> params)
    : config_(config), params_(std::move(params)) {
  if (config_.lr < 0.0) throw ConfigError("AdamW: learning rate must be non-negative");
  for (const Parameter* p : params_) {
    first_moment_.emplace_back(p->value.rows(), p->value.cols());
    second_moment_.emplace_back(p->value.rows(), p->value.cols());
  }
}

double AdamW::current_lr() const {
  return config_.lr * linear_warmup_factor(step_, config_.warmup_steps, config_.total_steps);
}

void AdamW::step(const Gradients& grads) {
  const double lr = current_lr();
  ++step_;
  const double t = static_cast<double>(step_);
  const double bias1 = 1.0 - std::pow(config_.beta1, t);
  const double bias2 = 1.0 - std::pow(config_.beta2, t);

  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& value = params_[k]->value;
    Tensor& m = first_moment_[k];
    Tensor& v = second_moment_[k];
    const auto it = grads.find(params_[k]);
    const Tensor* g = it == grads.end() ? nullptr : &it->second;
    if (g != nullptr && !g->same_shape(value)) {
      throw DimensionError("AdamW: gradient " + g->shape_string() + " for parameter '" +
                           params_[k]->name + "' of shape " + value.shape_string());
    }
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double gi = g == nullptr ? 0.0 : (*g)[i];
      value[i] *= 1.0 - lr * config_.weight_decay;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      value[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

double clip_grad_norm(Gradients& grads, const std::vector<Parameter*>& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    const auto it = grads.find(p);
    if (it == grads.end()) continue;
    for (double v : it->second.values()) sq += v * v;
  }
  const double total = std::sqrt(sq);
  if (max_norm > 0.0 && total > max_norm) {
    const double f = max_norm / (total + 1e-6);
    for (const Parameter* p : params) {
      const auto it = grads.find(p);
      if (it == grads.end()) continue;
      for (double& v : it->second.values()) v *= f;
    }
  }
  return total;
}

}  // namespace omnibind
