#pragma once

#include <cstddef>
#include <vector>

#include "omnibind/autodiff.hpp"

namespace omnibind {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 0;
  // 0 disables the linear decay (constant lr after warmup).
  std::size_t total_steps = 0;
};

// Multiplier on the base lr for the update with zero-based index `step`:
// linear warmup to 1, then linear decay to 0 at total_steps.
double linear_warmup_factor(std::size_t step, std::size_t warmup_steps, std::size_t total_steps);

// AdamW (decoupled weight decay) with bias correction.
class AdamW {
 public:
  AdamW(AdamConfig config, std::vector<Parameter*> params);

  // Parameters without an entry in grads are treated as having a zero gradient.
  void step(const Gradients& grads);

  double current_lr() const;
  std::size_t step_count() const { return step_; }
  const std::vector<Parameter*>& params() const { return params_; }

 private:
  AdamConfig config_;
  std::vector<Parameter*> params_;
  std::vector<Tensor> first_moment_;
  std::vector<Tensor> second_moment_;
  std::size_t step_ = 0;
};

// Rescales the gradients of `params` in place so that their joint L2 norm is
// <= max_norm, accumulating in parameter order. Returns the norm before
// clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(Gradients& grads, const std::vector<Parameter*>& params, double max_norm);

}  // namespace omnibind
