#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "omnibind/tensor.hpp"

namespace omnibind {

// A learnable tensor. Only Parameters can receive gradients; everything fed to
// a Tape through constant() is treated as frozen.
struct Parameter {
  std::string name;
  Tensor value;
};

using Gradients = std::unordered_map<const Parameter*, Tensor>;

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode recorder. Nodes are appended in evaluation order, so reverse
// index order is a valid topological order for backward().
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var param(const Parameter& p);
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  // Gradient of a 1x1 loss with respect to every Parameter reachable from it.
  Gradients backward(const Var& loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Used by backward closures to push a gradient contribution into an input.
  void accumulate(std::size_t id, const Tensor& grad);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Differentiable operations. Each mirrors the plain kernel of the same name in
// tensor.hpp.
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var add_row(const Var& x, const Var& row);
Var add_scalar(const Var& x, double c);
Var scale(const Var& x, double factor);
Var hadamard(const Var& a, const Var& b);
Var gelu(const Var& x);
Var rowwise_softmax(const Var& x, double temperature);
Var row_sum_normalize(const Var& x);
Var l2_normalize_rows(const Var& x);
Var mean_rows(const Var& x);
Var sum(const Var& x);
Var slice_cols(const Var& x, std::size_t first, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var stack_rows(std::span<const Var> rows);
Var row(const Var& x, std::size_t index);

// mean_i -log softmax(logits_i / T)[target_i]
Var cross_entropy_rows(const Var& logits, std::span<const std::size_t> targets,
                       double temperature);
// kl_rows(target, softmax(logits / T)) evaluated through log-softmax, so no
// clamping is needed for the estimate.
Var kl_rows_logits(const Tensor& target, const Var& logits, double temperature);
// kl_rows(target, estimate) for an arbitrary row-stochastic estimate (clamped).
Var kl_rows(const Tensor& target, const Var& estimate);

double gelu(double x);

}  // namespace omnibind
