#include "omnibind/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "omnibind/error.hpp"

namespace omnibind {

namespace {

constexpr double kKlClamp = 1e-12;

Tape& tape_of(const Var& v) {
  if (v.tape() == nullptr) throw ValidationError("operation on an unbound Var");
  return *v.tape();
}

Tape& common_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ValidationError("operands recorded on different tapes");
  return tape_of(a);
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace

const Tensor& Var::value() const { return tape_of(*this).value(id_); }

bool Var::requires_grad() const { return tape_of(*this).requires_grad(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(const Parameter& p) {
  nodes_.push_back(Node{p.value, {}, true, &p, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [this](std::size_t i) { return nodes_[i].requires_grad; });
  nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backward) : nullptr});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Tensor& grad) {
  Node& node = nodes_[id];
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    node.grad = grad;
  } else {
    add_into(node.grad, grad);
  }
}

Gradients Tape::backward(const Var& loss) {
  if (loss.tape() != this || loss.id() >= nodes_.size()) {
    throw ValidationError("backward on detached graph: loss was not recorded on this tape");
  }
  const Tensor& value = nodes_[loss.id()].value;
  if (value.rows() != 1 || value.cols() != 1) {
    throw DimensionError("backward requires a scalar loss, got " + value.shape_string());
  }
  if (!nodes_[loss.id()].requires_grad) {
    throw ValidationError("backward on detached graph: no learnable parameter reaches the loss");
  }
  if (consumed_) throw ValidationError("backward already ran on this tape");
  consumed_ = true;

  nodes_[loss.id()].grad = Tensor(1, 1, 1.0);
  Gradients grads;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty()) continue;
    if (node.param != nullptr) {
      auto [it, inserted] = grads.try_emplace(node.param, node.grad);
      if (!inserted) add_into(it->second, node.grad);
    } else if (node.backward) {
      const Tensor grad = std::move(node.grad);
      node.backward(grad, *this);
    }
  }
  return grads;
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(matmul(a.value(), b.value()), {ia, ib}, [ia, ib](const Tensor& g, Tape& tp) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, matmul_nt(g, tp.value(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, matmul(transpose(tp.value(ia)), g));
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(matmul_nt(a.value(), b.value()), {ia, ib}, [ia, ib](const Tensor& g, Tape& tp) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, matmul(g, tp.value(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, matmul(transpose(g), tp.value(ia)));
  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(add(a.value(), b.value()), {ia, ib}, [ia, ib](const Tensor& g, Tape& tp) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(add(a.value(), scale(b.value(), -1.0)), {ia, ib},
                  [ia, ib](const Tensor& g, Tape& tp) {
                    tp.accumulate(ia, g);
                    tp.accumulate(ib, scale(g, -1.0));
                  });
}

Var add_row(const Var& x, const Var& bias) {
  Tape& t = common_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw DimensionError("add_row: cannot broadcast " + bv.shape_string() + " over " +
                         xv.shape_string());
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bv[j];
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return t.record(std::move(out), {ix, ib}, [ix, ib](const Tensor& g, Tape& tp) {
    tp.accumulate(ix, g);
    if (tp.requires_grad(ib)) tp.accumulate(ib, scale(mean_rows(g), static_cast<double>(g.rows())));
  });
}

Var add_scalar(const Var& x, double c) {
  Tensor out = x.value();
  for (double& v : out.values()) v += c;
  const std::size_t ix = x.id();
  return tape_of(x).record(std::move(out), {ix},
                           [ix](const Tensor& g, Tape& tp) { tp.accumulate(ix, g); });
}

Var scale(const Var& x, double factor) {
  const std::size_t ix = x.id();
  return tape_of(x).record(scale(x.value(), factor), {ix}, [ix, factor](const Tensor& g, Tape& tp) {
    tp.accumulate(ix, scale(g, factor));
  });
}

Var hadamard(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  require_same_shape(a.value(), b.value(), "hadamard");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](const Tensor& g, Tape& tp) {
    auto times = [&g](const Tensor& other) {
      Tensor r = g;
      for (std::size_t i = 0; i < r.size(); ++i) r[i] *= other[i];
      return r;
    };
    if (tp.requires_grad(ia)) tp.accumulate(ia, times(tp.value(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, times(tp.value(ia)));
  });
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = gelu(v);
  const std::size_t ix = x.id();
  return tape_of(x).record(std::move(out), {ix}, [ix](const Tensor& g, Tape& tp) {
    Tensor r = g;
    const Tensor& in = tp.value(ix);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] *= gelu_grad(in[i]);
    tp.accumulate(ix, r);
  });
}

Var rowwise_softmax(const Var& x, double temperature) {
  Tensor y = rowwise_softmax(x.value(), temperature);
  const std::size_t ix = x.id();
  Tensor saved = y;
  return tape_of(x).record(std::move(y), {ix},
                           [ix, temperature, y = std::move(saved)](const Tensor& g, Tape& tp) {
                             Tensor r(g.rows(), g.cols());
                             for (std::size_t i = 0; i < g.rows(); ++i) {
                               const double inner = dot(g.row(i), y.row(i));
                               for (std::size_t j = 0; j < g.cols(); ++j) {
                                 r(i, j) = y(i, j) * (g(i, j) - inner) / temperature;
                               }
                             }
                             tp.accumulate(ix, r);
                           });
}

Var row_sum_normalize(const Var& x) {
  const Tensor& xv = x.value();
  Tensor y = xv;
  std::vector<double> sums(xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    double s = 0.0;
    for (double v : xv.row(i)) s += v;
    if (!(s > 0.0)) {
      throw DegenerateInputError("row_sum_normalize: row " + std::to_string(i) +
                                 " has non-positive sum");
    }
    sums[i] = s;
    for (double& v : y.row(i)) v /= s;
  }
  const std::size_t ix = x.id();
  Tensor saved = y;
  return tape_of(x).record(
      std::move(y), {ix}, [ix, y = std::move(saved), sums](const Tensor& g, Tape& tp) {
        Tensor r(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const double inner = dot(g.row(i), y.row(i));
          for (std::size_t j = 0; j < g.cols(); ++j) r(i, j) = (g(i, j) - inner) / sums[i];
        }
        tp.accumulate(ix, r);
      });
}

Var l2_normalize_rows(const Var& x) {
  const Tensor& xv = x.value();
  Tensor y = l2_normalize_rows(xv);
  std::vector<double> norms(xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) norms[i] = norm(xv.row(i));
  const std::size_t ix = x.id();
  Tensor saved = y;
  return tape_of(x).record(
      std::move(y), {ix}, [ix, y = std::move(saved), norms](const Tensor& g, Tape& tp) {
        Tensor r(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const double inner = dot(g.row(i), y.row(i));
          for (std::size_t j = 0; j < g.cols(); ++j) {
            r(i, j) = (g(i, j) - y(i, j) * inner) / norms[i];
          }
        }
        tp.accumulate(ix, r);
      });
}

Var mean_rows(const Var& x) {
  const std::size_t ix = x.id();
  const std::size_t n = x.rows();
  return tape_of(x).record(mean_rows(x.value()), {ix}, [ix, n](const Tensor& g, Tape& tp) {
    Tensor r(n, g.cols());
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < g.cols(); ++j) r(i, j) = g[j] * inv;
    }
    tp.accumulate(ix, r);
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const std::size_t ix = x.id();
  const std::size_t rows = x.rows(), cols = x.cols();
  return tape_of(x).record(Tensor(1, 1, s), {ix}, [ix, rows, cols](const Tensor& g, Tape& tp) {
    tp.accumulate(ix, Tensor(rows, cols, g[0]));
  });
}

Var slice_cols(const Var& x, std::size_t first, std::size_t count) {
  const Tensor& xv = x.value();
  if (first + count > xv.cols()) {
    throw DimensionError("slice_cols: columns [" + std::to_string(first) + ", " +
                         std::to_string(first + count) + ") out of range for " + xv.shape_string());
  }
  Tensor out(xv.rows(), count);
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    for (std::size_t j = 0; j < count; ++j) out(i, j) = xv(i, first + j);
  }
  const std::size_t ix = x.id();
  const std::size_t cols = xv.cols();
  return tape_of(x).record(std::move(out), {ix}, [ix, first, count, cols](const Tensor& g, Tape& tp) {
    Tensor r(g.rows(), cols);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < count; ++j) r(i, first + j) = g(i, j);
    }
    tp.accumulate(ix, r);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Tape& t = tape_of(parts.front());
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids, widths;
  for (const Var& p : parts) {
    common_tape(parts.front(), p);
    if (p.rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    ids.push_back(p.id());
    widths.push_back(p.cols());
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, offset + j) = p.value()(i, j);
    }
    offset += p.cols();
  }
  return t.record(std::move(out), ids, [ids, widths](const Tensor& g, Tape& tp) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tp.requires_grad(ids[k])) {
        Tensor r(g.rows(), widths[k]);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          for (std::size_t j = 0; j < widths[k]; ++j) r(i, j) = g(i, off + j);
        }
        tp.accumulate(ids[k], r);
      }
      off += widths[k];
    }
  });
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no inputs");
  Tape& t = tape_of(rows.front());
  std::vector<Tensor> values;
  std::vector<std::size_t> ids, counts;
  for (const Var& r : rows) {
    common_tape(rows.front(), r);
    values.push_back(r.value());
    ids.push_back(r.id());
    counts.push_back(r.rows());
  }
  return t.record(omnibind::stack_rows(values), ids, [ids, counts](const Tensor& g, Tape& tp) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tp.requires_grad(ids[k])) {
        Tensor r(counts[k], g.cols());
        for (std::size_t i = 0; i < counts[k]; ++i) {
          for (std::size_t j = 0; j < g.cols(); ++j) r(i, j) = g(off + i, j);
        }
        tp.accumulate(ids[k], r);
      }
      off += counts[k];
    }
  });
}

Var row(const Var& x, std::size_t index) {
  const Tensor& xv = x.value();
  if (index >= xv.rows()) throw DimensionError("row: index out of range");
  const std::size_t ix = x.id();
  const std::size_t rows = xv.rows();
  return tape_of(x).record(xv.row_copy(index), {ix}, [ix, index, rows](const Tensor& g, Tape& tp) {
    Tensor r(rows, g.cols());
    for (std::size_t j = 0; j < g.cols(); ++j) r(index, j) = g[j];
    tp.accumulate(ix, r);
  });
}

Var cross_entropy_rows(const Var& logits, std::span<const std::size_t> targets,
                       double temperature) {
  const Tensor& z = logits.value();
  if (z.rows() == 0) throw DimensionError("cross_entropy_rows: empty batch");
  if (targets.size() != z.rows()) throw DimensionError("cross_entropy_rows: target count mismatch");
  Tensor logp = log_softmax_rows(z, temperature);
  double total = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    if (targets[i] >= z.cols()) throw DimensionError("cross_entropy_rows: target out of range");
    total -= logp(i, targets[i]);
  }
  const double k = static_cast<double>(z.rows());
  const std::size_t ix = logits.id();
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return tape_of(logits).record(
      Tensor(1, 1, total / k), {ix},
      [ix, temperature, k, tgt = std::move(tgt), logp = std::move(logp)](const Tensor& g, Tape& tp) {
        Tensor r(logp.rows(), logp.cols());
        const double f = g[0] / (temperature * k);
        for (std::size_t i = 0; i < r.rows(); ++i) {
          for (std::size_t j = 0; j < r.cols(); ++j) {
            r(i, j) = f * (std::exp(logp(i, j)) - (j == tgt[i] ? 1.0 : 0.0));
          }
        }
        tp.accumulate(ix, r);
      });
}

Var kl_rows_logits(const Tensor& target, const Var& logits, double temperature) {
  const Tensor& z = logits.value();
  require_same_shape(target, z, "kl_rows_logits");
  if (z.rows() == 0) throw DimensionError("kl_rows_logits: empty input");
  require_row_stochastic(target, 1e-6, "kl_rows_logits target");
  Tensor logq = log_softmax_rows(z, temperature);
  double total = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    for (std::size_t j = 0; j < z.cols(); ++j) {
      const double p = target(i, j);
      if (p > 0.0) total += p * (std::log(p) - logq(i, j));
    }
  }
  const double k = static_cast<double>(z.rows());
  const std::size_t ix = logits.id();
  return tape_of(logits).record(
      Tensor(1, 1, total / k), {ix},
      [ix, temperature, k, target, logq = std::move(logq)](const Tensor& g, Tape& tp) {
        Tensor r(logq.rows(), logq.cols());
        const double f = g[0] / (temperature * k);
        for (std::size_t i = 0; i < r.rows(); ++i) {
          double mass = 0.0;
          for (double p : target.row(i)) mass += p;
          for (std::size_t j = 0; j < r.cols(); ++j) {
            r(i, j) = f * (mass * std::exp(logq(i, j)) - target(i, j));
          }
        }
        tp.accumulate(ix, r);
      });
}

Var kl_rows(const Tensor& target, const Var& estimate) {
  const double value = kl_rows(target, estimate.value());
  const std::size_t ix = estimate.id();
  const double k = static_cast<double>(target.rows());
  return tape_of(estimate).record(Tensor(1, 1, value), {ix},
                                  [ix, k, target](const Tensor& g, Tape& tp) {
                                    const Tensor& q = tp.value(ix);
                                    Tensor r(q.rows(), q.cols());
                                    for (std::size_t i = 0; i < r.size(); ++i) {
                                      if (target[i] > 0.0 && q[i] > kKlClamp) {
                                        r[i] = -g[0] * target[i] / (q[i] * k);
                                      }
                                    }
                                    tp.accumulate(ix, r);
                                  });
}

}  // namespace omnibind
