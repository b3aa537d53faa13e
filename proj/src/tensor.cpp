#include "omnibind/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "omnibind/error.hpp"

namespace omnibind {

namespace {
constexpr double kKlClamp = 1e-12;
constexpr double kMinNorm = 1e-12;
}  // namespace

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols) {
    throw DimensionError("tensor of shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " given " + std::to_string(values_.size()) + " values");
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(values));
}

Tensor Tensor::row_vector(std::span<const double> values) {
  return Tensor(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

std::string Tensor::shape_string() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

Tensor Tensor::row_copy(std::size_t r) const { return row_vector(row(r)); }

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + a.shape_string() + " by " + b.shape_string());
  }
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: cannot multiply " + a.shape_string() + " by transpose of " +
                         b.shape_string());
  }
  Tensor out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  Tensor out(x.cols(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) out(j, i) = x(i, j);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = x;
  for (double& v : out.values()) v *= factor;
  return out;
}

Tensor rowwise_softmax(const Tensor& x, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp((in[j] - mx) / temperature);
      total += o[j];
    }
    for (double& v : o) v /= total;
  }
  return out;
}

Tensor log_softmax_rows(const Tensor& x, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = (in[j] - mx) / temperature;
      total += std::exp(o[j]);
    }
    const double log_total = std::log(total);
    for (double& v : o) v -= log_total;
  }
  return out;
}

Tensor l2_normalize_rows(const Tensor& x) {
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = out.row(i);
    const double n = norm(r);
    if (n < kMinNorm) {
      throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(i) +
                                 " has zero norm");
    }
    for (double& v : r) v /= n;
  }
  return out;
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) return {};
  const std::size_t cols = rows.front().cols();
  std::vector<double> values;
  values.reserve(rows.size() * cols);
  std::size_t count = 0;
  for (const Tensor& r : rows) {
    if (r.cols() != cols) throw DimensionError("stack_rows: column count mismatch");
    values.insert(values.end(), r.values().begin(), r.values().end());
    count += r.rows();
  }
  return Tensor(count, cols, std::move(values));
}

Tensor mean_rows(const Tensor& x) {
  if (x.rows() == 0) throw DimensionError("mean_rows: empty tensor");
  Tensor out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
  }
  const double inv = 1.0 / static_cast<double>(x.rows());
  for (double& v : out.values()) v *= inv;
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

void require_row_stochastic(const Tensor& p, double tolerance, const char* what) {
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double total = 0.0;
    for (double v : p.row(i)) {
      if (v < 0.0 || !std::isfinite(v)) {
        throw ValidationError(std::string(what) + ": row " + std::to_string(i) +
                              " has a negative or non-finite entry");
      }
      total += v;
    }
    if (std::abs(total - 1.0) > tolerance) {
      std::ostringstream msg;
      msg << what << ": row " << i << " sums to " << total << ", not 1";
      throw ValidationError(msg.str());
    }
  }
}

double kl_rows(const Tensor& p, const Tensor& q) {
  require_same_shape(p, q, "kl_rows");
  if (p.rows() == 0) throw DimensionError("kl_rows: empty input");
  require_row_stochastic(p, 1e-6, "kl_rows target");
  require_row_stochastic(q, 1e-6, "kl_rows estimate");
  double total = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    for (std::size_t j = 0; j < p.cols(); ++j) {
      const double pij = p(i, j);
      if (pij == 0.0) continue;
      total += pij * std::log(pij / std::max(q(i, j), kKlClamp));
    }
  }
  return total / static_cast<double>(p.rows());
}

}  // namespace omnibind
