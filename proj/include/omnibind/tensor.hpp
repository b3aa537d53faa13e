#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace omnibind {

// Dense row-major matrix of doubles. Row vectors are 1 x n.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row_vector(std::span<const double> values);
  static Tensor identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  std::string shape_string() const;

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }
  Tensor row_copy(std::size_t r) const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  bool same_shape(const Tensor& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

// Plain (non-recording) kernels. The autodiff ops in autodiff.hpp reuse these
// for their forward pass.
Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T, the shape of every pairwise similarity matrix.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor rowwise_softmax(const Tensor& x, double temperature);
Tensor log_softmax_rows(const Tensor& x, double temperature);
Tensor l2_normalize_rows(const Tensor& x);
Tensor stack_rows(std::span<const Tensor> rows);
Tensor mean_rows(const Tensor& x);
double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> v);

// Mean over rows of sum_j p_ij ln(p_ij / q_ij); 0 ln(0/q) := 0, q clamped to >= 1e-12.
double kl_rows(const Tensor& p, const Tensor& q);

// Throws ValidationError unless every row is a probability vector.
void require_row_stochastic(const Tensor& p, double tolerance, const char* what);

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace omnibind
