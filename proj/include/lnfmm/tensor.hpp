#pragma once
// Dense row-major 2-D arrays of doubles. The leading dimension is the batch;
// a scalar is a 1×1 matrix and a single vector is a 1×n row.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace lnfmm {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix row_vector(std::span<const double> values);
  static Matrix identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rows() const { return shape_.rows; }
  std::size_t cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.cols + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * shape_.cols, shape_.cols}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * shape_.cols, shape_.cols};
  }

  void fill(double value);
  bool all_finite() const;
  double max_abs() const;

  bool operator==(const Matrix&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Plain (non-differentiated) helpers used by layers, tests and evaluation.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t count);
Matrix concat_cols(const Matrix& a, const Matrix& b);
Matrix repeat_row(std::span<const double> row, std::size_t times);
double max_abs_diff(const Matrix& a, const Matrix& b);

// LU decomposition with partial pivoting, PA = LU. Throws ContractError on a
// singular matrix.
struct LuDecomposition {
  std::vector<std::size_t> perm;  // row i of PA is row perm[i] of A
  Matrix lower;                    // unit lower triangular
  Matrix upper;
  int sign = 1;                    // sign of det(P)
};
LuDecomposition lu_decompose(const Matrix& a);
double log_abs_det(const Matrix& a);
Matrix inverse(const Matrix& a);

}  // namespace lnfmm
