#include "lnfmm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "lnfmm/errors.hpp"
#include "lnfmm/kernels.hpp"

namespace lnfmm {

std::string Shape::str() const {
  return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : shape_{rows, cols}, data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : shape_{rows, cols}, data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("Matrix", Shape{rows, cols}.str(),
                         "(" + std::to_string(data_.size()) + " values)");
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) {
      throw DimensionError("Matrix::from_rows", "row of " + std::to_string(row.size()),
                           "row of " + std::to_string(c));
    }
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Matrix::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul", a.shape().str(), b.shape().str());
  Matrix c(a.rows(), b.cols());
  kernels::active().gemm_nn(a.data().data(), b.data().data(), c.data().data(), a.rows(),
                            a.cols(), b.cols());
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) {
    throw DimensionError("slice_cols", a.shape().str(),
                         "[" + std::to_string(begin) + "," + std::to_string(begin + count) + ")");
  }
  Matrix out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    std::copy_n(a.row(i).begin() + static_cast<std::ptrdiff_t>(begin), count, out.row(i).begin());
  return out;
}

Matrix concat_cols(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw DimensionError("concat_cols", a.shape().str(), b.shape().str());
  Matrix out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::copy(a.row(i).begin(), a.row(i).end(), out.row(i).begin());
    std::copy(b.row(i).begin(), b.row(i).end(),
              out.row(i).begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return out;
}

Matrix repeat_row(std::span<const double> row, std::size_t times) {
  Matrix out(times, row.size());
  for (std::size_t i = 0; i < times; ++i) std::copy(row.begin(), row.end(), out.row(i).begin());
  return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff", a.shape().str(), b.shape().str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

LuDecomposition lu_decompose(const Matrix& a) {
  if (a.rows() != a.cols()) throw DimensionError("lu_decompose", a.shape().str(), "square");
  const std::size_t n = a.rows();
  Matrix work = a;
  LuDecomposition lu;
  lu.perm.resize(n);
  for (std::size_t i = 0; i < n; ++i) lu.perm[i] = i;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(work(r, col)) > std::abs(work(pivot, col))) pivot = r;
    if (work(pivot, col) == 0.0) throw ContractError("lu_decompose: singular matrix");
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(work(pivot, c), work(col, c));
      std::swap(lu.perm[pivot], lu.perm[col]);
      lu.sign = -lu.sign;
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = work(r, col) / work(col, col);
      work(r, col) = f;
      for (std::size_t c = col + 1; c < n; ++c) work(r, c) -= f * work(col, c);
    }
  }
  lu.lower = Matrix::identity(n);
  lu.upper = Matrix(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) (c < r ? lu.lower(r, c) : lu.upper(r, c)) = work(r, c);
  return lu;
}

double log_abs_det(const Matrix& a) {
  const LuDecomposition lu = lu_decompose(a);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) acc += std::log(std::abs(lu.upper(i, i)));
  return acc;
}

Matrix inverse(const Matrix& a) {
  const LuDecomposition lu = lu_decompose(a);
  const std::size_t n = a.rows();
  Matrix inv(n, n);
  std::vector<double> y(n);
  for (std::size_t col = 0; col < n; ++col) {
    // Solve L y = P e_col, then U x = y.
    for (std::size_t i = 0; i < n; ++i) {
      double v = lu.perm[i] == col ? 1.0 : 0.0;
      for (std::size_t j = 0; j < i; ++j) v -= lu.lower(i, j) * y[j];
      y[i] = v;
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double v = y[ii];
      for (std::size_t j = ii + 1; j < n; ++j) v -= lu.upper(ii, j) * inv(j, col);
      inv(ii, col) = v / lu.upper(ii, ii);
    }
  }
  return inv;
}

}  // namespace lnfmm
