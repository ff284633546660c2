#pragma once
// Shared helpers for the unit and acceptance suites.

#include <cmath>
#include <functional>

#include "lnfmm/flows.hpp"
#include "lnfmm/optim.hpp"
#include "lnfmm/rng.hpp"

namespace lnfmm::testing {

// Overwrites every parameter with N(0, scale²) noise so zero-initialized
// output layers stop hiding gradient and Jacobian structure.
inline void randomize(ParameterStore& store, Rng& rng, double scale) {
  for (auto& p : store.all()) {
    for (double& v : p.var.mutable_value().data()) v = scale * rng.normal();
  }
}

// Central-difference Jacobian of a row-vector map, then log |det| via LU.
inline double numerical_log_abs_det(const std::function<Matrix(const Matrix&)>& f, const Matrix& x,
                                    double h = 1e-5) {
  const std::size_t d = x.cols();
  Matrix jac(d, d);
  for (std::size_t j = 0; j < d; ++j) {
    Matrix xp = x, xm = x;
    xp(0, j) += h;
    xm(0, j) -= h;
    const Matrix fp = f(xp), fm = f(xm);
    for (std::size_t i = 0; i < d; ++i) jac(i, j) = (fp(0, i) - fm(0, i)) / (2.0 * h);
  }
  return log_abs_det(jac);
}

// Relative error of |det| implied by two log |det| values.
inline double det_rel_error(double analytic_logdet, double numeric_logdet) {
  return std::abs(std::expm1(analytic_logdet - numeric_logdet));
}

}  // namespace lnfmm::testing
