#include "lnfmm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "lnfmm/errors.hpp"
#include "lnfmm/rng.hpp"

namespace lnfmm {

ad::Var ParameterStore::add(const std::string& name, const std::string& group, Matrix init) {
  if (index_.contains(name)) throw ContractError("duplicate parameter name " + name);
  ad::Var v = ad::Var::parameter(std::move(init));
  index_[name] = params_.size();
  params_.push_back({name, group, v});
  return v;
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return params_[it->second];
}

std::vector<std::string> ParameterStore::groups() const {
  std::vector<std::string> out;
  for (const auto& p : params_)
    if (std::find(out.begin(), out.end(), p.group) == out.end()) out.push_back(p.group);
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.value().size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.var.node()->zero_grad();
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
  for (auto& p : params_) {
    const Parameter& src = other.get(p.name);
    if (src.var.shape() != p.var.shape()) {
      throw DimensionError("copy_values_from " + p.name, p.var.shape().str(), src.var.shape().str());
    }
    p.var.mutable_value() = src.var.value();
  }
}

double clip_grad_norm(ParameterStore& store, double max_norm) {
  double sq = 0.0;
  for (auto& p : store.all())
    for (double g : p.var.grad().data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : store.all())
      for (double& g : p.var.grad().data()) g *= s;
  }
  return norm;
}

void Adam::step(ParameterStore& store) { step(store.all()); }

void Adam::step(std::vector<Parameter>& params) {
  for (auto& p : params) {
    if (!p.var.grad().all_finite()) {
      throw NonFiniteError(p.group, "non-finite gradient in parameter " + p.name);
    }
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (auto& p : params) {
    Matrix& value = p.var.mutable_value();
    const Matrix& g = p.var.grad();
    auto [it, inserted] = moments_.try_emplace(p.name);
    Moments& m = it->second;
    if (inserted || m.first.shape() != value.shape()) {
      m.first = Matrix(value.rows(), value.cols());
      m.second = Matrix(value.rows(), value.cols());
    }
    for (std::size_t i = 0; i < value.size(); ++i) {
      m.first[i] = config_.beta1 * m.first[i] + (1.0 - config_.beta1) * g[i];
      m.second[i] = config_.beta2 * m.second[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m.first[i] / bc1;
      const double vhat = m.second[i] / bc2;
      value[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

void Adam::restore(std::uint64_t steps, std::map<std::string, Moments> moments) {
  steps_ = steps;
  moments_ = std::move(moments);
}

GradCheckReport finite_diff_check(const std::function<ad::Var()>& build_loss,
                                  std::vector<Parameter> params, double h,
                                  std::size_t coords_per_param, std::uint64_t seed) {
  for (auto& p : params) p.var.node()->zero_grad();
  ad::backward(build_loss());
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.var.grad());

  Rng rng(seed);
  GradCheckReport report;
  auto evaluate = [&] {
    ad::NoGradGuard guard;
    return build_loss().item();
  };
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& value = params[k].var.mutable_value();
    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(coords_per_param);
    }
    for (std::size_t idx : coords) {
      const double orig = value[idx];
      value[idx] = orig + h;
      const double fp = evaluate();
      value[idx] = orig - h;
      const double fm = evaluate();
      value[idx] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][idx];
      ++report.coords_checked;
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        report.non_finite = true;
        report.max_rel_error = std::numeric_limits<double>::infinity();
        report.worst_param = params[k].name;
        report.worst_index = idx;
        return report;
      }
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = params[k].name;
        report.worst_index = idx;
      }
    }
  }
  return report;
}

}  // namespace lnfmm
