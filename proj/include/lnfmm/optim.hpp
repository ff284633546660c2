#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lnfmm/autodiff.hpp"

namespace lnfmm {

struct Parameter {
  std::string name;   // dotted path, unique within a store
  std::string group;  // optimizer/reporting group (theta_v, phi_s, ...)
  ad::Var var;
};

// Owns every trainable tensor of a model, keyed by path name. Insertion order
// is stable and defines checkpoint order.
class ParameterStore {
 public:
  ad::Var add(const std::string& name, const std::string& group, Matrix init);

  const std::vector<Parameter>& all() const { return params_; }
  std::vector<Parameter>& all() { return params_; }
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.contains(name); }
  std::vector<std::string> groups() const;
  std::size_t scalar_count() const;

  void zero_grad();
  // Copies values by name; shapes must match.
  void copy_values_from(const ParameterStore& other);

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

// Scales every gradient in place so the global L2 norm is at most
// `max_norm`. Returns the norm before clipping.
double clip_grad_norm(ParameterStore& store, double max_norm);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected adaptive-moment optimizer.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Applies one update to every parameter using its accumulated gradient.
  // Throws NonFiniteError naming the parameter group on a non-finite grad.
  void step(ParameterStore& store);
  void step(std::vector<Parameter>& params);

  std::uint64_t step_count() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

  struct Moments {
    Matrix first;
    Matrix second;
  };
  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(std::uint64_t steps, std::map<std::string, Moments> moments);

 private:
  AdamConfig config_;
  std::uint64_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  bool non_finite = false;
  std::size_t coords_checked = 0;
};

// Compares backward() gradients with central differences on up to
// `coords_per_param` randomly chosen coordinates of every parameter. The
// per-coordinate error is |a - d| / max(|a|, |d|, 1e-8). `build_loss` must be
// deterministic; it is called once per perturbation.
GradCheckReport finite_diff_check(const std::function<ad::Var()>& build_loss,
                                  std::vector<Parameter> params, double h,
                                  std::size_t coords_per_param, std::uint64_t seed);

}  // namespace lnfmm
