#pragma once
// Invertible map between the two domains' shared latent slices.

#include "lnfmm/flows.hpp"

namespace lnfmm::bridge {

struct AlignmentOptions {
  double beta = 0.0;      // weight of the log-det bonus
  bool symmetric = true;  // add the reverse-direction squared error
};

class SharedBridge {
 public:
  SharedBridge(ParameterStore& store, const std::string& name, const std::string& group,
               std::size_t shared_dim, std::size_t blocks, Rng& rng,
               flows::CouplingOptions options = {});

  // Rows of V-domain shared codes to T-domain shared codes, and back.
  ad::Var map_v_to_t(const ad::Var& zs_v) const;
  ad::Var map_t_to_v(const ad::Var& zs_t) const;
  Matrix map_v_to_t(const Matrix& zs_v) const;
  Matrix map_t_to_v(const Matrix& zs_t) const;

  // Per-row alignment cost, (rows × 1):
  //   mean_d (f(zs_v) - zs_t)² - β · logdet_f(zs_v) / d'
  //   [+ mean_d (f⁻¹(zs_t) - zs_v)² when symmetric]
  ad::Var alignment_loss(const ad::Var& zs_v, const ad::Var& zs_t, AlignmentOptions options) const;

  std::size_t shared_dim() const { return dim_; }
  const flows::FlowStack& stack() const { return stack_; }
  flows::FlowStack& stack() { return stack_; }

 private:
  void check(const char* op, const ad::Var& x) const;

  std::size_t dim_;
  flows::FlowStack stack_;
};

}  // namespace lnfmm::bridge
