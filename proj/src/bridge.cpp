#include "lnfmm/bridge.hpp"

#include "lnfmm/errors.hpp"

namespace lnfmm::bridge {

SharedBridge::SharedBridge(ParameterStore& store, const std::string& name, const std::string& group,
                           std::size_t shared_dim, std::size_t blocks, Rng& rng,
                           flows::CouplingOptions options)
    : dim_(shared_dim),
      stack_(flows::make_coupling_switch_stack(store, name, group, shared_dim, 0, blocks, rng, options)) {}

void SharedBridge::check(const char* op, const ad::Var& x) const {
  if (x.cols() != dim_) throw DimensionError(op, x.shape().str(), "(Nx" + std::to_string(dim_) + ")");
}

ad::Var SharedBridge::map_v_to_t(const ad::Var& zs_v) const {
  check("map_v_to_t", zs_v);
  return stack_.forward(zs_v, ad::Var()).out;
}

ad::Var SharedBridge::map_t_to_v(const ad::Var& zs_t) const {
  check("map_t_to_v", zs_t);
  return stack_.inverse(zs_t, ad::Var()).out;
}

Matrix SharedBridge::map_v_to_t(const Matrix& zs_v) const {
  ad::NoGradGuard guard;
  return map_v_to_t(ad::Var::constant(zs_v)).value();
}

Matrix SharedBridge::map_t_to_v(const Matrix& zs_t) const {
  ad::NoGradGuard guard;
  return map_t_to_v(ad::Var::constant(zs_t)).value();
}

ad::Var SharedBridge::alignment_loss(const ad::Var& zs_v, const ad::Var& zs_t,
                                     AlignmentOptions options) const {
  check("alignment_loss", zs_v);
  check("alignment_loss", zs_t);
  if (zs_v.rows() != zs_t.rows()) throw DimensionError("alignment_loss", zs_v.shape().str(), zs_t.shape().str());
  const flows::FlowResult fwd = stack_.forward(zs_v, ad::Var());
  ad::Var loss = ad::mean_cols(ad::square(fwd.out - zs_t));
  if (options.beta != 0.0) loss = loss - fwd.logdet * (options.beta / static_cast<double>(dim_));
  if (options.symmetric) {
    const ad::Var back = stack_.inverse(zs_t, ad::Var()).out;
    loss = loss + ad::mean_cols(ad::square(back - zs_v));
  }
  return loss;
}

}  // namespace lnfmm::bridge
