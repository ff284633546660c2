#include "lnfmm/flows.hpp"

#include <cmath>
#include <numbers>

#include "lnfmm/errors.hpp"

namespace lnfmm::flows {
namespace {

ad::Var zero_logdet(std::size_t rows) { return ad::Var::constant(Matrix(rows, 1)); }

// Broadcasts a (1×1) log-det to one entry per row.
ad::Var per_row(const ad::Var& logdet, std::size_t rows) {
  if (logdet.rows() == rows) return logdet;
  return logdet + zero_logdet(rows);
}

Matrix random_rotation(std::size_t n, Rng& rng) {
  // Modified Gram-Schmidt on a Gaussian matrix.
  Matrix q = rng.normal_matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double d = 0.0;
      for (std::size_t i = 0; i < n; ++i) d += q(i, j) * q(i, k);
      for (std::size_t i = 0; i < n; ++i) q(i, j) -= d * q(i, k);
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) norm += q(i, j) * q(i, j);
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < n; ++i) q(i, j) /= norm;
  }
  return q;
}

void check_finite(const FlowResult& r, std::size_t index, const FlowLayer& layer) {
  if (!r.out.value().all_finite() || !r.logdet.value().all_finite()) {
    throw NonFiniteError("flow layer " + std::to_string(index) + " (" + layer.kind() + ")",
                         "non-finite intermediate value");
  }
}

}  // namespace

void FlowLayer::check_input(const char* op, const ad::Var& x, const ad::Var& cond) const {
  if (x.cols() != dim_) throw DimensionError(op, x.shape().str(), "(Nx" + std::to_string(dim_) + ")");
  if (cond_dim_ == 0) return;
  if (!cond.defined()) throw DimensionError(op, "no conditioning", "(Nx" + std::to_string(cond_dim_) + ")");
  if (cond.cols() != cond_dim_ || cond.rows() != x.rows()) {
    throw DimensionError(op, cond.shape().str(),
                         "(" + std::to_string(x.rows()) + "x" + std::to_string(cond_dim_) + ")");
  }
}

// ---------------------------------------------------------------------------
// AffineCoupling

AffineCoupling::AffineCoupling(ParameterStore& store, const std::string& name,
                               const std::string& group, std::size_t dim, std::size_t cond_dim,
                               Rng& rng, CouplingOptions options)
    : FlowLayer(dim, cond_dim), pass_(dim / 2), clamp_(options.clamp) {
  if (dim < 2) throw ContractError("AffineCoupling needs dim >= 2, got " + std::to_string(dim));
  const std::size_t in = pass_ + cond_dim;
  const std::size_t out = dim - pass_;
  scale_net_ = nn::Mlp(store, name + ".scale", group, {in, options.hidden, options.hidden, out}, rng, true);
  translate_net_ =
      nn::Mlp(store, name + ".translate", group, {in, options.hidden, options.hidden, out}, rng, true);
}

AffineCoupling::ScaleShift AffineCoupling::conditioner(const ad::Var& pass_through,
                                                       const ad::Var& cond) const {
  const ad::Var h = cond_dim() > 0 ? ad::concat_cols(pass_through, cond) : pass_through;
  const ad::Var raw = scale_net_(h);
  return {ad::tanh(raw * (1.0 / clamp_)) * clamp_, translate_net_(h)};
}

FlowResult AffineCoupling::forward(const ad::Var& x, const ad::Var& cond) const {
  check_input("coupling_forward", x, cond);
  const ad::Var x1 = ad::slice_cols(x, 0, pass_);
  const ad::Var x2 = ad::slice_cols(x, pass_, dim() - pass_);
  const auto [s, t] = conditioner(x1, cond);
  const ad::Var y2 = x2 * ad::exp(s) + t;
  return {ad::concat_cols(x1, y2), ad::sum_cols(s)};
}

FlowResult AffineCoupling::inverse(const ad::Var& y, const ad::Var& cond) const {
  check_input("coupling_inverse", y, cond);
  const ad::Var y1 = ad::slice_cols(y, 0, pass_);
  const ad::Var y2 = ad::slice_cols(y, pass_, dim() - pass_);
  const auto [s, t] = conditioner(y1, cond);
  const ad::Var x2 = (y2 - t) * ad::exp(-s);
  return {ad::concat_cols(y1, x2), -ad::sum_cols(s)};
}

// ---------------------------------------------------------------------------
// ActNorm

ActNorm::ActNorm(ParameterStore& store, const std::string& name, const std::string& group,
                 std::size_t dim, std::size_t cond_dim)
    : FlowLayer(dim, cond_dim) {
  log_scale_ = store.add(name + ".log_scale", group, Matrix(1, dim));
  bias_ = store.add(name + ".bias", group, Matrix(1, dim));
  if (cond_dim > 0) {
    scale_proj_ = store.add(name + ".scale_proj", group, Matrix(cond_dim, dim));
    bias_proj_ = store.add(name + ".bias_proj", group, Matrix(cond_dim, dim));
  }
}

void ActNorm::require_init(const char* op) const {
  if (training() && !initialized_) {
    throw InitRequiredError(std::string(op) + ": actnorm needs data-dependent init before training use");
  }
}

ActNorm::Affine ActNorm::affine(const ad::Var& cond) const {
  if (cond_dim() == 0) return {log_scale_, bias_};
  return {log_scale_ + ad::matmul(cond, scale_proj_), bias_ + ad::matmul(cond, bias_proj_)};
}

FlowResult ActNorm::forward(const ad::Var& x, const ad::Var& cond) const {
  check_input("actnorm_forward", x, cond);
  require_init("actnorm_forward");
  const auto [ls, b] = affine(cond);
  return {x * ad::exp(ls) + b, per_row(ad::sum_cols(ls), x.rows())};
}

FlowResult ActNorm::inverse(const ad::Var& y, const ad::Var& cond) const {
  check_input("actnorm_inverse", y, cond);
  require_init("actnorm_inverse");
  const auto [ls, b] = affine(cond);
  return {(y - b) * ad::exp(-ls), per_row(-ad::sum_cols(ls), y.rows())};
}

void ActNorm::initialize(const Matrix& data_side, const Matrix& /*cond*/) {
  if (data_side.cols() != dim() || data_side.rows() < 2) {
    throw DimensionError("actnorm_init", data_side.shape().str(), "(N>=2 x " + std::to_string(dim()) + ")");
  }
  const double n = static_cast<double>(data_side.rows());
  Matrix& ls = log_scale_.mutable_value();
  Matrix& b = bias_.mutable_value();
  for (std::size_t c = 0; c < dim(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < data_side.rows(); ++r) mean += data_side(r, c);
    mean /= n;
    double var = 0.0;
    for (std::size_t r = 0; r < data_side.rows(); ++r) {
      const double d = data_side(r, c) - mean;
      var += d * d;
    }
    var /= n;
    b(0, c) = mean;
    ls(0, c) = 0.5 * std::log(std::max(var, 1e-12));
  }
  initialized_ = true;
}

// ---------------------------------------------------------------------------
// InvertibleLinear

InvertibleLinear::InvertibleLinear(ParameterStore& store, const std::string& name,
                                   const std::string& group, std::size_t dim, Rng& rng)
    : FlowLayer(dim, 0) {
  setup(store, name, group, random_rotation(dim, rng));
}

InvertibleLinear::InvertibleLinear(ParameterStore& store, const std::string& name,
                                   const std::string& group, const Matrix& weight)
    : FlowLayer(weight.rows(), 0) {
  if (weight.rows() != weight.cols()) throw DimensionError("InvertibleLinear", weight.shape().str(), "square");
  setup(store, name, group, weight);
}

void InvertibleLinear::setup(ParameterStore& store, const std::string& name,
                             const std::string& group, const Matrix& weight) {
  const std::size_t d = weight.rows();
  const LuDecomposition lu = lu_decompose(weight);
  // PA = LU  =>  A = Pᵀ L U
  permutation_ = Matrix(d, d);
  for (std::size_t i = 0; i < d; ++i) permutation_(lu.perm[i], i) = 1.0;
  strict_lower_mask_ = Matrix(d, d);
  strict_upper_mask_ = Matrix(d, d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) (c < r ? strict_lower_mask_ : strict_upper_mask_)(r, c) = c != r ? 1.0 : 0.0;
  identity_ = Matrix::identity(d);
  sign_ = Matrix(1, d);
  Matrix log_diag(1, d);
  Matrix upper = lu.upper;
  for (std::size_t i = 0; i < d; ++i) {
    sign_(0, i) = upper(i, i) < 0.0 ? -1.0 : 1.0;
    log_diag(0, i) = std::log(std::abs(upper(i, i)));
    upper(i, i) = 0.0;
  }
  Matrix lower = lu.lower;
  for (std::size_t i = 0; i < d; ++i) lower(i, i) = 0.0;
  lower_ = store.add(name + ".lower", group, std::move(lower));
  upper_ = store.add(name + ".upper", group, std::move(upper));
  log_diag_ = store.add(name + ".log_diag", group, std::move(log_diag));
}

ad::Var InvertibleLinear::build_weight() const {
  const ad::Var l = lower_ * ad::Var::constant(strict_lower_mask_) + ad::Var::constant(identity_);
  const ad::Var diag = ad::Var::constant(identity_) * (ad::Var::constant(sign_) * ad::exp(log_diag_));
  const ad::Var u = upper_ * ad::Var::constant(strict_upper_mask_) + diag;
  return ad::matmul(ad::Var::constant(permutation_), ad::matmul(l, u));
}

Matrix InvertibleLinear::weight() const {
  ad::NoGradGuard guard;
  return build_weight().value();
}

FlowResult InvertibleLinear::forward(const ad::Var& x, const ad::Var& cond) const {
  check_input("invertible_linear_forward", x, cond);
  const ad::Var w = build_weight();
  return {ad::matmul(x, ad::transpose(w)), per_row(ad::sum(log_diag_), x.rows())};
}

FlowResult InvertibleLinear::inverse(const ad::Var& y, const ad::Var& cond) const {
  check_input("invertible_linear_inverse", y, cond);
  const ad::Var w = build_weight();
  // A diverged log-diagonal makes W overflow or collapse to singular.
  for (double v : w.value().data())
    if (!std::isfinite(v)) throw NonFiniteError("invertible linear layer", "weight is not finite");
  for (double v : log_diag_.value().data())
    if (std::exp(v) == 0.0) throw NonFiniteError("invertible linear layer", "weight diagonal underflowed to 0");
  const ad::Var w_inv = ad::inverse(w);
  return {ad::matmul(y, ad::transpose(w_inv)), per_row(-ad::sum(log_diag_), y.rows())};
}

// ---------------------------------------------------------------------------
// Switch

Switch::Switch(std::size_t dim) : FlowLayer(dim, 0), perm_(dim) {
  if (dim < 2) throw ContractError("Switch needs dim >= 2");
  const std::size_t k = dim / 2;
  for (std::size_t c = 0; c < dim; ++c) perm_[c] = c;
  for (std::size_t c = 0; c < k; ++c) {
    perm_[c] = dim - k + c;
    perm_[dim - k + c] = c;
  }
}

FlowResult Switch::forward(const ad::Var& x, const ad::Var& cond) const {
  check_input("switch_forward", x, cond);
  return {ad::permute_cols(x, perm_), zero_logdet(x.rows())};
}

FlowResult Switch::inverse(const ad::Var& y, const ad::Var& cond) const {
  check_input("switch_inverse", y, cond);
  return {ad::permute_cols(y, perm_), zero_logdet(y.rows())};
}

// ---------------------------------------------------------------------------
// FlowStack

void FlowStack::add(std::unique_ptr<FlowLayer> layer) {
  if (layer->dim() != dim_) {
    throw DimensionError("FlowStack::add", "layer dim " + std::to_string(layer->dim()),
                         "stack dim " + std::to_string(dim_));
  }
  if (layer->cond_dim() != 0 && layer->cond_dim() != cond_dim_) {
    throw DimensionError("FlowStack::add", "layer cond " + std::to_string(layer->cond_dim()),
                         "stack cond " + std::to_string(cond_dim_));
  }
  layers_.push_back(std::move(layer));
}

FlowResult FlowStack::forward(const ad::Var& eps, const ad::Var& cond) const {
  if (eps.cols() != dim_) throw DimensionError("stack_forward", eps.shape().str(), "(Nx" + std::to_string(dim_) + ")");
  FlowResult acc{eps, zero_logdet(eps.rows())};
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    FlowResult r = layers_[i]->forward(acc.out, cond);
    check_finite(r, i, *layers_[i]);
    acc.out = r.out;
    acc.logdet = acc.logdet + r.logdet;
  }
  return acc;
}

FlowResult FlowStack::inverse(const ad::Var& z, const ad::Var& cond) const {
  if (z.cols() != dim_) throw DimensionError("stack_inverse", z.shape().str(), "(Nx" + std::to_string(dim_) + ")");
  FlowResult acc{z, zero_logdet(z.rows())};
  for (std::size_t i = layers_.size(); i-- > 0;) {
    FlowResult r = layers_[i]->inverse(acc.out, cond);
    check_finite(r, i, *layers_[i]);
    acc.out = r.out;
    acc.logdet = acc.logdet + r.logdet;
  }
  return acc;
}

ad::Var standard_normal_log_prob(const ad::Var& eps) {
  const double norm = 0.5 * static_cast<double>(eps.cols()) * std::log(2.0 * std::numbers::pi);
  return ad::sum_cols(ad::square(eps)) * -0.5 - norm;
}

ad::Var FlowStack::log_prob(const ad::Var& z, const ad::Var& cond) const {
  const FlowResult r = inverse(z, cond);
  return standard_normal_log_prob(r.out) + r.logdet;
}

Matrix FlowStack::sample(const Matrix& cond, Rng& rng) const {
  ad::NoGradGuard guard;
  const Matrix eps = rng.normal_matrix(cond.rows(), dim_);
  return forward(ad::Var::constant(eps), ad::Var::constant(cond)).out.value();
}

Matrix FlowStack::sample(std::size_t rows, Rng& rng) const {
  ad::NoGradGuard guard;
  const Matrix eps = rng.normal_matrix(rows, dim_);
  return forward(ad::Var::constant(eps), ad::Var()).out.value();
}

void FlowStack::initialize(const Matrix& z, const Matrix& cond) {
  ad::NoGradGuard guard;
  ad::Var cur = ad::Var::constant(z);
  const ad::Var c = cond_dim_ > 0 ? ad::Var::constant(cond) : ad::Var();
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (!layers_[i]->initialized()) layers_[i]->initialize(cur.value(), cond);
    cur = layers_[i]->inverse(cur, c).out;
  }
}

bool FlowStack::initialized() const {
  for (const auto& l : layers_)
    if (!l->initialized()) return false;
  return true;
}

void FlowStack::set_training(bool training) {
  for (auto& l : layers_) l->set_training(training);
}

FlowStack make_coupling_switch_stack(ParameterStore& store, const std::string& name,
                                     const std::string& group, std::size_t dim,
                                     std::size_t cond_dim, std::size_t blocks, Rng& rng,
                                     CouplingOptions options) {
  FlowStack stack(dim, cond_dim);
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::string prefix = name + "." + std::to_string(b);
    stack.add(std::make_unique<AffineCoupling>(store, prefix + ".coupling", group, dim, cond_dim, rng, options));
    stack.add(std::make_unique<Switch>(dim));
  }
  return stack;
}

FlowStack make_glow_stack(ParameterStore& store, const std::string& name, const std::string& group,
                          std::size_t dim, std::size_t cond_dim, std::size_t blocks, Rng& rng,
                          CouplingOptions options) {
  FlowStack stack(dim, cond_dim);
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::string prefix = name + "." + std::to_string(b);
    stack.add(std::make_unique<ActNorm>(store, prefix + ".actnorm", group, dim, cond_dim));
    stack.add(std::make_unique<AffineCoupling>(store, prefix + ".coupling", group, dim, cond_dim, rng, options));
    stack.add(std::make_unique<InvertibleLinear>(store, prefix + ".linear", group, dim, rng));
    stack.add(std::make_unique<Switch>(dim));
  }
  return stack;
}

}  // namespace lnfmm::flows
