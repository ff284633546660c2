#pragma once
// Invertible layers and their composition.
//
// Direction convention: `forward` maps base-side values ε to data-side values
// z; `inverse` maps z back to ε. Every layer returns the per-row log |det| of
// the Jacobian of the map it applied, so inverse(forward(x)) log-dets cancel.
// The density of z is the base density at ε times |det ∂ε/∂z|.
//
// Conditioning vectors (when a layer has cond_dim > 0) are passed as a
// (rows × cond_dim) Var and concatenated onto every conditioner input.

#include <memory>
#include <string>
#include <vector>

#include "lnfmm/autodiff.hpp"
#include "lnfmm/nn.hpp"
#include "lnfmm/optim.hpp"
#include "lnfmm/rng.hpp"

namespace lnfmm::flows {

struct FlowResult {
  ad::Var out;
  ad::Var logdet;  // (rows × 1)
};

class FlowLayer {
 public:
  virtual ~FlowLayer() = default;

  virtual FlowResult forward(const ad::Var& x, const ad::Var& cond) const = 0;
  virtual FlowResult inverse(const ad::Var& y, const ad::Var& cond) const = 0;
  virtual std::string kind() const = 0;

  std::size_t dim() const { return dim_; }
  std::size_t cond_dim() const { return cond_dim_; }

  // Layers with data-dependent initialization report false until
  // initialize() has run.
  virtual bool initialized() const { return true; }
  // `data_side` holds the values this layer's inverse receives.
  virtual void initialize(const Matrix& /*data_side*/, const Matrix& /*cond*/) {}

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

 protected:
  FlowLayer(std::size_t dim, std::size_t cond_dim) : dim_(dim), cond_dim_(cond_dim) {}
  void check_input(const char* op, const ad::Var& x, const ad::Var& cond) const;

 private:
  std::size_t dim_;
  std::size_t cond_dim_;
  bool training_ = true;
};

struct CouplingOptions {
  std::size_t hidden = 64;
  double clamp = 3.0;
};

// Affine coupling: the first ⌊d/2⌋ dims pass through; the rest become
// x2 ⊙ exp(s) + t with s, t computed from [x1 ; c]. Log-scales are soft
// clamped as clamp · tanh(s_raw / clamp).
class AffineCoupling final : public FlowLayer {
 public:
  AffineCoupling(ParameterStore& store, const std::string& name, const std::string& group,
                 std::size_t dim, std::size_t cond_dim, Rng& rng, CouplingOptions options = {});

  FlowResult forward(const ad::Var& x, const ad::Var& cond) const override;
  FlowResult inverse(const ad::Var& y, const ad::Var& cond) const override;
  std::string kind() const override { return "coupling"; }

  std::size_t pass_dims() const { return pass_; }
  double clamp_bound() const { return clamp_; }
  const nn::Mlp& scale_net() const { return scale_net_; }
  const nn::Mlp& translate_net() const { return translate_net_; }

 private:
  struct ScaleShift {
    ad::Var log_scale;
    ad::Var shift;
  };
  ScaleShift conditioner(const ad::Var& pass_through, const ad::Var& cond) const;

  std::size_t pass_;
  double clamp_;
  nn::Mlp scale_net_;
  nn::Mlp translate_net_;
};

// Per-dimension affine map y = x ⊙ exp(log_scale) + bias, with optional
// zero-initialized projections of the conditioning vector added to both.
// Data-dependent init standardizes the init batch in the inverse direction.
class ActNorm final : public FlowLayer {
 public:
  ActNorm(ParameterStore& store, const std::string& name, const std::string& group,
          std::size_t dim, std::size_t cond_dim);

  FlowResult forward(const ad::Var& x, const ad::Var& cond) const override;
  FlowResult inverse(const ad::Var& y, const ad::Var& cond) const override;
  std::string kind() const override { return "actnorm"; }

  bool initialized() const override { return initialized_; }
  void initialize(const Matrix& data_side, const Matrix& cond) override;
  void mark_initialized() { initialized_ = true; }

 private:
  struct Affine {
    ad::Var log_scale;  // (1 × d) or (rows × d)
    ad::Var bias;
  };
  Affine affine(const ad::Var& cond) const;
  void require_init(const char* op) const;

  ad::Var log_scale_;
  ad::Var bias_;
  ad::Var scale_proj_;
  ad::Var bias_proj_;
  bool initialized_ = false;
};

// y = x Wᵀ with W = P · L · U: P a fixed permutation, L unit lower triangular,
// U upper triangular with diagonal sign ⊙ exp(log_diag).
class InvertibleLinear final : public FlowLayer {
 public:
  // Random rotation start.
  InvertibleLinear(ParameterStore& store, const std::string& name, const std::string& group,
                   std::size_t dim, Rng& rng);
  // Starts at the given nonsingular matrix.
  InvertibleLinear(ParameterStore& store, const std::string& name, const std::string& group,
                   const Matrix& weight);

  FlowResult forward(const ad::Var& x, const ad::Var& cond) const override;
  FlowResult inverse(const ad::Var& y, const ad::Var& cond) const override;
  std::string kind() const override { return "invertible_linear"; }

  Matrix weight() const;

 private:
  void setup(ParameterStore& store, const std::string& name, const std::string& group,
             const Matrix& weight);
  ad::Var build_weight() const;

  Matrix permutation_;
  Matrix strict_lower_mask_;
  Matrix strict_upper_mask_;
  Matrix identity_;
  Matrix sign_;
  ad::Var lower_;
  ad::Var upper_;
  ad::Var log_diag_;
};

// Swaps the leading ⌊d/2⌋ dims with the trailing ⌊d/2⌋ dims (a middle dim
// stays put for odd d). An involution with zero log-det.
class Switch final : public FlowLayer {
 public:
  explicit Switch(std::size_t dim);

  FlowResult forward(const ad::Var& x, const ad::Var& cond) const override;
  FlowResult inverse(const ad::Var& y, const ad::Var& cond) const override;
  std::string kind() const override { return "switch"; }

  std::size_t split_point() const { return dim() / 2; }
  const std::vector<std::size_t>& permutation() const { return perm_; }

 private:
  std::vector<std::size_t> perm_;
};

class FlowStack {
 public:
  FlowStack(std::size_t dim, std::size_t cond_dim) : dim_(dim), cond_dim_(cond_dim) {}
  FlowStack(FlowStack&&) = default;
  FlowStack& operator=(FlowStack&&) = default;

  void add(std::unique_ptr<FlowLayer> layer);

  FlowResult forward(const ad::Var& eps, const ad::Var& cond) const;
  FlowResult inverse(const ad::Var& z, const ad::Var& cond) const;

  // log p(z | c) per row, (rows × 1).
  ad::Var log_prob(const ad::Var& z, const ad::Var& cond) const;

  // One draw per row of `cond` (or `rows` draws when unconditional).
  Matrix sample(const Matrix& cond, Rng& rng) const;
  Matrix sample(std::size_t rows, Rng& rng) const;

  // Runs data-dependent init of every uninitialized layer on the batch `z`.
  void initialize(const Matrix& z, const Matrix& cond);
  bool initialized() const;
  void set_training(bool training);

  std::size_t dim() const { return dim_; }
  std::size_t cond_dim() const { return cond_dim_; }
  std::size_t size() const { return layers_.size(); }
  FlowLayer& layer(std::size_t i) { return *layers_[i]; }
  const FlowLayer& layer(std::size_t i) const { return *layers_[i]; }

 private:
  std::size_t dim_;
  std::size_t cond_dim_;
  std::vector<std::unique_ptr<FlowLayer>> layers_;
};

// Conditional prior for the continuous domain: blocks of [coupling, switch].
FlowStack make_coupling_switch_stack(ParameterStore& store, const std::string& name,
                                     const std::string& group, std::size_t dim,
                                     std::size_t cond_dim, std::size_t blocks, Rng& rng,
                                     CouplingOptions options = {});

// Conditional prior for the token domain: blocks of
// [actnorm, coupling, invertible linear, switch].
FlowStack make_glow_stack(ParameterStore& store, const std::string& name, const std::string& group,
                          std::size_t dim, std::size_t cond_dim, std::size_t blocks, Rng& rng,
                          CouplingOptions options = {});

// Standard-normal log density per row.
ad::Var standard_normal_log_prob(const ad::Var& eps);

}  // namespace lnfmm::flows
