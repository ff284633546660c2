#pragma once
// Two-domain latent model: per-domain encoders and decoders, a shared latent
// slice aligned across domains by the bridge, and conditional flow priors on
// the domain-specific latents.
//
// Domain V holds real vectors, domain T holds token sequences. Each domain's
// latent splits into z_s (shared, deterministic) and z' (diagonal Gaussian
// posterior, reparameterized).

#include <cstdint>
#include <string>
#include <vector>

#include "lnfmm/bridge.hpp"
#include "lnfmm/flows.hpp"
#include "lnfmm/optim.hpp"
#include "lnfmm/synthia.hpp"

namespace lnfmm::model {

enum class ReconNorm { kL1, kL2 };

struct ModelConfig {
  std::size_t shared_dim = 6;
  std::size_t zv_dim = 4;
  std::size_t zt_dim = 3;
  std::size_t v_data_dim = 2;
  std::size_t vocab = 16;
  std::size_t seq_len = 6;
  std::size_t hidden = 64;
  std::size_t embed_dim = 16;
  std::size_t coupling_hidden = 64;
  std::size_t v_prior_blocks = 8;
  std::size_t t_prior_blocks = 8;
  std::size_t bridge_blocks = 6;
  double logvar_min = -8.0;
  double logvar_max = 4.0;
  ReconNorm recon_norm = ReconNorm::kL2;

  void validate() const;
};

struct ObjectiveWeights {
  double lambda1 = 0.01;  // shared-slice magnitude penalty
  double lambda2 = 1.0;   // T prior KL
  double lambda3 = 1.0;   // V prior KL
  double lambda4 = 1.0;   // T reconstruction
  double lambda5 = 10.0;  // V reconstruction
  double lambda_align = 1.0;
  double beta = 0.0;
  bool symmetric = true;
  // Paired items decode and condition their priors on the other domain's
  // shared code mapped through the bridge, the same path sampling takes.
  bool cross_shared = true;
  // Unpaired items train decoders, priors and z' without moving z_s, so the
  // shared slice is shaped only by terms that see both domains.
  bool detach_unpaired_shared = true;
  std::size_t anneal_steps = 500;

  void validate() const;
  // λ2 and λ3 scaled by min(1, step / anneal_steps).
  ObjectiveWeights annealed(std::size_t step) const;
};

struct Partition {
  ad::Var z_s;
  ad::Var mu;
  ad::Var logvar;
  ad::Var z_prime;
  Matrix eps;  // noise used for z_prime (zeros when not sampled)
};

// Training batch. A paired record is one item with every term; an unpaired
// record yields one V-only item and one T-only item, each decoded from its
// own shared code.
struct Batch {
  std::vector<synthia::Record> records;
  bool empty() const { return records.empty(); }
};

struct TermReport {
  double shared = 0.0;  // all values already weighted and averaged over items
  double kl_t = 0.0;
  double kl_v = 0.0;
  double recon_t = 0.0;
  double recon_v = 0.0;
  double align = 0.0;
  double total = 0.0;
  std::size_t items = 0;
};

struct ObjectiveResult {
  ad::Var loss;
  TermReport report;
};

struct SampleOptions {
  bool greedy = false;
  double temperature = 1.0;
};

// Per-row losses, each (rows × 1).
ad::Var recon_loss_t(const std::vector<ad::Var>& logits, const std::vector<synthia::Tokens>& targets);
ad::Var recon_loss_v(const ad::Var& x, const ad::Var& x_hat, ReconNorm norm);
ad::Var kl_flow_prior(const Partition& part, const ad::Var& z_s_cond, const flows::FlowStack& prior);
ad::Var kl_shared_uniform(const ad::Var& z_s);

class LnfmmModel {
 public:
  LnfmmModel(const ModelConfig& config, std::uint64_t seed);
  LnfmmModel(const LnfmmModel&) = delete;
  LnfmmModel& operator=(const LnfmmModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  // `eps` null: z' = μ'. Otherwise z' = μ' + exp(logvar / 2) ⊙ eps.
  Partition encode_v(const Matrix& x_v, const Matrix* eps) const;
  Partition encode_t(const std::vector<synthia::Tokens>& x_t, const Matrix* eps) const;
  // Draws eps from `rng` for the sampled variants.
  Partition encode_v(const Matrix& x_v, Rng& rng) const;
  Partition encode_t(const std::vector<synthia::Tokens>& x_t, Rng& rng) const;

  ad::Var decode_v(const ad::Var& z_s, const ad::Var& z_prime) const;
  // Teacher-forced per-position logits, each (rows × vocab).
  std::vector<ad::Var> decode_t_logits(const ad::Var& z_s, const ad::Var& z_prime,
                                       const std::vector<synthia::Tokens>& targets) const;
  std::vector<synthia::Tokens> decode_t_sample(const Matrix& z_s, const Matrix& z_prime, Rng& rng,
                                               SampleOptions options) const;

  ObjectiveResult objective(const Batch& batch, const ObjectiveWeights& weights, Rng& rng) const;

  std::vector<synthia::Tokens> sample_t_given_v(const synthia::Point& x_v, std::size_t n, Rng& rng,
                                                SampleOptions options = {}) const;
  std::vector<synthia::Point> sample_v_given_t(const synthia::Tokens& x_t, std::size_t n, Rng& rng) const;

  // One draw per row of an already-mapped shared code.
  std::vector<synthia::Tokens> sample_t_from_shared(const Matrix& zs_t, Rng& rng, SampleOptions options = {}) const;
  std::vector<synthia::Point> sample_v_from_shared(const Matrix& zs_v, Rng& rng) const;

  // Shared slices mapped into the other domain.
  Matrix shared_v_to_t(const Matrix& x_v) const;
  Matrix shared_t_to_v(const std::vector<synthia::Tokens>& x_t) const;

  // Data-dependent init of the T prior's actnorm layers from posterior
  // samples of `batch`.
  void initialize_priors(const Batch& batch, Rng& rng);
  bool priors_initialized() const { return t_prior_.initialized(); }
  void mark_priors_initialized();

  const flows::FlowStack& v_prior() const { return v_prior_; }
  const flows::FlowStack& t_prior() const { return t_prior_; }
  const bridge::SharedBridge& bridge() const { return bridge_; }

 private:
  void check_tokens(const std::vector<synthia::Tokens>& x_t) const;
  Partition split_posterior(const ad::Var& head, std::size_t z_dim, const Matrix* eps) const;

  ModelConfig config_;
  ParameterStore store_;
  Rng init_rng_;
  nn::Mlp v_encoder_;
  nn::Mlp v_decoder_;
  nn::Embedding t_enc_embed_;
  nn::GruCell t_enc_cell_;
  nn::Linear t_enc_head_;
  nn::Embedding t_dec_embed_;
  nn::Linear t_dec_init_;
  nn::GruCell t_dec_cell_;
  nn::Linear t_dec_out_;
  flows::FlowStack v_prior_;
  flows::FlowStack t_prior_;
  bridge::SharedBridge bridge_;
};

}  // namespace lnfmm::model
