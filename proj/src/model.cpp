#include "lnfmm/model.hpp"

#include <cmath>
#include <numbers>

#include "lnfmm/errors.hpp"

namespace lnfmm::model {

using ad::Var;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);
const double kLogProbFloor = std::log(1e-12);

Matrix points_to_matrix(std::span<const synthia::Record> records) {
  Matrix m(records.size(), 2);
  for (std::size_t i = 0; i < records.size(); ++i) {
    m(i, 0) = records[i].x_v[0];
    m(i, 1) = records[i].x_v[1];
  }
  return m;
}

std::vector<std::size_t> column(const std::vector<synthia::Tokens>& seqs, std::size_t pos) {
  std::vector<std::size_t> ids(seqs.size());
  for (std::size_t r = 0; r < seqs.size(); ++r) ids[r] = seqs[r][pos];
  return ids;
}

Partition take_rows(const Partition& p, const std::vector<std::size_t>& rows) {
  Partition out;
  out.z_s = ad::gather_rows(p.z_s, rows);
  out.mu = ad::gather_rows(p.mu, rows);
  out.logvar = ad::gather_rows(p.logvar, rows);
  out.z_prime = ad::gather_rows(p.z_prime, rows);
  out.eps = Matrix(rows.size(), p.eps.cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < p.eps.cols(); ++c) out.eps(r, c) = p.eps(rows[r], c);
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  const std::pair<const char*, std::size_t> positive[] = {
      {"model.shared_dim", shared_dim}, {"model.zv_dim", zv_dim},   {"model.zt_dim", zt_dim},
      {"model.hidden", hidden},         {"model.embed_dim", embed_dim}, {"model.coupling_hidden", coupling_hidden},
      {"model.vocab", vocab},           {"model.seq_len", seq_len}};
  for (const auto& [field, v] : positive)
    if (v == 0) throw ConfigError(field, "must be positive");
  if (v_data_dim != 2) throw ConfigError("model.v_data_dim", "only 2-D data is supported");
  if (shared_dim < 2) throw ConfigError("model.shared_dim", "must be at least 2 for coupling layers");
  if (zv_dim < 2) throw ConfigError("model.zv_dim", "must be at least 2 for coupling layers");
  if (zt_dim < 2) throw ConfigError("model.zt_dim", "must be at least 2 for coupling layers");
  if (!(logvar_min < logvar_max)) throw ConfigError("model.logvar_min", "must be below logvar_max");
}

void ObjectiveWeights::validate() const {
  const std::pair<const char*, double> fields[] = {{"objective.lambda1", lambda1}, {"objective.lambda2", lambda2},
                                                   {"objective.lambda3", lambda3}, {"objective.lambda4", lambda4},
                                                   {"objective.lambda5", lambda5}, {"objective.lambda_align", lambda_align},
                                                   {"objective.beta", beta}};
  for (const auto& [field, v] : fields)
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(field, "must be finite and >= 0");
}

ObjectiveWeights ObjectiveWeights::annealed(std::size_t step) const {
  ObjectiveWeights w = *this;
  if (anneal_steps > 0) {
    const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(anneal_steps));
    w.lambda2 *= f;
    w.lambda3 *= f;
  }
  return w;
}

Var recon_loss_t(const std::vector<Var>& logits, const std::vector<synthia::Tokens>& targets) {
  if (logits.empty()) throw ContractError("recon_loss_t: no positions");
  Var total;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const Var lp = ad::clamp(ad::log_softmax(logits[j]), kLogProbFloor, 0.0);
    const Var nll = -ad::pick(lp, column(targets, j));
    total = total.defined() ? total + nll : nll;
  }
  return total;
}

Var recon_loss_v(const Var& x, const Var& x_hat, ReconNorm norm) {
  const Var diff = x - x_hat;
  return norm == ReconNorm::kL2 ? ad::row_l2_norm(diff) : ad::sum_cols(ad::abs(diff));
}

Var kl_flow_prior(const Partition& part, const Var& z_s_cond, const flows::FlowStack& prior) {
  // Diagonal-Gaussian log density at z' written through the injected noise.
  Matrix base(part.eps.rows(), 1);
  for (std::size_t r = 0; r < part.eps.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < part.eps.cols(); ++c) acc += kLog2Pi + part.eps(r, c) * part.eps(r, c);
    base(r, 0) = -0.5 * acc;
  }
  const Var log_q = ad::sum_cols(part.logvar) * -0.5 + Var::constant(std::move(base));
  return log_q - prior.log_prob(part.z_prime, z_s_cond);
}

Var kl_shared_uniform(const Var& z_s) { return ad::mean_cols(ad::square(z_s)); }

LnfmmModel::LnfmmModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config),
      init_rng_((config.validate(), seed)),
      v_encoder_(store_, "v_encoder", "theta_v",
                 {config.v_data_dim, config.hidden, config.hidden, config.shared_dim + 2 * config.zv_dim}, init_rng_),
      v_decoder_(store_, "v_decoder", "omega_v",
                 {config.shared_dim + config.zv_dim, config.hidden, config.hidden, config.v_data_dim}, init_rng_),
      t_enc_embed_(store_, "t_encoder.embed", "theta_t", config.vocab, config.embed_dim, init_rng_),
      t_enc_cell_(store_, "t_encoder.gru", "theta_t", config.embed_dim, config.hidden, init_rng_),
      t_enc_head_(store_, "t_encoder.head", "theta_t", config.hidden, config.shared_dim + 2 * config.zt_dim,
                  init_rng_),
      t_dec_embed_(store_, "t_decoder.embed", "omega_t", config.vocab + 1, config.embed_dim, init_rng_),
      t_dec_init_(store_, "t_decoder.init", "omega_t", config.shared_dim + config.zt_dim, config.hidden, init_rng_),
      t_dec_cell_(store_, "t_decoder.gru", "omega_t", config.embed_dim + config.shared_dim + config.zt_dim,
                  config.hidden, init_rng_),
      t_dec_out_(store_, "t_decoder.out", "omega_t", config.hidden, config.vocab, init_rng_),
      v_prior_(flows::make_coupling_switch_stack(store_, "v_prior", "phi_v", config.zv_dim, config.shared_dim,
                                                 config.v_prior_blocks, init_rng_, {.hidden = config.coupling_hidden})),
      t_prior_(flows::make_glow_stack(store_, "t_prior", "phi_t", config.zt_dim, config.shared_dim,
                                      config.t_prior_blocks, init_rng_, {.hidden = config.coupling_hidden})),
      bridge_(store_, "bridge", "phi_s", config.shared_dim, config.bridge_blocks, init_rng_,
              {.hidden = config.coupling_hidden}) {}

void LnfmmModel::check_tokens(const std::vector<synthia::Tokens>& x_t) const {
  if (x_t.empty()) throw ContractError("empty token batch");
  for (const auto& seq : x_t) {
    if (seq.size() != config_.seq_len)
      throw DimensionError("tokens", "length " + std::to_string(seq.size()), "length " + std::to_string(config_.seq_len));
    for (std::size_t id : seq)
      if (id >= config_.vocab)
        throw ContractError("token id " + std::to_string(id) + " >= vocab " + std::to_string(config_.vocab));
  }
}

Partition LnfmmModel::split_posterior(const Var& head, std::size_t z_dim, const Matrix* eps) const {
  const std::size_t d = config_.shared_dim;
  Partition p;
  p.z_s = ad::slice_cols(head, 0, d);
  p.mu = ad::slice_cols(head, d, z_dim);
  p.logvar = ad::clamp(ad::slice_cols(head, d + z_dim, z_dim), config_.logvar_min, config_.logvar_max);
  if (eps == nullptr) {
    p.z_prime = p.mu;
    p.eps = Matrix(head.rows(), z_dim);
  } else {
    if (eps->shape() != p.mu.shape()) throw DimensionError("reparameterize", eps->shape().str(), p.mu.shape().str());
    p.eps = *eps;
    p.z_prime = p.mu + ad::exp(p.logvar * 0.5) * Var::constant(*eps);
  }
  return p;
}

Partition LnfmmModel::encode_v(const Matrix& x_v, const Matrix* eps) const {
  if (x_v.cols() != config_.v_data_dim)
    throw DimensionError("encode_v", x_v.shape().str(), "(Nx" + std::to_string(config_.v_data_dim) + ")");
  return split_posterior(v_encoder_(Var::constant(x_v)), config_.zv_dim, eps);
}

Partition LnfmmModel::encode_t(const std::vector<synthia::Tokens>& x_t, const Matrix* eps) const {
  check_tokens(x_t);
  Var h = Var::constant(Matrix(x_t.size(), config_.hidden));
  for (std::size_t j = 0; j < config_.seq_len; ++j) h = t_enc_cell_(t_enc_embed_(column(x_t, j)), h);
  return split_posterior(t_enc_head_(h), config_.zt_dim, eps);
}

Partition LnfmmModel::encode_v(const Matrix& x_v, Rng& rng) const {
  const Matrix eps = rng.normal_matrix(x_v.rows(), config_.zv_dim);
  return encode_v(x_v, &eps);
}

Partition LnfmmModel::encode_t(const std::vector<synthia::Tokens>& x_t, Rng& rng) const {
  const Matrix eps = rng.normal_matrix(x_t.size(), config_.zt_dim);
  return encode_t(x_t, &eps);
}

Var LnfmmModel::decode_v(const Var& z_s, const Var& z_prime) const {
  return v_decoder_(ad::concat_cols(z_s, z_prime));
}

std::vector<Var> LnfmmModel::decode_t_logits(const Var& z_s, const Var& z_prime,
                                             const std::vector<synthia::Tokens>& targets) const {
  check_tokens(targets);
  if (targets.size() != z_s.rows())
    throw DimensionError("decode_t_logits", z_s.shape().str(), std::to_string(targets.size()) + " targets");
  const Var z = ad::concat_cols(z_s, z_prime);
  Var h = ad::tanh(t_dec_init_(z));
  std::vector<Var> logits;
  std::vector<std::size_t> prev(targets.size(), config_.vocab);  // BOS
  for (std::size_t j = 0; j < config_.seq_len; ++j) {
    h = t_dec_cell_(ad::concat_cols(t_dec_embed_(prev), z), h);
    logits.push_back(t_dec_out_(h));
    prev = column(targets, j);
  }
  return logits;
}

std::vector<synthia::Tokens> LnfmmModel::decode_t_sample(const Matrix& z_s, const Matrix& z_prime, Rng& rng,
                                                         SampleOptions options) const {
  ad::NoGradGuard guard;
  const std::size_t n = z_s.rows();
  const Var z = ad::concat_cols(Var::constant(z_s), Var::constant(z_prime));
  Var h = ad::tanh(t_dec_init_(z));
  std::vector<synthia::Tokens> out(n, synthia::Tokens(config_.seq_len));
  std::vector<std::size_t> prev(n, config_.vocab);
  std::vector<double> weights(config_.vocab);
  for (std::size_t j = 0; j < config_.seq_len; ++j) {
    h = t_dec_cell_(ad::concat_cols(t_dec_embed_(prev), z), h);
    const Matrix logits = t_dec_out_(h).value();
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < config_.vocab; ++k)
        if (logits(r, k) > logits(r, best)) best = k;
      std::size_t pick = best;
      if (!options.greedy) {
        double total = 0.0;
        for (std::size_t k = 0; k < config_.vocab; ++k) {
          weights[k] = std::exp((logits(r, k) - logits(r, best)) / options.temperature);
          total += weights[k];
        }
        double u = rng.uniform() * total;
        pick = config_.vocab - 1;
        for (std::size_t k = 0; k < config_.vocab; ++k) {
          u -= weights[k];
          if (u < 0.0) {
            pick = k;
            break;
          }
        }
      }
      out[r][j] = pick;
      prev[r] = pick;
    }
  }
  return out;
}

ObjectiveResult LnfmmModel::objective(const Batch& batch, const ObjectiveWeights& w, Rng& rng) const {
  if (batch.empty()) throw ContractError("objective: empty batch");
  const std::size_t n = batch.records.size();
  std::vector<synthia::Tokens> tokens;
  std::vector<std::size_t> paired, unpaired;
  tokens.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    tokens.push_back(batch.records[i].x_t);
    (batch.records[i].paired ? paired : unpaired).push_back(i);
  }
  const std::size_t items = paired.size() + 2 * unpaired.size();
  const double inv_items = 1.0 / static_cast<double>(items);

  const Matrix x_all = points_to_matrix(batch.records);
  const Partition pv = encode_v(x_all, rng);
  const Partition pt = encode_t(tokens, rng);

  // Per-subset views. Paired rows condition and decode on the other domain's
  // shared code when cross_shared is set. Unpaired rows use their own code,
  // held constant when detach_unpaired_shared is set.
  struct Side {
    Partition v, t;
    ad::Var cond_v, cond_t;
    Matrix x_v;
    std::vector<synthia::Tokens> x_t;
  };
  auto take = [&](const std::vector<std::size_t>& rows, bool cross, bool detach) {
    Side s;
    s.v = take_rows(pv, rows);
    s.t = take_rows(pt, rows);
    s.cond_v = cross ? bridge_.map_t_to_v(s.t.z_s) : s.v.z_s;
    s.cond_t = cross ? bridge_.map_v_to_t(s.v.z_s) : s.t.z_s;
    if (detach) {
      s.cond_v = Var::constant(s.cond_v.value());
      s.cond_t = Var::constant(s.cond_t.value());
    }
    s.x_v = Matrix(rows.size(), 2);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      s.x_v(r, 0) = x_all(rows[r], 0);
      s.x_v(r, 1) = x_all(rows[r], 1);
      s.x_t.push_back(tokens[rows[r]]);
    }
    return s;
  };
  std::vector<Side> sides;
  if (!paired.empty()) sides.push_back(take(paired, w.cross_shared, false));
  if (!unpaired.empty()) sides.push_back(take(unpaired, false, w.detach_unpaired_shared));

  ObjectiveResult result;
  result.report.items = items;
  Var total;
  auto add = [&](double lambda, double& slot, auto&& per_side, bool paired_only) {
    if (lambda == 0.0) return;
    Var acc;
    for (std::size_t k = 0; k < sides.size(); ++k) {
      if (paired_only && (k > 0 || paired.empty())) break;
      const Var v = ad::sum(per_side(sides[k]));
      acc = acc.defined() ? acc + v : v;
    }
    if (!acc.defined()) return;
    // Pair-only terms average over the paired rows, so their weight does not
    // shrink with the pairing fraction.
    const double norm = paired_only ? 1.0 / static_cast<double>(paired.size()) : inv_items;
    const Var term = acc * (lambda * norm);
    slot = term.item();
    total = total.defined() ? total + term : term;
  };

  add(w.lambda1, result.report.shared,
      [&](const Side& s) { return (kl_shared_uniform(s.v.z_s) + kl_shared_uniform(s.t.z_s)) * 0.5; }, true);
  add(w.lambda2, result.report.kl_t, [&](const Side& s) { return kl_flow_prior(s.t, s.cond_t, t_prior_); }, false);
  add(w.lambda3, result.report.kl_v, [&](const Side& s) { return kl_flow_prior(s.v, s.cond_v, v_prior_); }, false);
  add(w.lambda4, result.report.recon_t,
      [&](const Side& s) { return recon_loss_t(decode_t_logits(s.cond_t, s.t.z_prime, s.x_t), s.x_t); }, false);
  add(w.lambda5, result.report.recon_v,
      [&](const Side& s) {
        return recon_loss_v(Var::constant(s.x_v), decode_v(s.cond_v, s.v.z_prime), config_.recon_norm);
      },
      false);
  add(w.lambda_align, result.report.align,
      [&](const Side& s) {
        return bridge_.alignment_loss(s.v.z_s, s.t.z_s, {.beta = w.beta, .symmetric = w.symmetric});
      },
      true);

  result.loss = total.defined() ? total : Var::scalar(0.0);
  result.report.total = result.loss.item();
  if (!std::isfinite(result.report.total)) throw NonFiniteError("objective", "total is not finite");
  return result;
}

Matrix LnfmmModel::shared_v_to_t(const Matrix& x_v) const {
  ad::NoGradGuard guard;
  return bridge_.map_v_to_t(encode_v(x_v, nullptr).z_s.value());
}

Matrix LnfmmModel::shared_t_to_v(const std::vector<synthia::Tokens>& x_t) const {
  ad::NoGradGuard guard;
  return bridge_.map_t_to_v(encode_t(x_t, nullptr).z_s.value());
}

std::vector<synthia::Tokens> LnfmmModel::sample_t_from_shared(const Matrix& zs_t, Rng& rng,
                                                              SampleOptions options) const {
  ad::NoGradGuard guard;
  const Matrix zp = t_prior_.sample(zs_t, rng);
  return decode_t_sample(zs_t, zp, rng, options);
}

std::vector<synthia::Point> LnfmmModel::sample_v_from_shared(const Matrix& zs_v, Rng& rng) const {
  ad::NoGradGuard guard;
  const Matrix zp = v_prior_.sample(zs_v, rng);
  const Matrix x = decode_v(Var::constant(zs_v), Var::constant(zp)).value();
  std::vector<synthia::Point> out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) out[r] = {x(r, 0), x(r, 1)};
  return out;
}

std::vector<synthia::Tokens> LnfmmModel::sample_t_given_v(const synthia::Point& x_v, std::size_t n, Rng& rng,
                                                          SampleOptions options) const {
  const Matrix zs = shared_v_to_t(Matrix::from_rows({{x_v[0], x_v[1]}}));
  return sample_t_from_shared(repeat_row(zs.row(0), n), rng, options);
}

std::vector<synthia::Point> LnfmmModel::sample_v_given_t(const synthia::Tokens& x_t, std::size_t n, Rng& rng) const {
  const Matrix zs = shared_t_to_v({x_t});
  return sample_v_from_shared(repeat_row(zs.row(0), n), rng);
}

void LnfmmModel::initialize_priors(const Batch& batch, Rng& rng) {
  if (batch.empty()) throw ContractError("initialize_priors: empty batch");
  ad::NoGradGuard guard;
  std::vector<synthia::Tokens> tokens;
  for (const auto& r : batch.records) tokens.push_back(r.x_t);
  const Partition pt = encode_t(tokens, rng);
  t_prior_.initialize(pt.z_prime.value(), pt.z_s.value());
  if (!v_prior_.initialized()) {
    const Partition pv = encode_v(points_to_matrix(batch.records), rng);
    v_prior_.initialize(pv.z_prime.value(), pv.z_s.value());
  }
}

void LnfmmModel::mark_priors_initialized() {
  for (flows::FlowStack* stack : {&v_prior_, &t_prior_})
    for (std::size_t i = 0; i < stack->size(); ++i)
      if (auto* an = dynamic_cast<flows::ActNorm*>(&stack->layer(i))) an->mark_initialized();
}

}  // namespace lnfmm::model
