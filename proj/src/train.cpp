#include "lnfmm/train.hpp"

#include <cmath>

#include "lnfmm/errors.hpp"

namespace lnfmm::train {

Trainer::Trainer(model::LnfmmModel& model, model::ObjectiveWeights weights, TrainConfig config, std::uint64_t seed)
    : model_(model),
      weights_(weights),
      config_(config),
      adam_(AdamConfig{.lr = config.lr}),
      rng_(Rng::split(seed, 3)) {
  if (config_.batch_size == 0) throw ConfigError("train.batch_size", "must be positive");
}

EpochRecord Trainer::run_epoch(const std::vector<synthia::Record>& records,
                               const std::function<void(const StepRecord&)>& on_step) {
  if (records.empty()) throw ContractError("run_epoch: no training records");
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_.index(i)]);

  EpochRecord rec;
  rec.epoch = epoch_ + 1;
  auto& params = model_.params();
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    model::Batch batch;
    for (std::size_t i = start; i < std::min(order.size(), start + config_.batch_size); ++i)
      batch.records.push_back(records[order[i]]);
    if (!model_.priors_initialized()) model_.initialize_priors(batch, rng_);

    params.zero_grad();
    const model::ObjectiveResult res = model_.objective(batch, weights_.annealed(step_), rng_);
    if (!std::isfinite(res.report.total))
      throw NonFiniteError("objective", "training step " + std::to_string(step_ + 1));
    ad::backward(res.loss);
    if (config_.clip_norm > 0.0) clip_grad_norm(params, config_.clip_norm);
    adam_.step(params);
    ++step_;

    StepRecord s{rec.epoch, step_, res.report};
    if (on_step) on_step(s);
    auto& m = rec.mean;
    m.shared += res.report.shared;
    m.kl_t += res.report.kl_t;
    m.kl_v += res.report.kl_v;
    m.recon_t += res.report.recon_t;
    m.recon_v += res.report.recon_v;
    m.align += res.report.align;
    m.total += res.report.total;
    m.items += res.report.items;
    ++rec.steps;
  }
  const double inv = 1.0 / static_cast<double>(rec.steps);
  for (double* v : {&rec.mean.shared, &rec.mean.kl_t, &rec.mean.kl_v, &rec.mean.recon_t, &rec.mean.recon_v,
                    &rec.mean.align, &rec.mean.total})
    *v *= inv;
  ++epoch_;
  return rec;
}

}  // namespace lnfmm::train
