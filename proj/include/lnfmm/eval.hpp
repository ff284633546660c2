#pragma once
// Accuracy and diversity metrics over conditional samples, the latent
// optimization probe, and the full test-set report.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lnfmm/model.hpp"
#include "lnfmm/synthia.hpp"

namespace lnfmm::eval {

using synthia::Point;
using synthia::Tokens;

// Normalized Hamming distance; a length difference counts as mismatches.
double token_distance(const Tokens& a, const Tokens& b);
double point_distance(const Point& a, const Point& b);

// Minimum distance to `target` over the first k samples.
double best_of_k(const std::vector<Tokens>& samples, const Tokens& target, std::size_t k);
double best_of_k(const std::vector<Point>& samples, const Point& target, std::size_t k);

// Distinct count / n. Points compare after rounding to 2 decimals.
double uniqueness(const std::vector<Tokens>& samples);
double uniqueness(const std::vector<Point>& samples);

// Mean over ordered pairs (a, b), a != b, of |bigrams(a) ∩ bigrams(b)| /
// |bigrams(a)| with bigrams taken as sets.
double pairwise_overlap(const std::vector<Tokens>& samples);

// Distinct n-grams over total n-grams in the sample set.
double distinct_ngrams(const std::vector<Tokens>& samples, std::size_t n);

double mean_pairwise_distance(const std::vector<Point>& samples);

// Fraction of the class's truth modes hit by the samples. V: within 3σ of a
// center. T: canonical form equal to the template.
double mode_coverage(const synthia::Generator& gen, std::size_t cls, const std::vector<Point>& samples);
double mode_coverage(const synthia::Generator& gen, std::size_t cls, const std::vector<Tokens>& samples);

struct IvomOptions {
  std::size_t steps = 200;
  double lr = 0.05;
  std::size_t restarts = 5;
  std::size_t divergence_window = 50;
};

struct IvomResult {
  double distance = 0.0;     // best final distance over restarts
  double initial_distance = 0.0;  // best distance at the starting latents
  Matrix latent;             // (1 × dim z'_v) of the best restart
  bool diverged = false;
  std::size_t steps_run = 0;
};

// Gradient descent on z'_v with z_s fixed by the text condition, minimizing
// the V reconstruction distance to `target`. Parameters stay frozen.
IvomResult ivom(const model::LnfmmModel& model, const Tokens& x_t, const Point& target, const IvomOptions& options,
                Rng& rng);

// Mean over paired records of mean_d (f(zs_v) - zs_t)².
double alignment_mse(const model::LnfmmModel& model, const synthia::Split& split);

struct EvalConfig {
  std::vector<std::size_t> ks{1, 20, 100};
  std::size_t coverage_samples = 50;
  std::size_t diversity_samples = 20;
  std::size_t max_items = 0;  // 0 evaluates the whole test split
  std::size_t threads = 1;
  bool run_ivom = true;
  IvomOptions ivom;
  model::SampleOptions sampling;
};

// Builds the metric report over the test split. Per-item RNG streams derive
// from `seed`, so results do not depend on `threads`.
nlohmann::json evaluate(const model::LnfmmModel& model, const synthia::Generator& gen, const synthia::Split& test,
                        const EvalConfig& config, std::uint64_t seed);

}  // namespace lnfmm::eval
