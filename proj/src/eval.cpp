#include "lnfmm/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <set>
#include <thread>

#include "lnfmm/errors.hpp"

namespace lnfmm::eval {

using ad::Var;
using nlohmann::json;

double token_distance(const Tokens& a, const Tokens& b) {
  const std::size_t n = std::max(a.size(), b.size());
  if (n == 0) return 0.0;
  std::size_t d = n - std::min(a.size(), b.size());
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) d += a[i] != b[i];
  return static_cast<double>(d) / static_cast<double>(n);
}

double point_distance(const Point& a, const Point& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

namespace {

template <typename S, typename F>
double best_of(const std::vector<S>& samples, std::size_t k, F&& dist) {
  if (k == 0) throw ContractError("best_of_k: k must be >= 1");
  if (samples.size() < k) throw ContractError("best_of_k: fewer samples than k");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < k; ++i) best = std::min(best, dist(samples[i]));
  return best;
}

std::set<std::pair<std::size_t, std::size_t>> bigrams(const Tokens& s) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) out.insert({s[i], s[i + 1]});
  return out;
}

}  // namespace

double best_of_k(const std::vector<Tokens>& samples, const Tokens& target, std::size_t k) {
  return best_of(samples, k, [&](const Tokens& s) { return token_distance(s, target); });
}

double best_of_k(const std::vector<Point>& samples, const Point& target, std::size_t k) {
  return best_of(samples, k, [&](const Point& s) { return point_distance(s, target); });
}

double uniqueness(const std::vector<Tokens>& samples) {
  if (samples.size() < 2) throw ContractError("uniqueness needs at least 2 samples");
  const std::set<Tokens> distinct(samples.begin(), samples.end());
  return static_cast<double>(distinct.size()) / static_cast<double>(samples.size());
}

double uniqueness(const std::vector<Point>& samples) {
  if (samples.size() < 2) throw ContractError("uniqueness needs at least 2 samples");
  std::set<std::pair<long long, long long>> distinct;
  for (const Point& p : samples) distinct.insert({std::llround(p[0] * 100.0), std::llround(p[1] * 100.0)});
  return static_cast<double>(distinct.size()) / static_cast<double>(samples.size());
}

double pairwise_overlap(const std::vector<Tokens>& samples) {
  if (samples.size() < 2) throw ContractError("pairwise_overlap needs at least 2 sequences");
  std::vector<std::set<std::pair<std::size_t, std::size_t>>> sets;
  for (const auto& s : samples) sets.push_back(bigrams(s));
  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < sets.size(); ++a)
    for (std::size_t b = 0; b < sets.size(); ++b) {
      if (a == b) continue;
      ++pairs;
      if (sets[a].empty()) continue;
      std::size_t shared = 0;
      for (const auto& g : sets[a]) shared += sets[b].count(g);
      acc += static_cast<double>(shared) / static_cast<double>(sets[a].size());
    }
  return acc / static_cast<double>(pairs);
}

double distinct_ngrams(const std::vector<Tokens>& samples, std::size_t n) {
  if (n == 0) throw ContractError("distinct_ngrams: n must be >= 1");
  std::set<Tokens> distinct;
  std::size_t total = 0;
  for (const auto& s : samples)
    for (std::size_t i = 0; i + n <= s.size(); ++i) {
      distinct.insert(Tokens(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + n)));
      ++total;
    }
  return total == 0 ? 0.0 : static_cast<double>(distinct.size()) / static_cast<double>(total);
}

double mean_pairwise_distance(const std::vector<Point>& samples) {
  if (samples.size() < 2) throw ContractError("mean_pairwise_distance needs at least 2 points");
  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < samples.size(); ++a)
    for (std::size_t b = a + 1; b < samples.size(); ++b, ++pairs) acc += point_distance(samples[a], samples[b]);
  return acc / static_cast<double>(pairs);
}

double mode_coverage(const synthia::Generator& gen, std::size_t cls, const std::vector<Point>& samples) {
  const synthia::TruthModes modes = gen.truth_modes(cls);
  const double radius = 3.0 * gen.config().sigma;
  std::size_t hit = 0;
  for (const Point& c : modes.centers)
    hit += std::any_of(samples.begin(), samples.end(), [&](const Point& p) { return point_distance(p, c) <= radius; });
  return static_cast<double>(hit) / static_cast<double>(modes.centers.size());
}

double mode_coverage(const synthia::Generator& gen, std::size_t cls, const std::vector<Tokens>& samples) {
  const synthia::TruthModes modes = gen.truth_modes(cls);
  std::vector<bool> hit(modes.phrasings.size(), false);
  for (const Tokens& s : samples) {
    const synthia::TokenClass tc = gen.classify_tokens(s);
    if (tc.cls == cls && tc.distance == 0 && tc.unambiguous) hit[tc.phrasing] = true;
  }
  return static_cast<double>(std::count(hit.begin(), hit.end(), true)) / static_cast<double>(hit.size());
}

IvomResult ivom(const model::LnfmmModel& model, const Tokens& x_t, const Point& target, const IvomOptions& options,
                Rng& rng) {
  if (options.restarts == 0) throw ContractError("ivom: restarts must be >= 1");
  const std::size_t k = options.restarts;
  const Matrix zs = model.shared_t_to_v({x_t});
  const Var zs_rep = Var::constant(repeat_row(zs.row(0), k));
  const Var tgt = Var::constant(repeat_row(target, k));
  Matrix z0;
  {
    ad::NoGradGuard guard;
    z0 = model.v_prior().sample(zs_rep.value(), rng);
  }
  const Var z = ad::variable(z0);
  std::vector<Parameter> latent{{"z_v", "ivom", z}};
  Adam adam(AdamConfig{.lr = options.lr});
  const auto norm = model.config().recon_norm;

  auto distances = [&] {
    ad::NoGradGuard guard;
    return model::recon_loss_v(tgt, model.decode_v(zs_rep, Var::constant(z.value())), norm).value();
  };
  auto best_row = [](const Matrix& d) {
    std::size_t best = 0;
    for (std::size_t r = 1; r < d.rows(); ++r)
      if (d(r, 0) < d(best, 0)) best = r;
    return best;
  };

  IvomResult result;
  const Matrix initial = distances();
  result.initial_distance = initial(best_row(initial), 0);

  ad::FreezeParametersGuard freeze;
  double prev = std::numeric_limits<double>::infinity();
  std::size_t rising = 0;
  for (std::size_t step = 0; step < options.steps; ++step) {
    z.node()->zero_grad();
    const Var loss = ad::sum(model::recon_loss_v(tgt, model.decode_v(zs_rep, z), norm));
    ad::backward(loss);
    const double value = loss.item();
    rising = value > prev ? rising + 1 : 0;
    prev = value;
    if (rising >= options.divergence_window) {
      result.diverged = true;
      break;
    }
    adam.step(latent);
    ++result.steps_run;
  }
  const Matrix final_d = distances();
  const std::size_t best = best_row(final_d);
  result.distance = final_d(best, 0);
  result.latent = Matrix(1, z.cols());
  for (std::size_t c = 0; c < z.cols(); ++c) result.latent(0, c) = z.value()(best, c);
  return result;
}

double alignment_mse(const model::LnfmmModel& model, const synthia::Split& split) {
  Matrix xv(0, 0);
  std::vector<Point> points;
  std::vector<Tokens> tokens;
  for (const auto& r : split.records)
    if (r.paired) {
      points.push_back(r.x_v);
      tokens.push_back(r.x_t);
    }
  if (points.empty()) throw ContractError("alignment_mse: no paired records");
  xv = Matrix(points.size(), 2);
  for (std::size_t i = 0; i < points.size(); ++i) {
    xv(i, 0) = points[i][0];
    xv(i, 1) = points[i][1];
  }
  ad::NoGradGuard guard;
  const Matrix mapped = model.shared_v_to_t(xv);
  const Matrix zt = model.encode_t(tokens, nullptr).z_s.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < mapped.size(); ++i) acc += (mapped[i] - zt[i]) * (mapped[i] - zt[i]);
  return acc / static_cast<double>(mapped.size());
}

namespace {

// Keeps per-item streams clear of the data (1, 2) and training (3) streams.
constexpr std::uint64_t kEvalStreamBase = 1000;

struct ItemResult {
  std::size_t cls = 0;
  std::vector<double> oracle_t, oracle_v, base_t, base_v;  // per k
  double coverage_t = 0.0, coverage_v = 0.0;
  double unique_t = 0.0, unique_v = 0.0;
  double overlap = 0.0, div1 = 0.0, div2 = 0.0;
  double pairwise_v = 0.0;
  double ivom = 0.0;
  bool ivom_diverged = false;
};

template <typename T>
std::vector<T> prefix(const std::vector<T>& v, std::size_t n) {
  return std::vector<T>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size())));
}

template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

json evaluate(const model::LnfmmModel& model, const synthia::Generator& gen, const synthia::Split& test,
              const EvalConfig& config, std::uint64_t seed) {
  if (config.ks.empty()) throw ConfigError("eval.ks", "needs at least one k");
  if (config.diversity_samples < 2) throw ConfigError("eval.diversity_samples", "must be at least 2");
  const std::size_t n_items = config.max_items == 0 ? test.size() : std::min(config.max_items, test.size());
  if (n_items == 0) throw ContractError("evaluate: empty test split");
  if (test.truth.size() < n_items) throw ContractError("evaluate: truth is missing for the test split");
  const std::size_t k_max = *std::max_element(config.ks.begin(), config.ks.end());
  const std::size_t n_draw = std::max({k_max, config.coverage_samples, config.diversity_samples});

  // Shared codes of every evaluated item, mapped into the other domain.
  Matrix xv(n_items, 2);
  std::vector<Tokens> xt(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    xv(i, 0) = test.records[i].x_v[0];
    xv(i, 1) = test.records[i].x_v[1];
    xt[i] = test.records[i].x_t;
  }
  const Matrix zs_t_from_v = model.shared_v_to_t(xv);
  const Matrix zs_v_from_t = model.shared_t_to_v(xt);

  std::vector<ItemResult> items(n_items);
  parallel_for(n_items, config.threads, [&](std::size_t i) {
    ItemResult& out = items[i];
    const auto& rec = test.records[i];
    out.cls = test.truth[i].v_class;

    const std::uint64_t base = kEvalStreamBase + 4 * i;
    Rng rng_t = Rng::split(seed, base);
    Rng rng_v = Rng::split(seed, base + 1);
    Rng rng_b = Rng::split(seed, base + 2);
    Rng rng_i = Rng::split(seed, base + 3);

    const auto t_samples = model.sample_t_from_shared(repeat_row(zs_t_from_v.row(i), n_draw), rng_t, config.sampling);
    const auto v_samples = model.sample_v_from_shared(repeat_row(zs_v_from_t.row(i), n_draw), rng_v);

    // Prior-less baseline: each draw conditions on a random test item.
    Matrix base_zt(k_max, zs_t_from_v.cols()), base_zv(k_max, zs_v_from_t.cols());
    for (std::size_t j = 0; j < k_max; ++j) {
      const std::size_t other = rng_b.index(n_items);
      for (std::size_t c = 0; c < base_zt.cols(); ++c) base_zt(j, c) = zs_t_from_v(other, c);
      for (std::size_t c = 0; c < base_zv.cols(); ++c) base_zv(j, c) = zs_v_from_t(other, c);
    }
    const auto base_t = model.sample_t_from_shared(base_zt, rng_b, config.sampling);
    const auto base_v = model.sample_v_from_shared(base_zv, rng_b);

    for (std::size_t k : config.ks) {
      out.oracle_t.push_back(best_of_k(t_samples, rec.x_t, k));
      out.oracle_v.push_back(best_of_k(v_samples, rec.x_v, k));
      out.base_t.push_back(best_of_k(base_t, rec.x_t, k));
      out.base_v.push_back(best_of_k(base_v, rec.x_v, k));
    }
    out.coverage_t = mode_coverage(gen, test.truth[i].v_class, prefix(t_samples, config.coverage_samples));
    out.coverage_v = mode_coverage(gen, test.truth[i].t_class, prefix(v_samples, config.coverage_samples));
    const auto div_t = prefix(t_samples, config.diversity_samples);
    const auto div_v = prefix(v_samples, config.diversity_samples);
    out.unique_t = uniqueness(div_t);
    out.unique_v = uniqueness(div_v);
    out.overlap = pairwise_overlap(div_t);
    out.div1 = distinct_ngrams(div_t, 1);
    out.div2 = distinct_ngrams(div_t, 2);
    out.pairwise_v = mean_pairwise_distance(div_v);
    if (config.run_ivom) {
      const IvomResult r = ivom(model, rec.x_t, rec.x_v, config.ivom, rng_i);
      out.ivom = r.distance;
      out.ivom_diverged = r.diverged;
    }
  });

  const double inv = 1.0 / static_cast<double>(n_items);
  auto mean_of = [&](auto&& get) {
    double acc = 0.0;
    for (const auto& it : items) acc += get(it);
    return acc * inv;
  };
  auto per_k = [&](auto member) {
    json j = json::object();
    for (std::size_t q = 0; q < config.ks.size(); ++q)
      j[std::to_string(config.ks[q])] = mean_of([&](const ItemResult& it) { return (it.*member)[q]; });
    return j;
  };

  // Class-averaged coverage: mean over each class's items, then over classes.
  const std::size_t n_classes = gen.config().n_classes;
  std::vector<double> cov_t(n_classes, 0.0), cov_v(n_classes, 0.0);
  std::vector<std::size_t> counts(n_classes, 0);
  for (const auto& it : items) {
    cov_t[it.cls] += it.coverage_t;
    cov_v[it.cls] += it.coverage_v;
    ++counts[it.cls];
  }
  json per_class = json::array();
  double class_cov_t = 0.0, class_cov_v = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (counts[c] == 0) continue;
    ++present;
    cov_t[c] /= static_cast<double>(counts[c]);
    cov_v[c] /= static_cast<double>(counts[c]);
    class_cov_t += cov_t[c];
    class_cov_v += cov_v[c];
    per_class.push_back({{"class", c}, {"items", counts[c]}, {"mode_coverage_t_given_v", cov_t[c]},
                         {"mode_coverage_v_given_t", cov_v[c]}});
  }

  json report;
  report["items"] = n_items;
  report["oracle_best_of_k"] = {{"t_given_v", per_k(&ItemResult::oracle_t)}, {"v_given_t", per_k(&ItemResult::oracle_v)}};
  report["prior_less_baseline"] = {{"t_given_v", per_k(&ItemResult::base_t)}, {"v_given_t", per_k(&ItemResult::base_v)}};
  report["uniqueness"] = {{"t_given_v", mean_of([](const ItemResult& it) { return it.unique_t; })},
                          {"v_given_t", mean_of([](const ItemResult& it) { return it.unique_v; })},
                          {"n", config.diversity_samples}};
  report["pairwise_overlap"] = mean_of([](const ItemResult& it) { return it.overlap; });
  report["distinct_ngrams"] = {{"1", mean_of([](const ItemResult& it) { return it.div1; })},
                               {"2", mean_of([](const ItemResult& it) { return it.div2; })}};
  report["mode_coverage"] = {{"t_given_v", class_cov_t / static_cast<double>(present)},
                             {"v_given_t", class_cov_v / static_cast<double>(present)},
                             {"n", config.coverage_samples}};
  if (config.run_ivom) {
    std::size_t diverged = 0;
    for (const auto& it : items) diverged += it.ivom_diverged;
    report["ivom"] = {{"mean_distance", mean_of([](const ItemResult& it) { return it.ivom; })},
                      {"diverged", diverged},
                      {"steps", config.ivom.steps},
                      {"restarts", config.ivom.restarts}};
  } else {
    report["ivom"] = nullptr;
  }
  report["mean_pairwise_v_distance"] = mean_of([](const ItemResult& it) { return it.pairwise_v; });
  report["alignment_mse"] = alignment_mse(model, test);
  report["per_class"] = per_class;
  return report;
}

}  // namespace lnfmm::eval
