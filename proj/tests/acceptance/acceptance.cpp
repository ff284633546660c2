// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.
// Usage: acceptance [criterion ids...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "../test_support.hpp"
#include "lnfmm/bridge.hpp"
#include "lnfmm/config.hpp"
#include "lnfmm/errors.hpp"
#include "lnfmm/eval.hpp"
#include "lnfmm/flows.hpp"
#include "lnfmm/model.hpp"
#include "lnfmm/train.hpp"

using namespace lnfmm;
using ad::Var;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------- flows

Matrix forward_rows(const flows::FlowLayer& layer, const Matrix& x, const Matrix& c) {
  ad::NoGradGuard guard;
  return layer.forward(Var::constant(x), c.empty() ? Var() : Var::constant(c)).out.value();
}

struct LayerZoo {
  ParameterStore store;
  std::vector<std::unique_ptr<flows::FlowLayer>> layers;
  std::vector<std::size_t> cond_dims;
};

// One of each layer type at dims 2..6, with randomized parameters.
LayerZoo make_zoo(Rng& rng) {
  LayerZoo z;
  for (std::size_t d = 2; d <= 6; ++d) {
    z.layers.push_back(std::make_unique<flows::AffineCoupling>(z.store, fmt("c%zu", d), "g", d, 3, rng,
                                                               flows::CouplingOptions{.hidden = 16}));
    z.cond_dims.push_back(3);
    auto an = std::make_unique<flows::ActNorm>(z.store, fmt("a%zu", d), "g", d, 3);
    an->mark_initialized();
    z.layers.push_back(std::move(an));
    z.cond_dims.push_back(3);
    z.layers.push_back(std::make_unique<flows::InvertibleLinear>(z.store, fmt("l%zu", d), "g", d, rng));
    z.cond_dims.push_back(0);
    z.layers.push_back(std::make_unique<flows::Switch>(d));
    z.cond_dims.push_back(0);
  }
  testing::randomize(z.store, rng, 0.4);
  return z;
}

struct Stacks {
  ParameterStore store;
  std::vector<std::pair<std::string, flows::FlowStack>> stacks;
  std::unique_ptr<bridge::SharedBridge> bridge;
};

Stacks make_stacks(Rng& rng) {
  Stacks s;
  auto glow = flows::make_glow_stack(s.store, "t", "g", 3, 6, 2, rng, {.hidden = 32});
  glow.initialize(rng.normal_matrix(64, 3), rng.normal_matrix(64, 6));
  s.stacks.emplace_back("glow(8 layers, d=3, c=6)", std::move(glow));
  s.stacks.emplace_back("coupling-switch(d=4, c=6)",
                        flows::make_coupling_switch_stack(s.store, "v", "g", 4, 6, 4, rng, {.hidden = 32}));
  s.bridge = std::make_unique<bridge::SharedBridge>(s.store, "b", "g", 6, 4, rng);
  testing::randomize(s.store, rng, 0.3);
  return s;
}

Outcome invertibility() {
  Rng rng(101);
  LayerZoo zoo = make_zoo(rng);
  Stacks st = make_stacks(rng);
  const auto t0 = Clock::now();
  ad::NoGradGuard guard;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < zoo.layers.size(); ++i) {
    const auto& layer = *zoo.layers[i];
    const Matrix x = rng.normal_matrix(100, layer.dim());
    const Var c = zoo.cond_dims[i] ? Var::constant(rng.normal_matrix(100, zoo.cond_dims[i])) : Var();
    const Matrix back = layer.inverse(layer.forward(Var::constant(x), c).out, c).out.value();
    worst = std::max(worst, max_abs_diff(back, x));
    ++checked;
  }
  for (const auto& [name, stack] : st.stacks) {
    const Matrix z = rng.normal_matrix(100, stack.dim());
    const Var c = Var::constant(rng.normal_matrix(100, stack.cond_dim()));
    const Matrix back = stack.forward(stack.inverse(Var::constant(z), c).out, c).out.value();
    worst = std::max(worst, max_abs_diff(back, z));
    ++checked;
  }
  const Matrix zs = rng.normal_matrix(100, 6);
  worst = std::max(worst, max_abs_diff(st.bridge->map_t_to_v(st.bridge->map_v_to_t(zs)), zs));
  ++checked;
  const double secs = seconds_since(t0);
  return {worst < 1e-8 && secs < 1.0,
          fmt("%zu layers/stacks x 100 inputs, max abs err %.2e (< 1e-8), %.3f s (< 1 s)", checked, worst, secs)};
}

Outcome logdet_exactness() {
  Rng rng(202);
  LayerZoo zoo = make_zoo(rng);
  Stacks st = make_stacks(rng);
  std::map<std::string, double> worst;
  for (std::size_t i = 0; i < zoo.layers.size(); ++i) {
    const auto& layer = *zoo.layers[i];
    for (int trial = 0; trial < 5; ++trial) {
      const Matrix x = rng.normal_matrix(1, layer.dim());
      const Matrix c = zoo.cond_dims[i] ? rng.normal_matrix(1, zoo.cond_dims[i]) : Matrix();
      double analytic;
      {
        ad::NoGradGuard guard;
        analytic = layer.forward(Var::constant(x), c.empty() ? Var() : Var::constant(c)).logdet.value()(0, 0);
      }
      const double numeric =
          testing::numerical_log_abs_det([&](const Matrix& in) { return forward_rows(layer, in, c); }, x);
      double& w = worst[layer.kind()];
      w = std::max(w, testing::det_rel_error(analytic, numeric));
    }
  }
  const flows::FlowStack& stack = st.stacks.front().second;
  ad::NoGradGuard guard;
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix x = rng.normal_matrix(1, stack.dim());
    const Var c = Var::constant(rng.normal_matrix(1, stack.cond_dim()));
    const auto f = [&](const Matrix& in) { return stack.forward(Var::constant(in), c).out.value(); };
    const double analytic = stack.forward(Var::constant(x), c).logdet.value()(0, 0);
    double& w = worst["stack8"];
    w = std::max(w, testing::det_rel_error(analytic, testing::numerical_log_abs_det(f, x)));
  }
  bool ok = worst.size() == 5;
  std::string detail = "max rel err";
  for (const auto& [kind, w] : worst) {
    ok = ok && w < 1e-4;
    detail += fmt(" %s=%.1e", kind.c_str(), w);
  }
  return {ok, detail + " (< 1e-4)"};
}

Outcome gradient_integrity() {
  model::LnfmmModel m(model::ModelConfig{}, 11);
  Rng init(12);
  testing::randomize(m.params(), init, 0.2);
  m.mark_priors_initialized();
  synthia::GeneratorConfig g;
  g.n_train = 6;
  g.pairing_fraction = 0.5;
  g.seed = 3;
  const model::Batch batch{synthia::Generator(g).generate().train.records};
  model::ObjectiveWeights w;
  // Finite differences cannot see the training-time stop-gradient on unpaired
  // shared codes, so the objective itself is checked.
  w.detach_unpaired_shared = false;
  auto loss = [&] {
    Rng r(77);
    return m.objective(batch, w, r).loss;
  };
  double worst = 0.0;
  bool ok = true;
  std::string worst_group;
  const auto groups = m.params().groups();
  for (const auto& grp : groups) {
    std::vector<Parameter> params;
    for (const auto& p : m.params().all())
      if (p.group == grp) params.push_back(p);
    const GradCheckReport rep = finite_diff_check(loss, params, 1e-5, 3, 99);
    ok = ok && !rep.non_finite && rep.max_rel_error < 1e-4;
    if (rep.max_rel_error >= worst) {
      worst = rep.max_rel_error;
      worst_group = grp;
    }
  }
  return {ok, fmt("%zu groups, worst rel err %.2e in %s (< 1e-4)", groups.size(), worst, worst_group.c_str())};
}

Outcome density_normalization() {
  ParameterStore store;
  Rng rng(303);
  flows::FlowStack flow = flows::make_coupling_switch_stack(store, "f", "g", 2, 2, 4, rng, {.hidden = 32});

  // x | c: a curved, heteroscedastic conditional density.
  auto draw = [](Rng& r, std::size_t n, Matrix& x, Matrix& c) {
    x = Matrix(n, 2);
    c = Matrix(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
      c(i, 0) = 2.0 * r.uniform() - 1.0;
      c(i, 1) = 2.0 * r.uniform() - 1.0;
      const double e0 = r.normal(), e1 = r.normal();
      x(i, 0) = c(i, 0) + (0.6 + 0.3 * c(i, 1)) * e0;
      x(i, 1) = 0.5 * e0 * e0 - 0.5 + c(i, 1) + 0.3 * e1;
    }
  };
  Adam adam({.lr = 3e-3});
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 1500; ++step) {
    Matrix x, c;
    draw(rng, 128, x, c);
    store.zero_grad();
    const Var nll = -ad::mean(flow.log_prob(Var::constant(x), Var::constant(c)));
    ad::backward(nll);
    adam.step(store);
    if (step < 50) first += nll.value()(0, 0) / 50.0;
    if (step >= 1450) last += nll.value()(0, 0) / 50.0;
  }

  const std::size_t n = 400;
  const double lo = -8.0, h = 16.0 / static_cast<double>(n);
  Matrix grid(n * n, 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      grid(i * n + j, 0) = lo + (static_cast<double>(i) + 0.5) * h;
      grid(i * n + j, 1) = lo + (static_cast<double>(j) + 0.5) * h;
    }
  ad::NoGradGuard guard;
  bool ok = last < first;
  std::string detail = fmt("nll %.3f -> %.3f; mass", first, last);
  for (const auto& cv : std::vector<std::vector<double>>{{-0.8, 0.5}, {0.0, 0.0}, {0.7, -0.9}}) {
    const Matrix lp = flow.log_prob(Var::constant(grid), Var::constant(repeat_row(cv, n * n))).value();
    double mass = 0.0;
    for (double v : lp.data()) mass += std::exp(v) * h * h;
    ok = ok && std::abs(mass - 1.0) <= 0.02;
    detail += fmt(" %.4f", mass);
  }
  return {ok, detail + " (1 +- 0.02)"};
}

Outcome kl_calibration() {
  const std::size_t n = 10000;
  const flows::FlowStack prior(1, 1);
  Rng rng(404);
  model::Partition p;
  p.eps = rng.normal_matrix(n, 1);
  p.mu = Var::constant(Matrix(n, 1, 1.0));
  p.logvar = Var::constant(Matrix(n, 1));
  p.z_prime = p.mu + Var::constant(p.eps);
  p.z_s = Var::constant(Matrix(n, 1));
  const Matrix kl = model::kl_flow_prior(p, p.z_s, prior).value();
  double s = 0.0, s2 = 0.0;
  for (double v : kl.data()) {
    s += v;
    s2 += v * v;
  }
  const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
  return {std::abs(mean - 0.5) < 3.0 * se, fmt("estimate %.4f, closed form 0.5, |diff| %.4f < 3 SE = %.4f", mean,
                                               std::abs(mean - 0.5), 3.0 * se)};
}

// ---------------------------------------------------------------- training

struct TrainedRun {
  RunConfig cfg;
  std::unique_ptr<synthia::Generator> gen;
  synthia::Dataset data;
  std::unique_ptr<model::LnfmmModel> model;
  std::vector<double> epoch_totals;
  bool all_finite = true;
  double seconds = 0.0;
  json report;
};

std::unique_ptr<TrainedRun> train_reference(double pairing) {
  auto run = std::make_unique<TrainedRun>();
  run->cfg.data.pairing_fraction = pairing;
  run->cfg.resolve();
  const RunConfig& cfg = run->cfg;
  run->gen = std::make_unique<synthia::Generator>(cfg.data);
  run->data = run->gen->generate();
  run->model = std::make_unique<model::LnfmmModel>(cfg.model, cfg.seed);
  train::Trainer trainer(*run->model, cfg.objective, cfg.train, cfg.seed);
  const auto t0 = Clock::now();
  for (std::size_t e = 0; e < cfg.train.epochs; ++e) {
    const train::EpochRecord rec = trainer.run_epoch(run->data.train.records, [&](const train::StepRecord& s) {
      run->all_finite = run->all_finite && std::isfinite(s.report.total);
    });
    run->epoch_totals.push_back(rec.mean.total);
    std::fprintf(stderr, "  pairing %.1f epoch %zu/%zu total %.4f (%.0f s)\n", pairing, e + 1, cfg.train.epochs,
                 rec.mean.total, seconds_since(t0));
  }
  run->seconds = seconds_since(t0);
  const auto t1 = Clock::now();
  run->report = eval::evaluate(*run->model, *run->gen, run->data.test, cfg.eval, cfg.seed);
  std::fprintf(stderr, "  pairing %.1f evaluation (%.0f s)\n", pairing, seconds_since(t1));
  return run;
}

TrainedRun& full_run() {
  static std::unique_ptr<TrainedRun> run = train_reference(1.0);
  return *run;
}

TrainedRun& semi_run() {
  static std::unique_ptr<TrainedRun> run = train_reference(0.3);
  return *run;
}

Outcome end_to_end_training() {
  const TrainedRun& r = full_run();
  bool decreasing = r.epoch_totals.size() >= 5;
  std::string detail = "epoch means";
  for (std::size_t e = 0; e < std::min<std::size_t>(5, r.epoch_totals.size()); ++e) {
    if (e > 0) decreasing = decreasing && r.epoch_totals[e] < r.epoch_totals[e - 1];
    detail += fmt(" %.3f", r.epoch_totals[e]);
  }
  return {decreasing && r.all_finite && r.seconds < 600.0,
          detail + fmt(" (strictly decreasing 1..5); finite=%s; %zu epochs on %zu samples in %.0f s (< 600 s)",
                       r.all_finite ? "yes" : "no", r.epoch_totals.size(), r.data.train.size(), r.seconds)};
}

Outcome diversity() {
  const json& rep = full_run().report;
  const double cov_t = rep["mode_coverage"]["t_given_v"], cov_v = rep["mode_coverage"]["v_given_t"];
  const double uniq = rep["uniqueness"]["t_given_v"], overlap = rep["pairwise_overlap"];
  return {cov_t >= 0.9 && cov_v >= 0.9 && uniq >= 0.6 && overlap <= 0.8,
          fmt("coverage T|V %.3f, V|T %.3f (>= 0.9, n=%d); T uniqueness %.3f (>= 0.6, n=%d); overlap %.3f (<= 0.8)",
              cov_t, cov_v, rep["mode_coverage"]["n"].get<int>(), uniq, rep["uniqueness"]["n"].get<int>(), overlap)};
}

// Prior-less baseline best-of-20 distances recorded from one run of the
// reference configuration.
json recorded_baseline() {
  std::ifstream in(LNFMM_FIXTURES "/baseline.json");
  if (!in) throw IoError("cannot open " LNFMM_FIXTURES "/baseline.json");
  return json::parse(in);
}

Outcome accuracy() {
  const json& rep = full_run().report;
  const json fixture = recorded_baseline();
  bool ok = true;
  std::string detail;
  for (const char* dir : {"t_given_v", "v_given_t"}) {
    const double model_d = rep["oracle_best_of_k"][dir]["20"];
    const double live = rep["prior_less_baseline"][dir]["20"];
    const double recorded = fixture[dir];
    ok = ok && model_d <= 0.5 * recorded;
    detail += fmt("%s%s best-of-20 %.4f vs 0.5 x baseline %.4f (live baseline %.4f)", detail.empty() ? "" : "; ", dir,
                  model_d, 0.5 * recorded, live);
  }
  return {ok, detail};
}

Outcome semi_supervised() {
  const json& full = full_run().report;
  const json& semi = semi_run().report;
  bool ok = true;
  std::string detail;
  for (const char* dir : {"t_given_v", "v_given_t"}) {
    const double a = full["mode_coverage"][dir], b = semi["mode_coverage"][dir];
    ok = ok && std::abs(a - b) <= 0.15;
    detail += fmt("coverage %s full %.3f semi %.3f; ", dir, a, b);
  }
  const double mse_full = full["alignment_mse"], mse_semi = semi["alignment_mse"];
  ok = ok && mse_semi <= 2.0 * mse_full;
  return {ok, detail + fmt("alignment mse full %.4g semi %.4g (<= 2x)", mse_full, mse_semi)};
}

double ivom_mean(const model::LnfmmModel& m, const TrainedRun& r) {
  const synthia::Split& test = r.data.test;
  double acc = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    Rng rng = Rng::split(r.cfg.seed, 1000 + 4 * i + 3);
    acc += eval::ivom(m, test.records[i].x_t, test.records[i].x_v, r.cfg.eval.ivom, rng).distance;
  }
  return acc / static_cast<double>(test.size());
}

Outcome ivom_probe() {
  const TrainedRun& r = full_run();
  model::LnfmmModel untrained(r.cfg.model, r.cfg.seed);
  untrained.mark_priors_initialized();
  const double trained = ivom_mean(*r.model, r), fresh = ivom_mean(untrained, r);
  return {trained <= 0.2 * fresh,
          fmt("mean distance trained %.4f vs untrained %.4f, ratio %.3f (<= 0.2)", trained, fresh, trained / fresh)};
}

// ---------------------------------------------------------------- CLI

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(LNFMM_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "lnfmm_acceptance";
  fs::remove_all(root);
  const std::string small =
      " --seed 7 --set data.n_train=300 --set data.n_test=20 --set train.epochs=2 --set eval.coverage_samples=10"
      " --set eval.diversity_samples=5 --set eval.ks=[1,5] --set eval.ivom_steps=20";
  if (run_cli("gen-data --out " + (root / "data").string() + small) != 0) return {false, "gen-data failed"};
  for (const char* r : {"run1", "run2"}) {
    const fs::path out = root / r;
    if (run_cli("train --data " + (root / "data").string() + " --out " + out.string() + small) != 0)
      return {false, fmt("train %s failed", r)};
    if (run_cli("eval --checkpoint " + (out / "final.ckpt").string() + " --data " + (root / "data").string() +
                " --out " + (out / "report.json").string() + " --seed 7") != 0)
      return {false, fmt("eval %s failed", r)};
  }
  const std::string log1 = slurp(root / "run1" / "loss_log.csv"), log2 = slurp(root / "run2" / "loss_log.csv");
  const std::string rep1 = slurp(root / "run1" / "report.json"), rep2 = slurp(root / "run2" / "report.json");
  const bool ok = !log1.empty() && !rep1.empty() && log1 == log2 && rep1 == rep2;
  fs::remove_all(root);
  return {ok, fmt("loss log %zu bytes %s, report %zu bytes %s", log1.size(), log1 == log2 ? "identical" : "DIFFER",
                  rep1.size(), rep1 == rep2 ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"invertibility", invertibility},
      {"log-det exactness", logdet_exactness},
      {"gradient integrity", gradient_integrity},
      {"density normalization", density_normalization},
      {"KL estimator calibration", kl_calibration},
      {"end-to-end training", end_to_end_training},
      {"many-to-many diversity", diversity},
      {"accuracy vs prior-less baseline", accuracy},
      {"semi-supervised pairing 0.3", semi_supervised},
      {"latent optimization probe", ivom_probe},
      {"determinism", determinism},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));

  std::size_t failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.contains(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s [%zu] %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
