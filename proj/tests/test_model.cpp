#include <doctest.h>

#include <cmath>
#include <numeric>

#include "lnfmm/errors.hpp"
#include "lnfmm/model.hpp"
#include "test_support.hpp"

using namespace lnfmm;
using namespace lnfmm::model;
using ad::Var;
using doctest::Approx;

namespace {

Batch make_batch(std::size_t n, double pairing, std::uint64_t seed = 0) {
  synthia::GeneratorConfig g;
  g.n_train = n;
  g.pairing_fraction = pairing;
  g.seed = seed;
  Batch b;
  b.records = synthia::Generator(g).generate().train.records;
  return b;
}

ObjectiveWeights all_off() {
  ObjectiveWeights w;
  w.lambda1 = w.lambda2 = w.lambda3 = w.lambda4 = w.lambda5 = w.lambda_align = 0.0;
  return w;
}

double sum_of(const Var& v) {
  const Matrix& m = v.value();
  return std::accumulate(m.data().begin(), m.data().end(), 0.0);
}

// Model with every parameter randomized and the prior init flagged done, so
// no zero-initialized layer masks a gradient path.
struct RandomModel {
  LnfmmModel model;
  explicit RandomModel(ModelConfig c = {}) : model(c, 11) {
    Rng rng(12);
    testing::randomize(model.params(), rng, 0.2);
    model.mark_priors_initialized();
  }
};

}  // namespace

TEST_CASE("encoders return the configured partition shapes") {
  const LnfmmModel m(ModelConfig{}, 0);
  const Batch b = make_batch(5, 1.0);
  Matrix xv(5, 2);
  std::vector<synthia::Tokens> xt;
  for (std::size_t i = 0; i < 5; ++i) {
    xv(i, 0) = b.records[i].x_v[0];
    xv(i, 1) = b.records[i].x_v[1];
    xt.push_back(b.records[i].x_t);
  }
  const Partition pv = m.encode_v(xv, nullptr);
  const Partition pt = m.encode_t(xt, nullptr);
  CHECK(pv.z_s.shape() == Shape{5, 6});
  CHECK(pv.z_prime.shape() == Shape{5, 4});
  CHECK(pt.z_s.shape() == Shape{5, 6});
  CHECK(pt.z_prime.shape() == Shape{5, 3});
}

TEST_CASE("degenerate posterior variance collapses z' onto the mean") {
  LnfmmModel m(ModelConfig{}, 0);
  // Zero the log-variance head and push its bias far below the clamp.
  auto& w = m.params().get("v_encoder.2.weight").var.mutable_value();
  auto& bias = m.params().get("v_encoder.2.bias").var.mutable_value();
  for (std::size_t c = 10; c < 14; ++c) {
    for (std::size_t r = 0; r < w.rows(); ++r) w(r, c) = 0.0;
    bias(0, c) = -50.0;
  }
  Matrix x(3, 2);
  x(0, 0) = 1.0;
  x(1, 1) = -2.0;
  x(2, 0) = 0.5;
  SUBCASE("unit-magnitude noise stays inside 0.02") {
    Matrix eps(3, 4);
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = i % 2 ? 1.0 : -1.0;
    const Partition p = m.encode_v(x, &eps);
    for (std::size_t i = 0; i < p.logvar.value().size(); ++i) CHECK(p.logvar.value()[i] == -8.0);
    CHECK(max_abs_diff(p.z_prime.value(), p.mu.value()) < 0.02);
  }
  SUBCASE("deviation is exactly exp(-4) times the noise") {
    Rng rng(3);
    const Matrix eps = rng.normal_matrix(3, 4);
    const Partition p = m.encode_v(x, &eps);
    for (std::size_t i = 0; i < eps.size(); ++i)
      CHECK(p.z_prime.value()[i] - p.mu.value()[i] == Approx(std::exp(-4.0) * eps[i]).epsilon(1e-12));
  }
}

TEST_CASE("zero noise gives z' equal to the mean exactly") {
  const LnfmmModel m(ModelConfig{}, 1);
  Matrix x(2, 2, 0.7);
  const Matrix eps(2, 4);
  const Partition p = m.encode_v(x, &eps);
  CHECK(p.z_prime.value() == p.mu.value());
  const std::vector<synthia::Tokens> t{{0, 12, 13, 1, 14, 15}};
  const Matrix eps_t(1, 3);
  const Partition q = m.encode_t(t, &eps_t);
  CHECK(q.z_prime.value() == q.mu.value());
}

TEST_CASE("reparameterized draws match the posterior moments") {
  RandomModel rm;
  const std::size_t n = 10000;
  Matrix x(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    x(i, 0) = 0.3;
    x(i, 1) = -1.1;
  }
  Rng rng(4);
  const Partition p = rm.model.encode_v(x, rng);
  for (std::size_t c = 0; c < 4; ++c) {
    const double mu = p.mu.value()(0, c);
    const double var = std::exp(p.logvar.value()(0, c));
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = p.z_prime.value()(i, c);
      s += z;
      s2 += z * z;
    }
    const double mean = s / n;
    const double sample_var = (s2 - n * mean * mean) / (n - 1);
    CHECK(std::abs(mean - mu) < 3.0 * std::sqrt(var / n));
    CHECK(std::abs(sample_var - var) < 3.0 * var * std::sqrt(2.0 / (n - 1)));
  }
}

TEST_CASE("token encoder validates its input") {
  const LnfmmModel m(ModelConfig{}, 0);
  CHECK_THROWS_AS(m.encode_t({{0, 1, 2, 3, 4, 16}}, nullptr), ContractError);
  CHECK_THROWS_AS(m.encode_t({{0, 1, 2}}, nullptr), DimensionError);
  CHECK_THROWS_AS(m.encode_v(Matrix(2, 3), nullptr), DimensionError);
}

TEST_CASE("token reconstruction loss") {
  SUBCASE("uniform logits, vocab 8, length 5") {
    const std::vector<Var> logits(5, Var::constant(Matrix(1, 8, 0.3)));
    const Var l = recon_loss_t(logits, {{0, 3, 7, 2, 5}});
    CHECK(l.item() == Approx(5.0 * std::log(8.0)).epsilon(1e-12));
    CHECK(l.item() == Approx(10.3972).epsilon(1e-5));
  }
  SUBCASE("near one-hot correct logits") {
    const synthia::Tokens target{1, 4, 2};
    std::vector<Var> logits;
    for (auto t : target) {
      Matrix m(1, 8);
      m(0, t) = 30.0;
      logits.push_back(Var::constant(m));
    }
    CHECK(recon_loss_t(logits, {target}).item() < 1e-3);
  }
  SUBCASE("floor at 1e-12") {
    Matrix m(1, 4);
    m(0, 0) = 1000.0;
    CHECK(recon_loss_t({Var::constant(m)}, {{2}}).item() == Approx(-std::log(1e-12)).epsilon(1e-12));
  }
  SUBCASE("random logits against a straight-line cross-entropy") {
    Rng rng(5);
    const std::size_t rows = 3, len = 4, vocab = 6;
    std::vector<Var> logits;
    std::vector<synthia::Tokens> targets(rows, synthia::Tokens(len));
    for (std::size_t j = 0; j < len; ++j) logits.push_back(Var::constant(rng.normal_matrix(rows, vocab, 2.0)));
    for (auto& t : targets)
      for (auto& id : t) id = rng.index(vocab);
    const Matrix got = recon_loss_t(logits, targets).value();
    for (std::size_t r = 0; r < rows; ++r) {
      double expect = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const Matrix& lg = logits[j].value();
        double z = 0.0;
        for (std::size_t k = 0; k < vocab; ++k) z += std::exp(lg(r, k));
        expect -= std::log(std::exp(lg(r, targets[r][j])) / z);
      }
      CHECK(got(r, 0) == Approx(expect).epsilon(1e-10));
    }
  }
}

TEST_CASE("vector reconstruction loss") {
  const Var a = Var::constant(Matrix::from_rows({{3.0, 4.0}, {1.0, 1.0}}));
  const Var zero = Var::constant(Matrix(2, 2));
  const Matrix l2 = recon_loss_v(a, zero, ReconNorm::kL2).value();
  const Matrix l1 = recon_loss_v(a, zero, ReconNorm::kL1).value();
  CHECK(l2(0, 0) == Approx(5.0).epsilon(1e-15));
  CHECK(l1(0, 0) == Approx(7.0).epsilon(1e-15));
  CHECK(recon_loss_v(a, a, ReconNorm::kL2).value().max_abs() == 0.0);

  Rng rng(6);
  const Matrix x = rng.normal_matrix(4, 2), y = rng.normal_matrix(4, 2);
  const Matrix got = recon_loss_v(Var::constant(x), Var::constant(y), ReconNorm::kL2).value();
  for (std::size_t r = 0; r < 4; ++r)
    CHECK(got(r, 0) == Approx(std::hypot(x(r, 0) - y(r, 0), x(r, 1) - y(r, 1))).epsilon(1e-14));
}

TEST_CASE("shared-slice penalty") {
  CHECK(kl_shared_uniform(Var::constant(Matrix(2, 6))).value().max_abs() == 0.0);
  const Matrix ones = kl_shared_uniform(Var::constant(Matrix(1, 6, 1.0))).value();
  CHECK(ones(0, 0) == Approx(1.0).epsilon(1e-15));
  Rng rng(7);
  const Matrix z = rng.normal_matrix(3, 6);
  const Matrix got = kl_shared_uniform(Var::constant(z)).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 6; ++c) s += z(r, c) * z(r, c);
    CHECK(got(r, 0) == Approx(s / 6.0).epsilon(1e-14));
  }
}

namespace {

// Mean and standard error of the single-sample KL estimator for q = N(mu, 1)
// against an identity-flow (standard normal) prior in 1-D.
std::pair<double, double> identity_prior_kl(double mu, std::size_t n, std::uint64_t seed) {
  const flows::FlowStack prior(1, 1);
  Rng rng(seed);
  Partition p;
  p.eps = rng.normal_matrix(n, 1);
  p.mu = Var::constant(Matrix(n, 1, mu));
  p.logvar = Var::constant(Matrix(n, 1));
  p.z_prime = p.mu + Var::constant(p.eps);
  p.z_s = Var::constant(Matrix(n, 1));
  const Matrix kl = kl_flow_prior(p, p.z_s, prior).value();
  double s = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s += kl[i];
    s2 += kl[i] * kl[i];
  }
  const double mean = s / n;
  return {mean, std::sqrt((s2 / n - mean * mean) / n)};
}

}  // namespace

TEST_CASE("flow-prior KL estimator is calibrated against the closed form") {
  const auto [kl0, se0] = identity_prior_kl(0.0, 10000, 8);
  // q equals the prior, so every single-sample estimate is exactly zero.
  CHECK(std::abs(kl0) <= 3.0 * se0 + 1e-12);
  const auto [kl1, se1] = identity_prior_kl(1.0, 10000, 9);
  CHECK(std::abs(kl1 - 0.5) < 3.0 * se1);
}

TEST_CASE("flow-prior KL estimator agrees with a high-sample reference on a nontrivial prior") {
  ParameterStore store;
  Rng init(10);
  const flows::FlowStack prior = flows::make_coupling_switch_stack(store, "prior", "phi", 2, 2, 2, init, {.hidden = 16});
  testing::randomize(store, init, 0.3);
  const Matrix cond_row = Matrix::from_rows({{0.4, -0.7}});
  const Matrix mu_row = Matrix::from_rows({{0.5, -0.2}});
  const Matrix logvar_row = Matrix::from_rows({{-0.3, 0.2}});

  auto estimate = [&](std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t chunk = 100000;
    double s = 0.0, s2 = 0.0;
    for (std::size_t done = 0; done < n; done += chunk) {
      const std::size_t m = std::min(chunk, n - done);
      Partition p;
      p.eps = rng.normal_matrix(m, 2);
      p.mu = Var::constant(repeat_row(mu_row.row(0), m));
      p.logvar = Var::constant(repeat_row(logvar_row.row(0), m));
      p.z_prime = p.mu + ad::exp(p.logvar * 0.5) * Var::constant(p.eps);
      ad::NoGradGuard guard;
      const Matrix kl = kl_flow_prior(p, Var::constant(repeat_row(cond_row.row(0), m)), prior).value();
      for (std::size_t i = 0; i < m; ++i) {
        s += kl[i];
        s2 += kl[i] * kl[i];
      }
    }
    const double mean = s / n;
    return std::pair{mean, std::sqrt((s2 / n - mean * mean) / n)};
  };
  const auto [small, se_small] = estimate(100000, 20);
  const auto [ref, se_ref] = estimate(1000000, 21);
  CHECK(std::abs(small - ref) < 3.0 * std::hypot(se_small, se_ref));
}

TEST_CASE("objective: zero weights, single-term isolation and term sums") {
  RandomModel rm;
  const Batch b = make_batch(12, 0.5);

  Rng r0(1);
  const ObjectiveResult zero = rm.model.objective(b, all_off(), r0);
  CHECK(zero.report.total == 0.0);
  CHECK(zero.loss.item() == 0.0);

  SUBCASE("lambda4 alone equals the token reconstruction loss") {
    const Batch paired = make_batch(8, 1.0);
    ObjectiveWeights w = all_off();
    w.lambda4 = 1.0;
    Rng r1(2);
    const ObjectiveResult res = rm.model.objective(paired, w, r1);

    // Replay the same noise draws: V eps first, then T eps.
    Rng r2(2);
    Matrix xv(8, 2);
    std::vector<synthia::Tokens> xt;
    for (std::size_t i = 0; i < 8; ++i) {
      xv(i, 0) = paired.records[i].x_v[0];
      xv(i, 1) = paired.records[i].x_v[1];
      xt.push_back(paired.records[i].x_t);
    }
    const Partition pv = rm.model.encode_v(xv, r2);
    const Partition pt = rm.model.encode_t(xt, r2);
    const Var cond_t = rm.model.bridge().map_v_to_t(pv.z_s);
    const double expect = sum_of(recon_loss_t(rm.model.decode_t_logits(cond_t, pt.z_prime, xt), xt)) / 8.0;
    CHECK(res.report.recon_t == Approx(expect).epsilon(1e-12));
    CHECK(res.report.total == Approx(expect).epsilon(1e-12));
    CHECK(res.report.shared == 0.0);
    CHECK(res.report.kl_t == 0.0);
    CHECK(res.report.kl_v == 0.0);
    CHECK(res.report.recon_v == 0.0);
    CHECK(res.report.align == 0.0);
  }

  SUBCASE("alignment alone averages over the paired rows of a mixed batch") {
    ObjectiveWeights w = all_off();
    w.lambda_align = 1.0;
    Rng r1(6);
    const ObjectiveResult res = rm.model.objective(b, w, r1);

    Rng r2(6);
    Matrix xv(12, 2);
    std::vector<synthia::Tokens> xt;
    for (std::size_t i = 0; i < 12; ++i) {
      xv(i, 0) = b.records[i].x_v[0];
      xv(i, 1) = b.records[i].x_v[1];
      xt.push_back(b.records[i].x_t);
    }
    const Matrix zs_v = rm.model.encode_v(xv, r2).z_s.value();
    const Matrix zs_t = rm.model.encode_t(xt, r2).z_s.value();
    double acc = 0.0;
    std::size_t n_paired = 0;
    for (std::size_t i = 0; i < 12; ++i) {
      if (!b.records[i].paired) continue;
      ++n_paired;
      const Var one = rm.model.bridge().alignment_loss(Var::constant(repeat_row(zs_v.row(i), 1)), Var::constant(repeat_row(zs_t.row(i), 1)),
                                                       {.beta = w.beta, .symmetric = w.symmetric});
      acc += one.item();
    }
    REQUIRE(n_paired == 6);
    CHECK(res.report.align == Approx(acc / 6.0).epsilon(1e-12));
  }

  SUBCASE("random weights: total equals the sum of the reported terms") {
    Rng wr(3);
    for (int trial = 0; trial < 5; ++trial) {
      ObjectiveWeights w;
      w.lambda1 = wr.uniform();
      w.lambda2 = wr.uniform();
      w.lambda3 = wr.uniform();
      w.lambda4 = wr.uniform();
      w.lambda5 = 10.0 * wr.uniform();
      w.lambda_align = wr.uniform();
      Rng r(40 + trial);
      const TermReport t = rm.model.objective(b, w, r).report;
      CHECK(t.items == 6 + 2 * 6);
      const double sum = t.shared + t.kl_t + t.kl_v + t.recon_t + t.recon_v + t.align;
      CHECK(t.total == Approx(sum).epsilon(1e-10));
    }
  }

  SUBCASE("zeroing one weight removes exactly that term") {
    const ObjectiveWeights base;
    Rng r(5);
    const TermReport full = rm.model.objective(b, base, r).report;
    double ObjectiveWeights::*lambdas[] = {&ObjectiveWeights::lambda1, &ObjectiveWeights::lambda2,
                                           &ObjectiveWeights::lambda3, &ObjectiveWeights::lambda4,
                                           &ObjectiveWeights::lambda5, &ObjectiveWeights::lambda_align};
    double TermReport::*terms[] = {&TermReport::shared,  &TermReport::kl_t,    &TermReport::kl_v,
                                   &TermReport::recon_t, &TermReport::recon_v, &TermReport::align};
    for (std::size_t k = 0; k < 6; ++k) {
      ObjectiveWeights w = base;
      w.*lambdas[k] = 0.0;
      Rng rk(5);
      const TermReport t = rm.model.objective(b, w, rk).report;
      for (std::size_t j = 0; j < 6; ++j) {
        if (j == k) CHECK(t.*terms[j] == 0.0);
        else CHECK(t.*terms[j] == Approx(full.*terms[j]).epsilon(1e-12));
      }
    }
  }

  CHECK_THROWS_AS(rm.model.objective(Batch{}, ObjectiveWeights{}, r0), ContractError);
}

TEST_CASE("annealing ramps the two KL weights linearly") {
  ObjectiveWeights w;
  CHECK(w.annealed(0).lambda2 == 0.0);
  CHECK(w.annealed(250).lambda3 == Approx(0.5));
  CHECK(w.annealed(1000).lambda2 == 1.0);
  CHECK(w.annealed(250).lambda4 == 1.0);
}

namespace {

// Max |grad| over every parameter of `group`.
double group_grad(const ParameterStore& store, const std::string& group) {
  double m = 0.0;
  for (const auto& p : store.all())
    if (p.group == group) m = std::max(m, p.var.grad().max_abs());
  return m;
}

}  // namespace

TEST_CASE("unpaired samples give no gradient to the bridge or the other codec") {
  RandomModel rm;
  const Batch unpaired = make_batch(6, 0.0);
  auto& store = rm.model.params();

  SUBCASE("V-only terms") {
    ObjectiveWeights w = all_off();
    w.lambda3 = 1.0;
    w.lambda5 = 1.0;
    w.lambda1 = 1.0;
    w.lambda_align = 1.0;
    store.zero_grad();
    Rng r(1);
    ad::backward(rm.model.objective(unpaired, w, r).loss);
    CHECK(group_grad(store, "theta_v") > 0.0);
    CHECK(group_grad(store, "omega_v") > 0.0);
    CHECK(group_grad(store, "phi_v") > 0.0);
    for (const char* g : {"phi_s", "theta_t", "omega_t", "phi_t"}) CHECK(group_grad(store, g) == 0.0);
  }
  SUBCASE("T-only terms") {
    ObjectiveWeights w = all_off();
    w.lambda2 = 1.0;
    w.lambda4 = 1.0;
    store.zero_grad();
    Rng r(2);
    ad::backward(rm.model.objective(unpaired, w, r).loss);
    CHECK(group_grad(store, "theta_t") > 0.0);
    CHECK(group_grad(store, "omega_t") > 0.0);
    CHECK(group_grad(store, "phi_t") > 0.0);
    for (const char* g : {"phi_s", "theta_v", "omega_v", "phi_v"}) CHECK(group_grad(store, g) == 0.0);
  }
  SUBCASE("unpaired reconstruction moves z_s only when not detached") {
    // Columns 0..5 of the V encoder head produce z_s.
    auto shared_head_grad = [&](bool detach) {
      ObjectiveWeights w = all_off();
      w.lambda3 = 1.0;
      w.lambda5 = 1.0;
      w.detach_unpaired_shared = detach;
      store.zero_grad();
      Rng r(4);
      ad::backward(rm.model.objective(unpaired, w, r).loss);
      const Matrix& g = store.get("v_encoder.2.weight").var.grad();
      double acc = 0.0;
      for (std::size_t row = 0; row < g.rows(); ++row)
        for (std::size_t c = 0; c < 6; ++c) acc += std::abs(g(row, c));
      return acc;
    };
    CHECK(shared_head_grad(true) == 0.0);
    CHECK(shared_head_grad(false) > 0.0);
  }
  SUBCASE("paired samples do reach the bridge") {
    store.zero_grad();
    Rng r(3);
    ad::backward(rm.model.objective(make_batch(6, 1.0), ObjectiveWeights{}, r).loss);
    CHECK(group_grad(store, "phi_s") > 0.0);
  }
}

TEST_CASE("full objective passes a finite-difference check on every parameter group") {
  RandomModel rm;
  const Batch b = make_batch(6, 0.5, 3);
  ObjectiveWeights w;
  w.lambda1 = 0.5;  // raise the small default so its path is visible
  // The stop-gradient on unpaired shared codes is invisible to finite
  // differences; check the objective itself.
  w.detach_unpaired_shared = false;
  auto loss = [&] {
    Rng r(77);
    return rm.model.objective(b, w, r).loss;
  };
  const auto groups = rm.model.params().groups();
  CHECK(groups.size() == 7);
  for (const auto& g : groups) {
    std::vector<Parameter> params;
    for (const auto& p : rm.model.params().all())
      if (p.group == g) params.push_back(p);
    const GradCheckReport rep = finite_diff_check(loss, params, 1e-5, 3, 99);
    INFO("group " << g << " worst " << rep.worst_param << "[" << rep.worst_index << "]");
    CHECK_FALSE(rep.non_finite);
    CHECK(rep.max_rel_error < 1e-4);
  }
}

TEST_CASE("conditional sampling is deterministic and respects the decoder contract") {
  RandomModel rm;
  const synthia::Point x{1.2, -0.4};
  const synthia::Tokens t{0, 12, 13, 1, 14, 15};
  Rng a(5), b(5);
  const auto s1 = rm.model.sample_t_given_v(x, 1, a);
  const auto s2 = rm.model.sample_t_given_v(x, 1, b);
  CHECK(s1 == s2);
  Rng c(6);
  for (const auto& seq : rm.model.sample_t_given_v(x, 30, c)) {
    CHECK(seq.size() == 6);
    for (auto id : seq) CHECK(id < 16);
  }
  Rng d(7), e(7);
  const auto v1 = rm.model.sample_v_given_t(t, 4, d);
  const auto v2 = rm.model.sample_v_given_t(t, 4, e);
  CHECK(v1 == v2);
  CHECK(v1.size() == 4);
  for (const auto& p : v1) CHECK((std::isfinite(p[0]) && std::isfinite(p[1])));

  Rng g1(8), g2(9);
  const auto greedy1 = rm.model.sample_t_given_v(x, 3, g1, {.greedy = true});
  const auto greedy2 = rm.model.sample_t_given_v(x, 3, g2, {.greedy = true});
  // Greedy decoding still varies with z'_t, but equal seeds agree.
  Rng g3(8);
  CHECK(rm.model.sample_t_given_v(x, 3, g3, {.greedy = true}) == greedy1);
  (void)greedy2;
}

TEST_CASE("actnorm data-dependent init runs once on the first batch") {
  LnfmmModel m(ModelConfig{}, 2);
  CHECK_FALSE(m.priors_initialized());
  Rng rng(1);
  m.initialize_priors(make_batch(32, 1.0), rng);
  CHECK(m.priors_initialized());
  Rng r(2);
  CHECK(std::isfinite(m.objective(make_batch(8, 1.0), ObjectiveWeights{}, r).report.total));
}
