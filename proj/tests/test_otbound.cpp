#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "satmark/otbound/otbound.hpp"

using namespace satmark;
using namespace satmark::otbound;

namespace {

Eigen::MatrixXd gaussian(Eigen::Index n, Eigen::Index d, Rng& rng, double shift = 0.0) {
  Eigen::MatrixXd p(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) p(i, j) = rng.normal() + shift;
  return p;
}

std::vector<std::vector<double>> to_rows(const Eigen::MatrixXd& c) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(c.rows()));
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j < c.cols(); ++j) out[static_cast<std::size_t>(i)].push_back(c(i, j));
  return out;
}

// Uniform n x m transport as an nm x nm assignment: row atom i copied m times, column atom j copied n times.
double replicated_assignment(const Eigen::MatrixXd& c) {
  const Eigen::Index n = c.rows(), m = c.cols();
  Eigen::MatrixXd big(n * m, n * m);
  for (Eigen::Index r = 0; r < n * m; ++r)
    for (Eigen::Index s = 0; s < n * m; ++s) big(r, s) = c(r / m, s / n);
  return oracle::assignment_hungarian(to_rows(big)) / static_cast<double>(n * m);
}

void check_plan(const TransportPlan& t, Eigen::Index n, Eigen::Index m) {
  CHECK((t.plan.array() >= 0).all());
  CHECK((t.plan.rowwise().sum().array() - 1.0 / n).abs().maxCoeff() <= 1e-8);
  CHECK((t.plan.colwise().sum().array() - 1.0 / m).abs().maxCoeff() <= 1e-8);
}

EmpiricalDist line(std::vector<double> v) {
  Eigen::MatrixXd p(static_cast<Eigen::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) p(static_cast<Eigen::Index>(i), 0) = v[i];
  return EmpiricalDist(p);
}

}  // namespace

TEST_CASE("exact transport on small examples") {
  const auto t = w1_exact(line({0, 2}), line({1, 3}));
  CHECK(t.cost == doctest::Approx(1.0).epsilon(1e-12));
  check_plan(t, 2, 2);
  CHECK(w1_1d({0, 2}, {1, 3}) == 1.0);
  CHECK(w1_1d({0}, {1}) == 1.0);
  CHECK(w1_1d({3, 1, 2}, {2, 3, 1}) == 0.0);

  Rng rng(1);
  const EmpiricalDist a(gaussian(7, 3, rng));
  const auto self = w1_exact(a, a);
  CHECK(self.cost == 0.0);
  CHECK((self.plan - Eigen::MatrixXd::Identity(7, 7) / 7.0).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK_THROWS_AS(w1_exact(EmpiricalDist(Eigen::MatrixXd::Zero(4097, 1)), a), ContractError);
}

TEST_CASE("exact transport equals assignment oracles") {
  Rng rng(2);
  for (int t = 0; t < 25; ++t) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.below(7));  // 2..8
    const EmpiricalDist a(gaussian(n, 3, rng)), b(gaussian(n, 3, rng, 0.5));
    const Eigen::MatrixXd c = euclidean_costs(a.points, b.points);
    const auto plan = w1_exact(a, b);
    CHECK(plan.cost == doctest::Approx(oracle::assignment_hungarian(to_rows(c)) / n).epsilon(1e-9));
    if (n <= 7) CHECK(plan.cost == doctest::Approx(oracle::assignment_bruteforce(to_rows(c)) / n).epsilon(1e-9));
    check_plan(plan, n, n);
  }
  for (int t = 0; t < 10; ++t) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(6)), m = 1 + static_cast<Eigen::Index>(rng.below(6));
    const EmpiricalDist a(gaussian(n, 2, rng)), b(gaussian(m, 2, rng));
    const auto plan = w1_exact(a, b);
    CHECK(plan.cost == doctest::Approx(replicated_assignment(euclidean_costs(a.points, b.points))).epsilon(1e-9));
    check_plan(plan, n, m);
  }
}

TEST_CASE("exact transport equals the sorted 1-d formula") {
  Rng rng(3);
  for (int n : {1, 5, 64, 333, 1024}) {
    std::vector<double> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
    for (auto& v : x) v = rng.normal();
    for (auto& v : y) v = 2.0 * rng.uniform() - 0.3;
    CHECK(w1_exact(line(x), line(y)).cost == doctest::Approx(w1_1d(x, y)).epsilon(1e-9));
  }
}

TEST_CASE("exact W1 behaves as a metric") {
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    const EmpiricalDist a(gaussian(12, 3, rng)), b(gaussian(9, 3, rng, 1.0)), c(gaussian(15, 3, rng, -0.5));
    const double ab = w1_exact(a, b).cost, ba = w1_exact(b, a).cost;
    CHECK(std::abs(ab - ba) <= 1e-9);
    CHECK(ab <= w1_exact(a, c).cost + w1_exact(c, b).cost + 1e-8);
    CHECK(ab > 0);
  }
}

TEST_CASE("sinkhorn approximates the exact cost") {
  Rng rng(5);
  const EmpiricalDist a(gaussian(256, 2, rng)), b(gaussian(256, 2, rng, 0.7));
  const double exact = w1_exact(a, b).cost;
  const auto s = w1_sinkhorn(a, b, 0.005);
  CHECK(std::abs(s.cost - exact) <= 0.03 * exact);
  const auto self = w1_sinkhorn(a, a, 0.01);
  CHECK(self.cost <= 0.05);
  const EmpiricalDist a2(2.0 * a.points), b2(2.0 * b.points);
  CHECK(std::abs(w1_sinkhorn(a2, b2, 0.005).cost / s.cost - 2.0) <= 0.02);
  CHECK_THROWS_AS(w1_sinkhorn(a, b, 0.0), ContractError);
}

TEST_CASE("product measure identity") {
  // Z_t = {0, 2}, Z_z = {1, 3}, M = {(0), (1)}.
  Eigen::MatrixXd m(2, 1);
  m << 0, 1;
  const EmpiricalDist M(m);
  const auto r = product_identity_check(line({0, 2}), line({1, 3}), M, M);
  CHECK(r.lhs == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.gap <= 1e-9);
  const auto same = product_identity_check(line({0, 2}), line({0, 2}), M, M);
  CHECK(same.lhs == 0.0);
  CHECK(same.rhs == 0.0);

  Rng rng(6);
  for (int t = 0; t < 15; ++t) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(4)), k = 1 + static_cast<Eigen::Index>(rng.below(4));
    const EmpiricalDist zt(gaussian(n, 2, rng)), zz(gaussian(n, 2, rng, 0.3));
    Eigen::MatrixXd bits(k, 5);
    for (Eigen::Index i = 0; i < k; ++i)
      for (int j = 0; j < 5; ++j) bits(i, j) = static_cast<double>(rng.below(2));
    const EmpiricalDist mk(bits);
    const auto res = product_identity_check(zt, zz, mk, mk);
    CHECK(res.gap <= 1e-9);
    // Independent check of the product side.
    Eigen::MatrixXd cp(n * k, n * k);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index a = 0; a < k; ++a)
        for (Eigen::Index j = 0; j < n; ++j)
          for (Eigen::Index b = 0; b < k; ++b)
            cp(i * k + a, j * k + b) =
                (zt.points.row(i) - zz.points.row(j)).norm() + (bits.row(a) - bits.row(b)).cwiseAbs().sum();
    CHECK(res.lhs == doctest::Approx(oracle::assignment_hungarian(to_rows(cp)) / (n * k)).epsilon(1e-9));
  }
  Eigen::MatrixXd other = m;
  other(0, 0) = 1;
  CHECK_THROWS_AS(product_identity_check(line({0}), line({1}), M, EmpiricalDist(other)), ContractError);
}

TEST_CASE("hoeffding term") {
  CHECK(std::abs(hoeffding_term(1.0, std::exp(-1.0), 50) - 0.1) <= 1e-12);
  CHECK(hoeffding_term(1.0, 0.05, 200) == doctest::Approx(hoeffding_term(1.0, 0.05, 100) / std::sqrt(2.0)));
  CHECK(hoeffding_term(1.0, 1.0 - 1e-12, 10) < 1e-5);
  CHECK(hoeffding_term(1.0, 0.05, 101) < hoeffding_term(1.0, 0.05, 100));
  CHECK(hoeffding_term(1.0, 0.06, 100) < hoeffding_term(1.0, 0.05, 100));
  CHECK_THROWS_AS(hoeffding_term(0.0, 0.5, 10), ContractError);
  CHECK_THROWS_AS(hoeffding_term(1.0, 1.0, 10), ContractError);
}

TEST_CASE("lipschitz estimate") {
  std::vector<LossPoint> pts;
  Rng rng(7);
  for (int i = 0; i < 20; ++i) {
    Eigen::VectorXd z(1);
    z << rng.normal();
    pts.push_back({z, Eigen::VectorXd()});
  }
  pts.push_back(pts.front());  // zero-distance pairs possible
  Rng r1(8);
  CHECK(lipschitz_estimate([](const LossPoint&) { return 2.0; }, pts, 100, r1).k == 0.0);
  Rng r2(8);
  const auto lin = lipschitz_estimate([](const LossPoint& p) { return 3.0 * p.z[0]; }, pts, 500, r2);
  CHECK(lin.k == doctest::Approx(3.0).epsilon(1e-9));
  CHECK(lin.skipped > 0);
  double prev = 0;
  for (long pairs : {1L, 5L, 20L, 100L}) {
    Rng r(9);
    const double k = lipschitz_estimate([](const LossPoint& p) { return p.z[0] * p.z[0]; }, pts, pairs, r).k;
    CHECK(k >= prev);
    prev = k;
  }
}

TEST_CASE("bound assembly") {
  W1Estimate w{0.25, "exact", false};
  const auto r = assemble_bound(0.3, 2.0, 0.05, 100, 4.0, w, 0.5);
  CHECK(r.bound == r.risk + r.deviation + r.k_est * r.w1);
  CHECK(r.deviation == hoeffding_term(2.0, 0.05, 100));
  Rng rng(10);
  const EmpiricalDist a(gaussian(20, 3, rng));
  const auto same = assemble_bound(0.3, 2.0, 0.05, 100, 4.0, w1(a, a), 0.5);
  CHECK(same.w1 == 0.0);
  CHECK(same.bound == same.risk + same.deviation);
}

TEST_CASE("pca projection") {
  Rng rng(11);
  Eigen::MatrixXd p = gaussian(200, 3, rng);
  p.col(1) *= 10.0;
  const EmpiricalDist a(p);
  const auto proj = pca2({&a});
  REQUIRE(proj.size() == 1);
  CHECK(proj[0].rows() == 200);
  CHECK(proj[0].cols() == 2);
  // First axis carries the stretched coordinate.
  Eigen::VectorXd c = proj[0].col(0);
  const double corr = (c.array() - c.mean()).matrix().dot((p.col(1).array() - p.col(1).mean()).matrix()) /
                      std::sqrt((c.array() - c.mean()).square().sum() * (p.col(1).array() - p.col(1).mean()).square().sum());
  CHECK(std::abs(corr) > 0.99);
}

TEST_CASE("free latents sit closer to the conditional mixture than external ones") {
  toygen::SurrogateModel gen{toygen::GeneratorConfig{}};
  Rng r1(12), r2(13), r3(14);
  const auto free_c = latent_cloud(gen.sample_distribution(toygen::DistKind::free, 128, r1), "free");
  const auto ext = latent_cloud(gen.sample_distribution(toygen::DistKind::external, 128, r2), "external");
  const auto cond = latent_cloud(gen.sample_distribution(toygen::DistKind::conditional, 128, r3, 7.5), "cond");
  CHECK(w1(free_c, cond).w1 < w1(ext, cond).w1);
}

TEST_CASE("generalization bound on an untrained model") {
  toygen::SurrogateModel gen{toygen::GeneratorConfig{}};
  wmnet::WmConfig wc;
  wc.bits = 16;
  const wmnet::WatermarkModel model(wc, gen);
  BoundConfig cfg;
  cfg.n = 64;
  cfg.probe = 32;
  cfg.pairs = 256;
  cfg.grad_points = 4;
  const auto r = generalization_bound(model, gen, cfg);
  CHECK(r.bound == r.risk + r.deviation + r.k_est * r.w1);
  CHECK(r.w1 > 0);
  CHECK(r.k_est > 0);
  CHECK(r.solver == "exact");
  CHECK(r.test_loss_mean <= r.bound);
  cfg.n = 10;
  CHECK_THROWS_AS(generalization_bound(model, gen, cfg), ContractError);
}
