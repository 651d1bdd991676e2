#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "fluxinv/data_model.hpp"

using namespace fluxinv;

namespace {

ObservationGroup make_group(std::vector<std::string> series, std::vector<double> times, std::vector<double> budgets,
                            Eigen::Index cols = 1) {
  ObservationGroup g;
  g.id = "surface";
  const auto n = static_cast<Eigen::Index>(times.size());
  g.values = Eigen::VectorXd::Zero(n);
  g.baseline = Eigen::VectorXd::Zero(n);
  g.budgets = Eigen::Map<const Eigen::VectorXd>(budgets.data(), n);
  g.series = std::move(series);
  g.times = std::move(times);
  g.response = Eigen::MatrixXd::Zero(n, cols);
  return g;
}

ErrorParams params(double gamma, double rho, double length) {
  ErrorParams p;
  p.gamma = gamma;
  p.rho = rho;
  p.length = length;
  return p;
}

}  // namespace

TEST_CASE("uncorrelated share alone gives a diagonal covariance") {
  const auto g = make_group({"a", "a", "b"}, {0.0, 0.1, 0.2}, {1.0, 2.0, 3.0});
  const auto c = ErrorCovariance(g, params(2.0, 0.0, 5.0)).dense();
  CHECK(c.isApprox(Eigen::Vector3d(0.5, 1.0, 1.5).asDiagonal().toDenseMatrix()));
}

TEST_CASE("e-folding lag gives correlation exp(-1) within a series only") {
  const auto g = make_group({"a", "a", "b"}, {0.0, 2.0, 2.0}, {1.0, 1.0, 1.0});
  const auto c = ErrorCovariance(g, params(1.0, 1.0, 2.0)).dense();
  CHECK(c(0, 1) == doctest::Approx(std::exp(-1.0)));
  CHECK(c(0, 2) == 0.0);
  CHECK(c(1, 2) == 0.0);
}

TEST_CASE("total variance with scaled budget") {
  const auto g = make_group({"a"}, {0.0}, {2.0});
  CHECK(ErrorCovariance(g, params(0.704, 1.0, 1.0)).dense()(0, 0) == doctest::Approx(2.0 / 0.704));
}

TEST_CASE("zero length collapses the correlated part to variance") {
  const auto g = make_group({"a", "a"}, {0.0, 0.0}, {1.0, 4.0});
  ErrorCovariance cov(g, params(1.0, 1.0, 0.0));
  CHECK(cov.dense().isApprox(Eigen::Vector2d(1.0, 4.0).asDiagonal().toDenseMatrix()));
  CHECK(cov.block_count() == 2);
}

TEST_CASE("invalid parameters are rejected") {
  const auto g = make_group({"a"}, {0.0}, {1.0});
  CHECK_THROWS_AS(ErrorCovariance(g, params(-1.0, 0.5, 1.0)), DomainError);
  CHECK_THROWS_AS(ErrorCovariance(g, params(1.0, 1.5, 1.0)), DomainError);
  CHECK_THROWS_AS(ErrorCovariance(g, params(1.0, 0.5, -1.0)), DomainError);
}

TEST_CASE("duplicate times at full correlation cannot be factorised") {
  const auto g = make_group({"s1", "s1"}, {1.0, 1.0}, {1.0, 1.0});
  try {
    ErrorCovariance cov(g, params(1.0, 1.0, 1.0));
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("s1") != std::string::npos);
  }
}

TEST_CASE("underflowed links split a series into independent blocks") {
  const auto g = make_group({"a", "a", "a"}, {0.0, 0.01, 1000.0}, {1.0, 1.0, 1.0});
  ErrorCovariance cov(g, params(1.0, 0.9, 0.001));
  CHECK(cov.block_count() == 2);
  CHECK(cov.dense()(0, 1) > 0.0);
}

TEST_CASE("covariance is symmetric positive definite on random layouts") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::string> s;
    std::vector<double> t, v;
    for (int i = 0; i < 30; ++i) {
      s.push_back("s" + std::to_string(static_cast<int>(u(rng) * 4)));
      t.push_back(u(rng) * 10.0);
      v.push_back(0.1 + u(rng));
    }
    const auto g = make_group(s, t, v);
    const auto c = ErrorCovariance(g, params(0.5 + u(rng), u(rng), 3.0 * u(rng))).dense();
    CHECK((c - c.transpose()).norm() == 0.0);
    CHECK(Eigen::LLT<Eigen::MatrixXd>(c).info() == Eigen::Success);
  }
}

TEST_CASE("doubling budgets and scaling leaves the covariance unchanged") {
  auto g = make_group({"a", "a", "b", "a"}, {0.0, 0.3, 0.1, 0.7}, {1.0, 2.0, 0.5, 1.5});
  const auto c1 = ErrorCovariance(g, params(0.8, 0.6, 0.4)).dense();
  g.budgets *= 2.0;
  const auto c2 = ErrorCovariance(g, params(1.6, 0.6, 0.4)).dense();
  CHECK((c1 - c2).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("permuting observations permutes the covariance") {
  const auto g = make_group({"a", "b", "a", "b"}, {0.0, 0.2, 0.5, 0.9}, {1.0, 2.0, 3.0, 4.0});
  const std::vector<int> perm{3, 0, 2, 1};
  std::vector<std::string> s;
  std::vector<double> t, v;
  for (int k : perm) {
    s.push_back(g.series[static_cast<std::size_t>(k)]);
    t.push_back(g.times[static_cast<std::size_t>(k)]);
    v.push_back(g.budgets(k));
  }
  const auto c = ErrorCovariance(g, params(1.0, 0.7, 0.5)).dense();
  const auto cp = ErrorCovariance(make_group(s, t, v), params(1.0, 0.7, 0.5)).dense();
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK(cp(i, j) == doctest::Approx(c(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)])));
}

TEST_CASE("solves, quadratic forms and log determinant match dense algebra") {
  const auto g = make_group({"a", "a", "b", "a", "b"}, {0.0, 0.3, 0.1, 0.7, 0.4}, {1.0, 2.0, 0.5, 1.5, 1.0}, 3);
  ErrorCovariance cov(g, params(1.7, 0.6, 0.4));
  const Eigen::MatrixXd c = cov.dense();
  Eigen::VectorXd r(5);
  r << 0.3, -1.2, 0.5, 2.0, -0.1;
  Eigen::MatrixXd m(5, 3);
  m.setRandom();
  const Eigen::VectorXd direct = c.ldlt().solve(r);
  CHECK((cov.solve(r) - direct).norm() < 1e-10);
  CHECK(cov.unscaled_quadratic(r) * 1.7 == doctest::Approx(r.dot(direct)).epsilon(1e-10));
  CHECK((cov.unscaled_gram(m) * 1.7 - m.transpose() * c.ldlt().solve(m)).norm() < 1e-9);
  CHECK((cov.unscaled_cross(m, r) * 1.7 - m.transpose() * direct).norm() < 1e-9);
  CHECK(cov.log_det() == doctest::Approx(std::log(c.determinant())));
  CHECK(cov.log_likelihood(r) == doctest::Approx(-0.5 * (r.dot(direct) + std::log(c.determinant()))));
}

TEST_CASE("vanishing noise reproduces the truth") {
  auto g = make_group({"a", "a"}, {0.0, 1.0}, {1.0, 1.0});
  const Eigen::Vector2d truth(3.0, -1.0);
  Rng rng = make_rng(1, "sim");
  CHECK((simulate_observations(g, truth, params(1e9, 0.0, 0.0), rng) - truth).cwiseAbs().maxCoeff() < 1e-3);
  g.budgets.setConstant(1e-12);
  CHECK((simulate_observations(g, truth, params(1.0, 0.5, 1.0), rng) - truth).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("simulated sample covariance matches the model") {
  const auto g = make_group({"a", "a", "a"}, {0.0, 0.5, 1.5}, {1.0, 2.0, 0.5});
  const auto p = params(0.8, 0.7, 1.0);
  ErrorCovariance cov(g, p);
  const Eigen::MatrixXd target = cov.dense();
  Rng rng = make_rng(9, "replicates");
  const int n = 10000;
  Eigen::Matrix3d acc = Eigen::Matrix3d::Zero();
  for (int k = 0; k < n; ++k) {
    const Eigen::VectorXd e = cov.sample(rng);
    acc += e * e.transpose();
  }
  acc /= n;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(acc(i, j) == doctest::Approx(target(i, j)).epsilon(0.05));
}

TEST_CASE("simulation is reproducible under a fixed seed") {
  const auto g = make_group({"a", "b"}, {0.0, 0.5}, {1.0, 2.0});
  Rng a = make_rng(3, "x"), b = make_rng(3, "x");
  const Eigen::Vector2d truth(1.0, 2.0);
  CHECK(simulate_observations(g, truth, params(1, 0.5, 1), a) == simulate_observations(g, truth, params(1, 0.5, 1), b));
}

TEST_CASE("group residual is affine") {
  auto g = make_group({"a", "a"}, {0.0, 1.0}, {1.0, 1.0}, 2);
  g.values << 5.0, 1.0;
  g.baseline << 1.0, 0.5;
  g.response << 1.0, 2.0, 0.0, -1.0;
  CHECK(group_residual(g, Eigen::Vector2d::Zero(), {}) == Eigen::Vector2d(4.0, 0.5));
  // Hand case: alpha = (1, 1) gives Psi alpha = (3, -1).
  CHECK(group_residual(g, Eigen::Vector2d(1.0, 1.0), {}) == Eigen::Vector2d(1.0, 1.5));
  g.bias.design = Eigen::MatrixXd::Ones(2, 1);
  CHECK(group_residual(g, Eigen::Vector2d(1.0, 1.0), Eigen::VectorXd::Constant(1, 0.5)) == Eigen::Vector2d(0.5, 1.0));
  g.values = g.baseline;
  g.bias = {};
  CHECK(group_residual(g, Eigen::Vector2d::Zero(), {}).norm() == 0.0);
  CHECK_THROWS_AS(group_residual(g, Eigen::Vector3d::Zero(), {}), DomainError);
}

TEST_CASE("records split into groups in sorted order") {
  std::vector<ObservationRecord> recs{
      {"o1", "tower", "t1", 0, 1.0, 401.0, 0.5},
      {"o2", "aircraft", "a1", 1, 2.0, 402.0, 0.25},
      {"o3", "tower", "t1", 2, 3.0, 403.0, 0.5},
  };
  Eigen::MatrixXd resp(3, 2);
  resp << 1, 2, 3, 4, 5, 6;
  const Eigen::Vector3d base(10, 20, 30);
  const auto groups = build_groups(recs, resp, base);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].id == "aircraft");
  CHECK(groups[1].id == "tower");
  CHECK(groups[1].values == Eigen::Vector2d(401.0, 403.0));
  CHECK(groups[1].baseline == Eigen::Vector2d(10.0, 30.0));
  CHECK(groups[1].response.row(1) == Eigen::RowVector2d(5, 6));
  recs[0].error_budget = 0.0;
  CHECK_THROWS_AS(build_groups(recs, resp, base), DomainError);
}

TEST_CASE("default error parameters") {
  CHECK(default_error_params("surface", 1.0).rho_fixed);
  CHECK(default_error_params("surface", 1.0).rho == 1.0);
  CHECK_FALSE(default_error_params("oco2-xco2", 1.0).rho_fixed);
  SifErrorBudget b{0.2, 0.05};
  CHECK(b.total() == doctest::Approx(0.25));
}

TEST_CASE("sif response rows follow the link") {
  const auto w = fluxinv::testing::make_toy_world();
  SifLinkModel model(Calendar(2015, 1, 1));
  CellMonthLink link;
  link.slope = -0.5;
  link.intercept = 0.2;
  link.mse = 0.01;
  link.valid = true;
  link.reasons = 0;
  link.fence_lower = -10;
  link.fence_upper = 10;
  model.set(0, 1, link);
  SampledField sif{w.fields.axis, Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(w.grid->size()),
                                                           static_cast<Eigen::Index>(w.fields.axis.count), 0.7)};
  model.set_bottom_up(sif);
  std::vector<ObservationRecord> recs{{"s1", "oco2-sif", "m1", 0, 5.0, 0.0, 0.1}, {"s2", "oco2-sif", "m1", 1, 5.0, 0.0, 0.1}};
  const auto r = sif_response(model, *w.basis, recs);
  CHECK(r.valid[0]);
  CHECK_FALSE(r.valid[1]);
  CHECK(r.rows.row(1).norm() == 0.0);
  CHECK(r.baseline(0) == doctest::Approx(0.7));
  Eigen::VectorXd alpha = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(w.basis->layout().size()), 0.3);
  const auto& layout = w.basis->layout();
  const auto pred = predict_sif(model, *w.basis,
                                alpha.segment(static_cast<Eigen::Index>(layout.offset(Component::Gpp)),
                                              static_cast<Eigen::Index>(layout.component_size(Component::Gpp))),
                                CellId{0}, 5.0);
  CHECK(r.baseline(0) + r.rows.row(0).dot(alpha) == doctest::Approx(*pred));
}
