#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "fixtures.hpp"
#include "fluxinv/decomposition.hpp"
#include "fluxinv/util.hpp"

using namespace fluxinv;
using fluxinv::testing::make_toy_world;

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::vector<double> daily_times(std::size_t n) {
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<double>(i) + 0.5;
  return t;
}

Eigen::VectorXd block(const Eigen::VectorXd& alpha, const AlphaLayout& layout, Component c) {
  return alpha.segment(static_cast<Eigen::Index>(layout.offset(c)), static_cast<Eigen::Index>(layout.component_size(c)));
}
}  // namespace

TEST_CASE("constant series fits the intercept only") {
  const auto t = daily_times(400);
  std::vector<double> y(t.size(), 5.0);
  const auto fit = fit_series(t, y, 3);
  CHECK(fit.coefficients.intercept == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(std::abs(fit.coefficients.trend) < 1e-12);
  for (int k = 0; k < 3; ++k) {
    CHECK(std::abs(fit.coefficients.cos_const[k]) < 1e-10);
    CHECK(std::abs(fit.coefficients.sin_trend[k]) < 1e-12);
  }
  CHECK(fit.residual.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("pure annual cosine is an exact basis member") {
  const auto t = daily_times(4 * 365);
  std::vector<double> y(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) y[i] = std::cos(kTwoPi * t[i] / kDaysPerYear);
  const auto fit = fit_series(t, y, 1);
  CHECK(fit.coefficients.cos_const[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(std::abs(fit.coefficients.intercept) < 1e-10);
  CHECK(std::abs(fit.coefficients.sin_const[0]) < 1e-10);
  CHECK(std::abs(fit.coefficients.cos_trend[0]) < 1e-12);
}

TEST_CASE("generated coefficients are recovered within three standard errors") {
  const int K = 3;
  const auto t = daily_times(6 * 365);
  const std::size_t p = 2 + 4 * K;
  Eigen::VectorXd truth(static_cast<Eigen::Index>(p));
  truth << 2.0, 1e-3, 0.8, 1e-4, -0.5, -2e-4, 0.3, 5e-5, 0.2, -1e-4, -0.1, 2e-5, 0.05, 1e-5;
  const double sigma = 0.2;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> noise(0.0, sigma);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(t.size()), static_cast<Eigen::Index>(p));
  std::vector<double> y(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    x(ii, 0) = 1.0;
    x(ii, 1) = t[i];
    for (int k = 1; k <= K; ++k) {
      const double w = kTwoPi * k * t[i] / kDaysPerYear;
      x(ii, 2 + 4 * (k - 1)) = std::cos(w);
      x(ii, 3 + 4 * (k - 1)) = t[i] * std::cos(w);
      x(ii, 4 + 4 * (k - 1)) = std::sin(w);
      x(ii, 5 + 4 * (k - 1)) = t[i] * std::sin(w);
    }
    y[i] = x.row(ii).dot(truth) + noise(rng);
  }
  const auto fit = fit_series(t, y, K);
  const Eigen::MatrixXd cov = (x.transpose() * x).inverse() * sigma * sigma;
  Eigen::VectorXd est(static_cast<Eigen::Index>(p));
  est(0) = fit.coefficients.intercept;
  est(1) = fit.coefficients.trend;
  for (int k = 0; k < K; ++k) {
    est(2 + 4 * k) = fit.coefficients.cos_const[k];
    est(3 + 4 * k) = fit.coefficients.cos_trend[k];
    est(4 + 4 * k) = fit.coefficients.sin_const[k];
    est(5 + 4 * k) = fit.coefficients.sin_trend[k];
  }
  for (Eigen::Index j = 0; j < est.size(); ++j) {
    CAPTURE(j);
    CHECK(std::abs(est(j) - truth(j)) < 3.0 * std::sqrt(cov(j, j)));
  }
}

TEST_CASE("degenerate designs are fit errors") {
  std::vector<double> same(50, 3.0), y(50, 1.0);
  CHECK_THROWS_AS(fit_series(same, y, 1), FitError);
  const auto shortt = daily_times(13);
  std::vector<double> ys(13, 1.0);
  CHECK_THROWS_AS(fit_series(shortt, ys, 3), FitError);
}

TEST_CASE("fit then evaluate reproduces the input series") {
  const auto w = make_toy_world();
  for (const char* name : {"gpp", "resp", "ocean"}) {
    const auto& values = w.fields.at(name);
    const auto dc = fit_decomposition(w.fields.axis, values, 3);
    double worst = 0.0;
    for (Eigen::Index s = 0; s < values.rows(); ++s)
      for (std::size_t i = 0; i < w.fields.axis.count; ++i) {
        const double t = w.fields.axis.time(i);
        const double rebuilt = dc.cells[static_cast<std::size_t>(s)].fitted(t) + dc.residual_at(static_cast<std::size_t>(s), t);
        const double y = values(s, static_cast<Eigen::Index>(i));
        worst = std::max(worst, std::abs(rebuilt - y) / std::max(std::abs(y), 1e-300));
      }
    CHECK(worst <= 1e-10);
  }
}

TEST_CASE("dimension formula") {
  CHECK(AlphaLayout::component_dimension(23, 79, 3) == 2139);
  CHECK(AlphaLayout::component_dimension(1, 1, 1) == 7);
  for (int R = 1; R <= 5; ++R)
    for (int Q = 1; Q <= 6; ++Q)
      for (int K = 0; K <= 3; ++K) {
        const AlphaLayout layout(R, Q, {K, K, K});
        CHECK(layout.component_size(Component::Gpp) == static_cast<std::size_t>(2 * R + 4 * K * R + Q * R));
        CHECK(layout.size() == 3 * layout.component_size(Component::Gpp));
      }
  const auto w = make_toy_world();
  CHECK(w.basis->layout().component_size(Component::Gpp) == AlphaLayout::component_dimension(2, 3, 3));
  CHECK(w.basis->layout().component_size(Component::Ocean) == AlphaLayout::component_dimension(2, 3, 2));
}

TEST_CASE("layout indices and elements are inverse") {
  const AlphaLayout layout(3, 4, {3, 3, 2});
  std::vector<bool> hit(layout.size(), false);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto e = layout.element(i);
    CHECK(layout.index(e.component, e.term, e.harmonic, e.region, e.period) == i);
    hit[i] = true;
  }
  CHECK(std::all_of(hit.begin(), hit.end(), [](bool b) { return b; }));
  CHECK(layout.index(Component::Gpp, Term::Intercept, 0, RegionId{1}) == 0);
  CHECK(layout.index(Component::Gpp, Term::Trend, 0, RegionId{1}) == 3);
  CHECK(layout.index(Component::Gpp, Term::CosConst, 2, RegionId{1}) == 9);
  CHECK(layout.index(Component::Gpp, Term::Residual, 0, RegionId{2}, PeriodId{1}) == (2 + 12) * 3 + 4);
  CHECK(layout.offset(Component::Resp) == layout.component_size(Component::Gpp));
  CHECK(layout.label(0) == "gpp.intercept.r1");
}

TEST_CASE("zero alpha reproduces the bottom-up fields") {
  const auto w = make_toy_world();
  const auto& b = *w.basis;
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> cell(0, b.grid().size() - 1);
  std::uniform_real_distribution<double> time(b.periods().start(), b.periods().end() - 1e-9);
  for (int k = 0; k < 20; ++k) {
    const CellId s{cell(rng)};
    const double t = time(rng);
    for (auto c : kComponents) {
      const auto& values = w.fields.at(std::string(component_name(c)));
      const double x0 = values(static_cast<Eigen::Index>(s.value), static_cast<Eigen::Index>(w.fields.axis.index_in_range(t)));
      const Eigen::VectorXd zero = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(b.layout().component_size(c)));
      CHECK(evaluate_component_flux(b, c, zero, s, t) == doctest::Approx(x0).epsilon(1e-10));
      CHECK(b.phi(c, s, t).sum() == doctest::Approx(b.bottom_up(c, s, t)).epsilon(1e-14));
    }
  }
}

TEST_CASE("scaling the intercept doubles its contribution") {
  const auto w = make_toy_world();
  const auto& b = *w.basis;
  const auto& layout = b.layout();
  const CellId s{4};
  const RegionId r = b.regions().region_of(s);
  Eigen::VectorXd a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout.component_size(Component::Gpp)));
  a(static_cast<Eigen::Index>(layout.local_index(Component::Gpp, Term::Intercept, 0, r))) = 1.0;
  const double t = 12.5;
  CHECK(evaluate_component_flux(b, Component::Gpp, a, s, t) ==
        doctest::Approx(b.bottom_up(Component::Gpp, s, t) + b.coefficients(Component::Gpp).cells[4].intercept));
  Eigen::VectorXd wrong = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(evaluate_component_flux(b, Component::Gpp, wrong, s, t), DomainError);
}

TEST_CASE("basis evaluation matches scaled-coefficient evaluation") {
  const auto w = make_toy_world();
  const auto& b = *w.basis;
  const auto& layout = b.layout();
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (auto c : kComponents) {
    const std::size_t n = layout.component_size(c);
    Eigen::VectorXd a(static_cast<Eigen::Index>(n));
    for (auto& v : a) v = nd(rng);
    for (std::size_t s = 0; s < b.grid().size(); ++s)
      for (double t : {0.5, 7.5, 15.5, 29.5}) {
        // Direct path: scale every coefficient by (1 + alpha) and evaluate the decomposition.
        const RegionId r = b.regions().region_of(CellId{s});
        const PeriodId q = b.periods().period_of(t);
        const auto& h = b.coefficients(c).cells[s];
        auto scale = [&](Term term, int k) {
          return 1.0 + a(static_cast<Eigen::Index>(layout.local_index(c, term, k, r, q)));
        };
        double direct = scale(Term::Intercept, 0) * h.intercept + scale(Term::Trend, 0) * h.trend * t;
        for (int k = 1; k <= layout.harmonics(c); ++k) {
          const double om = kTwoPi * k * t / kDaysPerYear;
          const auto kk = static_cast<std::size_t>(k - 1);
          direct += (scale(Term::CosConst, k) * h.cos_const[kk] + scale(Term::CosTrend, k) * h.cos_trend[kk] * t) *
                        std::cos(om) +
                    (scale(Term::SinConst, k) * h.sin_const[kk] + scale(Term::SinTrend, k) * h.sin_trend[kk] * t) *
                        std::sin(om);
        }
        direct += scale(Term::Residual, 0) * b.coefficients(c).residual_at(s, t);
        CHECK(evaluate_component_flux(b, c, a, CellId{s}, t) == doctest::Approx(direct).epsilon(1e-12));
      }
  }
}

TEST_CASE("net flux and NEE identities") {
  const auto w = make_toy_world();
  const auto& b = *w.basis;
  const auto& layout = b.layout();
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 0.5);
  for (int k = 0; k < 100; ++k) {
    Eigen::VectorXd a(static_cast<Eigen::Index>(layout.size()));
    for (auto& v : a) v = nd(rng);
    const CellId s{static_cast<std::size_t>(k) % b.grid().size()};
    const double t = 0.5 + (k % 30);
    const double g = evaluate_component_flux(b, Component::Gpp, block(a, layout, Component::Gpp), s, t);
    const double r = evaluate_component_flux(b, Component::Resp, block(a, layout, Component::Resp), s, t);
    const double o = evaluate_component_flux(b, Component::Ocean, block(a, layout, Component::Ocean), s, t);
    CHECK(evaluate_nee(b, a, s, t) == doctest::Approx(g + r).epsilon(1e-13));
    CHECK(evaluate_net_flux(b, a, s, t) == doctest::Approx(g + r + o + b.other(s, t)).epsilon(1e-13));
  }
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout.size()));
  const CellId s{1};
  const double x0 = b.bottom_up(Component::Gpp, s, 3.5) + b.bottom_up(Component::Resp, s, 3.5) +
                    b.bottom_up(Component::Ocean, s, 3.5) + b.other(s, 3.5);
  CHECK(evaluate_net_flux(b, zero, s, 3.5) == doctest::Approx(x0));
}

TEST_CASE("aggregation matrices match direct aggregation") {
  const auto w = make_toy_world();
  const auto& b = *w.basis;
  const auto& layout = b.layout();
  const auto agg = build_aggregation(b);
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd(0.0, 0.4);
  for (auto c : kComponents) {
    const auto n = static_cast<Eigen::Index>(layout.component_size(c));
    Eigen::VectorXd a1(n), a2(n);
    for (auto& v : a1) v = nd(rng);
    for (auto& v : a2) v = nd(rng);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(n);
    for (int r = 1; r <= layout.regions(); ++r)
      for (int q = 1; q <= layout.periods(); ++q) {
        const auto row = static_cast<Eigen::Index>(spatiotemporal_index(RegionId{r}, PeriodId{q}, layout.periods()));
        const double base = aggregate_flux(b, zero, RegionId{r}, PeriodId{q}, c);
        const double f1 = aggregate_flux(b, a1, RegionId{r}, PeriodId{q}, c);
        const double f2 = aggregate_flux(b, a2, RegionId{r}, PeriodId{q}, c);
        const double f12 = aggregate_flux(b, a1 + a2, RegionId{r}, PeriodId{q}, c);
        const double scale = std::abs(base) + 1.0;
        CHECK(std::abs(base - agg.bottom_up[index_of(c)](row)) <= 1e-10 * scale);
        CHECK(std::abs((f1 - base) - agg.phi[index_of(c)].row(row).dot(a1)) <= 1e-10 * scale);
        CHECK(std::abs((f12 - base) - ((f1 - base) + (f2 - base))) <= 1e-10 * scale);
      }
  }
}

TEST_CASE("hand quadrature of a constant field") {
  // One region of two cells, two periods; flux equals 2 in cell 0 and -1 in cell 1.
  const auto grid = std::make_shared<SpatialGrid>(std::vector<Cell>{{0, 0, 3.0, 1}, {0, 1, 5.0, 1}});
  const auto regions = std::make_shared<RegionPartition>(std::vector<int>{1, 2},
                                                         std::vector<RegionInfo>{{"A", "", RegionType::Land},
                                                                                 {"B", "", RegionType::Land}});
  const auto periods = std::make_shared<TimePartition>(std::vector<double>{0.0, 4.0, 10.0});
  const TimeAxis axis{0.5, 1.0, 400};
  Eigen::MatrixXd v(2, 400);
  v.row(0).setConstant(2.0);
  v.row(1).setConstant(-1.0);
  Eigen::MatrixXd zeros = Eigen::MatrixXd::Zero(2, 400);
  std::array<DecompositionCoefficients, 3> comps{fit_decomposition(axis, v, 1), fit_decomposition(axis, zeros, 1),
                                                 fit_decomposition(axis, zeros, 1)};
  const auto basis = build_basis(grid, regions, periods, comps, SampledField{axis, zeros});
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(basis.layout().component_size(Component::Gpp)));
  CHECK(aggregate_flux(basis, zero, RegionId{1}, PeriodId{1}, Component::Gpp) == doctest::Approx(6.0));
  CHECK(aggregate_flux(basis, zero, RegionId{2}, PeriodId{2}, Component::Gpp) == doctest::Approx(-5.0));
  const auto lin = linear_aggregates(basis);
  CHECK(lin.intercept[0][0] == doctest::Approx(6.0));
  CHECK(lin.intercept[0][1] == doctest::Approx(-5.0));
}

TEST_CASE("basis elements vanish outside their partition") {
  const auto w = make_toy_world();
  const auto& b = *w.basis;
  const auto& layout = b.layout();
  for (std::size_t s = 0; s < b.grid().size(); ++s)
    for (std::size_t i = 0; i < b.axis().count; ++i) {
      const RegionId r = b.regions().region_of(CellId{s});
      const PeriodId q{b.sample_periods()[i]};
      for (const auto& e : b.phi_sample(Component::Resp, s, i).entries) {
        const auto el = layout.element(layout.offset(Component::Resp) + e.index);
        CHECK(el.region == r);
        if (el.term == Term::Residual) CHECK(el.period == q);
      }
    }
}

TEST_CASE("residual extension reuses the most recent year") {
  DecompositionCoefficients dc;
  dc.harmonics = 0;
  dc.axis = TimeAxis{0.5, 1.0, 800};
  dc.cells.resize(1);
  dc.residual.resize(1, 800);
  for (int i = 0; i < 800; ++i) dc.residual(0, i) = i;
  CHECK(dc.residual_at(0, 10.5) == 10.0);
  CHECK(dc.residual_at(0, 800.5) == 800.0 - 365.0);
  CHECK(dc.residual_at(0, 900.5) == 900.0 - 365.0);
  CHECK(dc.residual_at(0, 1200.5) == 1200.0 - 730.0);
  CHECK_THROWS_AS(dc.residual_at(0, -1.0), RangeError);
}

TEST_CASE("bottom-up file round trip") {
  BottomUpFields f;
  f.axis = TimeAxis{0.5, 1.0, 3};
  f.fields["gpp"] = Eigen::MatrixXd{{-1.0, -2.0, -3.0}, {-0.5, -0.25, -0.125}};
  f.fields["resp"] = Eigen::MatrixXd{{1.0, 2.0, 3.0}, {0.1, 0.2, 0.3}};
  const auto path = std::filesystem::temp_directory_path() / "fluxinv_bottom_up.csv";
  write_file(path, format_bottom_up(f));
  const auto back = read_bottom_up(path, 2);
  CHECK(back.axis.count == 3);
  CHECK(back.at("gpp")(1, 2) == -0.125);
  CHECK(back.at("resp")(0, 1) == 2.0);
  CHECK_THROWS_AS(read_bottom_up(path, 1), IoError);
  write_file(path, "cell_id,time,component,value\n0,0.5,gpp,1\n0,1.5,gpp,1\n1,0.5,gpp,2\n");
  CHECK_THROWS_AS(read_bottom_up(path, 2), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("basis cache round trip and corruption") {
  const auto w = make_toy_world();
  BasisCacheContents contents;
  contents.content_hash = 0x1234abcdULL;
  for (auto c : kComponents) contents.components[index_of(c)] = w.basis->coefficients(c);
  contents.other = SampledField{w.fields.axis, w.fields.at("other")};
  const auto path = std::filesystem::temp_directory_path() / "fluxinv_basis_cache.bin";
  write_basis_cache(path, contents);
  CHECK(peek_basis_cache_hash(path).value() == 0x1234abcdULL);
  const auto back = read_basis_cache(path);
  CHECK(back.components[1].cells[3].cos_trend[2] == contents.components[1].cells[3].cos_trend[2]);
  CHECK(back.components[2].residual == contents.components[2].residual);
  CHECK(back.other.values == contents.other.values);

  auto bytes = read_file(path);
  bytes[2] = 'Z';
  write_file(path, bytes);
  CHECK_THROWS_AS(read_basis_cache(path), CacheInvalidError);
  CHECK_THROWS_AS(peek_basis_cache_hash(path), CacheInvalidError);

  bytes = read_file(path);
  bytes[2] = 'X';
  bytes[bytes.size() / 2] ^= 0x5a;
  write_file(path, bytes);
  CHECK_THROWS_AS(read_basis_cache(path), CacheInvalidError);
  write_file(path, "FLX");
  CHECK_THROWS_AS(read_basis_cache(path), CacheInvalidError);
  std::filesystem::remove(path);
  CHECK_FALSE(peek_basis_cache_hash(path).has_value());
}
