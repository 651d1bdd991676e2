// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <unistd.h>
#include <vector>

#include "fixtures.hpp"
#include "fluxinv/cli.hpp"
#include "fluxinv/data_model.hpp"
#include "fluxinv/evaluation.hpp"
#include "fluxinv/osse.hpp"
#include "fluxinv/prior.hpp"
#include "fluxinv/samplers.hpp"
#include "fluxinv/sif_link.hpp"
#include "fluxinv/util.hpp"

using namespace fluxinv;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------- moments

struct Moments2 {
  Eigen::Vector2d mean;
  Eigen::Matrix2d cov;
  Eigen::Vector2d mean_se;
  Eigen::Matrix2d cov_se;
};

Moments2 moments(const std::vector<Eigen::Vector2d>& xs, bool correlated) {
  const auto n = static_cast<double>(xs.size());
  Moments2 m;
  m.mean.setZero();
  for (const auto& x : xs) m.mean += x;
  m.mean /= n;
  m.cov.setZero();
  for (const auto& x : xs) m.cov += (x - m.mean) * (x - m.mean).transpose();
  m.cov /= n;
  auto se = [&](const std::function<double(const Eigen::Vector2d&)>& f) {
    std::vector<double> v;
    v.reserve(xs.size());
    for (const auto& x : xs) v.push_back(f(x));
    double mu = 0.0, var = 0.0;
    for (double a : v) mu += a;
    mu /= n;
    for (double a : v) var += (a - mu) * (a - mu);
    var /= n;
    return std::sqrt(var / (correlated ? effective_sample_size(v) : n));
  };
  for (int i = 0; i < 2; ++i) {
    m.mean_se(i) = se([&](const Eigen::Vector2d& x) { return x(i); });
    for (int j = 0; j < 2; ++j)
      m.cov_se(i, j) = se([&](const Eigen::Vector2d& x) { return (x(i) - m.mean(i)) * (x(j) - m.mean(j)); });
  }
  return m;
}

// ---------------------------------------------------------------- criteria

Outcome truncated_gaussian() {
  const auto start = std::chrono::steady_clock::now();
  TruncatedGaussian one(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1), Eigen::VectorXd::Zero(1),
                        Eigen::MatrixXd::Identity(1, 1));
  Rng rng = make_rng(2024, "acceptance/hmc-1d");
  Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 1.0);
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    x = exact_hmc_step(one, x, rng);
    sum += x(0);
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double target = std::sqrt(2.0 / std::numbers::pi);
  const double rel = std::abs(sum / n - target) / target;

  Eigen::Matrix2d cov;
  cov << 1.0, 0.6, 0.6, 1.5;
  const Eigen::Vector2d mu(0.3, -0.2);
  Eigen::MatrixXd phi(2, 2);
  phi << 1.0, 0.0, 1.0, 1.0;
  const Eigen::Vector2d d(0.0, 0.5);
  const auto two = TruncatedGaussian::from_covariance(mu, cov, d, phi);
  Rng r2 = make_rng(17, "acceptance/hmc-2d");
  Eigen::VectorXd y = Eigen::Vector2d(1.0, 0.0);
  std::vector<Eigen::Vector2d> hmc, rej;
  for (int i = 0; i < n; ++i) {
    y = exact_hmc_step(two, y, r2);
    hmc.emplace_back(y);
  }
  Rng rr = make_rng(18, "acceptance/rejection");
  std::normal_distribution<double> z;
  const Eigen::Matrix2d l = cov.llt().matrixL();
  while (rej.size() < static_cast<std::size_t>(n)) {
    const Eigen::Vector2d c = mu + l * Eigen::Vector2d(z(rr), z(rr));
    if ((d + phi * c).minCoeff() >= 0.0) rej.push_back(c);
  }
  const auto a = moments(hmc, true), b = moments(rej, false);
  double worst = 0.0;  // largest deviation in units of the combined standard error
  for (int i = 0; i < 2; ++i) {
    worst = std::max(worst, std::abs(a.mean(i) - b.mean(i)) / std::hypot(a.mean_se(i), b.mean_se(i)));
    for (int j = 0; j < 2; ++j)
      worst = std::max(worst, std::abs(a.cov(i, j) - b.cov(i, j)) / std::hypot(a.cov_se(i, j), b.cov_se(i, j)));
  }
  return {rel < 0.01 && seconds <= 10.0 && worst < 3.0,
          "1-D mean rel err " + fmt("%.2e", rel) + " in " + fmt("%.2f", seconds) + " s; 2-D worst " +
              fmt("%.2f", worst) + " SE"};
}

Outcome sif_screening() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(1.0, 3.0);
  std::normal_distribution<double> e(0.0, 0.09);
  std::vector<GppSifPair> linear(100);
  for (auto& p : linear) {
    p.gpp = u(rng);
    p.sif = 0.3 * p.gpp + e(rng);
  }
  const auto lv = apply_validity_criteria(linear, fit_cell_month(linear));

  std::mt19937_64 rc(21);
  std::uniform_real_distribution<double> uc(-1.0, 1.0);
  std::normal_distribution<double> ec(0.0, 0.05);
  std::vector<GppSifPair> cubic(200);
  for (auto& p : cubic) {
    const double s = uc(rc);
    p.gpp = 2.0 + s;
    p.sif = 1.0 + 0.2 * s + 1.5 * s * s * s + ec(rc);
  }
  const auto cv = apply_validity_criteria(cubic, fit_cell_month(cubic));

  std::mt19937_64 rk(9);
  std::normal_distribution<double> ek(0.0, 0.02);
  std::vector<GppSifPair> counted;
  for (int i = 0; i < 29; ++i) {
    const double g = u(rk);
    counted.push_back({g, 0.3 * g + ek(rk)});
  }
  for (int i = 0; i < 20; ++i) counted.push_back({0.05 + 0.005 * i, 0.3 * (0.05 + 0.005 * i)});
  const auto at29 = apply_validity_criteria(counted, fit_cell_month(counted));
  counted.push_back({2.0, 0.6});
  const auto at30 = apply_validity_criteria(counted, fit_cell_month(counted));

  const bool ok = lv.valid && lv.reasons == kReasonNone && (cv.reasons & kReasonAnova) != 0 &&
                  (at29.reasons & kReasonCount) != 0 && (at30.reasons & kReasonCount) == 0;
  return {ok, "linear " + reason_string(lv.reasons) + "; cubic " + reason_string(cv.reasons) + " (p " +
                  fmt("%.1e", cv.anova_p) + "); 29 positive " + reason_string(at29.reasons) + ", 30 positive " +
                  reason_string(at30.reasons)};
}

Outcome decomposition_round_trip(const DeskScenario& sc) {
  double worst = 0.0;
  // Error relative to the largest magnitude of each field.
  auto check = [&](const BottomUpFields& f, const char* name, int k) {
    const auto& v = f.at(name);
    const double scale = v.cwiseAbs().maxCoeff();
    if (scale == 0.0) return;
    const auto dc = fit_decomposition(f.axis, v, k);
    for (Eigen::Index s = 0; s < v.rows(); ++s)
      for (std::size_t i = 0; i < f.axis.count; ++i) {
        const double t = f.axis.time(i);
        const auto cell = static_cast<std::size_t>(s);
        const double err = dc.cells[cell].fitted(t) + dc.residual_at(cell, t) - v(s, static_cast<Eigen::Index>(i));
        worst = std::max(worst, std::abs(err) / scale);
      }
  };
  const auto toy = testing::make_toy_world();
  for (const char* name : {"gpp", "resp", "ocean"}) check(toy.fields, name, 3);
  check(sc.fields, "gpp", sc.config.harmonics[0]);
  check(sc.fields, "resp", sc.config.harmonics[1]);
  check(sc.fields, "ocean", sc.config.harmonics[2]);

  bool formula = true;
  const auto& layout = sc.basis->layout();
  for (auto c : {Component::Gpp, Component::Resp, Component::Ocean}) {
    const int R = layout.regions(), Q = layout.periods(), K = layout.harmonics(c);
    formula = formula && layout.component_size(c) == static_cast<std::size_t>(2 * R + 4 * K * R + Q * R);
  }
  const auto full = testing::make_toy_world(2, 23, 23, 79, 10.0, 7, {3, 3, 3});
  const auto per_component = full.basis->layout().component_size(Component::Gpp);
  const auto constraints = build_constraints(*full.basis, build_aggregation(*full.basis)).size();
  return {worst <= 1e-10 && formula && per_component == 2139 && constraints == 7268,
          "max rel err " + fmt("%.2e", worst) + "; full-size dimension " + std::to_string(per_component) +
              ", constraints " + std::to_string(constraints)};
}

Outcome error_model() {
  ObservationGroup g;
  g.id = "surface";
  g.series = {"a", "a", "a"};
  g.times = {0.0, 0.5, 1.5};
  g.budgets = Eigen::Vector3d(1.0, 2.0, 0.5);
  g.values = g.baseline = Eigen::VectorXd::Zero(3);
  g.response = Eigen::MatrixXd::Zero(3, 1);
  ErrorParams p;
  p.gamma = 0.8;
  p.rho = 0.7;
  p.length = 1.0;
  const Eigen::MatrixXd target = ErrorCovariance(g, p).dense();
  Rng rng = make_rng(9, "acceptance/replicates");
  const int n = 10000;
  Eigen::Matrix3d acc = Eigen::Matrix3d::Zero();
  for (int k = 0; k < n; ++k) {
    const Eigen::VectorXd e = simulate_observations(g, Eigen::VectorXd::Zero(3), p, rng);
    acc += e * e.transpose();
  }
  acc /= n;
  double worst = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) worst = std::max(worst, std::abs(acc(i, j) - target(i, j)) / std::abs(target(i, j)));

  // Two observations one e-folding time apart, fully correlated share.
  ObservationGroup h;
  h.id = "surface";
  h.series = {"a", "a"};
  h.times = {0.0, 2.0};
  h.budgets = Eigen::Vector2d(1.0, 1.0);
  h.values = h.baseline = Eigen::VectorXd::Zero(2);
  h.response = Eigen::MatrixXd::Zero(2, 1);
  ErrorParams q;
  q.rho = 1.0;
  q.length = 2.0;
  Rng r2 = make_rng(10, "acceptance/e-folding");
  double sxx = 0, syy = 0, sxy = 0;
  for (int k = 0; k < n; ++k) {
    const Eigen::VectorXd e = simulate_observations(h, Eigen::VectorXd::Zero(2), q, r2);
    sxx += e(0) * e(0);
    syy += e(1) * e(1);
    sxy += e(0) * e(1);
  }
  const double r = sxy / std::sqrt(sxx * syy);
  const double se = (1.0 - std::exp(-2.0)) / std::sqrt(static_cast<double>(n));
  const double dev = std::abs(r - std::exp(-1.0)) / se;
  return {worst < 0.05 && dev < 3.0,
          "max rel cov err " + fmt("%.3f", worst) + "; lag-l correlation " + fmt("%.4f", r) + " (" + fmt("%.2f", dev) +
              " SE from exp(-1))"};
}

Outcome crps_oracle() {
  Rng rng = make_rng(11, "acceptance/crps");
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<double> x(100000);
  for (auto& v : x) v = z(rng);
  const double closed = 2.0 * std::exp(-0.0) / std::sqrt(2.0 * std::numbers::pi) - 1.0 / std::sqrt(std::numbers::pi);
  const double got = crps_ensemble(x, 0.0);
  const double rel = std::abs(got - closed) / closed;
  const double perfect = crps_ensemble(std::vector<double>(50, 1.7), 1.7);
  return {rel < 0.01 && perfect == 0.0,
          "N(0,1) at 0: " + fmt("%.5f", got) + " vs " + fmt("%.5f", closed) + "; perfect ensemble " + fmt("%g", perfect)};
}

Outcome pivot_variance(const DeskScenario& sc) {
  AlphaLayout layout = sc.basis->layout();
  layout.set_fixed(fixed_mask(layout, *sc.regions, FixedTermPolicy{}));
  const double tm = sc.periods->midpoint();
  auto reparam = build_reparameterization(sc.linear, tm, layout, *sc.regions);
  const AlphaPrior prior(layout, reparam, PriorSettings{});
  const Eigen::MatrixXd cov = prior.sigma_alpha(AlphaCovarianceParams{});
  std::size_t blocks = 0, good = 0;
  for (const auto& b : reparam.blocks()) {
    const auto ri = static_cast<std::size_t>(b.region.value - 1);
    const double b0 = sc.linear.intercept[index_of(b.component)][ri];
    const double b1 = sc.linear.trend[index_of(b.component)][ri];
    const auto i0 = static_cast<Eigen::Index>(b.intercept_index), i1 = static_cast<Eigen::Index>(b.trend_index);
    auto variance = [&](double t) {
      const double g1 = b1 * t;
      return b0 * b0 * cov(i0, i0) + 2.0 * b0 * g1 * cov(i0, i1) + g1 * g1 * cov(i1, i1);
    };
    ++blocks;
    const double v = variance(tm);
    good += v < variance(sc.periods->start()) && v < variance(sc.periods->end());
  }
  return {blocks > 0 && good == blocks,
          std::to_string(good) + " of " + std::to_string(blocks) + " pivot blocks minimal at the window midpoint"};
}

Outcome nee_preservation(const DeskScenario& sc) {
  const auto& layout = sc.basis->layout();
  const Eigen::VectorXd base = standin_posterior_mean(sc, OsseConfig{}.standin_seed);
  const auto nb = nee_linear_aggregates(layout, *sc.regions, sc.linear, base);
  double worst = 0.0;
  for (auto tag : {CaseTag::PositiveShift, CaseTag::NegativeShift}) {
    const auto t = build_true_flux(tag, layout, *sc.regions, base, sc.linear, OsseConfig{}.delta, {});
    const auto n = nee_linear_aggregates(layout, *sc.regions, sc.linear, t.alpha);
    for (std::size_t k = 0; k < n.size(); ++k)
      worst = std::max(worst, std::abs(n[k] - nb[k]) / std::max(std::abs(nb[k]), 1e-300));
  }
  return {worst <= 1e-10, "max relative change " + fmt("%.2e", worst) + " over " + std::to_string(nb.size()) +
                              " regional intercept and trend aggregates"};
}

// ---------------------------------------------------------------- osse report

struct SummaryRow {
  std::string setup;
  std::map<std::string, double> rmse;
};

struct ParsedReport {
  std::map<std::string, std::vector<SummaryRow>> cases;  // case -> rows
  std::vector<std::string> case_order;
  double min_slack = std::numeric_limits<double>::infinity();
  long hmc_aborts = 0;
  std::size_t experiments = 0;
};

ParsedReport parse_report(const std::string& text) {
  ParsedReport p;
  std::istringstream in(text);
  std::string line;
  bool summary = false;
  std::string table;
  while (std::getline(in, line)) {
    if (line.rfind("[experiment ", 0) == 0) ++p.experiments;
    if (line.rfind("min_slack,", 0) == 0) p.min_slack = std::min(p.min_slack, std::stod(line.substr(10)));
    if (line.rfind("hmc_aborts,", 0) == 0) p.hmc_aborts += std::stol(line.substr(11));
    if (line == "[rmse summary, PgC/yr]") {
      summary = true;
      continue;
    }
    if (summary && !line.empty()) table += line + "\n";
  }
  const auto t = parse_table(table, "osse summary");
  const auto cc = t.column("case"), cs = t.column("setup");
  for (const auto& row : t.rows) {
    SummaryRow r{row[cs], {}};
    for (const auto& name : scored_components()) r.rmse[name] = parse_double(row[t.column(name)], name);
    if (!p.cases.count(row[cc])) p.case_order.push_back(row[cc]);
    p.cases[row[cc]].push_back(r);
  }
  return p;
}

double rmse_of(const std::vector<SummaryRow>& rows, const std::string& setup, const std::string& comp) {
  for (const auto& r : rows)
    if (r.setup == setup) return r.rmse.at(comp);
  throw LookupError("setup " + setup + " missing from the report");
}

Outcome osse_ordering(const ParsedReport& p) {
  bool ok = true;
  std::string detail;
  for (const char* name : {"positive-shift", "negative-shift"}) {
    const auto& rows = p.cases.at(name);
    const double a = rmse_of(rows, "inferred-rlt_sif", "gpp");
    const double b = rmse_of(rows, "fixed-rlt_sif", "gpp");
    const double c = rmse_of(rows, "inferred-rlt_no-sif", "gpp");
    const bool here = a < b && b < c && c >= 2.0 * a;
    ok = ok && here;
    detail += std::string(detail.empty() ? "" : "; ") + name + " " + fmt("%.3f", a) + " < " + fmt("%.3f", b) + " < " +
              fmt("%.3f", c) + " (x" + fmt("%.1f", c / a) + ")";
  }
  return {ok, detail};
}

Outcome nee_insensitivity(const ParsedReport& p) {
  bool ok = true;
  double worst_nee = 0.0, worst_ocean = 0.0;
  for (const auto& name : p.case_order) {
    for (const char* comp : {"nee", "ocean"}) {
      double lo = std::numeric_limits<double>::infinity(), hi = 0.0, sum = 0.0;
      const auto& rows = p.cases.at(name);
      for (const auto& r : rows) {
        const double v = r.rmse.at(comp);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        sum += v;
      }
      const double spread = (hi - lo) / (sum / static_cast<double>(rows.size()));
      ok = ok && spread <= 0.25;
      (std::string(comp) == "nee" ? worst_nee : worst_ocean) =
          std::max(std::string(comp) == "nee" ? worst_nee : worst_ocean, spread);
    }
  }
  return {ok, "largest relative spread: nee " + fmt("%.3f", worst_nee) + ", ocean " + fmt("%.3f", worst_ocean)};
}

}  // namespace

int main() {
  const auto root = fs::temp_directory_path() / ("fluxinv_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);

  int failures = 0;
  auto line = [&](int id, const char* title, const Outcome& o) {
    std::printf("criterion %02d %s  %s: %s\n", id, o.pass ? "PASS" : "FAIL", title, o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  };
  auto guarded = [&](int id, const char* title, const std::function<Outcome()>& f) {
    try {
      line(id, title, f());
    } catch (const std::exception& e) {
      line(id, title, {false, std::string("error: ") + e.what()});
    }
  };

  const DeskScenario desk = build_desk_scenario();

  // Full OSSE grid through the command layer, run twice with the same seed.
  cli::RunConfig config;
  config.seed = OsseConfig{}.seed;
  config.jobs = std::max(1u, std::min(4u, std::thread::hardware_concurrency()));
  cli::OsseManifest manifest;
  std::string report_a, report_b;
  std::string osse_error;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    config.output = root / "first";
    report_a = cli::cmd_osse(config, manifest);
  } catch (const std::exception& e) {
    osse_error = e.what();
  }
  const double osse_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ParsedReport parsed;
  if (osse_error.empty()) parsed = parse_report(report_a);

  guarded(1, "truncated Gaussian sampler", truncated_gaussian);
  guarded(2, "constraint satisfaction", [&]() -> Outcome {
    if (!osse_error.empty()) return {false, "osse failed: " + osse_error};
    return {parsed.experiments == 16 && parsed.min_slack >= -1e-9,
            "min normalised slack " + fmt("%.3e", parsed.min_slack) + " over stored draws of " +
                std::to_string(parsed.experiments) + " experiments (" + std::to_string(parsed.hmc_aborts) +
                " HMC aborts)"};
  });
  guarded(3, "OSSE GPP ordering", [&]() -> Outcome {
    if (!osse_error.empty()) return {false, "osse failed: " + osse_error};
    auto o = osse_ordering(parsed);
    o.detail += "; R=" + std::to_string(desk.basis->layout().regions()) +
                " Q=" + std::to_string(desk.basis->layout().periods()) + " N=" + std::to_string(desk.records.size()) +
                ", grid " + fmt("%.0f", osse_seconds) + " s";
    return o;
  });
  guarded(4, "NEE and ocean insensitivity", [&]() -> Outcome {
    if (!osse_error.empty()) return {false, "osse failed: " + osse_error};
    return nee_insensitivity(parsed);
  });
  guarded(5, "NEE preservation of shifts", [&] { return nee_preservation(desk); });
  guarded(6, "SIF link screening", sif_screening);
  guarded(7, "decomposition round trip and dimensions", [&] { return decomposition_round_trip(desk); });
  guarded(8, "error model fidelity", error_model);
  guarded(9, "CRPS estimator", crps_oracle);
  guarded(10, "pivot variance", [&] { return pivot_variance(desk); });
  guarded(11, "determinism", [&]() -> Outcome {
    if (!osse_error.empty()) return {false, "osse failed: " + osse_error};
    config.output = root / "second";
    config.jobs = 1;
    report_b = cli::cmd_osse(config, manifest);
    const bool same = report_a == report_b;
    bool scores_same = true;
    for (const auto& entry : fs::directory_iterator(root / "first" / "osse"))
      if (entry.is_directory() && fs::exists(entry.path() / "scores.csv"))
        scores_same = scores_same && read_file(entry.path() / "scores.csv") ==
                                         read_file(root / "second" / "osse" / entry.path().filename() / "scores.csv");
    return {same && scores_same, std::string(same ? "report.txt identical" : "report.txt differs") + " (" +
                                     std::to_string(report_a.size()) + " bytes); per-experiment scores " +
                                     (scores_same ? "identical" : "differ")};
  });

  fs::remove_all(root);
  std::printf("%d of 11 criteria passed\n", 11 - failures);
  return failures == 0 ? 0 : 1;
}
