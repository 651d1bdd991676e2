#include "fluxinv/osse.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/QR>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "fluxinv/common.hpp"
#include "fluxinv/util.hpp"

namespace fluxinv {

namespace {

constexpr int kLat = 8;
constexpr int kLon = 12;
constexpr double kSecondsPerDay = 86400.0;

// Land occupies rows 2..5; columns 0..3, 4..7 and 8 form regions 1, 2, 3.
int desk_region(int i_lat, int i_lon) {
  if (i_lat < 2 || i_lat > 5 || i_lon > 8) return 4;
  return i_lon < 4 ? 1 : (i_lon < 8 ? 2 : 3);
}

std::size_t cell_at(int i_lat, int i_lon) {
  return static_cast<std::size_t>(i_lat) * kLon + static_cast<std::size_t>(i_lon);
}

// Projects out the span of the harmonic regression design (intercept, trend,
// and K trend-modulated annual harmonics) so a noise series lands entirely in
// the decomposition residual.
class ResidualProjector {
 public:
  ResidualProjector(const TimeAxis& axis, int harmonics) {
    const auto n = static_cast<Eigen::Index>(axis.count);
    Eigen::MatrixXd d(n, 2 + 4 * harmonics);
    const double w = 2.0 * std::numbers::pi / kDaysPerYear;
    for (Eigen::Index i = 0; i < n; ++i) {
      // Centred, scaled time keeps the design well conditioned.
      const double t = axis.time(static_cast<std::size_t>(i));
      const double u = (t - axis.time(axis.count / 2)) / kDaysPerYear;
      d(i, 0) = 1.0;
      d(i, 1) = u;
      for (int k = 1; k <= harmonics; ++k) {
        const double c = std::cos(k * w * t), s = std::sin(k * w * t);
        d(i, 4 * k - 2) = c;
        d(i, 4 * k - 1) = u * c;
        d(i, 4 * k) = s;
        d(i, 4 * k + 1) = u * s;
      }
    }
    q_ = Eigen::HouseholderQR<Eigen::MatrixXd>(d).householderQ() * Eigen::MatrixXd::Identity(n, d.cols());
  }
  Eigen::VectorXd operator()(const Eigen::VectorXd& v) const { return v - q_ * (q_.transpose() * v); }

 private:
  Eigen::MatrixXd q_;
};

// Unit-variance AR(1) series with a 15-day memory: month-to-month anomalies.
Eigen::VectorXd ar1_series(std::size_t days, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double phi = std::exp(-1.0 / 15.0), innov = std::sqrt(1.0 - phi * phi);
  Eigen::VectorXd a(static_cast<Eigen::Index>(days));
  double x = normal(rng);
  for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = x = phi * x + innov * normal(rng);
  return a;
}

Eigen::VectorXd white_series(std::size_t days, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd a(static_cast<Eigen::Index>(days));
  for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = normal(rng);
  return a;
}

// Bottom-up fields. Every cell's mean shape is an exact harmonic-regression
// curve; the additive noise is projected onto the residual space, so linear
// and seasonal basis patterns are proportional to the intended shapes and the
// gpp and resp trend aggregates keep the ratio of their intercepts.
void make_fields(DeskScenario& sc, std::size_t days) {
  const auto& grid = *sc.grid;
  const auto cells = static_cast<Eigen::Index>(grid.size());
  auto& f = sc.fields;
  f.axis = TimeAxis{0.5, 1.0, days};
  for (const char* name : {"gpp", "resp", "ocean", "other", "sif"})
    f.fields[name] = Eigen::MatrixXd::Zero(cells, static_cast<Eigen::Index>(days));
  Rng rng = make_rng(sc.config.seed, "desk/fields");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double w = 2.0 * std::numbers::pi / kDaysPerYear;
  const int kmax = *std::max_element(sc.config.harmonics.begin(), sc.config.harmonics.end());
  const ResidualProjector residual(f.axis, kmax);
  const double spread = sc.config.resp_ratio_spread;

  for (Eigen::Index s = 0; s < cells; ++s) {
    const auto cid = CellId{static_cast<std::size_t>(s)};
    const double lat = grid.cell(cid).lat;
    const int region = sc.regions->region_of(cid).value;
    const bool land = sc.regions->is_land(RegionId{region});
    const double peak = lat >= 0.0 ? 196.0 : 15.0;
    const double amp = std::abs(lat) < 30.0 ? 0.3 : 0.8;
    const double g = 3.0e-3 * (0.7 + 0.6 * unif(rng));
    const double r = g * (1.0 - spread + 2.0 * spread * unif(rng));
    const Eigen::VectorXd z = white_series(days, rng);
    const Eigen::VectorXd noise_g = residual(0.05 * z + 0.1 * ar1_series(days, rng));
    const Eigen::VectorXd noise_r = residual(0.05 * white_series(days, rng) + 0.1 * ar1_series(days, rng));
    const Eigen::VectorXd noise_o = residual(0.1 * white_series(days, rng) + 0.3 * ar1_series(days, rng));
    const Eigen::VectorXd noise_s = white_series(days, rng);
    const double noise_sd = std::sqrt(noise_g.squaredNorm() / static_cast<double>(days));
    for (std::size_t n = 0; n < days; ++n) {
      const auto i = static_cast<Eigen::Index>(n);
      const double t = f.axis.time(n);
      const double trend = 1.0 + 5.0e-5 * t;
      if (!land) {
        f.fields["ocean"](s, i) = -2.0e-4 * ((1.0 + 0.5 * std::cos(w * (t - peak))) * trend + noise_o(i));
        continue;
      }
      const double gpp = -g * ((1.0 + amp * std::cos(w * (t - peak))) * trend + noise_g(i));
      const double resp = r * ((1.0 + 0.5 * amp * std::cos(w * (t - peak - 30.0))) * trend + noise_r(i));
      double sif = 0.05 - 300.0 * gpp + 0.02 * noise_s(i);
      // The small region's SIF is cubic in the gpp anomaly, so its link fails screening.
      if (region == sc.rlt_fixed_region) sif += 0.3 * std::pow(noise_g(i) / noise_sd, 3);
      f.fields["gpp"](s, i) = gpp;
      f.fields["resp"](s, i) = resp;
      f.fields["other"](s, i) = 1.0e-4;
      f.fields["sif"](s, i) = sif;
      sc.sif_pairs.push_back({static_cast<std::size_t>(s), t, gpp, sif});
    }
  }
}

struct NetworkBuilder {
  std::vector<ObservationRecord> records;
  std::size_t serial = 0;

  void add(const std::string& group, const std::string& series, std::size_t cell, double t, double budget) {
    char id[32];
    std::snprintf(id, sizeof id, "d%06zu", serial++);
    records.push_back({id, group, series, cell, t, 0.0, budget});
  }
  // Regular in-situ sampling from `first` every `interval` days at fixed cells.
  void stations(const std::string& group, const std::vector<std::pair<int, int>>& sites, double first,
                double interval, double end, double budget) {
    for (std::size_t k = 0; k < sites.size(); ++k)
      for (double t = first; t < end - 1.0; t += interval)
        add(group, group + "-" + std::to_string(k + 1), cell_at(sites[k].first, sites[k].second), t, budget);
  }
};

}  // namespace

DeskScenario build_desk_scenario(const DeskScenarioConfig& config) {
  if (config.months < 3) throw ConfigError("the desk scenario needs at least 3 months");
  if (config.station_interval_days < 1 || config.sif_bands_per_track < 1)
    throw ConfigError("desk sampling intervals must be positive");
  DeskScenario sc;
  sc.config = config;
  sc.calendar = Calendar(config.start_year, 1, 1);
  sc.sif_link = SifLinkModel(sc.calendar);

  auto grid = SpatialGrid::regular(kLat, kLon);
  std::vector<int> ids(grid.size());
  for (int i = 0; i < kLat; ++i)
    for (int j = 0; j < kLon; ++j) {
      const int r = desk_region(i, j);
      ids[cell_at(i, j)] = r;
      grid.set_land_fraction(CellId{cell_at(i, j)}, r == 4 ? 0.0 : 1.0);
    }
  sc.grid = std::make_shared<SpatialGrid>(std::move(grid));
  sc.regions = std::make_shared<RegionPartition>(
      ids, std::vector<RegionInfo>{{"L1", "desk land west", RegionType::Land},
                                   {"L2", "desk land east", RegionType::Land},
                                   {"L3", "desk land small", RegionType::Land},
                                   {"O1", "desk ocean", RegionType::Ocean}});
  sc.periods = std::make_shared<TimePartition>(
      TimePartition::monthly(sc.calendar, config.start_year, 1, config.months));
  sc.window = {2, config.months - 1};
  const double end = sc.periods->end();
  make_fields(sc, static_cast<std::size_t>(std::llround(end - sc.periods->start())));

  const auto& ax = sc.fields.axis;
  std::array<DecompositionCoefficients, kComponentCount> comps{
      fit_decomposition(ax, sc.fields.at("gpp"), config.harmonics[0]),
      fit_decomposition(ax, sc.fields.at("resp"), config.harmonics[1]),
      fit_decomposition(ax, sc.fields.at("ocean"), config.harmonics[2])};
  sc.basis = std::make_shared<FluxBasisSet>(
      build_basis(sc.grid, sc.regions, sc.periods, std::move(comps), SampledField{ax, sc.fields.at("other")}));
  sc.aggregation = build_aggregation(*sc.basis);
  sc.linear = linear_aggregates(*sc.basis);
  sc.constraints = build_constraints(*sc.basis, sc.aggregation);

  ValidityConfig validity;
  validity.orientation = -1.0;
  sc.sif_link = build_sif_link(sc.sif_pairs, sc.calendar, validity);
  sc.sif_link.set_bottom_up(SampledField{ax, sc.fields.at("sif")});

  // Mole-fraction network.
  NetworkBuilder net;
  const double step = config.station_interval_days;
  const double msc = config.mole_fraction_budget_scale;
  net.stations("surface", {{1, 2}, {6, 5}, {3, 1}, {4, 5}, {3, 10}, {5, 8}}, 3.5, step, end, 0.25 * msc);
  net.stations("tower", {{2, 2}, {5, 6}, {4, 8}}, 1.5, 10.0, end, 1.0 * msc);
  net.stations("aircraft", {{4, 0}, {3, 4}}, 5.5, 14.0, end, 0.25 * msc);
  net.stations("shipboard", {{0, 6}, {7, 3}}, 9.5, 14.0, end, 0.25 * msc);
  const auto& b = sc.periods->boundaries();
  for (int m = 0; m < config.months; ++m)
    for (int k = 0; k < config.xco2_tracks_per_month; ++k) {
      const int col = (5 * m + 7 * k) % kLon;
      const double t0 = b[static_cast<std::size_t>(m)] + 6.25 + 13.0 * k;
      const std::string series = "xco2-" + std::to_string(m + 1) + "-" + std::to_string(k + 1);
      for (int row = 0; row < kLat; ++row)
        net.add("oco2-xco2", series, cell_at(row, col), t0 + 10.0 * row / kSecondsPerDay, 0.5 * msc);
    }
  const std::size_t transported = net.records.size();

  // SIF bands; cell-months with an invalid link are screened out.
  for (int r = 1; r <= sc.regions->region_count(); ++r) {
    if (!sc.regions->is_land(RegionId{r})) continue;
    const auto cells = sc.regions->cells_in(RegionId{r});
    for (int m = 0; m < config.months; ++m)
      for (int k = 0; k < config.sif_tracks_per_month; ++k) {
        const std::size_t cell = cells[static_cast<std::size_t>(3 * m + k) % cells.size()];
        const double t0 = b[static_cast<std::size_t>(m)] + 4.55 + 12.0 * k + 0.02 * r;
        const auto& link = sc.sif_link.at(cell, sc.calendar.month_of(t0));
        if (!link.valid) continue;
        const std::string series = "sif-" + std::to_string(r) + "-" + std::to_string(m + 1) + "-" + std::to_string(k + 1);
        for (int band = 0; band < config.sif_bands_per_track; ++band)
          net.add("oco2-sif", series, cell, t0 + 10.0 * band / kSecondsPerDay, config.sif_band_variance + link.mse);
      }
  }
  sc.records = std::move(net.records);

  const std::span<const ObservationRecord> all(sc.records);
  const auto mf = all.subspan(0, transported);
  const auto sif = all.subspan(transported);
  ToyTransport transport(sc.grid, config.transport);
  const auto full = static_cast<Eigen::Index>(sc.basis->layout().size());
  sc.response.resize(static_cast<Eigen::Index>(sc.records.size()), full);
  sc.baseline.resize(static_cast<Eigen::Index>(sc.records.size()));
  const auto n_mf = static_cast<Eigen::Index>(transported);
  sc.response.topRows(n_mf) = transport.response_matrix(*sc.basis, mf, config.jobs);
  sc.baseline.head(n_mf) = transport.baseline(*sc.basis, mf);
  const auto sr = sif_response(sc.sif_link, *sc.basis, sif);
  sc.response.bottomRows(sr.rows.rows()) = sr.rows;
  sc.baseline.tail(sr.baseline.size()) = sr.baseline;
  for (std::size_t i = 0; i < sc.records.size(); ++i) sc.records[i].value = sc.baseline(static_cast<Eigen::Index>(i));

  for (const auto& g : known_groups()) {
    const bool sat = is_satellite_group(g);
    auto e = default_error_params(g, sat ? 1.0 / 1440.0 : 1.0);
    e.gamma = g == "surface" ? 1.25 : g == "tower" ? 0.8 : g == "oco2-xco2" ? 1.5 : 1.0;
    if (sat) e.rho = 0.5;
    sc.truth_errors[g] = e;
  }
  spdlog::debug("desk scenario: {} observations, {} alpha elements", sc.records.size(), full);
  return sc;
}

Eigen::VectorXd standin_posterior_mean(const DeskScenario& sc, std::uint64_t seed) {
  AlphaLayout layout = sc.basis->layout();
  FixedTermPolicy policy;
  policy.infer_rlt = false;
  layout.set_fixed(fixed_mask(layout, *sc.regions, policy));
  auto reparam = build_reparameterization(sc.linear, sc.periods->midpoint(), layout, *sc.regions);
  PriorSettings settings;
  settings.linear_variance = 0.0025;
  settings.trend_variance = 0.01;
  const AlphaPrior prior(layout, std::move(reparam), settings);
  AlphaCovarianceParams p;
  p.tau_beta = {25.0, 25.0, 25.0};
  p.tau_eps = {25.0, 25.0, 25.0};
  p.rho_beta = 0.5;
  p.rho_eps = 0.5;
  p.kappa_bio = 0.5;
  p.kappa_ocean = 0.5;
  const Eigen::MatrixXd cov = prior.sigma_alpha_free(p);
  const Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericalError("stand-in prior covariance is not positive definite");
  Rng rng = make_rng(seed, "standin");
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(cov.rows());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal(rng);
  Eigen::VectorXd alpha = prior.expand(llt.matrixL() * z);
  // Shrink until every row that depends on alpha has slack >= 1e-3; rows with
  // zero coefficients carry their bottom-up slack unchanged.
  const auto& cs = sc.constraints;
  auto min_slack = [&] {
    double m = std::numeric_limits<double>::infinity();
    const Eigen::VectorXd sl = cs.slack(alpha);
    for (Eigen::Index i = 0; i < sl.size(); ++i)
      if (cs.phi.row(i).cwiseAbs().maxCoeff() > 0.0) m = std::min(m, sl(i));
    return m;
  };
  for (int k = 0; k < 60 && min_slack() < 1e-3; ++k) alpha *= 0.5;
  return alpha;
}

// ---------------------------------------------------------------- true fluxes

std::string case_name(CaseTag tag) {
  switch (tag) {
    case CaseTag::BottomUp: return "bottom-up";
    case CaseTag::PreviousMean: return "v2-mean";
    case CaseTag::PositiveShift: return "positive-shift";
    case CaseTag::NegativeShift: return "negative-shift";
  }
  return "unknown";
}

CaseTag parse_case(std::string_view name) {
  for (auto t : kCaseTags)
    if (case_name(t) == name) return t;
  throw ConfigError("unknown true-flux case '" + std::string(name) + "'");
}

TrueFluxCase build_true_flux(CaseTag tag, const AlphaLayout& layout, const RegionPartition& regions,
                             const Eigen::VectorXd& base, const LinearAggregates& aggregates, double delta,
                             std::span<const int> exceptions) {
  TrueFluxCase out{tag, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout.size())), 0.0,
                   {exceptions.begin(), exceptions.end()}};
  if (tag == CaseTag::BottomUp) return out;
  if (base.size() != out.alpha.size()) throw ConfigError("base alpha does not match the layout");
  out.alpha = base;
  if (tag == CaseTag::PreviousMean) return out;
  out.delta = tag == CaseTag::PositiveShift ? delta : -delta;
  for (int r = 1; r <= regions.region_count(); ++r) {
    if (!regions.is_land(RegionId{r})) continue;
    if (std::find(exceptions.begin(), exceptions.end(), r) != exceptions.end()) continue;
    const auto ri = static_cast<std::size_t>(r - 1);
    for (Term term : {Term::Intercept, Term::Trend}) {
      const auto& agg = term == Term::Intercept ? aggregates.intercept : aggregates.trend;
      const double bg = agg[index_of(Component::Gpp)][ri];
      const double br = agg[index_of(Component::Resp)][ri];
      if (br == 0.0 || !std::isfinite(bg / br))
        throw DomainError("respiration linear aggregate is zero in region " + regions.info(RegionId{r}).code);
      const auto ig = static_cast<Eigen::Index>(layout.index(Component::Gpp, term, 0, RegionId{r}));
      const auto ir = static_cast<Eigen::Index>(layout.index(Component::Resp, term, 0, RegionId{r}));
      out.alpha(ig) += out.delta;
      out.alpha(ir) -= out.delta * bg / br;
    }
  }
  return out;
}

std::vector<double> nee_linear_aggregates(const AlphaLayout& layout, const RegionPartition& regions,
                                          const LinearAggregates& aggregates, const Eigen::VectorXd& alpha) {
  std::vector<double> out;
  for (int r = 1; r <= regions.region_count(); ++r) {
    if (!regions.is_land(RegionId{r})) continue;
    const auto ri = static_cast<std::size_t>(r - 1);
    for (Term term : {Term::Intercept, Term::Trend}) {
      const auto& agg = term == Term::Intercept ? aggregates.intercept : aggregates.trend;
      double v = 0.0;
      for (auto c : {Component::Gpp, Component::Resp})
        v += agg[index_of(c)][ri] * alpha(static_cast<Eigen::Index>(layout.index(c, term, 0, RegionId{r})));
      out.push_back(v);
    }
  }
  return out;
}

// ---------------------------------------------------------------- simulation

std::vector<ObservationRecord> simulate_osse_dataset(std::span<const ObservationRecord> records,
                                                     const Eigen::MatrixXd& response, const Eigen::VectorXd& baseline,
                                                     const Eigen::VectorXd& alpha_true,
                                                     const std::map<std::string, ErrorParams>& errors,
                                                     std::uint64_t seed, bool noise) {
  const auto n = static_cast<Eigen::Index>(records.size());
  if (response.rows() != n || baseline.size() != n)
    throw ConfigError("response matrix missing or not aligned with the observations");
  if (response.cols() != alpha_true.size()) throw ConfigError("response matrix does not match the alpha layout");
  const Eigen::VectorXd truth = baseline + response * alpha_true;
  std::vector<ObservationRecord> out(records.begin(), records.end());

  std::map<std::string, std::vector<Eigen::Index>> rows;
  for (Eigen::Index i = 0; i < n; ++i) rows[records[static_cast<std::size_t>(i)].group].push_back(i);
  for (const auto& [id, idx] : rows) {
    const auto it = errors.find(id);
    if (it == errors.end()) throw ConfigError("no error parameters for group '" + id + "'");
    ObservationGroup g;
    g.id = id;
    const auto m = static_cast<Eigen::Index>(idx.size());
    g.values.resize(m);
    g.baseline.resize(m);
    g.budgets.resize(m);
    Eigen::VectorXd t(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto& rec = records[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])];
      g.budgets(k) = rec.error_budget;
      g.series.push_back(rec.series_id);
      g.times.push_back(rec.time);
      g.obs_ids.push_back(rec.obs_id);
      g.cells.push_back(rec.cell);
      t(k) = truth(idx[static_cast<std::size_t>(k)]);
    }
    g.values = t;
    g.baseline = t;
    Eigen::VectorXd z = t;
    if (noise) {
      Rng rng = make_rng(seed, "simulate/" + id);
      z = simulate_observations(g, t, it->second, rng);
    }
    for (Eigen::Index k = 0; k < m; ++k) out[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])].value = z(k);
  }
  return out;
}

// ---------------------------------------------------------------- experiments

std::string InversionSetup::tag() const {
  return std::string(infer_rlt ? "inferred-rlt" : "fixed-rlt") + (include_sif ? "_sif" : "_no-sif");
}

std::vector<InversionSetup> setup_grid(std::span<const int> rlt_fixed_regions) {
  std::vector<InversionSetup> out;
  for (bool infer : {true, false})
    for (bool sif : {true, false})
      out.push_back({sif, infer, {rlt_fixed_regions.begin(), rlt_fixed_regions.end()}});
  return out;
}

ExperimentResult run_experiment(const DeskScenario& sc, const TrueFluxCase& truth,
                                std::span<const ObservationRecord> data, const InversionSetup& setup,
                                const OsseConfig& config) {
  ExperimentResult res;
  res.id = case_name(truth.tag) + "." + setup.tag();
  res.tag = truth.tag;
  res.setup = setup;

  AlphaLayout layout = sc.basis->layout();
  FixedTermPolicy policy;
  policy.infer_rlt = setup.infer_rlt;
  policy.rlt_fixed_regions = setup.rlt_fixed_regions;
  layout.set_fixed(fixed_mask(layout, *sc.regions, policy));
  auto reparam = build_reparameterization(sc.linear, sc.periods->midpoint(), layout, *sc.regions);
  const AlphaPrior prior(layout, std::move(reparam), config.prior);

  InferenceModel model;
  model.prior = &prior;
  model.hyper = config.hyper;
  model.groups = build_groups(data, sc.response, sc.baseline);
  if (!setup.include_sif)
    std::erase_if(model.groups, [](const ObservationGroup& g) { return g.id == "oco2-sif"; });
  for (const auto& g : model.groups) {
    auto e = sc.truth_errors.at(g.id);
    e.gamma = 1.0;
    model.errors[g.id] = e;
  }
  model.constraints = sc.constraints;

  GibbsConfig gibbs = config.gibbs;
  gibbs.seed = substream_seed(config.seed, "invert/" + res.id);
  res.samples = run_gibbs(model, gibbs);
  res.scores = score_experiment(res.id, res.samples, truth.alpha, sc.aggregation, layout, *sc.regions, sc.window);
  res.min_slack = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < res.samples.draws(); ++k)
    res.min_slack = std::min(res.min_slack, sc.constraints.slack(res.samples.alpha_full(k)).minCoeff());
  return res;
}

ExperimentGrid run_experiment_grid(const DeskScenario& sc, const OsseConfig& config) {
  ExperimentGrid grid;
  const Eigen::VectorXd base = standin_posterior_mean(sc, config.standin_seed);
  const std::vector<int> exceptions{sc.rlt_fixed_region};
  for (auto tag : config.cases) {
    grid.truths.push_back(
        build_true_flux(tag, sc.basis->layout(), *sc.regions, base, sc.linear, config.delta, exceptions));
    grid.data.push_back(simulate_osse_dataset(sc.records, sc.response, sc.baseline, grid.truths.back().alpha,
                                              sc.truth_errors, substream_seed(config.seed, "simulate/" + case_name(tag))));
  }
  const auto setups = setup_grid(exceptions);
  const std::size_t total = grid.truths.size() * setups.size();
  grid.experiments.resize(total);
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> failures(total);
  auto worker = [&] {
    for (std::size_t k = next++; k < total; k = next++) {
      try {
        const auto c = k / setups.size();
        grid.experiments[k] = run_experiment(sc, grid.truths[c], grid.data[c], setups[k % setups.size()], config);
        spdlog::info("experiment {} done", grid.experiments[k].id);
      } catch (...) {
        failures[k] = std::current_exception();
      }
    }
  };
  const int jobs = std::clamp(config.jobs, 1, static_cast<int>(total == 0 ? 1 : total));
  std::vector<std::thread> threads;
  for (int j = 1; j < jobs; ++j) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  for (auto& f : failures)
    if (f) std::rethrow_exception(f);
  return grid;
}

std::string format_osse_report(const ExperimentGrid& grid) {
  std::ostringstream out;
  out << "# osse report: " << grid.experiments.size() << " experiments\n";
  for (const auto& e : grid.experiments) {
    out << "\n[experiment " << e.id << "]\n";
    out << format_score_table(e.scores);
    out << "min_slack," << format_double(e.min_slack) << "\n";
    out << "hmc_aborts," << e.samples.hmc_aborts << "\n";
  }
  out << "\n[rmse summary, PgC/yr]\ncase,setup,gpp,resp,nee,ocean\n";
  for (const auto& e : grid.experiments) {
    out << case_name(e.tag) << ',' << e.setup.tag();
    for (const auto& name : scored_components()) {
      const auto it = std::find_if(e.scores.begin(), e.scores.end(), [&](const ScoreRow& r) { return r.component == name; });
      out << ',' << (it == e.scores.end() ? std::string("nan") : format_double(it->rmse));
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace fluxinv
