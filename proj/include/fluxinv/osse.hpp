#pragma once

#include <Eigen/Core>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fluxinv/data_model.hpp"
#include "fluxinv/decomposition.hpp"
#include "fluxinv/evaluation.hpp"
#include "fluxinv/grid.hpp"
#include "fluxinv/prior.hpp"
#include "fluxinv/samplers.hpp"
#include "fluxinv/sif_link.hpp"
#include "fluxinv/transport.hpp"

namespace fluxinv {

// ---------------------------------------------------------------- desk scenario

/// Synthetic desk world: an 8 x 12 grid with three land regions and one ocean
/// region, monthly periods, daily bottom-up fields, an in-situ and satellite
/// observing network and the toy transport.
struct DeskScenarioConfig {
  static ToyTransportConfig desk_transport() {
    ToyTransportConfig t;
    t.diffusivity = 4.0e6;
    return t;
  }

  int months = 24;
  int start_year = 2015;
  std::array<int, kComponentCount> harmonics{3, 3, 2};
  std::uint64_t seed = 20150101;
  ToyTransportConfig transport = desk_transport();
  int station_interval_days = 7;      ///< surface sampling interval
  int xco2_tracks_per_month = 2;
  int sif_tracks_per_month = 2;       ///< per land region
  int sif_bands_per_track = 6;
  double sif_band_variance = 0.03;    ///< retrieval part of the SIF budget
  double mole_fraction_budget_scale = 0.02;  ///< multiplies every mole-fraction budget
  double resp_ratio_spread = 0.02;  ///< cell resp/gpp intensity ratio lies in 1 +- spread
  int jobs = 1;
};

struct DeskScenario {
  DeskScenarioConfig config;
  Calendar calendar{2015, 1, 1};
  std::shared_ptr<const SpatialGrid> grid;
  std::shared_ptr<const RegionPartition> regions;
  std::shared_ptr<const TimePartition> periods;
  BottomUpFields fields;  ///< gpp, resp, ocean, other, sif
  std::vector<SifPairRecord> sif_pairs;
  std::shared_ptr<const FluxBasisSet> basis;
  SifLinkModel sif_link{Calendar{2015, 1, 1}};
  /// Observation geometry; values hold the baseline until simulated.
  std::vector<ObservationRecord> records;
  Eigen::MatrixXd response;  ///< records x full alpha
  Eigen::VectorXd baseline;
  std::map<std::string, ErrorParams> truth_errors;
  AggregationMatrices aggregation;
  LinearAggregates linear;
  ConstraintSet constraints;
  int rlt_fixed_region = 3;  ///< respiration linear terms always fixed, no valid SIF
  EvaluationWindow window;   ///< excludes the first and last (buffer) periods
};

DeskScenario build_desk_scenario(const DeskScenarioConfig& config = {});

/// Synthetic stand-in for a previous posterior mean: a deterministic scaled
/// prior draw with zero respiration linear terms, shrunk until it satisfies
/// the constraints.
Eigen::VectorXd standin_posterior_mean(const DeskScenario& scenario, std::uint64_t seed);

// ---------------------------------------------------------------- true fluxes

enum class CaseTag { BottomUp, PreviousMean, PositiveShift, NegativeShift };
inline constexpr std::array<CaseTag, 4> kCaseTags{CaseTag::BottomUp, CaseTag::PreviousMean, CaseTag::PositiveShift,
                                                  CaseTag::NegativeShift};
/// "bottom-up", "v2-mean", "positive-shift", "negative-shift".
std::string case_name(CaseTag tag);
CaseTag parse_case(std::string_view name);

struct TrueFluxCase {
  CaseTag tag;
  Eigen::VectorXd alpha;
  double delta = 0.0;
  std::vector<int> exceptions;  ///< land regions left unshifted
};

/// Bottom-up: alpha = 0. Previous mean: alpha = base. Shifts: gpp intercept and
/// trend move by +delta (sign by case) and the respiration pair by
/// -delta * B_gpp / B_resp, so regional NEE linear aggregates are unchanged.
/// Throws DomainError naming the region when a respiration aggregate is zero.
TrueFluxCase build_true_flux(CaseTag tag, const AlphaLayout& layout, const RegionPartition& regions,
                             const Eigen::VectorXd& base, const LinearAggregates& aggregates, double delta,
                             std::span<const int> exceptions);

/// Regional NEE linear aggregates B_gpp alpha_gpp + B_resp alpha_resp, per
/// land region: intercept then trend, region order.
std::vector<double> nee_linear_aggregates(const AlphaLayout& layout, const RegionPartition& regions,
                                          const LinearAggregates& aggregates, const Eigen::VectorXd& alpha);

// ---------------------------------------------------------------- simulation

/// Z = Z^0 + Psi alpha_true + xi + eps per group with zero bias, one substream
/// per group. Records keep their order; only values change. Throws ConfigError
/// when the response rows do not match the records.
std::vector<ObservationRecord> simulate_osse_dataset(std::span<const ObservationRecord> records,
                                                     const Eigen::MatrixXd& response, const Eigen::VectorXd& baseline,
                                                     const Eigen::VectorXd& alpha_true,
                                                     const std::map<std::string, ErrorParams>& errors,
                                                     std::uint64_t seed, bool noise = true);

// ---------------------------------------------------------------- experiments

struct InversionSetup {
  bool include_sif = true;
  bool infer_rlt = true;
  std::vector<int> rlt_fixed_regions;

  /// "inferred-rlt_sif", "fixed-rlt_no-sif", ...
  std::string tag() const;
};
/// The 2 x 2 grid: (inferred, fixed) x (sif, no-sif).
std::vector<InversionSetup> setup_grid(std::span<const int> rlt_fixed_regions);

struct OsseConfig {
  GibbsConfig gibbs = gibbs_budget(1000, 200);
  double delta = 0.1;
  std::uint64_t seed = 1;
  Hyperpriors hyper{};
  PriorSettings prior{};
  std::uint64_t standin_seed = 2020;
  std::vector<CaseTag> cases{kCaseTags.begin(), kCaseTags.end()};
  int jobs = 1;
};

struct ExperimentResult {
  std::string id;  ///< "<case>.<setup tag>"
  CaseTag tag;
  InversionSetup setup;
  PosteriorSamples samples;
  std::vector<ScoreRow> scores;
  double min_slack = 0.0;  ///< over stored draws, normalised rows
};

struct ExperimentGrid {
  std::vector<TrueFluxCase> truths;                  ///< per case, config order
  std::vector<std::vector<ObservationRecord>> data;  ///< simulated records per case
  std::vector<ExperimentResult> experiments;         ///< case-major, setup_grid order
};

/// Inverts one simulated dataset under one setup. Error correlation parameters
/// are held at the simulation values; budget scalings are sampled.
ExperimentResult run_experiment(const DeskScenario& scenario, const TrueFluxCase& truth,
                                std::span<const ObservationRecord> data, const InversionSetup& setup,
                                const OsseConfig& config);

/// Simulates one dataset per case and inverts it under every setup. Experiments
/// run on up to `jobs` threads; results do not depend on the thread count.
ExperimentGrid run_experiment_grid(const DeskScenario& scenario, const OsseConfig& config);

/// One section per experiment followed by an RMSE summary in the layout
/// case,setup,gpp,resp,nee,ocean (PgC/yr).
std::string format_osse_report(const ExperimentGrid& grid);

}  // namespace fluxinv
