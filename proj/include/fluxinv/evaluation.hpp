#pragma once

#include <Eigen/Core>
#include <span>
#include <string>
#include <vector>

#include "fluxinv/decomposition.hpp"
#include "fluxinv/grid.hpp"
#include "fluxinv/samplers.hpp"

namespace fluxinv {

/// Aggregates are kgC/day; reports are PgC/yr.
inline constexpr double kKgPerPg = 1.0e12;
inline constexpr double kReportScale = kDaysPerYear / kKgPerPg;

/// Root mean squared difference. Throws DomainError when empty or mismatched.
double rmse(std::span<const double> estimates, std::span<const double> truth);

/// Empirical CRPS: mean|X - y| - 0.5 * mean|X - X'| with the pair mean over
/// all m^2 ordered pairs (i = j included). Throws DomainError for fewer than 2 samples.
double crps_ensemble(std::span<const double> samples, double truth);

/// Periods first..last (1-based, inclusive) are scored.
struct EvaluationWindow {
  int first_period = 1;
  int last_period = 1;
};

/// Scored quantities: gpp, resp and nee over land regions, ocean over ocean regions.
inline const std::vector<std::string>& scored_components() {
  static const std::vector<std::string> c{"gpp", "resp", "nee", "ocean"};
  return c;
}

struct ScoreRow {
  std::string experiment;
  std::string component;
  double rmse = 0.0;  ///< of the posterior mean, PgC/yr
  double crps = 0.0;  ///< mean over cells, PgC/yr
  std::size_t cells = 0;
};

/// Monthly regional aggregates in PgC/yr, one entry per scored component:
/// draws x (R*Q) for posterior draws, (R*Q) for a single alpha. Rows are region-major.
std::vector<Eigen::MatrixXd> draw_aggregates(const PosteriorSamples& samples, const AggregationMatrices& aggregation,
                                             const AlphaLayout& layout);
std::vector<Eigen::VectorXd> truth_aggregates(const Eigen::VectorXd& alpha_true, const AggregationMatrices& aggregation,
                                              const AlphaLayout& layout);

/// One row per scored component over the (region, period) cells inside the window.
std::vector<ScoreRow> score_experiment(const std::string& experiment, const PosteriorSamples& samples,
                                       const Eigen::VectorXd& alpha_true, const AggregationMatrices& aggregation,
                                       const AlphaLayout& layout, const RegionPartition& regions,
                                       const EvaluationWindow& window);

/// Columns experiment,component,rmse,crps,cells; rows in input order.
std::string format_score_table(std::span<const ScoreRow> rows);
std::vector<ScoreRow> parse_score_table(std::string_view text);

}  // namespace fluxinv
