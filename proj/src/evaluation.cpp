#include "fluxinv/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fluxinv/common.hpp"
#include "fluxinv/util.hpp"

namespace fluxinv {

double rmse(std::span<const double> estimates, std::span<const double> truth) {
  if (estimates.empty()) throw DomainError("rmse of an empty index set");
  if (estimates.size() != truth.size()) throw DomainError("rmse on mismatched index sets");
  double ss = 0.0;
  for (std::size_t i = 0; i < estimates.size(); ++i) ss += (estimates[i] - truth[i]) * (estimates[i] - truth[i]);
  return std::sqrt(ss / static_cast<double>(estimates.size()));
}

double crps_ensemble(std::span<const double> samples, double truth) {
  const std::size_t m = samples.size();
  if (m < 2) throw DomainError("crps needs at least 2 samples");
  std::vector<double> x(samples.begin(), samples.end());
  std::sort(x.begin(), x.end());
  double abs_err = 0.0, pair = 0.0;
  // sum_{i,j} |x_i - x_j| = 2 sum_i (2i - m + 1) x_(i), 0-based on sorted values.
  for (std::size_t i = 0; i < m; ++i) {
    abs_err += std::abs(x[i] - truth);
    pair += (2.0 * static_cast<double>(i) - static_cast<double>(m) + 1.0) * x[i];
  }
  const double md = static_cast<double>(m);
  const double value = abs_err / md - pair / (md * md);
  return std::max(value, 0.0);
}

namespace {

// Row-major (R*Q) x full map from alpha to each scored aggregate, PgC/yr.
std::vector<Eigen::MatrixXd> aggregate_maps(const AggregationMatrices& agg, const AlphaLayout& layout,
                                            std::vector<Eigen::VectorXd>& offsets) {
  const auto full = static_cast<Eigen::Index>(layout.size());
  const auto rows = agg.bottom_up[0].size();
  std::array<Eigen::MatrixXd, kComponentCount> per;
  for (auto c : kComponents) {
    auto& m = per[index_of(c)];
    m = Eigen::MatrixXd::Zero(rows, full);
    m.middleCols(static_cast<Eigen::Index>(layout.offset(c)), static_cast<Eigen::Index>(layout.component_size(c))) =
        agg.phi[index_of(c)] * kReportScale;
  }
  const auto& x0 = agg.bottom_up;
  offsets = {x0[0] * kReportScale, x0[1] * kReportScale, (x0[0] + x0[1]) * kReportScale, x0[2] * kReportScale};
  return {per[0], per[1], per[0] + per[1], per[2]};
}

}  // namespace

std::vector<Eigen::MatrixXd> draw_aggregates(const PosteriorSamples& samples, const AggregationMatrices& aggregation,
                                             const AlphaLayout& layout) {
  if (samples.full_size != layout.size()) throw ConfigError("posterior samples do not match the alpha layout");
  std::vector<Eigen::VectorXd> offsets;
  const auto maps = aggregate_maps(aggregation, layout, offsets);
  std::vector<Eigen::MatrixXd> out;
  for (std::size_t k = 0; k < maps.size(); ++k) {
    Eigen::MatrixXd free_map(maps[k].rows(), static_cast<Eigen::Index>(samples.free_indices.size()));
    for (std::size_t j = 0; j < samples.free_indices.size(); ++j)
      free_map.col(static_cast<Eigen::Index>(j)) = maps[k].col(static_cast<Eigen::Index>(samples.free_indices[j]));
    Eigen::MatrixXd a = samples.alpha * free_map.transpose();
    a.rowwise() += offsets[k].transpose();
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<Eigen::VectorXd> truth_aggregates(const Eigen::VectorXd& alpha_true, const AggregationMatrices& aggregation,
                                              const AlphaLayout& layout) {
  if (alpha_true.size() != static_cast<Eigen::Index>(layout.size()))
    throw ConfigError("true alpha does not match the alpha layout");
  std::vector<Eigen::VectorXd> offsets;
  const auto maps = aggregate_maps(aggregation, layout, offsets);
  std::vector<Eigen::VectorXd> out;
  for (std::size_t k = 0; k < maps.size(); ++k) out.push_back(offsets[k] + maps[k] * alpha_true);
  return out;
}

std::vector<ScoreRow> score_experiment(const std::string& experiment, const PosteriorSamples& samples,
                                       const Eigen::VectorXd& alpha_true, const AggregationMatrices& aggregation,
                                       const AlphaLayout& layout, const RegionPartition& regions,
                                       const EvaluationWindow& window) {
  const int Q = layout.periods();
  if (window.first_period < 1 || window.last_period > Q || window.first_period > window.last_period)
    throw RangeError("evaluation window lies outside the time partition");
  if (samples.draws() < 2) throw DomainError("scoring needs at least 2 posterior draws");
  const auto draws = draw_aggregates(samples, aggregation, layout);
  const auto truth = truth_aggregates(alpha_true, aggregation, layout);
  const auto& names = scored_components();

  std::vector<ScoreRow> rows;
  for (std::size_t k = 0; k < names.size(); ++k) {
    const bool ocean = names[k] == "ocean";
    std::vector<double> est, tru;
    double crps_sum = 0.0;
    for (int r = 1; r <= regions.region_count(); ++r) {
      if (regions.is_land(RegionId{r}) == ocean) continue;
      for (int q = window.first_period; q <= window.last_period; ++q) {
        const auto i = static_cast<Eigen::Index>(spatiotemporal_index(RegionId{r}, PeriodId{q}, Q));
        const Eigen::VectorXd col = draws[k].col(i);
        est.push_back(col.mean());
        tru.push_back(truth[k](i));
        crps_sum += crps_ensemble(std::span<const double>(col.data(), static_cast<std::size_t>(col.size())), truth[k](i));
      }
    }
    ScoreRow row{experiment, names[k], 0.0, 0.0, est.size()};
    if (!est.empty()) {
      row.rmse = rmse(est, tru);
      row.crps = crps_sum / static_cast<double>(est.size());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_score_table(std::span<const ScoreRow> rows) {
  std::ostringstream out;
  out << "experiment,component,rmse,crps,cells\n";
  for (const auto& r : rows)
    out << r.experiment << ',' << r.component << ',' << format_double(r.rmse) << ',' << format_double(r.crps) << ','
        << r.cells << '\n';
  return out.str();
}

std::vector<ScoreRow> parse_score_table(std::string_view text) {
  const auto t = parse_table(text, "score table");
  const auto ce = t.column("experiment"), cc = t.column("component"), cr = t.column("rmse"), cp = t.column("crps"),
             cn = t.column("cells");
  std::vector<ScoreRow> rows;
  for (const auto& row : t.rows)
    rows.push_back({row[ce], row[cc], parse_double(row[cr], "rmse"), parse_double(row[cp], "crps"),
                    static_cast<std::size_t>(parse_int(row[cn], "cells"))});
  return rows;
}

}  // namespace fluxinv
