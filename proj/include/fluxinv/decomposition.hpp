#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fluxinv/common.hpp"
#include "fluxinv/grid.hpp"

namespace fluxinv {

/// Regular sample axis. Sample i represents the interval
/// [time(i) - step/2, time(i) + step/2); fluxes are piecewise constant on it.
struct TimeAxis {
  double first = 0.0;  ///< centre of sample 0, days
  double step = 1.0;   ///< days
  std::size_t count = 0;

  double time(std::size_t i) const { return first + step * static_cast<double>(i); }
  double begin() const { return first - 0.5 * step; }
  double end() const { return first + step * (static_cast<double>(count) - 0.5); }
  /// Sample index whose interval contains t; may lie outside [0, count).
  long long locate(double t) const;
  std::size_t index_in_range(double t) const;
  /// Samples per year used by the residual extension rule.
  long long year_in_samples() const;
};

/// Harmonic regression coefficients of one cell: intercept, trend per day,
/// and K pairs of trend-modulated annual harmonics.
struct CellHarmonics {
  double intercept = 0.0;
  double trend = 0.0;
  std::vector<double> cos_const, cos_trend, sin_const, sin_trend;  // size K

  /// Fitted (non-residual) part at time t.
  double fitted(double t) const;
};

struct DecompositionCoefficients {
  int harmonics = 0;
  TimeAxis axis;
  std::vector<CellHarmonics> cells;
  Eigen::MatrixXd residual;  ///< cells x samples

  /// Residual at time t. Times after the axis reuse the same time in the most
  /// recent covered year; times before the axis are a RangeError.
  double residual_at(std::size_t cell, double t) const;
};

struct SeriesFit {
  CellHarmonics coefficients;
  Eigen::VectorXd residual;
};

/// OLS fit of one series at arbitrary times. Throws FitError when the design
/// is rank deficient or too short.
SeriesFit fit_series(std::span<const double> times, std::span<const double> values, int harmonics);

/// Fit every row of `values` (cells x samples) on the shared axis.
DecompositionCoefficients fit_decomposition(const TimeAxis& axis, const Eigen::MatrixXd& values,
                                            int harmonics);

/// Term index j of the decomposition; harmonic terms also carry k = 1..K.
enum class Term { Intercept = 0, Trend = 1, CosConst = 2, CosTrend = 3, SinConst = 4, SinTrend = 5, Residual = 6 };

struct AlphaElement {
  Component component;
  Term term;
  int harmonic;   ///< 1..K for harmonic terms, 0 otherwise
  RegionId region;
  PeriodId period;  ///< residual terms only, otherwise {0}
};

/// Block layout of the coefficient vector. Component blocks appear in the
/// order gpp, resp, ocean. Inside a block: intercept (R), trend (R), then the
/// harmonic blocks j = 2..5 each ordered k = 1..K (R each), then the residual
/// block ordered region-major, period-minor (R*Q).
class AlphaLayout {
 public:
  AlphaLayout(int regions, int periods, std::array<int, kComponentCount> harmonics);

  static std::size_t component_dimension(int regions, int periods, int harmonics) {
    return static_cast<std::size_t>(2 * regions + 4 * harmonics * regions + periods * regions);
  }

  int regions() const { return regions_; }
  int periods() const { return periods_; }
  int harmonics(Component c) const { return harmonics_[index_of(c)]; }
  std::size_t size() const { return total_; }
  std::size_t offset(Component c) const { return offsets_[index_of(c)]; }
  std::size_t component_size(Component c) const {
    return component_dimension(regions_, periods_, harmonics(c));
  }

  /// Index within the component block.
  std::size_t local_index(Component c, Term term, int harmonic, RegionId r, PeriodId q = {0}) const;
  std::size_t index(Component c, Term term, int harmonic, RegionId r, PeriodId q = {0}) const {
    return offset(c) + local_index(c, term, harmonic, r, q);
  }
  AlphaElement element(std::size_t i) const;
  std::string label(std::size_t i) const;

  const std::vector<bool>& fixed() const { return fixed_; }
  void set_fixed(std::vector<bool> mask);
  std::vector<std::size_t> free_indices() const;
  std::uint64_t hash() const;

 private:
  int regions_;
  int periods_;
  std::array<int, kComponentCount> harmonics_;
  std::array<std::size_t, kComponentCount> offsets_{};
  std::size_t total_ = 0;
  std::vector<bool> fixed_;
};

/// A field on the grid sampled on a time axis (cells x samples).
struct SampledField {
  TimeAxis axis;
  Eigen::MatrixXd values;
};

/// One nonzero of a basis vector: position within the component block.
struct BasisEntry {
  std::size_t index;
  double value;
};

/// Evaluation of phi_c(s, t): 2 + 4K + 1 entries, all others zero.
struct BasisVector {
  std::vector<BasisEntry> entries;
  double sum() const;
  double dot(const Eigen::Ref<const Eigen::VectorXd>& alpha_c) const;
};

class FluxBasisSet {
 public:
  /// Coefficients per component (gpp, resp, ocean) and the fixed other flux.
  /// The basis axis spans the time partition at the coefficients' step.
  FluxBasisSet(std::shared_ptr<const SpatialGrid> grid, std::shared_ptr<const RegionPartition> regions,
               std::shared_ptr<const TimePartition> periods,
               std::array<DecompositionCoefficients, kComponentCount> components, SampledField other);

  const SpatialGrid& grid() const { return *grid_; }
  const RegionPartition& regions() const { return *regions_; }
  const TimePartition& periods() const { return *periods_; }
  std::shared_ptr<const SpatialGrid> grid_ptr() const { return grid_; }
  std::shared_ptr<const RegionPartition> regions_ptr() const { return regions_; }
  std::shared_ptr<const TimePartition> periods_ptr() const { return periods_; }
  const AlphaLayout& layout() const { return layout_; }
  AlphaLayout& mutable_layout() { return layout_; }
  const TimeAxis& axis() const { return axis_; }
  const DecompositionCoefficients& coefficients(Component c) const { return components_[index_of(c)]; }

  /// Basis vector at sample i of the basis axis.
  BasisVector phi_sample(Component c, std::size_t cell, std::size_t sample) const;
  /// Basis vector at time t (sample containing t).
  BasisVector phi(Component c, CellId cell, double t) const;

  double bottom_up_sample(Component c, std::size_t cell, std::size_t sample) const;
  double bottom_up(Component c, CellId cell, double t) const;
  double other_sample(std::size_t cell, std::size_t sample) const { return other_(cell, sample); }
  double other(CellId cell, double t) const;
  /// Period of each basis sample (1-based).
  const std::vector<int>& sample_periods() const { return sample_period_; }
  std::uint64_t hash() const;

 private:
  std::shared_ptr<const SpatialGrid> grid_;
  std::shared_ptr<const RegionPartition> regions_;
  std::shared_ptr<const TimePartition> periods_;
  std::array<DecompositionCoefficients, kComponentCount> components_;
  AlphaLayout layout_;
  TimeAxis axis_;
  std::array<Eigen::MatrixXd, kComponentCount> residual_;  // cells x basis samples
  Eigen::MatrixXd other_;
  std::vector<int> sample_period_;
};

FluxBasisSet build_basis(std::shared_ptr<const SpatialGrid> grid, std::shared_ptr<const RegionPartition> regions,
                         std::shared_ptr<const TimePartition> periods,
                         std::array<DecompositionCoefficients, kComponentCount> components, SampledField other);

/// X_c^0(s,t) + phi_c(s,t)' alpha_c.
double evaluate_component_flux(const FluxBasisSet& basis, Component c,
                               const Eigen::Ref<const Eigen::VectorXd>& alpha_c, CellId s, double t);
/// Sum of the three components plus the other flux; alpha is the full vector.
double evaluate_net_flux(const FluxBasisSet& basis, const Eigen::Ref<const Eigen::VectorXd>& alpha, CellId s,
                         double t);
/// gpp + resp.
double evaluate_nee(const FluxBasisSet& basis, const Eigen::Ref<const Eigen::VectorXd>& alpha, CellId s, double t);

/// Area-integrated, period-mean rate of component c in (region, period):
/// sum_s area(s) * mean over the period's samples of X_c(s, t).
double aggregate_flux(const FluxBasisSet& basis, const Eigen::Ref<const Eigen::VectorXd>& alpha_c, RegionId r,
                      PeriodId q, Component c);

/// x_c = x_c^0 + Phi_c alpha_c over all (region, period), region-major rows.
struct AggregationMatrices {
  std::array<Eigen::VectorXd, kComponentCount> bottom_up;
  std::array<Eigen::MatrixXd, kComponentCount> phi;
};
AggregationMatrices build_aggregation(const FluxBasisSet& basis);

/// Regional aggregates B^0_{c,j,r} = sum area(s) beta^0_{c,j}(s) for j = 0 (intercept) and 1 (trend).
struct LinearAggregates {
  std::array<std::vector<double>, kComponentCount> intercept;  // per region, index r-1
  std::array<std::vector<double>, kComponentCount> trend;
};
LinearAggregates linear_aggregates(const FluxBasisSet& basis);

/// Bottom-up fields keyed by name (gpp, resp, ocean, other, sif).
struct BottomUpFields {
  TimeAxis axis;
  std::map<std::string, Eigen::MatrixXd> fields;  // cells x samples
  const Eigen::MatrixXd& at(const std::string& name) const;
};

/// Columns cell_id,time,component,value; times are sample centres on a regular axis.
BottomUpFields read_bottom_up(const std::filesystem::path& path, std::size_t cell_count);
std::string format_bottom_up(const BottomUpFields& fields);

/// Persisted decomposition for reuse across runs.
struct BasisCacheContents {
  std::uint64_t content_hash = 0;
  std::array<DecompositionCoefficients, kComponentCount> components;
  SampledField other;
};
void write_basis_cache(const std::filesystem::path& path, const BasisCacheContents& contents);
/// Throws CacheInvalidError on bad magic, version, endianness or checksum.
BasisCacheContents read_basis_cache(const std::filesystem::path& path);
/// Content hash stored in the cache header without reading the payload.
std::optional<std::uint64_t> peek_basis_cache_hash(const std::filesystem::path& path);

}  // namespace fluxinv
