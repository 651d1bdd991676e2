#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fluxinv/decomposition.hpp"
#include "fluxinv/grid.hpp"

namespace fluxinv {

/// One row of an observation file.
struct ObservationRecord {
  std::string obs_id;
  std::string group;
  std::string series_id;
  std::size_t cell = 0;
  double time = 0.0;  ///< days since epoch
  double value = 0.0;
  double error_budget = 1.0;
};

/// Columns obs_id,group,series_id,cell_id,time,value,error_budget.
std::vector<ObservationRecord> read_observations(const std::filesystem::path& path);
std::string format_observations(std::span<const ObservationRecord> records);

/// Linear functional mapping a mole-fraction field to one observation.
/// PointWindow averages the states with t - window < t_n <= t (at least the
/// latest state at or before t). Column applies level weights to that state.
struct AveragingFunctional {
  enum class Kind { PointWindow, Column };
  Kind kind = Kind::PointWindow;
  double window = 1.0 / 24.0;  ///< days
  std::vector<double> weights{1.0};
};

/// Column averaging for satellite column groups, point windows otherwise.
AveragingFunctional averaging_for_group(const std::string& group, double point_window);

/// Mole-fraction states at t0 + n*dt, n = 0..steps (cells x (steps + 1)).
struct MoleFractionField {
  double t0 = 0.0;
  double dt = 1.0;
  Eigen::MatrixXd values;

  std::size_t steps() const { return static_cast<std::size_t>(values.cols()) - 1; }
  double time(std::size_t n) const { return t0 + dt * static_cast<double>(n); }
};

/// (state index, weight) pairs realising a functional on a state sequence.
struct AveragingStencil {
  std::vector<std::pair<std::size_t, double>> taps;
};
/// Throws RangeError when t lies before t0 or past the last state.
AveragingStencil averaging_stencil(const AveragingFunctional& f, double t, double t0, double dt, std::size_t steps);
double apply_averaging(const MoleFractionField& field, std::size_t cell, double t, const AveragingFunctional& f);

/// Pluggable linear map from flux basis elements to observations.
class TransportOperator {
 public:
  virtual ~TransportOperator() = default;
  virtual std::string tag() const = 0;
  virtual std::uint64_t hash() const = 0;
  /// One row per observation, one column per alpha element (full layout).
  virtual Eigen::MatrixXd response_matrix(const FluxBasisSet& basis, std::span<const ObservationRecord> obs,
                                          int jobs = 1) const = 0;
  /// Z^0: initial condition plus every bottom-up flux, averaged per observation.
  virtual Eigen::VectorXd baseline(const FluxBasisSet& basis, std::span<const ObservationRecord> obs) const = 0;
};

struct ToyTransportConfig {
  double dt = 0.25;                 ///< days; must divide the flux sample step
  double zonal_wind = 10.0;         ///< m/s at the equator, solid-body profile
  double diffusivity = 1.0e6;       ///< m^2/s
  double atmosphere_mass = 2.124e12;  ///< kgC per ppm of global mean mole fraction
  double initial_value = 400.0;     ///< ppm, used when no field is given
  std::vector<double> initial_field;  ///< per cell, optional
  double point_window = 1.0 / 24.0;   ///< days

  std::uint64_t hash() const;
};

/// Single-level upwind advection plus diffusion on a regular lat-lon grid with
/// periodic longitude and closed poles. Tracer mass sum_i w_i c_i is conserved
/// by the transfer step; fluxes add X * dt * A_total / M each step.
class ToyTransport final : public TransportOperator {
 public:
  /// Throws ConfigError when the upwind/diffusion outflow of any cell exceeds one.
  ToyTransport(std::shared_ptr<const SpatialGrid> grid, ToyTransportConfig config);

  std::string tag() const override { return "toy-advection-diffusion"; }
  std::uint64_t hash() const override;
  const ToyTransportConfig& config() const { return config_; }
  const SpatialGrid& grid() const { return *grid_; }

  /// Transport a flux field (kgC m^-2 day^-1, cells x samples). States start at
  /// the flux axis begin; the initial condition is included when requested.
  MoleFractionField transport_field(const SampledField& flux, bool with_initial = true) const;

  Eigen::MatrixXd response_matrix(const FluxBasisSet& basis, std::span<const ObservationRecord> obs,
                                  int jobs = 1) const override;
  Eigen::VectorXd baseline(const FluxBasisSet& basis, std::span<const ObservationRecord> obs) const override;

  /// One explicit step without sources, in place.
  void advance(Eigen::VectorXd& state, Eigen::VectorXd& scratch) const;
  /// ppm increase per (kgC m^-2 day^-1) over one step.
  double source_scale() const { return source_scale_; }
  Eigen::VectorXd initial_state() const;

 private:
  std::shared_ptr<const SpatialGrid> grid_;
  ToyTransportConfig config_;
  double courant_ = 0.0;
  double source_scale_ = 0.0;
  std::vector<std::size_t> upwind_;                           // west (east) neighbour for u > 0 (u < 0)
  std::vector<std::vector<std::pair<std::size_t, double>>> diffusion_;  // neighbour, k / w_i
};

/// Binary response matrix as stored on disk.
struct JacobianFile {
  std::uint64_t layout_hash = 0;
  Eigen::MatrixXd matrix;                ///< rows x cols
  std::optional<Eigen::VectorXd> baseline;  ///< one entry per row
};

/// Layout: "FLXJACB1", u32 0x01020304, u32 version 1, u64 rows, u64 cols,
/// u64 layout hash, u64 has_baseline, rows*cols f64 row-major, then rows f64
/// when has_baseline = 1. All integers and floats little-endian.
void write_jacobian(const std::filesystem::path& path, const JacobianFile& file);
/// Throws CacheInvalidError on bad magic, endianness, version or size.
JacobianFile read_jacobian(const std::filesystem::path& path);

/// Operator backed by a stored Jacobian for a fixed observation list.
class PrecomputedJacobian final : public TransportOperator {
 public:
  explicit PrecomputedJacobian(JacobianFile file) : file_(std::move(file)) {}

  std::string tag() const override { return "precomputed-jacobian"; }
  std::uint64_t hash() const override;
  /// Throws ConfigError when the layout hash or row count disagrees.
  Eigen::MatrixXd response_matrix(const FluxBasisSet& basis, std::span<const ObservationRecord> obs,
                                  int jobs = 1) const override;
  /// Throws ConfigError when the file carries no baseline.
  Eigen::VectorXd baseline(const FluxBasisSet& basis, std::span<const ObservationRecord> obs) const override;

 private:
  JacobianFile file_;
};

/// Hash of the observation geometry (ids, groups, cells, times) only.
std::uint64_t observation_geometry_hash(std::span<const ObservationRecord> obs);

/// Response matrix through an on-disk cache keyed by operator, basis and
/// observation geometry. A stale or corrupt cache is recomputed.
Eigen::MatrixXd cached_response_matrix(const TransportOperator& op, const FluxBasisSet& basis,
                                       std::span<const ObservationRecord> obs, const std::filesystem::path& cache,
                                       int jobs = 1);

}  // namespace fluxinv
