#pragma once

#include <Eigen/Core>
#include <chrono>
#include <compare>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fluxinv/common.hpp"

namespace fluxinv {

inline constexpr double kEarthRadiusM = 6.371e6;

struct CellId {
  std::size_t value;
  auto operator<=>(const CellId&) const = default;
};
/// 1-based region identifier.
struct RegionId {
  int value;
  auto operator<=>(const RegionId&) const = default;
};
/// 1-based period identifier.
struct PeriodId {
  int value;
  auto operator<=>(const PeriodId&) const = default;
};

enum class RegionType { Land, Ocean };

struct Cell {
  double lat;  ///< centroid, degrees
  double lon;  ///< centroid, degrees
  double area;  ///< m^2
  double land_fraction;  ///< in [0, 1]
};

/// Rectangular lat-lon layout; cells are stored latitude-major.
struct RegularLayout {
  int n_lat = 0;
  int n_lon = 0;
  std::vector<double> lat_edges;  ///< n_lat + 1, degrees, increasing
  std::vector<double> lon_edges;  ///< n_lon + 1, degrees, increasing

  std::size_t index(int i_lat, int i_lon) const {
    return static_cast<std::size_t>(i_lat) * static_cast<std::size_t>(n_lon) +
           static_cast<std::size_t>(i_lon);
  }
};

/// Area of the spherical cell bounded by two parallels and two meridians.
double spherical_cell_area(double lat0_deg, double lat1_deg, double lon0_deg, double lon1_deg);

class SpatialGrid {
 public:
  explicit SpatialGrid(std::vector<Cell> cells, std::optional<RegularLayout> layout = std::nullopt);

  /// Regular grid with spherical areas; land fraction defaults to 0.
  static SpatialGrid regular(int n_lat, int n_lon, double lat_min = -90.0, double lat_max = 90.0,
                             double lon_min = -180.0, double lon_max = 180.0);

  std::size_t size() const { return cells_.size(); }
  const Cell& cell(CellId id) const;
  const std::vector<Cell>& cells() const { return cells_; }
  double area(CellId id) const { return cell(id).area; }
  bool is_land(CellId id) const { return cell(id).land_fraction >= 0.5; }
  void set_land_fraction(CellId id, double fraction);

  const std::optional<RegularLayout>& layout() const { return layout_; }
  /// Throws ConfigError when the grid is not a regular lat-lon product.
  const RegularLayout& require_layout() const;

 private:
  std::vector<Cell> cells_;
  std::optional<RegularLayout> layout_;
};

struct RegionInfo {
  std::string code;
  std::string name;
  RegionType type = RegionType::Land;
};

class RegionPartition {
 public:
  /// region_of_cell holds 1-based ids; regions.size() defines R.
  RegionPartition(std::vector<int> region_of_cell, std::vector<RegionInfo> regions);

  int region_count() const { return static_cast<int>(regions_.size()); }
  std::size_t cell_count() const { return region_of_cell_.size(); }
  RegionId region_of(CellId cell) const;
  const RegionInfo& info(RegionId r) const;
  const std::vector<RegionInfo>& regions() const { return regions_; }
  bool is_land(RegionId r) const { return info(r).type == RegionType::Land; }
  std::vector<std::size_t> cells_in(RegionId r) const;
  std::optional<RegionId> find_code(std::string_view code) const;

 private:
  std::vector<int> region_of_cell_;
  std::vector<RegionInfo> regions_;
};

/// The 22 TransCom3 regions plus a New Zealand land region, in catalogue order.
std::vector<RegionInfo> transcom_catalogue();

/// Calendar anchored at an epoch; times are days since the epoch's midnight.
class Calendar {
 public:
  explicit Calendar(std::chrono::sys_days epoch) : epoch_(epoch) {}
  Calendar(int year, unsigned month, unsigned day);

  std::chrono::sys_days epoch() const { return epoch_; }
  double day_of(std::chrono::sys_days d) const { return static_cast<double>((d - epoch_).count()); }
  std::chrono::year_month_day date_of(double t) const;
  /// Calendar month 1..12 containing time t.
  int month_of(double t) const;

 private:
  std::chrono::sys_days epoch_;
};

class TimePartition {
 public:
  explicit TimePartition(std::vector<double> boundaries);
  /// Consecutive calendar months starting at (year, month).
  static TimePartition monthly(const Calendar& calendar, int year, unsigned month, int count);

  int period_count() const { return static_cast<int>(boundaries_.size()) - 1; }
  const std::vector<double>& boundaries() const { return boundaries_; }
  double start() const { return boundaries_.front(); }
  double end() const { return boundaries_.back(); }
  /// Middle day of the whole partition, pivot of the linear terms.
  double midpoint() const { return 0.5 * (start() + end()); }
  /// Periods are half-open [b_q, b_{q+1}); the final end point belongs to period Q.
  PeriodId period_of(double t) const;
  double length(PeriodId q) const;

 private:
  std::vector<double> boundaries_;
};

Eigen::VectorXd spatial_indicator(CellId cell, const RegionPartition& partition);

/// Region-major, period-minor: index (region - 1) * Q + (period - 1).
std::size_t spatiotemporal_index(RegionId r, PeriodId q, int period_count);
Eigen::VectorXd spatiotemporal_indicator(CellId cell, double t, const RegionPartition& regions,
                                         const TimePartition& periods);

double area_weighted_sum(const SpatialGrid& grid, const RegionPartition& partition,
                         std::span<const double> field, RegionId region);

struct GridFile {
  SpatialGrid grid;
  RegionPartition regions;
};

/// Columns cell_lat,cell_lon,area,region_id,land_fraction; see README for the byte layout.
GridFile read_grid_file(const std::filesystem::path& path);
std::string format_grid_file(const SpatialGrid& grid, const RegionPartition& regions);

}  // namespace fluxinv
