#include "fluxinv/grid.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "fluxinv/util.hpp"

namespace fluxinv {

namespace {
double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
}  // namespace

double spherical_cell_area(double lat0_deg, double lat1_deg, double lon0_deg, double lon1_deg) {
  const double dlon = deg2rad(std::abs(lon1_deg - lon0_deg));
  const double band = std::abs(std::sin(deg2rad(lat1_deg)) - std::sin(deg2rad(lat0_deg)));
  return kEarthRadiusM * kEarthRadiusM * dlon * band;
}

SpatialGrid::SpatialGrid(std::vector<Cell> cells, std::optional<RegularLayout> layout)
    : cells_(std::move(cells)), layout_(std::move(layout)) {
  if (cells_.empty()) throw DomainError("grid has no cells");
  std::set<std::pair<double, double>> seen;
  for (std::size_t i = 0; i < cells_.size(); ++i) {
    const auto& c = cells_[i];
    if (!(c.area > 0.0)) throw DomainError("cell " + std::to_string(i) + " has non-positive area");
    if (!(c.land_fraction >= 0.0 && c.land_fraction <= 1.0))
      throw DomainError("cell " + std::to_string(i) + " land fraction outside [0,1]");
    if (!seen.emplace(c.lat, c.lon).second)
      throw DomainError("duplicate cell centroid at cell " + std::to_string(i));
  }
  if (layout_ && static_cast<std::size_t>(layout_->n_lat) * layout_->n_lon != cells_.size())
    throw DomainError("regular layout does not match cell count");
}

SpatialGrid SpatialGrid::regular(int n_lat, int n_lon, double lat_min, double lat_max,
                                 double lon_min, double lon_max) {
  if (n_lat < 1 || n_lon < 1 || !(lat_max > lat_min) || !(lon_max > lon_min))
    throw ConfigError("invalid regular grid specification");
  RegularLayout layout;
  layout.n_lat = n_lat;
  layout.n_lon = n_lon;
  for (int i = 0; i <= n_lat; ++i) layout.lat_edges.push_back(lat_min + (lat_max - lat_min) * i / n_lat);
  for (int j = 0; j <= n_lon; ++j) layout.lon_edges.push_back(lon_min + (lon_max - lon_min) * j / n_lon);
  std::vector<Cell> cells;
  cells.reserve(static_cast<std::size_t>(n_lat) * n_lon);
  for (int i = 0; i < n_lat; ++i)
    for (int j = 0; j < n_lon; ++j) {
      const double la0 = layout.lat_edges[i], la1 = layout.lat_edges[i + 1];
      const double lo0 = layout.lon_edges[j], lo1 = layout.lon_edges[j + 1];
      cells.push_back({0.5 * (la0 + la1), 0.5 * (lo0 + lo1), spherical_cell_area(la0, la1, lo0, lo1), 0.0});
    }
  return SpatialGrid(std::move(cells), std::move(layout));
}

const Cell& SpatialGrid::cell(CellId id) const {
  if (id.value >= cells_.size()) throw LookupError("unknown cell id " + std::to_string(id.value));
  return cells_[id.value];
}

void SpatialGrid::set_land_fraction(CellId id, double fraction) {
  if (id.value >= cells_.size()) throw LookupError("unknown cell id " + std::to_string(id.value));
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw DomainError("land fraction outside [0,1]");
  cells_[id.value].land_fraction = fraction;
}

const RegularLayout& SpatialGrid::require_layout() const {
  if (!layout_) throw ConfigError("operation requires a regular lat-lon grid");
  return *layout_;
}

RegionPartition::RegionPartition(std::vector<int> region_of_cell, std::vector<RegionInfo> regions)
    : region_of_cell_(std::move(region_of_cell)), regions_(std::move(regions)) {
  if (regions_.empty()) throw DomainError("partition needs at least one region");
  const int r_count = region_count();
  for (std::size_t i = 0; i < region_of_cell_.size(); ++i) {
    const int r = region_of_cell_[i];
    if (r < 1 || r > r_count)
      throw DomainError("cell " + std::to_string(i) + " maps to region " + std::to_string(r) +
                        " outside 1.." + std::to_string(r_count));
  }
}

RegionId RegionPartition::region_of(CellId cell) const {
  if (cell.value >= region_of_cell_.size()) throw LookupError("unknown cell id " + std::to_string(cell.value));
  return RegionId{region_of_cell_[cell.value]};
}

const RegionInfo& RegionPartition::info(RegionId r) const {
  if (r.value < 1 || r.value > region_count()) throw LookupError("unknown region " + std::to_string(r.value));
  return regions_[static_cast<std::size_t>(r.value - 1)];
}

std::vector<std::size_t> RegionPartition::cells_in(RegionId r) const {
  info(r);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < region_of_cell_.size(); ++i)
    if (region_of_cell_[i] == r.value) out.push_back(i);
  return out;
}

std::optional<RegionId> RegionPartition::find_code(std::string_view code) const {
  for (std::size_t i = 0; i < regions_.size(); ++i)
    if (regions_[i].code == code) return RegionId{static_cast<int>(i) + 1};
  return std::nullopt;
}

std::vector<RegionInfo> transcom_catalogue() {
  using enum RegionType;
  return {
      {"T01", "North American Boreal", Land},     {"T02", "North American Temperate", Land},
      {"T03", "Tropical South America", Land},    {"T04", "South American Temperate", Land},
      {"T05", "Northern Africa", Land},           {"T06", "Southern Africa", Land},
      {"T07", "Eurasia Boreal", Land},            {"T08", "Eurasia Temperate", Land},
      {"T09", "Tropical Asia", Land},             {"T10", "Australia", Land},
      {"T11", "Europe", Land},                    {"T12", "North Pacific Temperate", Ocean},
      {"T13", "West Pacific Tropical", Ocean},    {"T14", "East Pacific Tropical", Ocean},
      {"T15", "South Pacific Temperate", Ocean},  {"T16", "Northern Ocean", Ocean},
      {"T17", "North Atlantic Temperate", Ocean}, {"T18", "Atlantic Tropical", Ocean},
      {"T19", "South Atlantic Temperate", Ocean}, {"T20", "Southern Ocean", Ocean},
      {"T21", "Indian Tropical", Ocean},          {"T22", "South Indian Temperate", Ocean},
      {"NZ", "New Zealand", Land},
  };
}

Calendar::Calendar(int year, unsigned month, unsigned day)
    : epoch_(std::chrono::year{year} / std::chrono::month{month} / std::chrono::day{day}) {}

std::chrono::year_month_day Calendar::date_of(double t) const {
  return std::chrono::year_month_day{epoch_ + std::chrono::days{static_cast<long>(std::floor(t))}};
}

int Calendar::month_of(double t) const { return static_cast<int>(static_cast<unsigned>(date_of(t).month())); }

TimePartition::TimePartition(std::vector<double> boundaries) : boundaries_(std::move(boundaries)) {
  if (boundaries_.size() < 2) throw DomainError("time partition needs at least one period");
  for (std::size_t i = 1; i < boundaries_.size(); ++i)
    if (!(boundaries_[i] > boundaries_[i - 1])) throw DomainError("period boundaries must increase strictly");
}

TimePartition TimePartition::monthly(const Calendar& calendar, int year, unsigned month, int count) {
  if (count < 1) throw ConfigError("monthly partition needs a positive count");
  using namespace std::chrono;
  year_month ym{std::chrono::year{year}, std::chrono::month{month}};
  std::vector<double> b;
  for (int i = 0; i <= count; ++i) {
    b.push_back(calendar.day_of(sys_days{ym / 1}));
    ym += months{1};
  }
  return TimePartition(std::move(b));
}

PeriodId TimePartition::period_of(double t) const {
  if (!(t >= start() && t <= end()))
    throw RangeError("time " + format_double(t) + " outside partition [" + format_double(start()) + ", " +
                     format_double(end()) + "]");
  const auto it = std::upper_bound(boundaries_.begin(), boundaries_.end(), t);
  const int q = static_cast<int>(it - boundaries_.begin());
  return PeriodId{std::min(q, period_count())};
}

double TimePartition::length(PeriodId q) const {
  if (q.value < 1 || q.value > period_count()) throw LookupError("unknown period " + std::to_string(q.value));
  return boundaries_[q.value] - boundaries_[q.value - 1];
}

Eigen::VectorXd spatial_indicator(CellId cell, const RegionPartition& partition) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(partition.region_count());
  w(partition.region_of(cell).value - 1) = 1.0;
  return w;
}

std::size_t spatiotemporal_index(RegionId r, PeriodId q, int period_count) {
  return static_cast<std::size_t>(r.value - 1) * static_cast<std::size_t>(period_count) +
         static_cast<std::size_t>(q.value - 1);
}

Eigen::VectorXd spatiotemporal_indicator(CellId cell, double t, const RegionPartition& regions,
                                         const TimePartition& periods) {
  const int q_count = periods.period_count();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(regions.region_count()) * q_count);
  const auto r = regions.region_of(cell);
  const auto q = periods.period_of(t);
  w(static_cast<Eigen::Index>(spatiotemporal_index(r, q, q_count))) = 1.0;
  return w;
}

double area_weighted_sum(const SpatialGrid& grid, const RegionPartition& partition,
                         std::span<const double> field, RegionId region) {
  if (field.size() != grid.size()) throw DomainError("field length does not match grid");
  const auto cells = partition.cells_in(region);
  if (cells.empty()) throw DomainError("region " + std::to_string(region.value) + " has no cells");
  double total = 0.0;
  for (auto i : cells) total += grid.area(CellId{i}) * field[i];
  return total;
}

namespace {

// A lat-major full product with constant spacing is recognised as regular.
std::optional<RegularLayout> infer_layout(const std::vector<Cell>& cells) {
  std::vector<double> lats, lons;
  for (const auto& c : cells) {
    if (lats.empty() || lats.back() != c.lat) {
      if (std::find(lats.begin(), lats.end(), c.lat) != lats.end()) return std::nullopt;
      lats.push_back(c.lat);
    }
  }
  const std::size_t n_lat = lats.size();
  if (n_lat == 0 || cells.size() % n_lat != 0) return std::nullopt;
  const std::size_t n_lon = cells.size() / n_lat;
  for (std::size_t j = 0; j < n_lon; ++j) lons.push_back(cells[j].lon);
  for (std::size_t i = 0; i < n_lat; ++i)
    for (std::size_t j = 0; j < n_lon; ++j) {
      const auto& c = cells[i * n_lon + j];
      if (c.lat != lats[i] || c.lon != lons[j]) return std::nullopt;
    }
  auto edges = [](const std::vector<double>& centers) -> std::optional<std::vector<double>> {
    if (centers.size() == 1) return std::nullopt;
    const double step = centers[1] - centers[0];
    if (!(step > 0)) return std::nullopt;
    for (std::size_t k = 1; k < centers.size(); ++k)
      if (std::abs(centers[k] - centers[k - 1] - step) > 1e-9 * std::abs(step)) return std::nullopt;
    std::vector<double> e;
    for (std::size_t k = 0; k <= centers.size(); ++k) e.push_back(centers[0] - 0.5 * step + step * k);
    return e;
  };
  auto lat_e = edges(lats);
  auto lon_e = edges(lons);
  if (!lat_e || !lon_e) return std::nullopt;
  RegularLayout layout;
  layout.n_lat = static_cast<int>(n_lat);
  layout.n_lon = static_cast<int>(n_lon);
  layout.lat_edges = std::move(*lat_e);
  layout.lon_edges = std::move(*lon_e);
  return layout;
}

RegionType parse_region_type(const std::string& s) {
  if (s == "land") return RegionType::Land;
  if (s == "ocean") return RegionType::Ocean;
  throw IoError("unknown region type '" + s + "'");
}

}  // namespace

GridFile read_grid_file(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  // Region metadata lines: "#region,<id>,<code>,<land|ocean>,<name>".
  std::vector<std::pair<int, RegionInfo>> declared;
  {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("#region,", 0) != 0) continue;
      auto t = parse_table("id,code,type,name\n" + line.substr(8), path.string());
      const auto& row = t.rows.at(0);
      declared.emplace_back(static_cast<int>(parse_int(row[0], "region id")),
                            RegionInfo{row[1], row[3], parse_region_type(row[2])});
    }
  }
  const auto table = parse_table(text, path.string());
  const auto c_lat = table.column("cell_lat"), c_lon = table.column("cell_lon"), c_area = table.column("area"),
             c_reg = table.column("region_id"), c_land = table.column("land_fraction");
  std::vector<Cell> cells;
  std::vector<int> region_of;
  for (const auto& row : table.rows) {
    cells.push_back({parse_double(row[c_lat], "cell_lat"), parse_double(row[c_lon], "cell_lon"),
                     parse_double(row[c_area], "area"), parse_double(row[c_land], "land_fraction")});
    region_of.push_back(static_cast<int>(parse_int(row[c_reg], "region_id")));
  }
  const int r_count = region_of.empty() ? 0 : *std::max_element(region_of.begin(), region_of.end());
  std::vector<RegionInfo> regions(static_cast<std::size_t>(std::max(r_count, 1)));
  std::vector<bool> has_decl(regions.size(), false);
  for (auto& [id, info] : declared) {
    if (id < 1) throw IoError(path.string() + ": region id must be >= 1");
    if (static_cast<std::size_t>(id) > regions.size()) {
      regions.resize(static_cast<std::size_t>(id));
      has_decl.resize(regions.size(), false);
    }
    regions[id - 1] = info;
    has_decl[id - 1] = true;
  }
  // Undeclared regions: type from area-weighted land fraction, code R<id>.
  for (std::size_t r = 0; r < regions.size(); ++r) {
    if (has_decl[r]) continue;
    double area = 0.0, land = 0.0;
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (region_of[i] == static_cast<int>(r) + 1) {
        area += cells[i].area;
        land += cells[i].area * cells[i].land_fraction;
      }
    regions[r].code = "R" + std::to_string(r + 1);
    regions[r].name = regions[r].code;
    regions[r].type = (area > 0 && land >= 0.5 * area) ? RegionType::Land : RegionType::Ocean;
  }
  auto layout = infer_layout(cells);
  return GridFile{SpatialGrid(std::move(cells), std::move(layout)),
                  RegionPartition(std::move(region_of), std::move(regions))};
}

std::string format_grid_file(const SpatialGrid& grid, const RegionPartition& regions) {
  if (grid.size() != regions.cell_count()) throw DomainError("grid and partition sizes differ");
  std::string out;
  for (int r = 1; r <= regions.region_count(); ++r) {
    const auto& info = regions.info(RegionId{r});
    out += "#region," + std::to_string(r) + "," + info.code + "," +
           (info.type == RegionType::Land ? "land" : "ocean") + "," + info.name + "\n";
  }
  out += "cell_lat,cell_lon,area,region_id,land_fraction\n";
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& c = grid.cell(CellId{i});
    out += format_double(c.lat) + "," + format_double(c.lon) + "," + format_double(c.area) + "," +
           std::to_string(regions.region_of(CellId{i}).value) + "," + format_double(c.land_fraction) + "\n";
  }
  return out;
}

}  // namespace fluxinv
