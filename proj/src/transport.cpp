#include "fluxinv/transport.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <thread>

#include "fluxinv/util.hpp"

namespace fluxinv {

namespace {
constexpr double kSecondsPerDay = 86400.0;
constexpr std::uint32_t kJacobianVersion = 1;
constexpr std::uint32_t kEndianMarker = 0x01020304;
constexpr std::string_view kJacobianMagic = "FLXJACB1";

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

/// Per-state list of (observation row, cell, weight) contributions.
struct ObservationPlan {
  std::vector<std::vector<std::tuple<std::size_t, std::size_t, double>>> by_state;
  std::size_t last_state = 0;
};

ObservationPlan plan_observations(std::span<const ObservationRecord> obs, double t0, double dt, std::size_t steps,
                                  double point_window, std::size_t cell_count) {
  ObservationPlan plan;
  plan.by_state.resize(steps + 1);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (obs[i].cell >= cell_count)
      throw LookupError("observation " + obs[i].obs_id + " refers to unknown cell " + std::to_string(obs[i].cell));
    const auto f = averaging_for_group(obs[i].group, point_window);
    const auto stencil = averaging_stencil(f, obs[i].time, t0, dt, steps);
    for (const auto& [n, w] : stencil.taps) {
      plan.by_state[n].emplace_back(i, obs[i].cell, w);
      plan.last_state = std::max(plan.last_state, n);
    }
  }
  return plan;
}

std::size_t substeps_of(double sample_step, double dt) {
  const double ratio = sample_step / dt;
  const auto n = static_cast<std::size_t>(std::llround(ratio));
  if (n == 0 || std::abs(ratio - static_cast<double>(n)) > 1e-9 * ratio)
    throw ConfigError("transport dt " + format_double(dt) + " does not divide the flux step " +
                      format_double(sample_step));
  return n;
}
}  // namespace

// ------------------------------------------------------------ observations

std::vector<ObservationRecord> read_observations(const std::filesystem::path& path) {
  const auto table = read_table(path);
  const auto c_id = table.column("obs_id"), c_group = table.column("group"), c_series = table.column("series_id"),
             c_cell = table.column("cell_id"), c_time = table.column("time"), c_value = table.column("value"),
             c_budget = table.column("error_budget");
  std::vector<ObservationRecord> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    ObservationRecord r;
    r.obs_id = row[c_id];
    r.group = row[c_group];
    r.series_id = row[c_series];
    const auto cell = parse_int(row[c_cell], "cell_id");
    if (cell < 0) throw IoError(path.string() + ": negative cell_id");
    r.cell = static_cast<std::size_t>(cell);
    r.time = parse_double(row[c_time], "time");
    r.value = parse_double(row[c_value], "value");
    r.error_budget = parse_double(row[c_budget], "error_budget");
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_observations(std::span<const ObservationRecord> records) {
  std::string out = "obs_id,group,series_id,cell_id,time,value,error_budget\n";
  for (const auto& r : records)
    out += r.obs_id + "," + r.group + "," + r.series_id + "," + std::to_string(r.cell) + "," + format_double(r.time) +
           "," + format_double(r.value) + "," + format_double(r.error_budget) + "\n";
  return out;
}

AveragingFunctional averaging_for_group(const std::string& group, double point_window) {
  AveragingFunctional f;
  if (group.find("xco2") != std::string::npos) {
    f.kind = AveragingFunctional::Kind::Column;
    f.window = 0.0;
  } else {
    f.window = point_window;
  }
  return f;
}

AveragingStencil averaging_stencil(const AveragingFunctional& f, double t, double t0, double dt, std::size_t steps) {
  if (!(t >= t0)) throw RangeError("observation time " + format_double(t) + " precedes the simulated span");
  const auto latest = static_cast<std::size_t>(std::floor((t - t0) / dt + 1e-12));
  if (latest > steps) throw RangeError("observation time " + format_double(t) + " is past the simulated span");
  AveragingStencil s;
  if (f.kind == AveragingFunctional::Kind::Column) {
    // A single level: the weights must collapse to the identity.
    double total = 0.0;
    for (double w : f.weights) total += w;
    if (f.weights.size() != 1 || std::abs(total - 1.0) > 1e-12)
      throw ConfigError("column weights must be a single level summing to one for this operator");
    s.taps.emplace_back(latest, 1.0);
    return s;
  }
  std::size_t first = latest;
  while (first > 0 && t0 + dt * static_cast<double>(first - 1) > t - f.window) --first;
  const double w = 1.0 / static_cast<double>(latest - first + 1);
  for (std::size_t n = first; n <= latest; ++n) s.taps.emplace_back(n, w);
  return s;
}

double apply_averaging(const MoleFractionField& field, std::size_t cell, double t, const AveragingFunctional& f) {
  const auto s = averaging_stencil(f, t, field.t0, field.dt, field.steps());
  double v = 0.0;
  for (const auto& [n, w] : s.taps) v += w * field.values(static_cast<Eigen::Index>(cell), static_cast<Eigen::Index>(n));
  return v;
}

// ------------------------------------------------------------ toy operator

std::uint64_t ToyTransportConfig::hash() const {
  Hasher h;
  h.str("toy-transport").f64(dt).f64(zonal_wind).f64(diffusivity).f64(atmosphere_mass).f64(initial_value);
  h.f64s(initial_field).f64(point_window);
  return h.value();
}

ToyTransport::ToyTransport(std::shared_ptr<const SpatialGrid> grid, ToyTransportConfig config)
    : grid_(std::move(grid)), config_(std::move(config)) {
  const auto& layout = grid_->require_layout();
  if (!(config_.dt > 0.0)) throw ConfigError("transport dt must be positive");
  if (!(config_.atmosphere_mass > 0.0)) throw ConfigError("atmosphere mass constant must be positive");
  if (config_.diffusivity < 0.0) throw ConfigError("diffusivity must be non-negative");
  if (!config_.initial_field.empty() && config_.initial_field.size() != grid_->size())
    throw ConfigError("initial field has " + std::to_string(config_.initial_field.size()) + " values for " +
                      std::to_string(grid_->size()) + " cells");
  double total_area = 0.0;
  for (const auto& c : grid_->cells()) total_area += c.area;
  source_scale_ = config_.dt * total_area / config_.atmosphere_mass;

  const int nlat = layout.n_lat, nlon = layout.n_lon;
  const double dt_s = config_.dt * kSecondsPerDay;
  const double dlon = deg2rad(layout.lon_edges[1] - layout.lon_edges[0]);
  // Solid-body zonal wind u0 cos(lat) gives the same Courant number on every row.
  courant_ = std::abs(config_.zonal_wind) * dt_s / (kEarthRadiusM * dlon);
  upwind_.resize(grid_->size());
  diffusion_.assign(grid_->size(), {});
  for (int i = 0; i < nlat; ++i) {
    const double lat0 = deg2rad(layout.lat_edges[static_cast<std::size_t>(i)]);
    const double lat1 = deg2rad(layout.lat_edges[static_cast<std::size_t>(i) + 1]);
    const double latc = 0.5 * (lat0 + lat1);
    const double dlat = lat1 - lat0;
    for (int j = 0; j < nlon; ++j) {
      const std::size_t s = layout.index(i, j);
      const double area = grid_->cell(CellId{s}).area;
      const int jw = (j + nlon - 1) % nlon, je = (j + 1) % nlon;
      upwind_[s] = layout.index(i, config_.zonal_wind >= 0.0 ? jw : je);
      if (config_.diffusivity == 0.0) continue;
      auto add = [&](std::size_t other, double edge, double dist) {
        diffusion_[s].emplace_back(other, config_.diffusivity * dt_s * edge / (dist * area));
      };
      if (nlon > 1) {
        const double edge = kEarthRadiusM * dlat;
        const double dist = kEarthRadiusM * std::cos(latc) * dlon;
        add(layout.index(i, jw), edge, dist);
        if (je != jw) add(layout.index(i, je), edge, dist);
      }
      if (i > 0) {
        const double latc_s = 0.5 * (deg2rad(layout.lat_edges[static_cast<std::size_t>(i) - 1]) + lat0);
        add(layout.index(i - 1, j), kEarthRadiusM * std::cos(lat0) * dlon, kEarthRadiusM * (latc - latc_s));
      }
      if (i + 1 < nlat) {
        const double latc_n = 0.5 * (lat1 + deg2rad(layout.lat_edges[static_cast<std::size_t>(i) + 2]));
        add(layout.index(i + 1, j), kEarthRadiusM * std::cos(lat1) * dlon, kEarthRadiusM * (latc_n - latc));
      }
    }
  }
  if (nlon == 1) courant_ = 0.0;
  for (std::size_t s = 0; s < grid_->size(); ++s) {
    double out = courant_;
    for (const auto& [o, k] : diffusion_[s]) out += k;
    if (out > 1.0)
      throw ConfigError("CFL violation: outflow fraction " + format_double(out) + " at cell " + std::to_string(s) +
                        " exceeds one; reduce dt");
  }
}

std::uint64_t ToyTransport::hash() const {
  Hasher h;
  h.u64(config_.hash()).u64(grid_->size());
  for (const auto& c : grid_->cells()) h.f64(c.lat).f64(c.lon).f64(c.area);
  return h.value();
}

Eigen::VectorXd ToyTransport::initial_state() const {
  const auto n = static_cast<Eigen::Index>(grid_->size());
  if (config_.initial_field.empty()) return Eigen::VectorXd::Constant(n, config_.initial_value);
  return Eigen::Map<const Eigen::VectorXd>(config_.initial_field.data(), n);
}

void ToyTransport::advance(Eigen::VectorXd& state, Eigen::VectorXd& scratch) const {
  const auto n = state.size();
  scratch.resize(n);
  // Equal column weights within a row make upwind exchange symmetric in mass.
  for (Eigen::Index s = 0; s < n; ++s) {
    const auto su = static_cast<std::size_t>(s);
    double v = (1.0 - courant_) * state(s) + courant_ * state(static_cast<Eigen::Index>(upwind_[su]));
    for (const auto& [o, k] : diffusion_[su]) v += k * (state(static_cast<Eigen::Index>(o)) - state(s));
    scratch(s) = v;
  }
  state.swap(scratch);
}

MoleFractionField ToyTransport::transport_field(const SampledField& flux, bool with_initial) const {
  const auto cells = static_cast<Eigen::Index>(grid_->size());
  if (flux.values.rows() != cells) throw DomainError("flux field rows do not match the grid");
  const std::size_t sub = substeps_of(flux.axis.step, config_.dt);
  const std::size_t steps = flux.axis.count * sub;
  MoleFractionField out;
  out.t0 = flux.axis.begin();
  out.dt = config_.dt;
  out.values.resize(cells, static_cast<Eigen::Index>(steps + 1));
  Eigen::VectorXd state = with_initial ? initial_state() : Eigen::VectorXd::Zero(cells);
  Eigen::VectorXd scratch(cells);
  out.values.col(0) = state;
  for (std::size_t n = 0; n < steps; ++n) {
    advance(state, scratch);
    state += source_scale_ * flux.values.col(static_cast<Eigen::Index>(n / sub));
    out.values.col(static_cast<Eigen::Index>(n + 1)) = state;
  }
  return out;
}

Eigen::MatrixXd ToyTransport::response_matrix(const FluxBasisSet& basis, std::span<const ObservationRecord> obs,
                                              int jobs) const {
  if (basis.grid().size() != grid_->size()) throw ConfigError("basis grid does not match the transport grid");
  const auto& axis = basis.axis();
  const std::size_t sub = substeps_of(axis.step, config_.dt);
  const std::size_t steps = axis.count * sub;
  const auto plan = plan_observations(obs, axis.begin(), config_.dt, steps, config_.point_window, grid_->size());
  const auto& layout = basis.layout();
  const auto cells = static_cast<Eigen::Index>(grid_->size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(obs.size()),
                                              static_cast<Eigen::Index>(layout.size()));
  if (obs.empty()) return out;

  // Basis values per component and cell: entries x samples, entry order of phi_sample.
  std::array<std::vector<Eigen::MatrixXd>, kComponentCount> table;
  for (auto c : kComponents) {
    auto& t = table[index_of(c)];
    t.resize(grid_->size());
    const auto width = static_cast<Eigen::Index>(3 + 4 * layout.harmonics(c));
    for (std::size_t s = 0; s < grid_->size(); ++s) {
      t[s].resize(width, static_cast<Eigen::Index>(axis.count));
      for (std::size_t i = 0; i < axis.count; ++i) {
        const auto v = basis.phi_sample(c, s, i);
        for (Eigen::Index e = 0; e < width; ++e) t[s](e, static_cast<Eigen::Index>(i)) = v.entries[static_cast<std::size_t>(e)].value;
      }
    }
  }
  std::vector<std::vector<std::size_t>> region_cells(static_cast<std::size_t>(basis.regions().region_count()));
  for (std::size_t s = 0; s < grid_->size(); ++s)
    region_cells[static_cast<std::size_t>(basis.regions().region_of(CellId{s}).value - 1)].push_back(s);

  auto column = [&](std::size_t l, Eigen::VectorXd& state, Eigen::VectorXd& scratch) {
    const auto el = layout.element(l);
    const auto K = layout.harmonics(el.component);
    Eigen::Index entry = 0;
    switch (el.term) {
      case Term::Intercept: entry = 0; break;
      case Term::Trend: entry = 1; break;
      case Term::Residual: entry = 2 + 4 * K; break;
      default: entry = 2 + 4 * (el.harmonic - 1) + (static_cast<int>(el.term) - 2);
    }
    const auto& cs = region_cells[static_cast<std::size_t>(el.region.value - 1)];
    std::size_t first_sample = 0, end_sample = axis.count;
    if (el.term == Term::Residual) {
      const auto& sp = basis.sample_periods();
      first_sample = static_cast<std::size_t>(std::find(sp.begin(), sp.end(), el.period.value) - sp.begin());
      end_sample = first_sample;
      while (end_sample < axis.count && sp[end_sample] == el.period.value) ++end_sample;
    }
    // States before the element's support are identically zero.
    const std::size_t n_begin = first_sample * sub;
    if (n_begin >= plan.last_state) return;
    state.setZero(cells);
    const auto& tab = table[index_of(el.component)];
    for (std::size_t n = n_begin; n < plan.last_state; ++n) {
      advance(state, scratch);
      const std::size_t i = n / sub;
      if (i < end_sample) {
        for (auto s : cs)
          state(static_cast<Eigen::Index>(s)) += source_scale_ * tab[s](entry, static_cast<Eigen::Index>(i));
      }
      for (const auto& [row, cell, w] : plan.by_state[n + 1])
        out(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(l)) += w * state(static_cast<Eigen::Index>(cell));
    }
  };

  const std::size_t total = layout.size();
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  auto run = [&](std::size_t w) {
    Eigen::VectorXd state(cells), scratch(cells);
    for (std::size_t l = w; l < total; l += workers) column(l, state, scratch);
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(run, w);
    for (auto& t : threads) t.join();
  }
  return out;
}

Eigen::VectorXd ToyTransport::baseline(const FluxBasisSet& basis, std::span<const ObservationRecord> obs) const {
  const auto cells = static_cast<Eigen::Index>(grid_->size());
  SampledField total{basis.axis(), Eigen::MatrixXd(cells, static_cast<Eigen::Index>(basis.axis().count))};
  for (std::size_t s = 0; s < grid_->size(); ++s)
    for (std::size_t i = 0; i < basis.axis().count; ++i) {
      double v = basis.other_sample(s, i);
      for (auto c : kComponents) v += basis.bottom_up_sample(c, s, i);
      total.values(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(i)) = v;
    }
  const auto field = transport_field(total, true);
  Eigen::VectorXd out(static_cast<Eigen::Index>(obs.size()));
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (obs[i].cell >= grid_->size()) throw LookupError("observation " + obs[i].obs_id + " refers to unknown cell");
    out(static_cast<Eigen::Index>(i)) =
        apply_averaging(field, obs[i].cell, obs[i].time, averaging_for_group(obs[i].group, config_.point_window));
  }
  return out;
}

// ------------------------------------------------------------ jacobian files

void write_jacobian(const std::filesystem::path& path, const JacobianFile& file) {
  BinaryWriter w;
  w.raw(kJacobianMagic);
  w.u32(kEndianMarker);
  w.u32(kJacobianVersion);
  const auto rows = static_cast<std::uint64_t>(file.matrix.rows());
  const auto cols = static_cast<std::uint64_t>(file.matrix.cols());
  w.u64(rows);
  w.u64(cols);
  w.u64(file.layout_hash);
  w.u64(file.baseline ? 1 : 0);
  for (Eigen::Index i = 0; i < file.matrix.rows(); ++i)
    for (Eigen::Index j = 0; j < file.matrix.cols(); ++j) w.f64(file.matrix(i, j));
  if (file.baseline) {
    if (static_cast<std::uint64_t>(file.baseline->size()) != rows) throw DomainError("baseline length != rows");
    for (Eigen::Index i = 0; i < file.baseline->size(); ++i) w.f64((*file.baseline)(i));
  }
  write_file(path, w.data());
}

JacobianFile read_jacobian(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    BinaryReader r(bytes);
    if (r.raw(kJacobianMagic.size()) != kJacobianMagic) throw CacheInvalidError(path.string() + ": bad magic");
    if (r.u32() != kEndianMarker) throw CacheInvalidError(path.string() + ": endianness marker mismatch");
    if (const auto v = r.u32(); v != kJacobianVersion)
      throw CacheInvalidError(path.string() + ": unsupported version " + std::to_string(v));
    const auto rows = r.u64(), cols = r.u64();
    JacobianFile f;
    f.layout_hash = r.u64();
    const auto has_baseline = r.u64();
    if (has_baseline > 1) throw CacheInvalidError(path.string() + ": bad baseline flag");
    const std::uint64_t expected = (rows * cols + (has_baseline ? rows : 0)) * 8;
    if (rows > (1ULL << 32) || cols > (1ULL << 32) || r.remaining() != expected)
      throw CacheInvalidError(path.string() + ": payload size does not match the header");
    f.matrix.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < f.matrix.rows(); ++i)
      for (Eigen::Index j = 0; j < f.matrix.cols(); ++j) f.matrix(i, j) = r.f64();
    if (has_baseline) {
      Eigen::VectorXd b(static_cast<Eigen::Index>(rows));
      for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = r.f64();
      f.baseline = std::move(b);
    }
    return f;
  } catch (const IoError& e) {
    throw CacheInvalidError(path.string() + ": truncated (" + e.what() + ")");
  }
}

std::uint64_t PrecomputedJacobian::hash() const {
  Hasher h;
  h.str("precomputed-jacobian").u64(file_.layout_hash);
  h.f64s(std::span<const double>(file_.matrix.data(), static_cast<std::size_t>(file_.matrix.size())));
  return h.value();
}

Eigen::MatrixXd PrecomputedJacobian::response_matrix(const FluxBasisSet& basis, std::span<const ObservationRecord> obs,
                                                     int) const {
  if (file_.layout_hash != basis.layout().hash()) throw ConfigError("Jacobian layout hash does not match the basis");
  if (static_cast<std::size_t>(file_.matrix.rows()) != obs.size() ||
      static_cast<std::size_t>(file_.matrix.cols()) != basis.layout().size())
    throw ConfigError("Jacobian shape does not match the observations and layout");
  return file_.matrix;
}

Eigen::VectorXd PrecomputedJacobian::baseline(const FluxBasisSet&, std::span<const ObservationRecord> obs) const {
  if (!file_.baseline) throw ConfigError("Jacobian file carries no baseline");
  if (static_cast<std::size_t>(file_.baseline->size()) != obs.size())
    throw ConfigError("Jacobian baseline length does not match the observations");
  return *file_.baseline;
}

std::uint64_t observation_geometry_hash(std::span<const ObservationRecord> obs) {
  Hasher h;
  for (const auto& o : obs) h.str(o.obs_id).str(o.group).str(o.series_id).u64(o.cell).f64(o.time);
  return h.value();
}

Eigen::MatrixXd cached_response_matrix(const TransportOperator& op, const FluxBasisSet& basis,
                                       std::span<const ObservationRecord> obs, const std::filesystem::path& cache,
                                       int jobs) {
  const auto key = Hasher().u64(op.hash()).u64(basis.hash()).u64(observation_geometry_hash(obs)).value();
  if (std::filesystem::exists(cache)) {
    try {
      auto f = read_jacobian(cache);
      if (f.layout_hash == key && static_cast<std::size_t>(f.matrix.rows()) == obs.size() &&
          static_cast<std::size_t>(f.matrix.cols()) == basis.layout().size())
        return std::move(f.matrix);
    } catch (const CacheInvalidError&) {
      // Fall through and rebuild.
    }
  }
  JacobianFile f;
  f.layout_hash = key;
  f.matrix = op.response_matrix(basis, obs, jobs);
  write_jacobian(cache, f);
  return std::move(f.matrix);
}

}  // namespace fluxinv
