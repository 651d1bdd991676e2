#include "fluxinv/decomposition.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "fluxinv/util.hpp"

namespace fluxinv {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
double angular(int k) { return kTwoPi * k / kDaysPerYear; }
}  // namespace

long long TimeAxis::locate(double t) const {
  return static_cast<long long>(std::floor((t - begin()) / step));
}

std::size_t TimeAxis::index_in_range(double t) const {
  const auto i = locate(t);
  if (i < 0 || i >= static_cast<long long>(count))
    throw RangeError("time " + format_double(t) + " outside sample axis [" + format_double(begin()) + ", " +
                     format_double(end()) + ")");
  return static_cast<std::size_t>(i);
}

long long TimeAxis::year_in_samples() const { return std::max<long long>(1, std::llround(kDaysPerYear / step)); }

double CellHarmonics::fitted(double t) const {
  double v = intercept + trend * t;
  for (std::size_t k = 0; k < cos_const.size(); ++k) {
    const double w = angular(static_cast<int>(k) + 1) * t;
    v += (cos_const[k] + cos_trend[k] * t) * std::cos(w) + (sin_const[k] + sin_trend[k] * t) * std::sin(w);
  }
  return v;
}

namespace {

// Index i outside [0, n) mapped back by whole years into the covered range.
long long extend_index(long long i, long long n, long long year) {
  if (i < n) return i;
  const long long shift = ((i - (n - 1) + year - 1) / year) * year;
  return std::clamp<long long>(i - shift, 0, n - 1);
}

double sampled_at(const TimeAxis& axis, const Eigen::MatrixXd& values, std::size_t row, double t) {
  const long long i = axis.locate(t);
  if (i < 0) throw RangeError("time " + format_double(t) + " precedes the sample axis");
  const long long j = extend_index(i, static_cast<long long>(axis.count), axis.year_in_samples());
  return values(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j));
}

Eigen::MatrixXd design_matrix(std::span<const double> times, int harmonics) {
  const auto n = static_cast<Eigen::Index>(times.size());
  Eigen::MatrixXd x(n, 2 + 4 * harmonics);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = times[static_cast<std::size_t>(i)];
    x(i, 0) = 1.0;
    x(i, 1) = t;
    for (int k = 1; k <= harmonics; ++k) {
      const double w = angular(k) * t;
      const int c = 2 + 4 * (k - 1);
      x(i, c) = std::cos(w);
      x(i, c + 1) = t * std::cos(w);
      x(i, c + 2) = std::sin(w);
      x(i, c + 3) = t * std::sin(w);
    }
  }
  return x;
}

CellHarmonics unpack(const Eigen::Ref<const Eigen::VectorXd>& b, int harmonics) {
  CellHarmonics h;
  h.intercept = b(0);
  h.trend = b(1);
  for (int k = 0; k < harmonics; ++k) {
    h.cos_const.push_back(b(2 + 4 * k));
    h.cos_trend.push_back(b(3 + 4 * k));
    h.sin_const.push_back(b(4 + 4 * k));
    h.sin_trend.push_back(b(5 + 4 * k));
  }
  return h;
}

Eigen::ColPivHouseholderQR<Eigen::MatrixXd> factor_design(const Eigen::MatrixXd& x, int harmonics) {
  const auto p = x.cols();
  if (x.rows() < p)
    throw FitError("series length " + std::to_string(x.rows()) + " below 2 + 4K = " + std::to_string(p) +
                   " for K = " + std::to_string(harmonics));
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) throw FitError("rank-deficient decomposition design (rank " + std::to_string(qr.rank()) +
                                    " of " + std::to_string(p) + ")");
  return qr;
}

}  // namespace

SeriesFit fit_series(std::span<const double> times, std::span<const double> values, int harmonics) {
  if (harmonics < 0) throw FitError("harmonic count must be non-negative");
  if (times.size() != values.size()) throw FitError("times and values differ in length");
  const auto x = design_matrix(times, harmonics);
  const auto qr = factor_design(x, harmonics);
  const Eigen::Map<const Eigen::VectorXd> y(values.data(), static_cast<Eigen::Index>(values.size()));
  const Eigen::VectorXd b = qr.solve(y);
  SeriesFit fit{unpack(b, harmonics), Eigen::VectorXd(y.size())};
  for (Eigen::Index i = 0; i < y.size(); ++i)
    fit.residual(i) = y(i) - fit.coefficients.fitted(times[static_cast<std::size_t>(i)]);
  return fit;
}

DecompositionCoefficients fit_decomposition(const TimeAxis& axis, const Eigen::MatrixXd& values, int harmonics) {
  if (harmonics < 0) throw FitError("harmonic count must be non-negative");
  if (static_cast<std::size_t>(values.cols()) != axis.count) throw FitError("series length does not match axis");
  std::vector<double> times(axis.count);
  for (std::size_t i = 0; i < axis.count; ++i) times[i] = axis.time(i);
  const auto x = design_matrix(times, harmonics);
  const auto qr = factor_design(x, harmonics);
  const Eigen::MatrixXd b = qr.solve(Eigen::MatrixXd(values.transpose()));

  DecompositionCoefficients out;
  out.harmonics = harmonics;
  out.axis = axis;
  out.residual.resize(values.rows(), values.cols());
  out.cells.reserve(static_cast<std::size_t>(values.rows()));
  for (Eigen::Index s = 0; s < values.rows(); ++s) {
    out.cells.push_back(unpack(b.col(s), harmonics));
    for (Eigen::Index i = 0; i < values.cols(); ++i)
      out.residual(s, i) = values(s, i) - out.cells.back().fitted(times[static_cast<std::size_t>(i)]);
  }
  return out;
}

double DecompositionCoefficients::residual_at(std::size_t cell, double t) const {
  if (cell >= cells.size()) throw LookupError("unknown cell id " + std::to_string(cell));
  return sampled_at(axis, residual, cell, t);
}

// ---------------------------------------------------------------- layout

AlphaLayout::AlphaLayout(int regions, int periods, std::array<int, kComponentCount> harmonics)
    : regions_(regions), periods_(periods), harmonics_(harmonics) {
  if (regions < 1 || periods < 1) throw DomainError("layout needs R >= 1 and Q >= 1");
  for (auto c : kComponents) {
    if (harmonics_[index_of(c)] < 0) throw DomainError("harmonic count must be non-negative");
    offsets_[index_of(c)] = total_;
    total_ += component_size(c);
  }
  fixed_.assign(total_, false);
}

std::size_t AlphaLayout::local_index(Component c, Term term, int harmonic, RegionId r, PeriodId q) const {
  if (r.value < 1 || r.value > regions_) throw LookupError("region " + std::to_string(r.value) + " out of layout");
  const auto R = static_cast<std::size_t>(regions_);
  const auto K = harmonics(c);
  const auto rr = static_cast<std::size_t>(r.value - 1);
  const int j = static_cast<int>(term);
  if (term == Term::Intercept || term == Term::Trend) return static_cast<std::size_t>(j) * R + rr;
  if (term == Term::Residual) {
    if (q.value < 1 || q.value > periods_) throw LookupError("period " + std::to_string(q.value) + " out of layout");
    return (2 + 4 * static_cast<std::size_t>(K)) * R + spatiotemporal_index(r, q, periods_);
  }
  if (harmonic < 1 || harmonic > K) throw LookupError("harmonic " + std::to_string(harmonic) + " out of layout");
  const auto block = 2 + static_cast<std::size_t>(j - 2) * K + static_cast<std::size_t>(harmonic - 1);
  return block * R + rr;
}

AlphaElement AlphaLayout::element(std::size_t i) const {
  if (i >= total_) throw LookupError("alpha index " + std::to_string(i) + " out of range");
  std::size_t ci = 0;
  while (ci + 1 < kComponentCount && i >= offsets_[ci + 1]) ++ci;
  const auto c = kComponents[ci];
  const std::size_t local = i - offsets_[ci];
  const auto R = static_cast<std::size_t>(regions_);
  const auto K = static_cast<std::size_t>(harmonics(c));
  const std::size_t block = local / R;
  const int r = static_cast<int>(local % R) + 1;
  if (block < 2) return {c, static_cast<Term>(block), 0, RegionId{r}, PeriodId{0}};
  if (block < 2 + 4 * K) {
    const std::size_t h = block - 2;
    return {c, static_cast<Term>(2 + h / K), static_cast<int>(h % K) + 1, RegionId{r}, PeriodId{0}};
  }
  const std::size_t st = local - (2 + 4 * K) * R;
  return {c, Term::Residual, 0, RegionId{static_cast<int>(st / periods_) + 1},
          PeriodId{static_cast<int>(st % periods_) + 1}};
}

std::string AlphaLayout::label(std::size_t i) const {
  static constexpr const char* names[] = {"intercept", "trend", "cos", "tcos", "sin", "tsin", "residual"};
  const auto e = element(i);
  std::string s = std::string(component_name(e.component)) + "." + names[static_cast<int>(e.term)];
  if (e.harmonic > 0) s += std::to_string(e.harmonic);
  s += ".r" + std::to_string(e.region.value);
  if (e.term == Term::Residual) s += ".q" + std::to_string(e.period.value);
  return s;
}

void AlphaLayout::set_fixed(std::vector<bool> mask) {
  if (mask.size() != total_) throw DomainError("fixed mask length does not match layout");
  fixed_ = std::move(mask);
}

std::vector<std::size_t> AlphaLayout::free_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < total_; ++i)
    if (!fixed_[i]) out.push_back(i);
  return out;
}

std::uint64_t AlphaLayout::hash() const {
  Hasher h;
  h.u64(static_cast<std::uint64_t>(regions_)).u64(static_cast<std::uint64_t>(periods_));
  for (int k : harmonics_) h.u64(static_cast<std::uint64_t>(k));
  return h.value();
}

// ---------------------------------------------------------------- basis

double BasisVector::sum() const {
  double s = 0.0;
  for (const auto& e : entries) s += e.value;
  return s;
}

double BasisVector::dot(const Eigen::Ref<const Eigen::VectorXd>& alpha_c) const {
  double s = 0.0;
  for (const auto& e : entries) s += e.value * alpha_c(static_cast<Eigen::Index>(e.index));
  return s;
}

FluxBasisSet::FluxBasisSet(std::shared_ptr<const SpatialGrid> grid, std::shared_ptr<const RegionPartition> regions,
                           std::shared_ptr<const TimePartition> periods,
                           std::array<DecompositionCoefficients, kComponentCount> components, SampledField other)
    : grid_(std::move(grid)),
      regions_(std::move(regions)),
      periods_(std::move(periods)),
      components_(std::move(components)),
      layout_(regions_->region_count(), periods_->period_count(),
              {components_[0].harmonics, components_[1].harmonics, components_[2].harmonics}) {
  const std::size_t n_cells = grid_->size();
  if (regions_->cell_count() != n_cells) throw DomainError("region partition does not match grid");
  const double step = components_[0].axis.step;
  for (const auto& c : components_) {
    if (c.cells.size() != n_cells) throw DomainError("decomposition coefficients do not match grid");
    if (std::abs(c.axis.step - step) > 1e-12 * step) throw DomainError("components use different time steps");
  }
  if (static_cast<std::size_t>(other.values.rows()) != n_cells) throw DomainError("other flux does not match grid");

  const double span = periods_->end() - periods_->start();
  const double n = span / step;
  if (std::abs(n - std::round(n)) > 1e-9 * n) throw DomainError("time partition is not a whole number of samples");
  axis_ = TimeAxis{periods_->start() + 0.5 * step, step, static_cast<std::size_t>(std::llround(n))};

  sample_period_.resize(axis_.count);
  for (std::size_t i = 0; i < axis_.count; ++i) sample_period_[i] = periods_->period_of(axis_.time(i)).value;

  for (auto c : kComponents) {
    auto& res = residual_[index_of(c)];
    res.resize(static_cast<Eigen::Index>(n_cells), static_cast<Eigen::Index>(axis_.count));
    const auto& dc = components_[index_of(c)];
    for (std::size_t s = 0; s < n_cells; ++s)
      for (std::size_t i = 0; i < axis_.count; ++i)
        res(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(i)) = dc.residual_at(s, axis_.time(i));
  }
  other_.resize(static_cast<Eigen::Index>(n_cells), static_cast<Eigen::Index>(axis_.count));
  for (std::size_t s = 0; s < n_cells; ++s)
    for (std::size_t i = 0; i < axis_.count; ++i)
      other_(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(i)) =
          sampled_at(other.axis, other.values, s, axis_.time(i));
}

BasisVector FluxBasisSet::phi_sample(Component c, std::size_t cell, std::size_t sample) const {
  if (cell >= grid_->size()) throw LookupError("unknown cell id " + std::to_string(cell));
  if (sample >= axis_.count) throw RangeError("sample index outside basis axis");
  const auto& h = components_[index_of(c)].cells[cell];
  const int K = components_[index_of(c)].harmonics;
  const RegionId r = regions_->region_of(CellId{cell});
  const PeriodId q{sample_period_[sample]};
  const double t = axis_.time(sample);
  BasisVector v;
  v.entries.reserve(static_cast<std::size_t>(3 + 4 * K));
  v.entries.push_back({layout_.local_index(c, Term::Intercept, 0, r), h.intercept});
  v.entries.push_back({layout_.local_index(c, Term::Trend, 0, r), h.trend * t});
  for (int k = 1; k <= K; ++k) {
    const double w = angular(k) * t;
    const double cw = std::cos(w), sw = std::sin(w);
    const auto kk = static_cast<std::size_t>(k - 1);
    v.entries.push_back({layout_.local_index(c, Term::CosConst, k, r), h.cos_const[kk] * cw});
    v.entries.push_back({layout_.local_index(c, Term::CosTrend, k, r), h.cos_trend[kk] * t * cw});
    v.entries.push_back({layout_.local_index(c, Term::SinConst, k, r), h.sin_const[kk] * sw});
    v.entries.push_back({layout_.local_index(c, Term::SinTrend, k, r), h.sin_trend[kk] * t * sw});
  }
  v.entries.push_back({layout_.local_index(c, Term::Residual, 0, r, q),
                       residual_[index_of(c)](static_cast<Eigen::Index>(cell), static_cast<Eigen::Index>(sample))});
  return v;
}

BasisVector FluxBasisSet::phi(Component c, CellId cell, double t) const {
  return phi_sample(c, cell.value, axis_.index_in_range(t));
}

double FluxBasisSet::bottom_up_sample(Component c, std::size_t cell, std::size_t sample) const {
  return phi_sample(c, cell, sample).sum();
}

double FluxBasisSet::bottom_up(Component c, CellId cell, double t) const { return phi(c, cell, t).sum(); }

double FluxBasisSet::other(CellId cell, double t) const {
  if (cell.value >= grid_->size()) throw LookupError("unknown cell id " + std::to_string(cell.value));
  return other_(static_cast<Eigen::Index>(cell.value), static_cast<Eigen::Index>(axis_.index_in_range(t)));
}

std::uint64_t FluxBasisSet::hash() const {
  Hasher h;
  h.u64(layout_.hash());
  h.f64(axis_.first).f64(axis_.step).u64(axis_.count);
  for (const auto& cell : grid_->cells()) h.f64(cell.lat).f64(cell.lon).f64(cell.area);
  for (std::size_t s = 0; s < grid_->size(); ++s) h.u64(static_cast<std::uint64_t>(regions_->region_of(CellId{s}).value));
  h.f64s(periods_->boundaries());
  for (const auto& c : components_) {
    for (const auto& cell : c.cells) {
      h.f64(cell.intercept).f64(cell.trend).f64s(cell.cos_const).f64s(cell.cos_trend).f64s(cell.sin_const).f64s(
          cell.sin_trend);
    }
  }
  for (const auto& r : residual_) h.f64s(std::span<const double>(r.data(), static_cast<std::size_t>(r.size())));
  h.f64s(std::span<const double>(other_.data(), static_cast<std::size_t>(other_.size())));
  return h.value();
}

FluxBasisSet build_basis(std::shared_ptr<const SpatialGrid> grid, std::shared_ptr<const RegionPartition> regions,
                         std::shared_ptr<const TimePartition> periods,
                         std::array<DecompositionCoefficients, kComponentCount> components, SampledField other) {
  return FluxBasisSet(std::move(grid), std::move(regions), std::move(periods), std::move(components),
                      std::move(other));
}

double evaluate_component_flux(const FluxBasisSet& basis, Component c,
                               const Eigen::Ref<const Eigen::VectorXd>& alpha_c, CellId s, double t) {
  if (static_cast<std::size_t>(alpha_c.size()) != basis.layout().component_size(c))
    throw DomainError("alpha block for " + std::string(component_name(c)) + " has length " +
                      std::to_string(alpha_c.size()) + ", expected " +
                      std::to_string(basis.layout().component_size(c)));
  const auto v = basis.phi(c, s, t);
  return v.sum() + v.dot(alpha_c);
}

double evaluate_net_flux(const FluxBasisSet& basis, const Eigen::Ref<const Eigen::VectorXd>& alpha, CellId s,
                         double t) {
  const auto& layout = basis.layout();
  if (static_cast<std::size_t>(alpha.size()) != layout.size()) throw DomainError("alpha length does not match layout");
  double total = basis.other(s, t);
  for (auto c : kComponents)
    total += evaluate_component_flux(
        basis, c,
        alpha.segment(static_cast<Eigen::Index>(layout.offset(c)), static_cast<Eigen::Index>(layout.component_size(c))),
        s, t);
  return total;
}

double evaluate_nee(const FluxBasisSet& basis, const Eigen::Ref<const Eigen::VectorXd>& alpha, CellId s, double t) {
  const auto& layout = basis.layout();
  if (static_cast<std::size_t>(alpha.size()) != layout.size()) throw DomainError("alpha length does not match layout");
  double total = 0.0;
  for (auto c : {Component::Gpp, Component::Resp})
    total += evaluate_component_flux(
        basis, c,
        alpha.segment(static_cast<Eigen::Index>(layout.offset(c)), static_cast<Eigen::Index>(layout.component_size(c))),
        s, t);
  return total;
}

double aggregate_flux(const FluxBasisSet& basis, const Eigen::Ref<const Eigen::VectorXd>& alpha_c, RegionId r,
                      PeriodId q, Component c) {
  if (static_cast<std::size_t>(alpha_c.size()) != basis.layout().component_size(c))
    throw DomainError("alpha block length mismatch in aggregate_flux");
  const double len = basis.periods().length(q);
  const auto cells = basis.regions().cells_in(r);
  const auto& sp = basis.sample_periods();
  double total = 0.0;
  for (auto s : cells) {
    double integral = 0.0;
    for (std::size_t i = 0; i < sp.size(); ++i) {
      if (sp[i] != q.value) continue;
      const auto v = basis.phi_sample(c, s, i);
      integral += (v.sum() + v.dot(alpha_c)) * basis.axis().step;
    }
    total += basis.grid().area(CellId{s}) * integral / len;
  }
  return total;
}

AggregationMatrices build_aggregation(const FluxBasisSet& basis) {
  const auto& layout = basis.layout();
  const int R = layout.regions(), Q = layout.periods();
  const auto rows = static_cast<Eigen::Index>(R) * Q;
  const auto& sp = basis.sample_periods();
  AggregationMatrices out;
  for (auto c : kComponents) {
    auto& x0 = out.bottom_up[index_of(c)];
    auto& phi = out.phi[index_of(c)];
    x0 = Eigen::VectorXd::Zero(rows);
    phi = Eigen::MatrixXd::Zero(rows, static_cast<Eigen::Index>(layout.component_size(c)));
    for (std::size_t s = 0; s < basis.grid().size(); ++s) {
      const RegionId r = basis.regions().region_of(CellId{s});
      const double area = basis.grid().area(CellId{s});
      for (std::size_t i = 0; i < sp.size(); ++i) {
        const PeriodId q{sp[i]};
        const auto row = static_cast<Eigen::Index>(spatiotemporal_index(r, q, Q));
        const double w = area * basis.axis().step / basis.periods().length(q);
        const auto v = basis.phi_sample(c, s, i);
        for (const auto& e : v.entries) phi(row, static_cast<Eigen::Index>(e.index)) += w * e.value;
        x0(row) += w * v.sum();
      }
    }
  }
  return out;
}

LinearAggregates linear_aggregates(const FluxBasisSet& basis) {
  const int R = basis.layout().regions();
  LinearAggregates out;
  for (auto c : kComponents) {
    auto& b0 = out.intercept[index_of(c)];
    auto& b1 = out.trend[index_of(c)];
    b0.assign(static_cast<std::size_t>(R), 0.0);
    b1.assign(static_cast<std::size_t>(R), 0.0);
    const auto& dc = basis.coefficients(c);
    for (std::size_t s = 0; s < basis.grid().size(); ++s) {
      const auto r = static_cast<std::size_t>(basis.regions().region_of(CellId{s}).value - 1);
      const double a = basis.grid().area(CellId{s});
      b0[r] += a * dc.cells[s].intercept;
      b1[r] += a * dc.cells[s].trend;
    }
  }
  return out;
}

// ---------------------------------------------------------------- bottom-up files

const Eigen::MatrixXd& BottomUpFields::at(const std::string& name) const {
  const auto it = fields.find(name);
  if (it == fields.end()) throw LookupError("bottom-up field '" + name + "' not present");
  return it->second;
}

BottomUpFields read_bottom_up(const std::filesystem::path& path, std::size_t cell_count) {
  const auto table = read_table(path);
  const auto c_cell = table.column("cell_id"), c_time = table.column("time"), c_comp = table.column("component"),
             c_val = table.column("value");
  std::set<double> time_set;
  for (const auto& row : table.rows) time_set.insert(parse_double(row[c_time], "time"));
  if (time_set.size() < 1) throw IoError(path.string() + ": no samples");
  const std::vector<double> times(time_set.begin(), time_set.end());
  TimeAxis axis{times.front(), times.size() > 1 ? times[1] - times[0] : 1.0, times.size()};
  for (std::size_t i = 0; i < times.size(); ++i)
    if (std::abs(times[i] - axis.time(i)) > 1e-6 * axis.step)
      throw IoError(path.string() + ": sample times are not on a regular axis");

  BottomUpFields out;
  out.axis = axis;
  std::map<std::string, Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>> seen;
  for (const auto& row : table.rows) {
    const auto cell = parse_int(row[c_cell], "cell_id");
    if (cell < 0 || static_cast<std::size_t>(cell) >= cell_count)
      throw IoError(path.string() + ": cell_id " + row[c_cell] + " outside grid");
    const auto& name = row[c_comp];
    auto [it, inserted] = out.fields.try_emplace(name);
    if (inserted) {
      it->second = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cell_count), static_cast<Eigen::Index>(axis.count));
      seen[name] = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(
          static_cast<Eigen::Index>(cell_count), static_cast<Eigen::Index>(axis.count), false);
    }
    const auto i = static_cast<Eigen::Index>(axis.index_in_range(parse_double(row[c_time], "time")));
    it->second(cell, i) = parse_double(row[c_val], "value");
    seen[name](cell, i) = true;
  }
  for (const auto& [name, mask] : seen)
    if (!mask.all()) throw IoError(path.string() + ": field '" + name + "' does not cover every cell and sample");
  return out;
}

std::string format_bottom_up(const BottomUpFields& fields) {
  std::string out = "cell_id,time,component,value\n";
  for (const auto& [name, m] : fields.fields)
    for (Eigen::Index s = 0; s < m.rows(); ++s)
      for (Eigen::Index i = 0; i < m.cols(); ++i)
        out += std::to_string(s) + "," + format_double(fields.axis.time(static_cast<std::size_t>(i))) + "," + name +
               "," + format_double(m(s, i)) + "\n";
  return out;
}

// ---------------------------------------------------------------- basis cache

namespace {
constexpr char kBasisMagic[8] = {'F', 'L', 'X', 'B', 'A', 'S', 'I', 'S'};
constexpr std::uint32_t kBasisVersion = 1;
constexpr std::uint32_t kEndianMarker = 0x01020304;

void put_axis(BinaryWriter& w, const TimeAxis& a) {
  w.f64(a.first);
  w.f64(a.step);
  w.u64(a.count);
}
TimeAxis get_axis(BinaryReader& r) {
  TimeAxis a;
  a.first = r.f64();
  a.step = r.f64();
  a.count = r.u64();
  return a;
}
void put_matrix(BinaryWriter& w, const Eigen::MatrixXd& m) {
  w.u64(static_cast<std::uint64_t>(m.rows()));
  w.u64(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
}
Eigen::MatrixXd get_matrix(BinaryReader& r) {
  const auto rows = r.u64(), cols = r.u64();
  if (rows * cols * 8 > r.remaining()) throw CacheInvalidError("basis cache matrix exceeds payload");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
  return m;
}

struct CacheHeader {
  std::uint64_t content_hash;
  std::uint64_t payload_size;
};

CacheHeader parse_header(BinaryReader& r, const std::string& where) {
  try {
    const auto magic = r.raw(8);
    if (!std::equal(magic.begin(), magic.end(), kBasisMagic)) throw CacheInvalidError(where + ": bad magic");
    if (r.u32() != kBasisVersion) throw CacheInvalidError(where + ": unsupported cache version");
    if (r.u32() != kEndianMarker) throw CacheInvalidError(where + ": endianness marker mismatch");
    CacheHeader h{r.u64(), r.u64()};
    return h;
  } catch (const IoError&) {
    throw CacheInvalidError(where + ": truncated cache header");
  }
}
}  // namespace

void write_basis_cache(const std::filesystem::path& path, const BasisCacheContents& contents) {
  BinaryWriter payload;
  for (const auto& c : contents.components) {
    payload.u64(static_cast<std::uint64_t>(c.harmonics));
    put_axis(payload, c.axis);
    payload.u64(c.cells.size());
    for (const auto& h : c.cells) {
      payload.f64(h.intercept);
      payload.f64(h.trend);
      payload.f64s(h.cos_const);
      payload.f64s(h.cos_trend);
      payload.f64s(h.sin_const);
      payload.f64s(h.sin_trend);
    }
    put_matrix(payload, c.residual);
  }
  put_axis(payload, contents.other.axis);
  put_matrix(payload, contents.other.values);

  BinaryWriter file;
  file.raw(std::string_view(kBasisMagic, 8));
  file.u32(kBasisVersion);
  file.u32(kEndianMarker);
  file.u64(contents.content_hash);
  file.u64(payload.data().size());
  file.raw(payload.data());
  file.u64(Hasher().bytes(payload.data().data(), payload.data().size()).value());
  write_file(path, file.data());
}

BasisCacheContents read_basis_cache(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  BinaryReader r(data);
  const auto header = parse_header(r, path.string());
  if (r.remaining() != header.payload_size + 8) throw CacheInvalidError(path.string() + ": payload size mismatch");
  const auto payload = r.raw(header.payload_size);
  if (r.u64() != Hasher().bytes(payload.data(), payload.size()).value())
    throw CacheInvalidError(path.string() + ": payload checksum mismatch");
  BinaryReader p(payload);
  BasisCacheContents out;
  out.content_hash = header.content_hash;
  try {
    for (auto& c : out.components) {
      c.harmonics = static_cast<int>(p.u64());
      c.axis = get_axis(p);
      const auto n = p.u64();
      const auto K = static_cast<std::size_t>(c.harmonics);
      if (n * (2 + 4 * K) * 8 > p.remaining()) throw CacheInvalidError(path.string() + ": cell table exceeds payload");
      c.cells.resize(n);
      for (auto& h : c.cells) {
        h.intercept = p.f64();
        h.trend = p.f64();
        for (auto* v : {&h.cos_const, &h.cos_trend, &h.sin_const, &h.sin_trend}) {
          v->resize(K);
          p.f64s(*v);
        }
      }
      c.residual = get_matrix(p);
    }
    out.other.axis = get_axis(p);
    out.other.values = get_matrix(p);
  } catch (const IoError&) {
    throw CacheInvalidError(path.string() + ": truncated payload");
  }
  return out;
}

std::optional<std::uint64_t> peek_basis_cache_hash(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  const std::string data = read_file(path);
  BinaryReader r(data);
  return parse_header(r, path.string()).content_hash;
}

}  // namespace fluxinv
