#include "fluxinv/sif_link.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <boost/math/distributions/fisher_f.hpp>
#include <cmath>

#include "fluxinv/util.hpp"

namespace fluxinv {

LinearFit fit_cell_month(std::span<const GppSifPair> pairs) {
  const std::size_t n = pairs.size();
  if (n < 3) throw FitError("at least three pairs are needed, got " + std::to_string(n));
  double mx = 0.0, my = 0.0;
  for (const auto& p : pairs) {
    mx += p.gpp;
    my += p.sif;
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (const auto& p : pairs) {
    sxx += (p.gpp - mx) * (p.gpp - mx);
    sxy += (p.gpp - mx) * (p.sif - my);
    syy += (p.sif - my) * (p.sif - my);
  }
  const double scale = std::max(1.0, mx * mx) * static_cast<double>(n);
  if (!(sxx > 1e-24 * scale)) throw FitError("degenerate design: GPP has no variance");
  LinearFit fit;
  fit.n = n;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double sse = 0.0;
  for (const auto& p : pairs) {
    const double e = p.sif - (fit.intercept + fit.slope * p.gpp);
    sse += e * e;
  }
  fit.mse = sse / static_cast<double>(n);
  fit.correlation = syy > 0.0 ? sxy / std::sqrt(sxx * syy) : 0.0;
  return fit;
}

std::string reason_string(unsigned reasons) {
  if (reasons == kReasonNone) return "ok";
  static constexpr std::pair<unsigned, const char*> names[] = {{kReasonCount, "count"},
                                                               {kReasonAnova, "anova"},
                                                               {kReasonCorrelation, "correlation"},
                                                               {kReasonIntercept, "intercept"},
                                                               {kReasonDegenerate, "degenerate"}};
  std::string out;
  for (const auto& [bit, name] : names)
    if (reasons & bit) out += (out.empty() ? "" : "+") + std::string(name);
  return out;
}

unsigned parse_reasons(const std::string& s) {
  if (s == "ok") return kReasonNone;
  unsigned out = 0;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto end = s.find('+', start);
    if (end == std::string::npos) end = s.size();
    const auto name = s.substr(start, end - start);
    if (name == "count") out |= kReasonCount;
    else if (name == "anova") out |= kReasonAnova;
    else if (name == "correlation") out |= kReasonCorrelation;
    else if (name == "intercept") out |= kReasonIntercept;
    else if (name == "degenerate") out |= kReasonDegenerate;
    else throw IoError("unknown validity reason '" + name + "'");
    start = end + 1;
  }
  return out;
}

double linearity_anova_p(std::span<const GppSifPair> pairs) {
  const auto n = static_cast<Eigen::Index>(pairs.size());
  if (n <= 4) return 0.0;
  double mx = 0.0, sx = 0.0;
  for (const auto& p : pairs) mx += p.gpp;
  mx /= static_cast<double>(n);
  for (const auto& p : pairs) sx = std::max(sx, std::abs(p.gpp - mx));
  if (!(sx > 0.0)) return 0.0;
  // Centred and scaled predictor keeps the cubic design well conditioned.
  Eigen::MatrixXd x(n, 4);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double z = (pairs[static_cast<std::size_t>(i)].gpp - mx) / sx;
    x(i, 0) = 1.0;
    x(i, 1) = z;
    x(i, 2) = z * z;
    x(i, 3) = z * z * z;
    y(i) = pairs[static_cast<std::size_t>(i)].sif;
  }
  auto sse_of = [&](Eigen::Index cols) {
    const Eigen::MatrixXd xs = x.leftCols(cols);
    const Eigen::VectorXd b = xs.colPivHouseholderQr().solve(y);
    return (y - xs * b).squaredNorm();
  };
  const double sse_lin = sse_of(2);
  const double sse_cub = sse_of(4);
  const double tss = (y.array() - y.mean()).square().sum();
  const double tiny = 1e-24 * std::max(tss, 1e-300);
  const double gain = std::max(0.0, sse_lin - sse_cub);
  if (gain <= tiny) return 1.0;
  if (sse_cub <= tiny) return 0.0;
  const double dof = static_cast<double>(n - 4);
  const double f = (gain / 2.0) / (sse_cub / dof);
  const boost::math::fisher_f_distribution<double> dist(2.0, dof);
  return boost::math::cdf(boost::math::complement(dist, f));
}

Validity apply_validity_criteria(std::span<const GppSifPair> pairs, const LinearFit& fit,
                                 const ValidityConfig& config) {
  Validity v;
  const auto positive = static_cast<std::size_t>(
      std::count_if(pairs.begin(), pairs.end(), [&](const GppSifPair& p) { return p.sif > config.sif_threshold; }));
  if (positive < config.min_count) v.reasons |= kReasonCount;
  v.anova_p = linearity_anova_p(pairs);
  if (v.anova_p < config.anova_level) v.reasons |= kReasonAnova;
  if (!(config.orientation * fit.correlation >= config.min_correlation)) v.reasons |= kReasonCorrelation;
  if (!(fit.intercept > config.min_intercept)) v.reasons |= kReasonIntercept;
  v.valid = v.reasons == kReasonNone;
  return v;
}

double sample_quantile(std::vector<double> values, double p) {
  if (values.empty()) throw DomainError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

TukeyFences tukey_fences(std::span<const double> reference) {
  std::vector<double> v(reference.begin(), reference.end());
  const double q1 = sample_quantile(v, 0.25);
  const double q3 = sample_quantile(v, 0.75);
  const double iqr = q3 - q1;
  return {q1 - 1.5 * iqr, q3 + 1.5 * iqr};
}

const CellMonthLink& SifLinkModel::at(std::size_t cell, int month) const {
  static const CellMonthLink absent{};
  const auto it = links_.find({cell, month});
  return it == links_.end() ? absent : it->second;
}

void SifLinkModel::set(std::size_t cell, int month, CellMonthLink link) {
  if (month < 1 || month > 12) throw DomainError("calendar month must be 1..12");
  if (link.mse < 0.0) throw DomainError("model-error variance must be non-negative");
  if (link.fence_lower > link.fence_upper) throw DomainError("Tukey fences out of order");
  links_[{cell, month}] = link;
}

double SifLinkModel::bottom_up_at(std::size_t cell, double t) const {
  if (!bottom_up_) throw ConfigError("SIF link model has no bottom-up SIF field");
  return bottom_up_->values(static_cast<Eigen::Index>(cell),
                            static_cast<Eigen::Index>(bottom_up_->axis.index_in_range(t)));
}

SifLinkModel build_sif_link(std::span<const SifPairRecord> records, const Calendar& calendar,
                            const ValidityConfig& config) {
  std::map<std::pair<std::size_t, int>, std::vector<GppSifPair>> groups;
  for (const auto& r : records) groups[{r.cell, calendar.month_of(r.time)}].push_back({r.gpp, r.sif});
  SifLinkModel model(calendar);
  for (const auto& [key, pairs] : groups) {
    CellMonthLink link;
    link.n = pairs.size();
    std::vector<double> sif;
    for (const auto& p : pairs) sif.push_back(p.sif);
    const auto fences = tukey_fences(sif);
    link.fence_lower = fences.lower;
    link.fence_upper = fences.upper;
    try {
      const auto fit = fit_cell_month(pairs);
      const auto validity = apply_validity_criteria(pairs, fit, config);
      link.slope = fit.slope;
      link.intercept = fit.intercept;
      link.mse = fit.mse;
      link.valid = validity.valid;
      link.reasons = validity.reasons;
    } catch (const FitError&) {
      link.valid = false;
      link.reasons = kReasonDegenerate;
    }
    model.set(key.first, key.second, link);
  }
  return model;
}

ScreenResult tukey_screen(std::span<const double> observations, const SifLinkModel& model, std::size_t cell,
                          int month) {
  ScreenResult out;
  const auto& link = model.at(cell, month);
  out.cell_month_valid = link.valid;
  for (std::size_t i = 0; i < observations.size(); ++i) {
    const double y = observations[i];
    if (link.valid && y >= link.fence_lower && y <= link.fence_upper) out.retained.push_back(i);
    else out.outliers.push_back(i);
  }
  return out;
}

BasisVector sensitivity_vector(const SifLinkModel& model, const FluxBasisSet& basis, CellId s, double t) {
  const auto& link = model.at(s.value, model.calendar().month_of(t));
  if (!link.valid) return {};
  auto v = basis.phi(Component::Gpp, s, t);
  for (auto& e : v.entries) e.value *= link.slope;
  return v;
}

std::optional<double> predict_sif(const SifLinkModel& model, const FluxBasisSet& basis,
                                  const Eigen::Ref<const Eigen::VectorXd>& alpha_gpp, CellId s, double t) {
  if (static_cast<std::size_t>(alpha_gpp.size()) != basis.layout().component_size(Component::Gpp))
    throw DomainError("alpha_gpp length does not match the GPP block");
  if (!model.at(s.value, model.calendar().month_of(t)).valid) return std::nullopt;
  return model.bottom_up_at(s.value, t) + sensitivity_vector(model, basis, s, t).dot(alpha_gpp);
}

std::vector<SifBandAverage> average_sif_bands(std::span<const SifRetrieval> retrievals, std::size_t min_count,
                                              double band_seconds) {
  std::vector<std::size_t> order(retrievals.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return retrievals[a].time < retrievals[b].time; });
  std::map<std::pair<int, long long>, std::vector<std::size_t>> bands;
  for (auto i : order) {
    const auto band = static_cast<long long>(std::floor(retrievals[i].time * 86400.0 / band_seconds));
    bands[{retrievals[i].mode, band}].push_back(i);
  }
  std::vector<SifBandAverage> out;
  for (const auto& [key, members] : bands) {
    if (members.size() < min_count) continue;
    SifBandAverage a{0.0, key.first, retrievals[members.front()].cell, 0.0, 0.0, members.size()};
    for (auto i : members) {
      a.time += retrievals[i].time;
      a.value += retrievals[i].value;
      a.variance += retrievals[i].variance;
    }
    const auto n = static_cast<double>(members.size());
    a.time /= n;
    a.value /= n;
    a.variance /= n * n;
    out.push_back(a);
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.time < b.time; });
  return out;
}

std::vector<SifPairRecord> read_sif_pairs(const std::filesystem::path& path) {
  const auto table = read_table(path);
  const auto c_cell = table.column("cell_id"), c_time = table.column("time"), c_gpp = table.column("gpp"),
             c_sif = table.column("sif");
  std::vector<SifPairRecord> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    const auto cell = parse_int(row[c_cell], "cell_id");
    if (cell < 0) throw IoError(path.string() + ": negative cell_id");
    out.push_back({static_cast<std::size_t>(cell), parse_double(row[c_time], "time"), parse_double(row[c_gpp], "gpp"),
                   parse_double(row[c_sif], "sif")});
  }
  return out;
}

std::string format_sif_pairs(std::span<const SifPairRecord> records) {
  std::string out = "cell_id,time,gpp,sif\n";
  for (const auto& r : records)
    out += std::to_string(r.cell) + "," + format_double(r.time) + "," + format_double(r.gpp) + "," +
           format_double(r.sif) + "\n";
  return out;
}

std::string format_sif_link_report(const SifLinkModel& model) {
  std::string out = "cell,month,slope,intercept,mse,valid,reason,fence_lower,fence_upper,n\n";
  for (const auto& [key, l] : model.entries())
    out += std::to_string(key.first) + "," + std::to_string(key.second) + "," + format_double(l.slope) + "," +
           format_double(l.intercept) + "," + format_double(l.mse) + "," + (l.valid ? "1" : "0") + "," +
           reason_string(l.reasons) + "," + format_double(l.fence_lower) + "," + format_double(l.fence_upper) + "," +
           std::to_string(l.n) + "\n";
  return out;
}

SifLinkModel read_sif_link_report(const std::filesystem::path& path, const Calendar& calendar) {
  const auto table = read_table(path);
  SifLinkModel model(calendar);
  const auto c_cell = table.column("cell"), c_month = table.column("month"), c_slope = table.column("slope"),
             c_int = table.column("intercept"), c_mse = table.column("mse"), c_valid = table.column("valid"),
             c_reason = table.column("reason"), c_lo = table.column("fence_lower"), c_hi = table.column("fence_upper"),
             c_n = table.column("n");
  for (const auto& row : table.rows) {
    CellMonthLink l;
    l.slope = parse_double(row[c_slope], "slope");
    l.intercept = parse_double(row[c_int], "intercept");
    l.mse = parse_double(row[c_mse], "mse");
    l.valid = row[c_valid] == "1";
    l.reasons = parse_reasons(row[c_reason]);
    l.fence_lower = parse_double(row[c_lo], "fence_lower");
    l.fence_upper = parse_double(row[c_hi], "fence_upper");
    l.n = static_cast<std::size_t>(parse_int(row[c_n], "n"));
    model.set(static_cast<std::size_t>(parse_int(row[c_cell], "cell")), static_cast<int>(parse_int(row[c_month], "month")),
              l);
  }
  return model;
}

}  // namespace fluxinv
