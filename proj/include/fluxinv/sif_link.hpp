#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fluxinv/decomposition.hpp"
#include "fluxinv/grid.hpp"

namespace fluxinv {

struct GppSifPair {
  double gpp;
  double sif;
};

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double mse = 0.0;  ///< mean squared residual, SSE / n
  double correlation = 0.0;
  std::size_t n = 0;
};

/// OLS of sif on gpp. Throws FitError for fewer than 3 pairs or constant gpp.
LinearFit fit_cell_month(std::span<const GppSifPair> pairs);

enum ValidityReason : unsigned {
  kReasonNone = 0,
  kReasonCount = 1u << 0,
  kReasonAnova = 1u << 1,
  kReasonCorrelation = 1u << 2,
  kReasonIntercept = 1u << 3,
  kReasonDegenerate = 1u << 4,
};
/// "ok" or '+'-joined reason names in bit order.
std::string reason_string(unsigned reasons);
unsigned parse_reasons(const std::string& s);

struct ValidityConfig {
  double sif_threshold = 0.1;
  std::size_t min_count = 30;
  double anova_level = 0.05;
  double min_correlation = 0.5;
  double min_intercept = -0.6;
  /// Expected sign of corr(gpp, sif). Use -1 when gpp is signed as uptake < 0.
  double orientation = 1.0;
};

struct Validity {
  bool valid = false;
  unsigned reasons = kReasonNone;
  double anova_p = 1.0;
};

/// Linear-versus-cubic nested F test; p-value of the extra cubic terms.
double linearity_anova_p(std::span<const GppSifPair> pairs);

Validity apply_validity_criteria(std::span<const GppSifPair> pairs, const LinearFit& fit,
                                 const ValidityConfig& config = {});

/// Type-7 (linear interpolation) sample quantile; throws DomainError when empty.
double sample_quantile(std::vector<double> values, double p);

struct TukeyFences {
  double lower;
  double upper;
};
TukeyFences tukey_fences(std::span<const double> reference);

struct CellMonthLink {
  double slope = 0.0;
  double intercept = 0.0;
  double mse = 0.0;
  bool valid = false;
  unsigned reasons = kReasonDegenerate;
  double fence_lower = 0.0;
  double fence_upper = 0.0;
  std::size_t n = 0;
};

struct SifPairRecord {
  std::size_t cell;
  double time;  ///< days since epoch
  double gpp;
  double sif;
};

/// Per (cell, calendar month) link, pooled over years.
class SifLinkModel {
 public:
  explicit SifLinkModel(Calendar calendar) : calendar_(calendar) {}

  const Calendar& calendar() const { return calendar_; }
  /// Absent cell-months are reported as invalid (degenerate).
  const CellMonthLink& at(std::size_t cell, int month) const;
  void set(std::size_t cell, int month, CellMonthLink link);
  const std::map<std::pair<std::size_t, int>, CellMonthLink>& entries() const { return links_; }

  /// Bottom-up SIF field used as the prediction baseline.
  void set_bottom_up(SampledField field) { bottom_up_ = std::move(field); }
  const std::optional<SampledField>& bottom_up() const { return bottom_up_; }
  double bottom_up_at(std::size_t cell, double t) const;

 private:
  Calendar calendar_;
  std::map<std::pair<std::size_t, int>, CellMonthLink> links_;
  std::optional<SampledField> bottom_up_;
};

SifLinkModel build_sif_link(std::span<const SifPairRecord> records, const Calendar& calendar,
                            const ValidityConfig& config = {});

struct ScreenResult {
  std::vector<std::size_t> retained;
  std::vector<std::size_t> outliers;
  bool cell_month_valid = false;
};

/// Closed-interval Tukey screen. Invalid cell-months drop every observation.
ScreenResult tukey_screen(std::span<const double> observations, const SifLinkModel& model, std::size_t cell,
                          int month);

/// slope(s, month) * phi_gpp(s, t); empty when the cell-month is invalid.
BasisVector sensitivity_vector(const SifLinkModel& model, const FluxBasisSet& basis, CellId s, double t);

/// Baseline SIF plus the sensitivity correction; nullopt if the cell-month is invalid.
std::optional<double> predict_sif(const SifLinkModel& model, const FluxBasisSet& basis,
                                  const Eigen::Ref<const Eigen::VectorXd>& alpha_gpp, CellId s, double t);

struct SifRetrieval {
  double time;  ///< days since epoch
  int mode;
  std::size_t cell;
  double value;
  double variance;
};

struct SifBandAverage {
  double time;
  int mode;
  std::size_t cell;
  double value;
  double variance;  ///< mean retrieval variance divided by the count
  std::size_t count;
};

/// Groups by (mode, 10-second band); keeps bands with at least `min_count` retrievals.
/// The band cell is the cell of its first retrieval in time order.
std::vector<SifBandAverage> average_sif_bands(std::span<const SifRetrieval> retrievals, std::size_t min_count = 5,
                                              double band_seconds = 10.0);

std::vector<SifPairRecord> read_sif_pairs(const std::filesystem::path& path);
std::string format_sif_pairs(std::span<const SifPairRecord> records);
/// Columns cell,month,slope,intercept,mse,valid,reason,fence_lower,fence_upper,n.
std::string format_sif_link_report(const SifLinkModel& model);
SifLinkModel read_sif_link_report(const std::filesystem::path& path, const Calendar& calendar);

}  // namespace fluxinv
